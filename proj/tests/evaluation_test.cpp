#include "mvdesc/evaluation.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <vector>

using namespace mvdesc;

namespace {

// Rotation by angle about a unit axis (Rodrigues), used to fabricate motions.
Mat3 axis_angle(const Vec3& axis, double angle) {
  Mat3 k;
  k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.x() * 0 - axis.y(),
      axis.x(), 0;
  k(2, 0) = -axis.y();
  k(2, 1) = axis.x();
  return Mat3::Identity() + std::sin(angle) * k + (1 - std::cos(angle)) * k * k;
}

Mat3 random_rotation(Rng& rng) {
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return axis_angle(axis, rng.uniform(0.1, 3.0));
}

DescriptorRows random_rows(int n, int d, Rng& rng) {
  DescriptorRows rows(static_cast<std::size_t>(n));
  for (auto& r : rows) {
    r.resize(static_cast<std::size_t>(d));
    for (auto& v : r) v = rng.normal();
  }
  return rows;
}

// Independent quadratic-time mutual-NN scan.
MatchSet brute_mutual_nn(const DescriptorRows& p, const DescriptorRows& q) {
  const auto nearest = [](const std::vector<double>& x, const DescriptorRows& rows) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rows.size(); ++j) {
      double d = 0;
      for (std::size_t k = 0; k < x.size(); ++k) {
        d += (x[k] - rows[j][k]) * (x[k] - rows[j][k]);
      }
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(j);
      }
    }
    return best;
  };
  MatchSet out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const int j = nearest(p[i], q);
    if (nearest(q[static_cast<std::size_t>(j)], p) == static_cast<int>(i)) {
      out.pairs.emplace_back(static_cast<int>(i), j);
    }
  }
  return out;
}

double rotation_angle(const Mat3& r) {
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace

TEST_CASE("mutual nearest-neighbor matching") {
  SECTION("identical distinct descriptor sets match identically") {
    Rng rng(1);
    const DescriptorRows rows = random_rows(12, 6, rng);
    const MatchSet m = mutual_nn_matches(rows, rows);
    REQUIRE(m.pairs.size() == 12u);
    for (const auto& [p, q] : m.pairs) REQUIRE(p == q);
  }

  SECTION("hand-built three-by-three structure") {
    // p0<->q1 and p2<->q2 are mutual; q0 prefers p0 but p0 prefers q1
    const DescriptorRows p = {{0.0, 0.0}, {10.0, 10.0}, {5.0, 0.0}};
    const DescriptorRows q = {{0.0, 1.5}, {0.2, 0.0}, {5.0, 0.5}};
    const MatchSet m = mutual_nn_matches(p, q);
    REQUIRE(m.pairs == std::vector<std::pair<int, int>>{{0, 1}, {2, 2}});
  }

  SECTION("one-directional nearest neighbors are excluded") {
    // every q row is closest to p0, so only one of them can be mutual
    const DescriptorRows p = {{0.0}, {100.0}};
    const DescriptorRows q = {{1.0}, {2.0}, {3.0}};
    const MatchSet m = mutual_nn_matches(p, q);
    REQUIRE(m.pairs == std::vector<std::pair<int, int>>{{0, 0}});
  }

  SECTION("random sets agree with the quadratic oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      const DescriptorRows p = random_rows(30, 5, rng);
      const DescriptorRows q = random_rows(25, 5, rng);
      const MatchSet fast = mutual_nn_matches(p, q);
      const MatchSet slow = brute_mutual_nn(p, q);
      REQUIRE(fast.pairs == slow.pairs);
      // partial matching: no index repeats on either side
      std::set<int> seen_p, seen_q;
      for (const auto& [pi, qi] : fast.pairs) {
        REQUIRE(seen_p.insert(pi).second);
        REQUIRE(seen_q.insert(qi).second);
      }
    }
  }

  SECTION("swapping the sides transposes the matching") {
    Rng rng(9);
    const DescriptorRows p = random_rows(20, 4, rng);
    const DescriptorRows q = random_rows(18, 4, rng);
    const MatchSet ab = mutual_nn_matches(p, q);
    const MatchSet ba = mutual_nn_matches(q, p);
    std::vector<std::pair<int, int>> flipped;
    for (const auto& [a, b] : ba.pairs) flipped.emplace_back(b, a);
    std::sort(flipped.begin(), flipped.end());
    std::vector<std::pair<int, int>> fwd = ab.pairs;
    std::sort(fwd.begin(), fwd.end());
    REQUIRE(fwd == flipped);
  }

  SECTION("dimension mismatch and empty sets are errors") {
    REQUIRE_THROWS_WITH(mutual_nn_matches({{1.0, 2.0}}, {{1.0, 2.0, 3.0}}),
                        Catch::Matchers::ContainsSubstring("dimensions differ"));
    REQUIRE_THROWS_AS(mutual_nn_matches({}, {{1.0}}), std::invalid_argument);
  }
}

TEST_CASE("correctness metrics") {
  std::vector<Vec3> kp_p, kp_q;
  Rng rng(21);
  for (int i = 0; i < 8; ++i) {
    kp_p.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());
  }
  kp_q = kp_p;  // identity ground truth

  SECTION("all matches correct under identity") {
    MatchSet m;
    for (int i = 0; i < 7; ++i) m.pairs.emplace_back(i, i);
    REQUIRE(count_correct(m, kp_p, kp_q, Mat4::Identity()) == 7);
    REQUIRE(inlier_fraction(m, kp_p, kp_q, Mat4::Identity()) == 1.0);
  }

  SECTION("constructed half-correct set") {
    std::vector<Vec3> far_q = kp_q;
    for (int i = 4; i < 8; ++i) far_q[static_cast<std::size_t>(i)] += Vec3(5, 5, 5);
    MatchSet m;
    for (int i = 0; i < 8; ++i) m.pairs.emplace_back(i, i);
    REQUIRE(inlier_fraction(m, kp_p, far_q, Mat4::Identity()) == 0.5);
    REQUIRE(count_correct(m, kp_p, far_q, Mat4::Identity()) == 4);
  }

  SECTION("threshold is strict and defaults to a 10 cm radius") {
    std::vector<Vec3> p = {Vec3(0, 0, 0)};
    std::vector<Vec3> q_near = {Vec3(0.09, 0, 0)};
    std::vector<Vec3> q_far = {Vec3(0.11, 0, 0)};
    MatchSet m;
    m.pairs.emplace_back(0, 0);
    REQUIRE(count_correct(m, p, q_near, Mat4::Identity()) == 1);
    REQUIRE(count_correct(m, p, q_far, Mat4::Identity()) == 0);
  }

  SECTION("empty matches score zero") {
    REQUIRE(inlier_fraction(MatchSet{}, kp_p, kp_q, Mat4::Identity()) == 0.0);
    REQUIRE(count_correct(MatchSet{}, kp_p, kp_q, Mat4::Identity()) == 0);
  }

  SECTION("fraction times count identity") {
    std::vector<Vec3> far_q = kp_q;
    far_q[1] += Vec3(2, 0, 0);
    far_q[5] += Vec3(0, 3, 0);
    MatchSet m;
    for (int i = 0; i < 8; ++i) m.pairs.emplace_back(i, i);
    const double f = inlier_fraction(m, kp_p, far_q, Mat4::Identity());
    const int c = count_correct(m, kp_p, far_q, Mat4::Identity());
    REQUIRE(std::lround(f * static_cast<double>(m.pairs.size())) == c);
  }
}

TEST_CASE("recall over evaluated pairs") {
  std::vector<PairReport> reports(4);
  reports[0].inlier_frac = 0.9;
  reports[1].inlier_frac = 0.3;
  reports[2].inlier_frac = 0.04;
  reports[3].inlier_frac = 0.0;

  SECTION("counted by construction") {
    REQUIRE(recall(reports, 0.05) == 0.5);
    REQUIRE(recall(reports, 0.2) == 0.5);
    REQUIRE(recall(reports, 0.35) == 0.25);
  }

  SECTION("all pairs fully correct") {
    for (auto& r : reports) r.inlier_frac = 1.0;
    REQUIRE(recall(reports, 0.2) == 1.0);
  }

  SECTION("monotone non-increasing in the pass threshold") {
    Rng rng(33);
    std::vector<PairReport> rnd(20);
    for (auto& r : rnd) r.inlier_frac = rng.uniform();
    double prev = 1.0;
    for (double tau2 = 0.05; tau2 <= 0.2001; tau2 += 0.01) {
      const double v = recall(rnd, tau2);
      REQUIRE(v <= prev);
      prev = v;
    }
  }

  SECTION("no pairs is an error") {
    REQUIRE_THROWS_AS(recall({}, 0.05), std::invalid_argument);
  }
}

TEST_CASE("least-squares rigid alignment") {
  Rng rng(55);
  std::vector<Vec3> base;
  for (int i = 0; i < 20; ++i) {
    base.emplace_back(rng.normal(), rng.normal(), rng.normal());
  }

  SECTION("identical point sets give the identity") {
    const RigidTransform t = kabsch(base, base);
    REQUIRE((t.rotation - Mat3::Identity()).norm() < 1e-12);
    REQUIRE(t.translation.norm() < 1e-12);
  }

  SECTION("recovers random rigid motions") {
    for (int trial = 0; trial < 10; ++trial) {
      const Mat3 r = random_rotation(rng);
      const Vec3 tr(rng.normal(), rng.normal(), rng.normal());
      std::vector<Vec3> moved;
      for (const auto& p : base) moved.push_back(r.transpose() * (p - tr));
      const RigidTransform t = kabsch(base, moved);
      REQUIRE((t.rotation - r).norm() < 1e-9);
      REQUIRE((t.translation - tr).norm() < 1e-9);
      for (std::size_t i = 0; i < base.size(); ++i) {
        REQUIRE((t.apply(moved[i]) - base[i]).norm() < 1e-9);
      }
    }
  }

  SECTION("mirrored points still produce a proper rotation") {
    std::vector<Vec3> mirrored;
    for (const auto& p : base) mirrored.emplace_back(-p.x(), p.y(), p.z());
    const RigidTransform t = kabsch(base, mirrored);
    REQUIRE(t.rotation.determinant() == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("residual is invariant under a shared rigid pre-motion") {
    const Mat3 r = random_rotation(rng);
    const Vec3 tr(0.3, -1.1, 0.7);
    std::vector<Vec3> noisy;  // not exactly rigid: adds something to minimize
    for (const auto& p : base) {
      noisy.push_back(p + 0.05 * Vec3(rng.normal(), rng.normal(), rng.normal()));
    }
    const auto residual = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
      const RigidTransform t = kabsch(a, b);
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        acc += (a[i] - t.apply(b[i])).squaredNorm();
      }
      return acc;
    };
    std::vector<Vec3> a2, b2;
    for (const auto& p : base) a2.push_back(r * p + tr);
    for (const auto& p : noisy) b2.push_back(r * p + tr);
    REQUIRE(residual(a2, b2) == Catch::Approx(residual(base, noisy)).margin(1e-9));
  }

  SECTION("too few or collinear points are errors") {
    std::vector<Vec3> two = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
    REQUIRE_THROWS_AS(kabsch(two, two), std::invalid_argument);
    std::vector<Vec3> line = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0),
                              Vec3(3, 0, 0)};
    REQUIRE_THROWS_WITH(kabsch(line, line),
                        Catch::Matchers::ContainsSubstring("collinear"));
  }
}

TEST_CASE("robust registration") {
  Rng rng(77);
  const Mat3 r_gt = random_rotation(rng);
  const Vec3 t_gt(0.5, -0.3, 1.2);

  SECTION("noiseless correct matches recover the exact motion") {
    std::vector<Vec3> kp_p, kp_q;
    MatchSet m;
    for (int i = 0; i < 20; ++i) {
      const Vec3 p(rng.normal(), rng.normal(), rng.normal());
      kp_p.push_back(p);
      kp_q.push_back(r_gt.transpose() * (p - t_gt));
      m.pairs.emplace_back(i, i);
    }
    const RansacResult res = ransac_register(m, kp_p, kp_q, 500, 0.10, 13);
    REQUIRE(res.success);
    REQUIRE(res.inliers.size() == 20u);
    REQUIRE((res.transform.rotation - r_gt).norm() < 1e-9);
    REQUIRE((res.transform.translation - t_gt).norm() < 1e-9);
  }

  SECTION("thirty percent outliers over two hundred matches") {
    std::vector<Vec3> kp_p, kp_q;
    MatchSet m;
    for (int i = 0; i < 200; ++i) {
      const Vec3 p(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
      kp_p.push_back(p);
      if (i < 140) {
        kp_q.push_back(r_gt.transpose() * (p - t_gt));  // correct match
      } else {
        kp_q.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2),
                          rng.uniform(-2, 2));  // random clutter
      }
      m.pairs.emplace_back(i, i);
    }
    const RansacResult res =
        ransac_register(m, kp_p, kp_q, kRansacIterationsTau2High, 0.10, 31);
    REQUIRE(res.success);
    REQUIRE(res.inliers.size() >= 140u);
    REQUIRE(rotation_angle(res.transform.rotation * r_gt.transpose()) <
            1.0 * M_PI / 180.0);
    REQUIRE((res.transform.translation - t_gt).norm() < 0.01);
  }

  SECTION("deterministic per seed") {
    std::vector<Vec3> kp_p, kp_q;
    MatchSet m;
    for (int i = 0; i < 30; ++i) {
      const Vec3 p(rng.normal(), rng.normal(), rng.normal());
      kp_p.push_back(p);
      kp_q.push_back(i % 3 == 0 ? Vec3(rng.normal(), rng.normal(), rng.normal())
                                : r_gt.transpose() * (p - t_gt));
      m.pairs.emplace_back(i, i);
    }
    const RansacResult a = ransac_register(m, kp_p, kp_q, 300, 0.10, 99);
    const RansacResult b = ransac_register(m, kp_p, kp_q, 300, 0.10, 99);
    REQUIRE(a.success == b.success);
    REQUIRE(a.inliers == b.inliers);
    REQUIRE(a.transform.rotation == b.transform.rotation);
    REQUIRE(a.transform.translation == b.transform.translation);
  }

  SECTION("inconsistent matches fail recognizably") {
    // four pairs with mismatched pairwise distances: no rigid model can bring
    // three of them under a micron together
    std::vector<Vec3> kp_p, kp_q;
    MatchSet m;
    Rng noisy(5);
    for (int i = 0; i < 4; ++i) {
      kp_p.emplace_back(noisy.normal(), noisy.normal(), noisy.normal());
      kp_q.emplace_back(noisy.normal(), noisy.normal(), noisy.normal());
      m.pairs.emplace_back(i, i);
    }
    const RansacResult res = ransac_register(m, kp_p, kp_q, 200, 1e-9, 3);
    REQUIRE_FALSE(res.success);
    REQUIRE(res.inliers.empty());
    REQUIRE(res.transform.rotation == Mat3::Identity());
  }

  SECTION("iteration presets cover both threshold regimes") {
    REQUIRE(kRansacIterationsTau2Low == 55000);
    REQUIRE(kRansacIterationsTau2High == 860);
  }

  SECTION("fewer than three matches is an error") {
    MatchSet m;
    m.pairs = {{0, 0}, {1, 1}};
    std::vector<Vec3> kp = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
    REQUIRE_THROWS_AS(ransac_register(m, kp, kp, 10, 0.1, 0), std::invalid_argument);
  }
}

TEST_CASE("descriptor colorization") {
  SECTION("identical descriptors become uniform mid-gray") {
    DescriptorRows rows(5, std::vector<double>{0.3, 0.7, -0.2});
    const auto colors = pca_colorize(rows);
    REQUIRE(colors.size() == 5u);
    for (const auto& c : colors) {
      REQUIRE(c[0] == 0.5);
      REQUIRE(c[1] == 0.5);
      REQUIRE(c[2] == 0.5);
    }
  }

  SECTION("channels span the unit interval for varied input") {
    Rng rng(41);
    const DescriptorRows rows = random_rows(50, 8, rng);
    const auto colors = pca_colorize(rows);
    for (int c = 0; c < 3; ++c) {
      double lo = 1.0, hi = 0.0;
      for (const auto& col : colors) {
        lo = std::min(lo, col[static_cast<std::size_t>(c)]);
        hi = std::max(hi, col[static_cast<std::size_t>(c)]);
      }
      REQUIRE(lo == Catch::Approx(0.0).margin(1e-12));
      REQUIRE(hi == Catch::Approx(1.0).margin(1e-12));
    }
  }

  SECTION("whitened three-dimensional input maps to itself up to channel affine") {
    // columns are made exactly orthogonal, zero-mean, and of distinct norms,
    // so the sample principal axes are the coordinate axes themselves and
    // each color channel must be affine in exactly one input column
    Rng rng(43);
    const int n = 60;
    std::vector<std::vector<double>> cols(3, std::vector<double>(n));
    for (auto& col : cols) {
      double mean = 0.0;
      for (auto& v : col) {
        v = rng.normal();
        mean += v;
      }
      for (auto& v : col) v -= mean / n;
    }
    const auto dot = [&](int a, int b) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += cols[a][i] * cols[b][i];
      return acc;
    };
    for (int c = 1; c < 3; ++c) {  // Gram-Schmidt against earlier columns
      for (int prev = 0; prev < c; ++prev) {
        const double coef = dot(c, prev) / dot(prev, prev);
        for (int i = 0; i < n; ++i) cols[c][i] -= coef * cols[prev][i];
      }
    }
    const double scales[3] = {5.0, 2.0, 0.5};
    for (int c = 0; c < 3; ++c) {
      const double norm = std::sqrt(dot(c, c));
      for (auto& v : cols[c]) v *= scales[c] / norm;
    }
    DescriptorRows rows(n, std::vector<double>(3));
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) rows[static_cast<std::size_t>(i)][c] = cols[c][i];
    }
    const auto colors = pca_colorize(rows);
    for (int c = 0; c < 3; ++c) {
      // Pearson correlation of channel c against input column c
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      const auto n = static_cast<double>(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const double x = rows[i][static_cast<std::size_t>(c)];
        const double y = colors[i][static_cast<std::size_t>(c)];
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
      }
      const double corr = (n * sxy - sx * sy) /
                          std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
      REQUIRE(std::fabs(corr) == Catch::Approx(1.0).margin(1e-9));
    }
  }

  SECTION("fewer than two descriptors is an error") {
    REQUIRE_THROWS_AS(pca_colorize({{1.0, 2.0}}), std::invalid_argument);
  }
}

TEST_CASE("evaluation report file") {
  std::vector<PairReport> reports(3);
  reports[0] = {"cloud_000-cloud_001", 250, 100, 0.4};
  reports[1] = {"cloud_000-cloud_002", 250, 10, 0.04};
  reports[2] = {"cloud_001-cloud_002", 200, 30, 0.15};
  const std::string path = "eval_report_test.csv";
  write_evaluation_csv(reports, 0.05, path);

  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "pair_id,n_matches,n_correct,inlier_fraction,passed@tau2");
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "cloud_000-cloud_001,250,100,0.40000000000000002,1");
  REQUIRE(std::getline(in, line));
  REQUIRE(line.substr(line.size() - 2) == ",0");  // 0.04 misses tau2=0.05
  REQUIRE(std::getline(in, line));
  REQUIRE(line.substr(line.size() - 2) == ",1");
  REQUIRE(std::getline(in, line));
  REQUIRE(line.find("# summary: recall=") == 0u);
  REQUIRE(line.find("mean_correct=") != std::string::npos);
  in.close();
  std::remove(path.c_str());
}
