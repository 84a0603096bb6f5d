#pragma once

// Descriptor matching and registration metrics: mutual nearest-neighbor
// matching, inlier statistics and recall, rigid alignment (least-squares and
// RANSAC), and a PCA-based descriptor colorization for visual inspection.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"

namespace mvdesc {

// Descriptor sets are dense row-major matrices: one row per keypoint.
using DescriptorRows = std::vector<std::vector<double>>;

// Putative correspondences: (index in P, index in Q). Mutual nearest-neighbor
// matching is a partial matching, so each index appears at most once per side.
struct MatchSet {
  std::vector<std::pair<int, int>> pairs;
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = rotation;
    m.block<3, 1>(0, 3) = translation;
    return m;
  }
};

inline void validate(const RigidTransform& t) {
  check((t.rotation.transpose() * t.rotation - Mat3::Identity()).norm() < 1e-9,
        "rigid transform: rotation is not orthonormal");
  check(t.rotation.determinant() > 0.0, "rigid transform: rotation is a reflection");
}

namespace detail {

inline void check_rows(const DescriptorRows& rows, const char* who) {
  check(!rows.empty(), std::string(who) + ": empty descriptor set");
  for (const auto& r : rows) {
    check(r.size() == rows.front().size(),
          std::string(who) + ": ragged descriptor rows");
  }
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Index of the nearest row of `rows` to `query`; ties go to the lowest index.
inline int nearest_row(const std::vector<double>& query, const DescriptorRows& rows) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const double d = sq_dist(query, rows[j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace detail

// Exact (brute-force) mutual nearest-neighbor matching in descriptor space:
// (p,q) is kept iff q is p's nearest neighbor in Q and p is q's nearest
// neighbor in P.
inline MatchSet mutual_nn_matches(const DescriptorRows& descs_p,
                                  const DescriptorRows& descs_q) {
  detail::check_rows(descs_p, "mutual_nn_matches");
  detail::check_rows(descs_q, "mutual_nn_matches");
  check(descs_p.front().size() == descs_q.front().size(),
        "mutual_nn_matches: descriptor dimensions differ (" +
            std::to_string(descs_p.front().size()) + " vs " +
            std::to_string(descs_q.front().size()) + ")");
  std::vector<int> nn_in_q(descs_p.size());
  std::vector<int> nn_in_p(descs_q.size());
  parallel_for(descs_p.size(), [&](std::size_t i) {
    nn_in_q[i] = detail::nearest_row(descs_p[i], descs_q);
  });
  parallel_for(descs_q.size(), [&](std::size_t j) {
    nn_in_p[j] = detail::nearest_row(descs_q[j], descs_p);
  });
  MatchSet out;
  for (std::size_t i = 0; i < descs_p.size(); ++i) {
    const int j = nn_in_q[i];
    if (nn_in_p[static_cast<std::size_t>(j)] == static_cast<int>(i)) {
      out.pairs.emplace_back(static_cast<int>(i), j);
    }
  }
  return out;
}

// Number of matches whose endpoints land within tau1 of each other once the
// ground-truth alignment carries the Q keypoint into P's frame.
inline int count_correct(const MatchSet& matches, const std::vector<Vec3>& keypoints_p,
                         const std::vector<Vec3>& keypoints_q, const Mat4& transform_gt,
                         double tau1 = 0.10) {
  check(tau1 > 0.0, "count_correct: tau1 must be positive");
  int correct = 0;
  for (const auto& [pi, qi] : matches.pairs) {
    check(pi >= 0 && static_cast<std::size_t>(pi) < keypoints_p.size(),
          "count_correct: match index out of range in P");
    check(qi >= 0 && static_cast<std::size_t>(qi) < keypoints_q.size(),
          "count_correct: match index out of range in Q");
    const Vec3 aligned =
        transform_point(transform_gt, keypoints_q[static_cast<std::size_t>(qi)]);
    if ((keypoints_p[static_cast<std::size_t>(pi)] - aligned).norm() < tau1) {
      ++correct;
    }
  }
  return correct;
}

// Fraction of matches that are correct under the ground-truth alignment; an
// empty match set scores 0.
inline double inlier_fraction(const MatchSet& matches,
                              const std::vector<Vec3>& keypoints_p,
                              const std::vector<Vec3>& keypoints_q,
                              const Mat4& transform_gt, double tau1 = 0.10) {
  if (matches.pairs.empty()) return 0.0;
  return static_cast<double>(
             count_correct(matches, keypoints_p, keypoints_q, transform_gt, tau1)) /
         static_cast<double>(matches.pairs.size());
}

// One evaluated fragment pair, as written to the report.
struct PairReport {
  std::string pair_id;
  int n_matches = 0;
  int n_correct = 0;
  double inlier_frac = 0.0;
};

// Fraction of evaluated pairs whose inlier fraction clears tau2.
inline double recall(const std::vector<PairReport>& reports, double tau2) {
  check(!reports.empty(), "recall: no evaluated pairs");
  int passed = 0;
  for (const auto& r : reports) {
    if (r.inlier_frac > tau2) ++passed;
  }
  return static_cast<double>(passed) / static_cast<double>(reports.size());
}

// Least-squares rigid transform mapping points_b onto points_a (Kabsch with
// the usual reflection guard). Requires three or more non-collinear pairs.
inline RigidTransform kabsch(const std::vector<Vec3>& points_a,
                             const std::vector<Vec3>& points_b) {
  check(points_a.size() == points_b.size(), "kabsch: point counts differ");
  const std::size_t m = points_a.size();
  check(m >= 3, "kabsch: need at least 3 point pairs");
  Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
  for (std::size_t i = 0; i < m; ++i) {
    ca += points_a[i];
    cb += points_b[i];
  }
  ca /= static_cast<double>(m);
  cb /= static_cast<double>(m);
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < m; ++i) {
    h += (points_b[i] - cb) * (points_a[i] - ca).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = svd.singularValues();
  // collinear inputs leave the rotation about the line unconstrained
  check(s(1) > 1e-12 * std::max(1.0, s(0)), "kabsch: degenerate (collinear) points");
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if ((v * u.transpose()).determinant() < 0.0) {
    v.col(2) *= -1.0;
  }
  RigidTransform out;
  out.rotation = v * u.transpose();
  out.translation = ca - out.rotation * cb;
  validate(out);
  return out;
}

// Iteration presets matching the two ends of the recall threshold range: the
// strict threshold gets the long search, the loose one the short search.
inline constexpr int kRansacIterationsTau2Low = 55000;
inline constexpr int kRansacIterationsTau2High = 860;

struct RansacResult {
  bool success = false;
  RigidTransform transform;
  std::vector<int> inliers;  // indices into the match list
};

// Classic 3-point RANSAC over putative matches: sample, fit, count inliers,
// keep the best model, refit it on its inlier set. Deterministic per seed.
// Fails (success = false) when no sampled model reaches 3 inliers.
inline RansacResult ransac_register(const MatchSet& matches,
                                    const std::vector<Vec3>& keypoints_p,
                                    const std::vector<Vec3>& keypoints_q,
                                    int iterations = kRansacIterationsTau2Low,
                                    double inlier_threshold = 0.10,
                                    std::uint64_t seed = 0) {
  const int n = static_cast<int>(matches.pairs.size());
  check(n >= 3, "ransac_register: need at least 3 matches");
  check(iterations >= 1, "ransac_register: iterations must be positive");
  check(inlier_threshold > 0.0, "ransac_register: threshold must be positive");

  const auto collect_inliers = [&](const RigidTransform& t) {
    std::vector<int> inl;
    for (int i = 0; i < n; ++i) {
      const auto& [pi, qi] = matches.pairs[static_cast<std::size_t>(i)];
      const Vec3 moved = t.apply(keypoints_q[static_cast<std::size_t>(qi)]);
      if ((keypoints_p[static_cast<std::size_t>(pi)] - moved).norm() <
          inlier_threshold) {
        inl.push_back(i);
      }
    }
    return inl;
  };

  Rng rng(seed);
  std::vector<int> best_inliers;
  RigidTransform best;
  for (int it = 0; it < iterations; ++it) {
    int a = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    int b = a, c = a;
    while (b == a) b = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    while (c == a || c == b) {
      c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    }
    std::vector<Vec3> pa, pb;
    for (int idx : {a, b, c}) {
      const auto& [pi, qi] = matches.pairs[static_cast<std::size_t>(idx)];
      pa.push_back(keypoints_p[static_cast<std::size_t>(pi)]);
      pb.push_back(keypoints_q[static_cast<std::size_t>(qi)]);
    }
    // skip degenerate (near-collinear) minimal samples
    const Vec3 e1 = pb[1] - pb[0], e2 = pb[2] - pb[0];
    if (e1.cross(e2).norm() < 1e-12) continue;
    const Vec3 f1 = pa[1] - pa[0], f2 = pa[2] - pa[0];
    if (f1.cross(f2).norm() < 1e-12) continue;
    const RigidTransform model = kabsch(pa, pb);
    std::vector<int> inl = collect_inliers(model);
    if (inl.size() > best_inliers.size()) {
      best_inliers = std::move(inl);
      best = model;
    }
  }

  RansacResult out;
  if (best_inliers.size() < 3) return out;
  // refit on the winning consensus set and report its inliers
  std::vector<Vec3> pa, pb;
  for (int idx : best_inliers) {
    const auto& [pi, qi] = matches.pairs[static_cast<std::size_t>(idx)];
    pa.push_back(keypoints_p[static_cast<std::size_t>(pi)]);
    pb.push_back(keypoints_q[static_cast<std::size_t>(qi)]);
  }
  out.success = true;
  out.transform = kabsch(pa, pb);
  out.inliers = collect_inliers(out.transform);
  return out;
}

// Projects descriptors onto their top three principal components and min-max
// scales each channel to [0,1]; degenerate channels map to 0.5.
inline std::vector<std::array<double, 3>> pca_colorize(const DescriptorRows& descs) {
  detail::check_rows(descs, "pca_colorize");
  const std::size_t n = descs.size();
  check(n >= 2, "pca_colorize: need at least 2 descriptors");
  const std::size_t d = descs.front().size();

  std::vector<double> mean(d, 0.0);
  for (const auto& row : descs) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& v : mean) v /= static_cast<double>(n);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d),
                                              static_cast<Eigen::Index>(d));
  for (const auto& row : descs) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(d));
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(j)) = row[j] - mean[j];
    cov.noalias() += x * x.transpose();
  }
  cov /= static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  check(eig.info() == Eigen::Success, "pca_colorize: eigen decomposition failed");

  const int n_comp = static_cast<int>(std::min<std::size_t>(3, d));
  std::vector<std::array<double, 3>> colors(n, {0.5, 0.5, 0.5});
  for (int c = 0; c < n_comp; ++c) {
    // eigenvalues ascend; take from the top. Fix the sign so the largest
    // component is positive, keeping colors stable across runs.
    Eigen::VectorXd pc = eig.eigenvectors().col(static_cast<Eigen::Index>(d) - 1 - c);
    Eigen::Index peak = 0;
    pc.cwiseAbs().maxCoeff(&peak);
    if (pc(peak) < 0.0) pc = -pc;

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    std::vector<double> proj(n);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        acc += (descs[i][j] - mean[j]) * pc(static_cast<Eigen::Index>(j));
      }
      proj[i] = acc;
      lo = std::min(lo, acc);
      hi = std::max(hi, acc);
    }
    for (std::size_t i = 0; i < n; ++i) {
      colors[i][static_cast<std::size_t>(c)] =
          (hi - lo < 1e-12) ? 0.5 : (proj[i] - lo) / (hi - lo);
    }
  }
  return colors;
}

// Per-pair evaluation report plus a trailing summary comment line.
inline void write_evaluation_csv(const std::vector<PairReport>& reports, double tau2,
                                 const std::string& path) {
  check(!reports.empty(), "write_evaluation_csv: no evaluated pairs");
  std::ofstream out(path);
  check(out.good(), "write_evaluation_csv: cannot open " + path);
  out << "pair_id,n_matches,n_correct,inlier_fraction,passed@tau2\n";
  out.precision(17);
  double mean_correct = 0.0;
  for (const auto& r : reports) {
    out << r.pair_id << ',' << r.n_matches << ',' << r.n_correct << ','
        << r.inlier_frac << ',' << (r.inlier_frac > tau2 ? 1 : 0) << '\n';
    mean_correct += r.n_correct;
  }
  mean_correct /= static_cast<double>(reports.size());
  out << "# summary: recall=" << recall(reports, tau2)
      << " mean_correct=" << mean_correct << '\n';
  check(out.good(), "write_evaluation_csv: write failed for " + path);
}

}  // namespace mvdesc
