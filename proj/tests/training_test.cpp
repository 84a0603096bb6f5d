#include "mvdesc/training.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "mvdesc/tensor.hpp"
#include "test_support.hpp"

using namespace mvdesc;
using testsup::max_fd_error;

namespace {

// Exhaustive evaluation of the batch-hard objective, independent of the
// library implementation.
double brute_force_batch_hard(const std::vector<std::vector<double>>& p,
                              const std::vector<std::vector<double>>& q,
                              double margin) {
  const auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(acc);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double hardest = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < q.size(); ++j) {
      if (j != i) hardest = std::min(hardest, dist(p[i], q[j]));
    }
    total += std::max(0.0, margin + dist(p[i], q[i]) - hardest);
  }
  return total / static_cast<double>(p.size());
}

std::vector<Tensor<double>> to_tensors(const std::vector<std::vector<double>>& rows,
                                       bool requires_grad = false) {
  std::vector<Tensor<double>> out;
  for (const auto& row : rows) {
    Tensor<double> t({static_cast<int>(row.size())}, 0.0, requires_grad);
    t.data() = row;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<double> random_unit(int dim, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Rigid pair: q is p carried into another frame; transform_gt brings it back.
FragmentPair make_micro_pair() {
  FragmentPair pair;
  for (int i = -5; i <= 5; ++i) {
    for (int j = -5; j <= 5; ++j) {
      pair.cloud_p.points.emplace_back(0.05 * i, 0.05 * j,
                                       0.02 * std::sin(0.9 * i + 0.4 * j));
      pair.cloud_p.normals.emplace_back(0, 0, 1);
      pair.cloud_p.radii.push_back(0.02);
    }
  }
  const double a = 0.3;
  Eigen::Matrix3d r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  const Vec3 t(0.4, -0.2, 0.1);
  // q = r^T (p - t)  so that  p = r q + t
  pair.cloud_q = pair.cloud_p;
  for (std::size_t i = 0; i < pair.cloud_q.size(); ++i) {
    pair.cloud_q.points[i] = r.transpose() * (pair.cloud_p.points[i] - t);
    pair.cloud_q.normals[i] = r.transpose() * pair.cloud_p.normals[i];
  }
  pair.transform_gt = Mat4::Identity();
  pair.transform_gt.block<3, 3>(0, 0) = r;
  pair.transform_gt.block<3, 1>(0, 3) = t;
  pair.overlap = 1.0;
  return pair;
}

}  // namespace

TEST_CASE("match batch sampling") {
  SECTION("identical clouds under identity pair each point with itself") {
    FragmentPair pair;
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
      pair.cloud_p.points.emplace_back(rng.uniform(), rng.uniform(), rng.uniform());
    }
    pair.cloud_q = pair.cloud_p;
    pair.overlap = 1.0;
    const MatchBatch batch = sample_match_batch(pair, 20, 1e-6, 11);
    REQUIRE(batch.pairs.size() == 20u);
    for (const auto& [pi, qi] : batch.pairs) REQUIRE(pi == qi);
  }

  SECTION("sampled pairs always satisfy the distance bound") {
    const FragmentPair pair = make_micro_pair();
    const MatchBatch batch = sample_match_batch(pair, 24, 0.01, 5);
    REQUIRE(batch.pairs.size() == 24u);
    for (const auto& [pi, qi] : batch.pairs) {
      const Vec3 aligned = transform_point(
          pair.transform_gt, pair.cloud_q.points[static_cast<std::size_t>(qi)]);
      const double d =
          (pair.cloud_p.points[static_cast<std::size_t>(pi)] - aligned).norm();
      REQUIRE(d < 0.01);
    }
  }

  SECTION("deterministic per seed") {
    const FragmentPair pair = make_micro_pair();
    const MatchBatch a = sample_match_batch(pair, 10, 0.01, 42);
    const MatchBatch b = sample_match_batch(pair, 10, 0.01, 42);
    const MatchBatch c = sample_match_batch(pair, 10, 0.01, 43);
    REQUIRE(a.pairs == b.pairs);
    REQUIRE(a.pairs != c.pairs);
  }

  SECTION("too few correspondences reports the available count") {
    FragmentPair pair;
    pair.cloud_p.points = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
    pair.cloud_q = pair.cloud_p;
    pair.overlap = 0.5;
    REQUIRE_THROWS_WITH(sample_match_batch(pair, 5, 1e-6, 0),
                        Catch::Matchers::ContainsSubstring("only 2"));
  }

  SECTION("overlap below the training floor is rejected") {
    FragmentPair pair;
    pair.cloud_p.points = {Vec3(0, 0, 0)};
    pair.cloud_q = pair.cloud_p;
    pair.overlap = 0.2;
    REQUIRE_THROWS_WITH(sample_match_batch(pair, 1, 1e-6, 0),
                        Catch::Matchers::ContainsSubstring("overlap"));
  }
}

TEST_CASE("batch-hard triplet loss") {
  SECTION("perfect positives with distant negatives give zero loss") {
    // orthonormal descriptor pairs: positive distance 0, negatives sqrt(2)
    std::vector<std::vector<double>> rows = {
        {1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
    auto p = to_tensors(rows);
    auto q = to_tensors(rows);
    const Tensor<double> loss =
        batch_hard_triplet_loss<double>(nullptr, p, q, 1.0);
    REQUIRE(loss.item() == 0.0);
  }

  SECTION("three hand-placed descriptors match exhaustive enumeration") {
    std::vector<std::vector<double>> p_rows = {
        {1.0, 0.0}, {0.0, 1.0}, {std::sqrt(0.5), std::sqrt(0.5)}};
    std::vector<std::vector<double>> q_rows = {
        {0.8, 0.6}, {-0.6, 0.8}, {std::sqrt(0.5), -std::sqrt(0.5)}};
    auto p = to_tensors(p_rows);
    auto q = to_tensors(q_rows);
    const Tensor<double> loss =
        batch_hard_triplet_loss<double>(nullptr, p, q, 1.0);
    REQUIRE(loss.item() ==
            Catch::Approx(brute_force_batch_hard(p_rows, q_rows, 1.0)).margin(1e-9));
  }

  SECTION("fifty random batches match the brute-force oracle") {
    Rng rng(404);
    for (int trial = 0; trial < 50; ++trial) {
      const int b = 2 + static_cast<int>(rng.uniform_int(7));  // up to 8
      const int dim = 2 + static_cast<int>(rng.uniform_int(6));
      std::vector<std::vector<double>> p_rows, q_rows;
      for (int i = 0; i < b; ++i) {
        p_rows.push_back(random_unit(dim, rng));
        q_rows.push_back(random_unit(dim, rng));
      }
      auto p = to_tensors(p_rows);
      auto q = to_tensors(q_rows);
      const double margin = rng.uniform(0.2, 1.5);
      const Tensor<double> loss =
          batch_hard_triplet_loss<double>(nullptr, p, q, margin);
      const double expected = brute_force_batch_hard(p_rows, q_rows, margin);
      REQUIRE(loss.item() == Catch::Approx(expected).margin(1e-9));
      REQUIRE(loss.item() >= 0.0);
      if (loss.item() == 0.0) {
        // zero iff every anchor's hardest negative clears the margin
        for (std::size_t i = 0; i < p_rows.size(); ++i) {
          double pos = 0.0, hardest = std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < p_rows[i].size(); ++k) {
            pos += (p_rows[i][k] - q_rows[i][k]) * (p_rows[i][k] - q_rows[i][k]);
          }
          for (std::size_t j = 0; j < q_rows.size(); ++j) {
            if (j == i) continue;
            double d = 0.0;
            for (std::size_t k = 0; k < p_rows[i].size(); ++k) {
              d += (p_rows[i][k] - q_rows[j][k]) * (p_rows[i][k] - q_rows[j][k]);
            }
            hardest = std::min(hardest, d);
          }
          REQUIRE(std::sqrt(hardest) - std::sqrt(pos) >= margin);
        }
      }
    }
  }

  SECTION("fewer than two pairs is an error") {
    auto p = to_tensors({{1.0, 0.0}});
    auto q = to_tensors({{0.0, 1.0}});
    REQUIRE_THROWS_AS(batch_hard_triplet_loss<double>(nullptr, p, q, 1.0),
                      std::invalid_argument);
  }

  SECTION("gradients match finite differences on an active batch") {
    // positives near, hardest negatives ~unit distance: hinge active with a
    // comfortable gap so the finite-difference probes stay on one branch
    Rng rng(17);
    std::vector<std::vector<double>> p_rows, q_rows;
    for (int i = 0; i < 4; ++i) {
      auto base = random_unit(6, rng);
      p_rows.push_back(base);
      for (auto& x : base) x += 0.15 * rng.normal();
      q_rows.push_back(base);
    }
    auto p = to_tensors(p_rows, true);
    auto q = to_tensors(q_rows, true);
    Tape<double> tape;
    Tensor<double> loss = batch_hard_triplet_loss(&tape, p, q, 1.0);
    REQUIRE(loss.item() > 0.0);
    backward(tape, loss);
    const auto eval = [&] {
      return batch_hard_triplet_loss<double>(nullptr, p, q, 1.0).item();
    };
    for (auto& t : p) {
      REQUIRE(max_fd_error(eval, t, t.grad()) < 1e-4);
    }
    for (auto& t : q) {
      REQUIRE(max_fd_error(eval, t, t.grad()) < 1e-4);
    }
  }
}

TEST_CASE("viewpoint range penalty") {
  SECTION("zero inside the feasible box") {
    auto vs = ViewpointSet<double>::random_init(5, 2024);
    const Tensor<double> loss = viewpoint_range_loss<double>(nullptr, vs);
    REQUIRE(loss.item() == 0.0);
  }

  SECTION("hand-derived values for out-of-range distance and azimuth") {
    auto vs = ViewpointSet<double>::orbited_init(1);
    vs.rho.data()[0] = 1.2;
    REQUIRE(viewpoint_range_loss<double>(nullptr, vs).item() ==
            Catch::Approx(0.2).margin(1e-12));
    vs.rho.data()[0] = 0.5;
    vs.theta.data()[0] = -0.1;
    REQUIRE(viewpoint_range_loss<double>(nullptr, vs).item() ==
            Catch::Approx(0.1).margin(1e-12));
  }

  SECTION("subgradient points back toward the box") {
    auto vs = ViewpointSet<double>::orbited_init(2);
    vs.rho.data()[0] = 0.5;     // clearly interior (0.3 sits on the edge)
    vs.theta.data()[0] = -0.1;  // below range: gradient must be negative
    vs.rho.data()[1] = 1.2;     // above range: gradient must be positive
    Tape<double> tape;
    Tensor<double> loss = viewpoint_range_loss(&tape, vs);
    backward(tape, loss);
    REQUIRE(vs.theta.grad()[0] < 0.0);
    REQUIRE(vs.theta.grad()[1] == 0.0);
    REQUIRE(vs.rho.grad()[1] > 0.0);
    REQUIRE(vs.rho.grad()[0] == 0.0);
    REQUIRE(vs.phi.grad()[0] == 0.0);

    const auto eval = [&] {
      return viewpoint_range_loss<double>(nullptr, vs).item();
    };
    REQUIRE(max_fd_error(eval, vs.theta, vs.theta.grad()) < 1e-4);
    REQUIRE(max_fd_error(eval, vs.rho, vs.rho.grad()) < 1e-4);
  }
}

TEST_CASE("loss combination") {
  Tensor<double> bh({1}, 0.5);
  Tensor<double> ov({1}, 0.2);
  REQUIRE(total_loss<double>(nullptr, bh, ov, 1.0).item() ==
          Catch::Approx(0.7).margin(1e-15));
  REQUIRE(total_loss<double>(nullptr, bh, ov, 0.0).item() == 0.5);
  Tensor<double> zero({1}, 0.0);
  REQUIRE(total_loss<double>(nullptr, bh, zero, 1.0).item() == 0.5);
}

TEST_CASE("adam optimizer") {
  SECTION("zero gradient and zero learning rate leave parameters in place") {
    std::vector<Tensor<double>> params = {Tensor<double>({3}, 1.5, true)};
    params[0].grad();  // allocate zeros
    AdamState<double> state;
    adam_step(params, state);
    for (double v : params[0].data()) REQUIRE(v == 1.5);

    params[0].grad()[0] = 0.7;
    state.lr = 0.0;
    adam_step(params, state);
    for (double v : params[0].data()) REQUIRE(v == 1.5);
  }

  SECTION("first step has the closed-form magnitude") {
    std::vector<Tensor<double>> params = {Tensor<double>({1}, 0.5, true)};
    params[0].grad()[0] = 0.3;
    AdamState<double> state;
    adam_step(params, state);
    const double expected = 0.5 - 1e-3 * 0.3 / (0.3 + 1e-8);
    REQUIRE(params[0].data()[0] == Catch::Approx(expected).margin(1e-15));
    // the update magnitude is within a hair of the learning rate itself
    REQUIRE(std::fabs(0.5 - params[0].data()[0]) ==
            Catch::Approx(1e-3).epsilon(1e-6));
  }

  SECTION("several steps track an independent reference implementation") {
    Rng rng(31);
    std::vector<Tensor<double>> params = {Tensor<double>({4}, 0.0, true)};
    for (auto& v : params[0].data()) v = rng.normal();
    std::vector<double> ref = params[0].data();
    std::vector<double> m(4, 0.0), v2(4, 0.0);
    AdamState<double> state;
    state.lr = 0.01;
    for (int step = 1; step <= 5; ++step) {
      std::vector<double> g(4);
      for (auto& x : g) x = rng.normal();
      params[0].grad() = g;
      adam_step(params, state);
      for (int i = 0; i < 4; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v2[i] = 0.999 * v2[i] + 0.001 * g[i] * g[i];
        const double mhat = m[i] / (1.0 - std::pow(0.9, step));
        const double vhat = v2[i] / (1.0 - std::pow(0.999, step));
        ref[i] -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
        REQUIRE(params[0].data()[i] == Catch::Approx(ref[i]).margin(1e-12));
      }
    }
  }
}

TEST_CASE("training configuration file") {
  const std::string path = "train_config_test.cfg";

  SECTION("keys, comments, and whitespace parse") {
    std::ofstream out(path);
    out << "# desk-scale run\n"
        << "epochs = 5\n"
        << "batch_size=8\n"
        << "lr = 0.002   # inline comment\n"
        << "fusion_mode = avg\n"
        << "viewpoint_init = orbited\n"
        << "n_views = 4\n"
        << "descriptor_dim = 16\n"
        << "seed = 99\n"
        << "precision = 64\n"
        << "\n";
    out.close();
    const TrainConfig cfg = TrainConfig::from_file(path);
    REQUIRE(cfg.epochs == 5);
    REQUIRE(cfg.batch_size == 8);
    REQUIRE(cfg.lr == Catch::Approx(0.002));
    REQUIRE(cfg.fusion_mode == FusionMode::kAvg);
    REQUIRE(cfg.viewpoint_init == "orbited");
    REQUIRE(cfg.n_views == 4);
    REQUIRE(cfg.descriptor_dim == 16);
    REQUIRE(cfg.seed == 99u);
    REQUIRE(cfg.precision == 64);
    // untouched keys keep their defaults
    REQUIRE(cfg.margin == 1.0);
    REQUIRE(cfg.lambda == 1.0);
    REQUIRE(cfg.decay_period == 4);
    std::remove(path.c_str());
  }

  SECTION("unknown keys and invalid values are rejected") {
    {
      std::ofstream out(path);
      out << "epoochs = 5\n";
    }
    REQUIRE_THROWS_WITH(TrainConfig::from_file(path),
                        Catch::Matchers::ContainsSubstring("unknown key 'epoochs'"));
    {
      std::ofstream out(path);
      out << "precision = 48\n";
    }
    REQUIRE_THROWS_WITH(TrainConfig::from_file(path),
                        Catch::Matchers::ContainsSubstring("precision"));
    {
      std::ofstream out(path);
      out << "batch_size = 1\n";
    }
    REQUIRE_THROWS_AS(TrainConfig::from_file(path), std::invalid_argument);
    std::remove(path.c_str());
    REQUIRE_THROWS_AS(TrainConfig::from_file("no_such_config.cfg"),
                      std::invalid_argument);
  }
}

TEST_CASE("loss history file") {
  std::vector<LossRecord> history = {{0, 0, 0.51234567890123456, 0.0, 0.51234567890123456},
                                     {1, 3, 0.25, 0.125, 0.375}};
  const std::string path = "loss_history_test.csv";
  write_loss_csv(history, path);
  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "epoch,batch,bh_loss,ov_loss,total");
  REQUIRE(std::getline(in, line));
  // values round-trip exactly at max precision
  double bh = 0.0, ov = 0.0, total = 0.0;
  int epoch = -1, batch = -1;
  REQUIRE(std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf", &epoch, &batch, &bh, &ov,
                      &total) == 5);
  REQUIRE(epoch == 0);
  REQUIRE(batch == 0);
  REQUIRE(bh == 0.51234567890123456);
  REQUIRE(std::getline(in, line));
  REQUIRE_FALSE(std::getline(in, line));
  in.close();
  std::remove(path.c_str());
}

TEST_CASE("joint training loop") {
  const FragmentPair pair = make_micro_pair();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.n_views = 1;
  cfg.descriptor_dim = 8;
  cfg.fusion_mode = FusionMode::kSoft;
  cfg.viewpoint_init = "random";
  cfg.seed = 7;
  cfg.sigma = 1e-3;
  cfg.gamma = 0.05;
  cfg.crop_radius = 0.5;
  cfg.precision = 64;

  SECTION("runs, records history, and moves viewpoints through the renderer") {
    const auto init_vs = ViewpointSet<double>::random_init(
        cfg.n_views, derive_seed(cfg.seed, 102, 0, 0));
    const TrainResult<double> result = train<double>({pair}, cfg);
    REQUIRE(result.history.size() == 2u);
    for (const auto& r : result.history) {
      REQUIRE(std::isfinite(r.total));
      REQUIRE(r.total == Catch::Approx(r.bh + r.ov).margin(1e-12));
      REQUIRE(r.bh >= 0.0);
      REQUIRE(r.ov >= 0.0);
    }
    // gradient flow through rendering: some viewpoint coordinate moved
    double moved = 0.0;
    for (int k = 0; k < cfg.n_views; ++k) {
      moved = std::max(moved, std::fabs(result.viewpoints.theta.data()[k] -
                                        init_vs.theta.data()[k]));
      moved = std::max(moved, std::fabs(result.viewpoints.phi.data()[k] -
                                        init_vs.phi.data()[k]));
      moved = std::max(moved, std::fabs(result.viewpoints.rho.data()[k] -
                                        init_vs.rho.data()[k]));
    }
    REQUIRE(moved > 1e-4);
  }

  SECTION("bit-reproducible at 64-bit precision") {
    const TrainResult<double> a = train<double>({pair}, cfg);
    const TrainResult<double> b = train<double>({pair}, cfg);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      REQUIRE(a.history[i].bh == b.history[i].bh);
      REQUIRE(a.history[i].ov == b.history[i].ov);
      REQUIRE(a.history[i].total == b.history[i].total);
    }
    REQUIRE(a.viewpoints.theta.data() == b.viewpoints.theta.data());
    const auto pa = const_cast<TrainResult<double>&>(a).model.parameters();
    const auto pb = const_cast<TrainResult<double>&>(b).model.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      REQUIRE(pa[i].second.data() == pb[i].second.data());
    }
  }

  SECTION("non-finite loss aborts with a pointed diagnostic") {
    TrainConfig bad = cfg;
    bad.lambda = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_WITH(train<double>({pair}, bad),
                        Catch::Matchers::ContainsSubstring("non-finite"));
  }

  SECTION("empty dataset is rejected") {
    REQUIRE_THROWS_AS(train<double>({}, cfg), std::invalid_argument);
  }
}
