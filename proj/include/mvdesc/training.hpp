#pragma once

// Correspondence sampling, the batch-hard triplet loss, the viewpoint range
// penalty, Adam, and the training loop that jointly optimizes viewpoints,
// backbone, fusion, and head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"
#include "mvdesc/geometry.hpp"
#include "mvdesc/network.hpp"
#include "mvdesc/renderer.hpp"
#include "mvdesc/tensor.hpp"

namespace mvdesc {

// Two partial observations of one scene plus the rigid motion aligning the
// second into the first's frame.
struct FragmentPair {
  PointCloud cloud_p;
  PointCloud cloud_q;
  Mat4 transform_gt = Mat4::Identity();
  double overlap = 0.0;
};

inline void validate(const FragmentPair& pair) {
  const Eigen::Matrix3d r = pair.transform_gt.block<3, 3>(0, 0);
  check((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() < 1e-6,
        "fragment pair: alignment rotation is not orthonormal");
  check(r.determinant() > 0.0, "fragment pair: alignment rotation is a reflection");
  check(pair.transform_gt.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1), 1e-12),
        "fragment pair: alignment must be a rigid transform");
  check(pair.overlap >= 0.0 && pair.overlap <= 1.0,
        "fragment pair: overlap must be in [0,1]");
}

struct MatchBatch {
  std::vector<std::pair<int, int>> pairs;  // (index in p, index in q)
};

// Uniformly samples matching keypoint pairs from the overlap region: each q
// point is matched to its nearest p point after ground-truth alignment, and
// pairs closer than the tolerance are eligible.
inline MatchBatch sample_match_batch(const FragmentPair& pair, int batch_size,
                                     double match_tolerance, std::uint64_t seed) {
  validate(pair);
  check(pair.overlap >= 0.3, "sample_match_batch: pair overlap below 0.3");
  check(batch_size >= 1, "sample_match_batch: batch size must be positive");
  check(match_tolerance > 0.0, "sample_match_batch: tolerance must be positive");
  const SpatialIndex index(pair.cloud_p);
  std::vector<std::pair<int, int>> eligible;
  for (std::size_t qi = 0; qi < pair.cloud_q.size(); ++qi) {
    const Vec3 aligned = transform_point(pair.transform_gt, pair.cloud_q.points[qi]);
    const auto nn = index.knn(aligned, 1);
    if (!nn.empty() &&
        (pair.cloud_p.points[static_cast<std::size_t>(nn[0])] - aligned).norm() <
            match_tolerance) {
      eligible.emplace_back(nn[0], static_cast<int>(qi));
    }
  }
  check(static_cast<int>(eligible.size()) >= batch_size,
        "sample_match_batch: only " + std::to_string(eligible.size()) +
            " correspondences available for batch size " +
            std::to_string(batch_size));
  Rng rng(seed);
  shuffle(eligible, rng);
  MatchBatch batch;
  batch.pairs.assign(eligible.begin(), eligible.begin() + batch_size);
  return batch;
}

namespace detail {

template <class T>
double desc_distance(const std::vector<T>& a, const std::vector<T>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Batch-hard triplet loss: mean over anchors i of
//   [ margin + ||p_i - q_i|| - min_{j != i} ||p_i - q_j|| ]+
// Negatives are drawn from the q side within the batch; the hardest-negative
// index ties to the lowest j. Gradients flow to every participating
// descriptor; the hinge and the argmin are treated as locally constant.
template <class T>
Tensor<T> batch_hard_triplet_loss(Tape<T>* tape,
                                  const std::vector<Tensor<T>>& descs_p,
                                  const std::vector<Tensor<T>>& descs_q,
                                  double margin) {
  const std::size_t n = descs_p.size();
  check(n == descs_q.size(),
        "batch_hard_triplet_loss: descriptor lists differ in length");
  check(n >= 2, "batch_hard_triplet_loss: need at least two pairs in the batch");
  const std::size_t dim = descs_p[0].size();
  for (const auto& d : descs_p) {
    check(d.size() == dim, "batch_hard_triplet_loss: inconsistent dimensions");
  }
  for (const auto& d : descs_q) {
    check(d.size() == dim, "batch_hard_triplet_loss: inconsistent dimensions");
  }

  std::vector<double> pos(n), neg(n);
  std::vector<int> hardest(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = detail::desc_distance(descs_p[i].data(), descs_q[i].data());
    double best = std::numeric_limits<double>::infinity();
    int best_j = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = detail::desc_distance(descs_p[i].data(), descs_q[j].data());
      if (d < best) {
        best = d;
        best_j = static_cast<int>(j);
      }
    }
    neg[i] = best;
    hardest[i] = best_j;
    total += std::max(0.0, margin + pos[i] - neg[i]);
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(n)));

  bool wants = false;
  if (tape) {
    for (const auto& d : descs_p) wants = wants || d.requires_grad();
    for (const auto& d : descs_q) wants = wants || d.requires_grad();
  }
  if (wants) {
    out.set_requires_grad(true);
    std::vector<typename Tensor<T>::NodePtr> pn, qn, all;
    for (const auto& d : descs_p) pn.push_back(d.node());
    for (const auto& d : descs_q) qn.push_back(d.node());
    all = pn;
    all.insert(all.end(), qn.begin(), qn.end());
    auto yn = out.node();
    tape->record(
        "batch_hard_triplet_loss", all, yn,
        [pn, qn, yn, pos, neg, hardest, margin, n, dim] {
          if (yn->grad.empty()) return;
          const double g = static_cast<double>(yn->grad[0]) / static_cast<double>(n);
          for (auto& node : pn) {
            if (node->requires_grad) ensure_grad<T>(node);
          }
          for (auto& node : qn) {
            if (node->requires_grad) ensure_grad<T>(node);
          }
          for (std::size_t i = 0; i < n; ++i) {
            if (margin + pos[i] - neg[i] <= 0.0) continue;  // hinge inactive
            const int j = hardest[i];
            for (std::size_t k = 0; k < dim; ++k) {
              const double pi = static_cast<double>(pn[i]->data[k]);
              const double qi = static_cast<double>(qn[i]->data[k]);
              const double qj = static_cast<double>(
                  qn[static_cast<std::size_t>(j)]->data[k]);
              double dp = 0.0;
              if (pos[i] > 0.0) {
                const double u = (pi - qi) / pos[i];
                dp += u;
                if (qn[i]->requires_grad) {
                  qn[i]->grad[k] -= static_cast<T>(g * u);
                }
              }
              if (neg[i] > 0.0) {
                const double u = (pi - qj) / neg[i];
                dp -= u;
                if (qn[static_cast<std::size_t>(j)]->requires_grad) {
                  qn[static_cast<std::size_t>(j)]->grad[k] += static_cast<T>(g * u);
                }
              }
              if (pn[i]->requires_grad) {
                pn[i]->grad[k] += static_cast<T>(g * dp);
              }
            }
          }
        });
  }
  return out;
}

namespace detail {

struct RangeBox {
  double mid, half;
};

// feasible viewpoint box: theta [0, 2pi], phi [0, pi/2], rho [0.3, 1]
inline const RangeBox kViewpointBox[3] = {
    {M_PI, M_PI}, {M_PI / 4.0, M_PI / 4.0}, {0.65, 0.35}};

}  // namespace detail

// Soft range penalty keeping (theta, phi, rho) inside their bounds: mean over
// viewpoints of the per-coordinate hinge  [ |x - mid| - half ]+ .
template <class T>
Tensor<T> viewpoint_range_loss(Tape<T>* tape, ViewpointSet<T>& viewpoints) {
  const int n = viewpoints.count();
  check(n >= 1, "viewpoint_range_loss: empty viewpoint set");
  Tensor<T> coords[3] = {viewpoints.theta, viewpoints.phi, viewpoints.rho};
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    for (int k = 0; k < n; ++k) {
      const double x = static_cast<double>(coords[c].data()[k]);
      const double excess = std::fabs(x - detail::kViewpointBox[c].mid) -
                            detail::kViewpointBox[c].half;
      if (excess > 0.0) total += excess;
    }
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(n)));

  const bool wants = tape && (viewpoints.theta.requires_grad() ||
                              viewpoints.phi.requires_grad() ||
                              viewpoints.rho.requires_grad());
  if (wants) {
    out.set_requires_grad(true);
    auto tn = viewpoints.theta.node(), pn = viewpoints.phi.node(),
         rn = viewpoints.rho.node();
    auto yn = out.node();
    tape->record("viewpoint_range_loss", {tn, pn, rn}, yn, [tn, pn, rn, yn, n] {
      if (yn->grad.empty()) return;
      const double g = static_cast<double>(yn->grad[0]) / static_cast<double>(n);
      typename Tensor<T>::NodePtr nodes[3] = {tn, pn, rn};
      for (int c = 0; c < 3; ++c) {
        if (!nodes[c]->requires_grad) continue;
        ensure_grad<T>(nodes[c]);
        for (int k = 0; k < n; ++k) {
          const double x = static_cast<double>(nodes[c]->data[static_cast<std::size_t>(k)]);
          const double centered = x - detail::kViewpointBox[c].mid;
          if (std::fabs(centered) - detail::kViewpointBox[c].half <= 0.0) continue;
          nodes[c]->grad[static_cast<std::size_t>(k)] +=
              static_cast<T>(centered > 0.0 ? g : -g);
        }
      }
    });
  }
  return out;
}

// bh + lambda * ov
template <class T>
Tensor<T> total_loss(Tape<T>* tape, const Tensor<T>& bh, const Tensor<T>& ov,
                     double lambda) {
  return add(tape, bh, scale(tape, ov, static_cast<T>(lambda)));
}

// Adam with standard bias correction. The state owns the hyperparameters and
// the per-parameter moment buffers; the step counter is shared.
template <class T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m, v;
};

template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  check(state.m.size() == params.size(), "adam_step: parameter count changed");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& data = params[p].data();
    auto& grad = params[p].grad();
    check(state.m[p].size() == data.size(), "adam_step: parameter shape changed");
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      state.m[p][i] = state.beta1 * state.m[p][i] + (1.0 - state.beta1) * g;
      state.v[p][i] = state.beta2 * state.v[p][i] + (1.0 - state.beta2) * g * g;
      const double mhat = state.m[p][i] / bc1;
      const double vhat = state.v[p][i] / bc2;
      data[i] = static_cast<T>(static_cast<double>(data[i]) -
                               state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

struct TrainConfig {
  int epochs = 16;
  int batch_size = 24;
  double lr = 1e-3;
  double lr_decay = 0.1;
  int decay_period = 4;
  double margin = 1.0;
  double lambda = 1.0;
  int n_views = 8;
  int descriptor_dim = 32;
  FusionMode fusion_mode = FusionMode::kSoft;
  std::string viewpoint_init = "random";
  double match_tolerance = 0.01;
  std::uint64_t seed = 0;
  double sigma = 1e-4;
  double gamma = 1e-4;
  double crop_radius = 1.0;
  int batches_per_pair = 1;
  int precision = 32;  // floating-point width of the training arithmetic

  void validate() const {
    check(epochs >= 1, "config: epochs must be >= 1");
    check(batch_size >= 2, "config: batch_size must be >= 2");
    check(lr > 0.0, "config: lr must be positive");
    check(lr_decay > 0.0 && lr_decay <= 1.0, "config: lr_decay must be in (0,1]");
    check(decay_period >= 1, "config: decay_period must be >= 1");
    check(margin >= 0.0, "config: margin must be >= 0");
    check(lambda >= 0.0, "config: lambda must be >= 0");
    check(n_views >= 1, "config: n_views must be >= 1");
    check(descriptor_dim >= 1, "config: descriptor_dim must be >= 1");
    check(viewpoint_init == "random" || viewpoint_init == "orbited",
          "config: viewpoint_init must be 'random' or 'orbited'");
    check(match_tolerance > 0.0, "config: match_tolerance must be positive");
    check(sigma > 0.0 && gamma > 0.0, "config: sigma and gamma must be positive");
    check(crop_radius > 0.0, "config: crop_radius must be positive");
    check(batches_per_pair >= 1, "config: batches_per_pair must be >= 1");
    check(precision == 32 || precision == 64, "config: precision must be 32 or 64");
  }

  // Flat key=value text; '#' starts a comment, blank lines are skipped.
  // Unknown keys are errors so that typos cannot silently fall back to
  // defaults.
  static TrainConfig from_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "config: cannot open " + path);
    TrainConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      check(eq != std::string::npos, "config: line " + std::to_string(line_no) +
                                         " is not key=value: " + line);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      check(!value.empty(), "config: empty value for key " + key);
      try {
        if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "batch_size") cfg.batch_size = std::stoi(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "lr_decay") cfg.lr_decay = std::stod(value);
        else if (key == "decay_period") cfg.decay_period = std::stoi(value);
        else if (key == "margin") cfg.margin = std::stod(value);
        else if (key == "lambda") cfg.lambda = std::stod(value);
        else if (key == "n_views") cfg.n_views = std::stoi(value);
        else if (key == "descriptor_dim") cfg.descriptor_dim = std::stoi(value);
        else if (key == "fusion_mode") cfg.fusion_mode = fusion_mode_from_string(value);
        else if (key == "viewpoint_init") cfg.viewpoint_init = value;
        else if (key == "match_tolerance") cfg.match_tolerance = std::stod(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "sigma") cfg.sigma = std::stod(value);
        else if (key == "gamma") cfg.gamma = std::stod(value);
        else if (key == "crop_radius") cfg.crop_radius = std::stod(value);
        else if (key == "batches_per_pair") cfg.batches_per_pair = std::stoi(value);
        else if (key == "precision") cfg.precision = std::stoi(value);
        else check(false, "config: unknown key '" + key + "'");
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value for key " + key + ": " + value);
      }
    }
    cfg.validate();
    return cfg;
  }
};

struct LossRecord {
  int epoch = 0;
  int batch = 0;
  double bh = 0.0;
  double ov = 0.0;
  double total = 0.0;
};

inline void write_loss_csv(const std::vector<LossRecord>& history,
                           const std::string& path) {
  std::ofstream out(path);
  check(out.good(), "loss csv: cannot open " + path);
  out << "epoch,batch,bh_loss,ov_loss,total\n";
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.batch << ',' << r.bh << ',' << r.ov << ','
        << r.total << '\n';
  }
  check(out.good(), "loss csv: write failed for " + path);
}

template <class T>
struct TrainResult {
  DescriptorModel<T> model;
  ViewpointSet<T> viewpoints;
  std::vector<LossRecord> history;
};

namespace detail {

// Names the first non-finite intermediate produced while describing one
// keypoint, for the abort diagnostic.
template <class T>
std::string locate_nonfinite(const PointCloud& cloud, int keypoint,
                             ViewpointSet<T>& viewpoints,
                             const DescriptorModel<T>& model, FusionMode mode,
                             const SoftRenderConfig& render_cfg,
                             double crop_radius) {
  Tape<T> tape;
  describe_keypoint(&tape, cloud, keypoint, viewpoints, model, mode, render_cfg,
                    crop_radius);
  const auto hit = tape.first_nonfinite();
  if (hit) return "op '" + hit->second + "'";
  return "(not reproduced in the forward pass)";
}

}  // namespace detail

// Joint training of weights and viewpoints.
//
// Each batch runs in two phases to bound memory: first an untaped forward
// computes every descriptor, then the batch loss is formed over descriptor
// leaves to obtain d(loss)/d(descriptor), and finally each keypoint is
// re-described on its own short tape seeded with that gradient. The recompute
// is bit-identical to the first pass, so results match a monolithic tape.
template <class T>
TrainResult<T> train(const std::vector<FragmentPair>& dataset,
                     const TrainConfig& cfg) {
  cfg.validate();
  check(!dataset.empty(), "train: dataset is empty");
  for (const auto& pair : dataset) validate(pair);

  TrainResult<T> result;
  result.model = DescriptorModel<T>::init(cfg.descriptor_dim,
                                          derive_seed(cfg.seed, 101, 0, 0));
  result.viewpoints =
      cfg.viewpoint_init == "orbited"
          ? ViewpointSet<T>::orbited_init(cfg.n_views)
          : ViewpointSet<T>::random_init(cfg.n_views,
                                         derive_seed(cfg.seed, 102, 0, 0));

  std::vector<Tensor<T>> params;
  for (auto& [name, tensor] : result.model.parameters()) params.push_back(tensor);
  params.push_back(result.viewpoints.theta);
  params.push_back(result.viewpoints.phi);
  params.push_back(result.viewpoints.rho);

  AdamState<T> adam;
  adam.lr = cfg.lr;
  SoftRenderConfig render_cfg;
  render_cfg.sigma = cfg.sigma;
  render_cfg.gamma = cfg.gamma;

  const int d = cfg.descriptor_dim;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = cfg.lr * std::pow(cfg.lr_decay, epoch / cfg.decay_period);
    std::vector<int> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng epoch_rng(derive_seed(cfg.seed, 103, static_cast<std::uint64_t>(epoch), 0));
    shuffle(order, epoch_rng);

    int batch_index = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const FragmentPair& pair = dataset[static_cast<std::size_t>(order[pos])];
      for (int rep = 0; rep < cfg.batches_per_pair; ++rep) {
        const MatchBatch batch = sample_match_batch(
            pair, cfg.batch_size, cfg.match_tolerance,
            derive_seed(cfg.seed, 104,
                        static_cast<std::uint64_t>(epoch) * 100003u +
                            static_cast<std::uint64_t>(pos),
                        static_cast<std::uint64_t>(rep)));
        const std::size_t b = batch.pairs.size();

        // phase 1: untaped descriptors for both sides
        std::vector<std::vector<T>> desc_values(2 * b);
        parallel_for(2 * b, [&](std::size_t slot) {
          const bool q_side = slot >= b;
          const auto& kp = batch.pairs[q_side ? slot - b : slot];
          const PointCloud& cloud = q_side ? pair.cloud_q : pair.cloud_p;
          const int index = q_side ? kp.second : kp.first;
          auto local_views = result.viewpoints;  // shared tensors, cheap copy
          Tensor<T> desc = describe_keypoint<T>(
              nullptr, cloud, index, local_views, result.model, cfg.fusion_mode,
              render_cfg, cfg.crop_radius);
          desc_values[slot] = desc.data();
        });

        // phase 2: batch loss over descriptor leaves
        std::vector<Tensor<T>> leaves_p, leaves_q;
        for (std::size_t i = 0; i < b; ++i) {
          Tensor<T> lp({d}, T(0), true);
          lp.data() = desc_values[i];
          leaves_p.push_back(lp);
          Tensor<T> lq({d}, T(0), true);
          lq.data() = desc_values[b + i];
          leaves_q.push_back(lq);
        }
        Tape<T> loss_tape;
        Tensor<T> bh =
            batch_hard_triplet_loss(&loss_tape, leaves_p, leaves_q, cfg.margin);
        Tensor<T> ov = viewpoint_range_loss(&loss_tape, result.viewpoints);
        Tensor<T> total = total_loss(&loss_tape, bh, ov, cfg.lambda);
        const double total_value = static_cast<double>(total.item());
        if (!std::isfinite(total_value)) {
          std::string where = "the loss combination";
          const auto hit = loss_tape.first_nonfinite();
          if (hit) {
            where = "op '" + hit->second + "'";
          } else if (!batch.pairs.empty()) {
            where = detail::locate_nonfinite(pair.cloud_p, batch.pairs[0].first,
                                             result.viewpoints, result.model,
                                             cfg.fusion_mode, render_cfg,
                                             cfg.crop_radius);
          }
          throw std::runtime_error(
              "train: aborted on non-finite loss at epoch " +
              std::to_string(epoch) + " batch " + std::to_string(batch_index) +
              ", first non-finite tensor from " + where);
        }
        backward(loss_tape, total);

        // phase 3: re-describe each keypoint on its own tape, seeded with the
        // descriptor gradient from phase 2
        for (std::size_t slot = 0; slot < 2 * b; ++slot) {
          const bool q_side = slot >= b;
          const auto& kp = batch.pairs[q_side ? slot - b : slot];
          const PointCloud& cloud = q_side ? pair.cloud_q : pair.cloud_p;
          const int index = q_side ? kp.second : kp.first;
          const Tensor<T>& leaf =
              q_side ? leaves_q[slot - b] : leaves_p[slot];
          if (leaf.node()->grad.empty()) continue;
          Tape<T> tape;
          Tensor<T> desc = describe_keypoint<T>(
              &tape, cloud, index, result.viewpoints, result.model,
              cfg.fusion_mode, render_cfg, cfg.crop_radius);
          ensure_grad<T>(desc.node());
          desc.node()->grad = leaf.node()->grad;
          tape.backward_seeded();
        }

        result.history.push_back({epoch, batch_index,
                                  static_cast<double>(bh.item()),
                                  static_cast<double>(ov.item()), total_value});
        adam_step(params, adam);
        for (auto& p : params) {
          std::fill(p.grad().begin(), p.grad().end(), T(0));
        }
        ++batch_index;
      }
    }
  }
  return result;
}

}  // namespace mvdesc
