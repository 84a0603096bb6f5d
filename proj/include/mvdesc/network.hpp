#pragma once

// Per-view feature extraction, the three view-fusion operators, and the
// descriptor head. All forward passes are tape-optional: pass a tape while
// training, nullptr for inference.

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"
#include "mvdesc/geometry.hpp"
#include "mvdesc/renderer.hpp"
#include "mvdesc/tensor.hpp"

namespace mvdesc {

template <class T>
struct ConvLayer {
  Tensor<T> w;  // (Cout, Cin, kh, kw)
  Tensor<T> b;  // (Cout)
  int stride = 1;
};

// Six stacked 3x3 conv layers, each followed by affine-free instance
// normalization and ReLU; strides 2,1,2,1,2,1 reduce 64x64 to 8x8 while the
// channel count grows 1 -> 32 -> 32 -> 64 -> 64 -> 128 -> 128.
template <class T>
struct BackboneWeights {
  std::vector<ConvLayer<T>> layers;
};

// Soft-view pooling sub-network (down-conv, ReLU, up-conv back to the input
// shape) and the descriptor head.
// The head is deliberately bias-free: a bias would hand the metric loss a
// degenerate optimum where every input maps to the normalized bias direction,
// so the projection must earn all of its output from the fused features.
template <class T>
struct FusionWeights {
  ConvLayer<T> down;  // 128 -> 64, stride 2
  ConvLayer<T> up;    // 64 -> 128, spatial x2 (transposed)
  Tensor<T> head_w;   // (d, 8192)
};

enum class FusionMode { kMax, kAvg, kSoft };

inline FusionMode fusion_mode_from_string(const std::string& name) {
  if (name == "max") return FusionMode::kMax;
  if (name == "avg") return FusionMode::kAvg;
  if (name == "soft") return FusionMode::kSoft;
  throw std::invalid_argument("unknown fusion mode: " + name);
}

inline const char* to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kMax: return "max";
    case FusionMode::kAvg: return "avg";
    default: return "soft";
  }
}

namespace detail {

template <class T>
Tensor<T> gaussian_tensor(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape), T(0), true);
  for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <class T>
ConvLayer<T> init_conv(int cout, int cin, int stride, Rng& rng) {
  // fan-in scaled Gaussian, zero bias
  const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * 9.0));
  ConvLayer<T> layer;
  layer.w = gaussian_tensor<T>({cout, cin, 3, 3}, stddev, rng);
  layer.b = Tensor<T>({cout}, T(0), true);
  layer.stride = stride;
  return layer;
}

}  // namespace detail

// Bundles everything the descriptor network learns. Viewpoints are carried
// separately (they are per-model but live with the renderer).
template <class T>
struct DescriptorModel {
  BackboneWeights<T> backbone;
  FusionWeights<T> fusion;
  int descriptor_dim = 32;

  static DescriptorModel init(int descriptor_dim, std::uint64_t seed) {
    check(descriptor_dim >= 1, "descriptor model: dimension must be positive");
    DescriptorModel m;
    m.descriptor_dim = descriptor_dim;
    Rng rng(seed);
    const int channels[7] = {1, 32, 32, 64, 64, 128, 128};
    const int strides[6] = {2, 1, 2, 1, 2, 1};
    for (int i = 0; i < 6; ++i) {
      m.backbone.layers.push_back(
          detail::init_conv<T>(channels[i + 1], channels[i], strides[i], rng));
    }
    m.fusion.down = detail::init_conv<T>(64, 128, 2, rng);
    // transposed layout: (in, out, kh, kw)
    const double up_std = std::sqrt(2.0 / (64.0 * 9.0));
    m.fusion.up.w = detail::gaussian_tensor<T>({64, 128, 3, 3}, up_std, rng);
    m.fusion.up.b = Tensor<T>({128}, T(0), true);
    m.fusion.up.stride = 2;
    m.fusion.head_w = detail::gaussian_tensor<T>(
        {descriptor_dim, 128 * 8 * 8}, std::sqrt(1.0 / (128.0 * 8.0 * 8.0)), rng);
    return m;
  }

  // Stable name -> tensor listing, the serialization and optimizer order.
  std::vector<std::pair<std::string, Tensor<T>>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (std::size_t i = 0; i < backbone.layers.size(); ++i) {
      const std::string base = "backbone.conv" + std::to_string(i + 1);
      out.emplace_back(base + ".w", backbone.layers[i].w);
      out.emplace_back(base + ".b", backbone.layers[i].b);
    }
    out.emplace_back("fusion.down.w", fusion.down.w);
    out.emplace_back("fusion.down.b", fusion.down.b);
    out.emplace_back("fusion.up.w", fusion.up.w);
    out.emplace_back("fusion.up.b", fusion.up.b);
    out.emplace_back("head.w", fusion.head_w);
    return out;
  }
};

// Conv -> instance norm -> ReLU for each backbone layer; works on any input
// size the convolutions accept.
template <class T>
Tensor<T> apply_backbone(Tape<T>* tape, const Tensor<T>& input,
                         const BackboneWeights<T>& weights) {
  Tensor<T> x = input;
  for (const ConvLayer<T>& layer : weights.layers) {
    x = conv2d(tape, x, layer.w, layer.b, layer.stride, 1);
    x = instance_norm(tape, x);
    x = relu(tape, x);
  }
  return x;
}

// Copies a rendered patch into a single-channel input tensor.
template <class T>
Tensor<T> patch_to_tensor(const ViewPatch& patch) {
  check(static_cast<std::size_t>(patch.size) * patch.size == patch.pixels.size(),
        "patch_to_tensor: inconsistent patch");
  Tensor<T> t({1, patch.size, patch.size});
  for (std::size_t i = 0; i < patch.pixels.size(); ++i) {
    t.data()[i] = static_cast<T>(patch.pixels[i]);
  }
  return t;
}

// The fixed-size entry point: a 64x64 depth patch in, a 128x8x8 feature map out.
template <class T>
Tensor<T> extract_view_features(Tape<T>* tape, const Tensor<T>& patch,
                                const BackboneWeights<T>& weights) {
  check(patch.shape() == std::vector<int>{1, 64, 64},
        "extract_view_features: patch must be 1x64x64, got " +
            shape_str(patch.shape()));
  return apply_backbone(tape, patch, weights);
}

// Elementwise max across views; gradient flows only to the per-location
// argmax view (ties to the lowest view index).
template <class T>
Tensor<T> max_view_pool(Tape<T>* tape, const std::vector<Tensor<T>>& features) {
  return view_max_pool(tape, features);
}

template <class T>
Tensor<T> avg_view_pool(Tape<T>* tape, const std::vector<Tensor<T>>& features) {
  return view_avg_pool(tape, features);
}

// Attentive fusion: each view's feature map is scored by a small down/up
// conv pair, the scores are softmax-normalized per location across views, and
// the output is the per-location convex combination.
template <class T>
Tensor<T> soft_view_pool(Tape<T>* tape, const std::vector<Tensor<T>>& features,
                         const FusionWeights<T>& weights) {
  check(!features.empty(), "soft_view_pool: need at least one view");
  std::vector<Tensor<T>> scores;
  scores.reserve(features.size());
  for (const Tensor<T>& f : features) {
    Tensor<T> s = conv2d(tape, f, weights.down.w, weights.down.b, 2, 1);
    s = relu(tape, s);
    s = transposed_conv2d(tape, s, weights.up.w, weights.up.b, 2, 1, 1);
    scores.push_back(std::move(s));
  }
  return view_softmax_blend(tape, features, scores);
}

// Flatten (channel, then row, then column), linear map to d, unit-normalize.
template <class T>
Tensor<T> descriptor_head(Tape<T>* tape, const Tensor<T>& fused,
                          const FusionWeights<T>& weights) {
  check(fused.shape() == std::vector<int>{128, 8, 8},
        "descriptor_head: fused map must be 128x8x8, got " +
            shape_str(fused.shape()));
  Tensor<T> flat = flatten(tape, fused);
  Tensor<T> projected = linear(tape, flat, weights.head_w);
  return l2_normalize(tape, projected);
}

template <class T>
Tensor<T> fuse_views(Tape<T>* tape, const std::vector<Tensor<T>>& features,
                     const FusionWeights<T>& weights, FusionMode mode) {
  switch (mode) {
    case FusionMode::kMax: return max_view_pool(tape, features);
    case FusionMode::kAvg: return avg_view_pool(tape, features);
    default: return soft_view_pool(tape, features, weights);
  }
}

// Render -> per-view features -> fusion -> head, for one keypoint. The
// rendered patches come from the hard rasterizer by default; gradients (when
// a tape is supplied and viewpoints require them) flow through the smooth
// formulation via render_view.
template <class T>
Tensor<T> describe_keypoint(Tape<T>* tape, const PointCloud& cloud, int keypoint,
                            ViewpointSet<T>& viewpoints,
                            const DescriptorModel<T>& model,
                            FusionMode mode, const SoftRenderConfig& cfg,
                            double crop_radius = 1.0,
                            RenderMode render_mode = RenderMode::kHard) {
  check(keypoint >= 0 && static_cast<std::size_t>(keypoint) < cloud.size(),
        "describe_keypoint: index out of range");
  check(cloud.has_normals(), "describe_keypoint: cloud has no normals");
  const LocalFrame frame = intrinsic_lrf(cloud, keypoint, 24, viewpoints.up);
  auto local = std::make_shared<PointCloud>(crop_local(cloud, frame, crop_radius));
  std::vector<Tensor<T>> features;
  features.reserve(static_cast<std::size_t>(viewpoints.count()) * 4);
  for (int k = 0; k < viewpoints.count(); ++k) {
    Tensor<T> base = render_view(tape, viewpoints, k, local, cfg, render_mode);
    for (int q = 0; q < 4; ++q) {
      Tensor<T> rotated = rotate90(tape, base, q);
      Tensor<T> patch = reshape(tape, rotated, {1, 64, 64});
      features.push_back(extract_view_features(tape, patch, model.backbone));
    }
  }
  Tensor<T> fused = fuse_views(tape, features, model.fusion, mode);
  return descriptor_head(tape, fused, model.fusion);
}

}  // namespace mvdesc
