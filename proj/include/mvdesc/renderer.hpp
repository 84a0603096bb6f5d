#pragma once

// Multi-view depth rendering of local point clouds as spheres. The forward
// pass is a conventional z-buffer (or, optionally, the smooth probabilistic
// aggregation); the backward pass always differentiates the smooth
// formulation, pushing gradients through projection and camera construction
// into the spherical viewpoint parameters (theta, phi, rho).
//
// Gradients use forward-mode dual numbers carrying the three viewpoint
// partials: the camera->pixel chain is branch-heavy, and only three scalars
// per view need derivatives, so forward mode is both simpler and cheaper than
// a handwritten reverse pass.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"
#include "mvdesc/geometry.hpp"
#include "mvdesc/tensor.hpp"

namespace mvdesc {

// Learnable spherical viewpoints around a keypoint's local frame, plus the
// shared up reference. Angles and distances live in rank-1 tensors so the
// optimizer can treat them like any other parameter.
template <class T>
struct ViewpointSet {
  Tensor<T> theta;  // azimuth, radians
  Tensor<T> phi;    // elevation, radians
  Tensor<T> rho;    // distance, meters
  Vec3 up = Vec3(0, -1, 0);

  int count() const { return theta.defined() ? theta.shape()[0] : 0; }

  // Uniform draws inside the soft bounds ([0,2pi], [0,pi/2], [0.3,1]).
  static ViewpointSet random_init(int n, std::uint64_t seed) {
    check(n >= 1, "viewpoints: need at least one");
    ViewpointSet vs;
    vs.theta = Tensor<T>({n}, T(0), true);
    vs.phi = Tensor<T>({n}, T(0), true);
    vs.rho = Tensor<T>({n}, T(0), true);
    Rng rng(seed);
    for (int k = 0; k < n; ++k) {
      vs.theta.data()[k] = static_cast<T>(rng.uniform(0.0, 2.0 * M_PI));
      vs.phi.data()[k] = static_cast<T>(rng.uniform(0.0, M_PI / 2.0));
      vs.rho.data()[k] = static_cast<T>(rng.uniform(0.3, 1.0));
    }
    return vs;
  }

  // Evenly spaced ring at low elevation and the minimum distance bound.
  static ViewpointSet orbited_init(int n) {
    check(n >= 1, "viewpoints: need at least one");
    ViewpointSet vs;
    vs.theta = Tensor<T>({n}, T(0), true);
    vs.phi = Tensor<T>({n}, T(M_PI / 6.0), true);
    vs.rho = Tensor<T>({n}, T(0.3), true);
    for (int k = 0; k < n; ++k) {
      vs.theta.data()[k] = static_cast<T>(2.0 * M_PI * k / n);
    }
    return vs;
  }
};

struct SoftRenderConfig {
  double sigma = 1e-4;           // screen-space sharpness (normalized units^2)
  double gamma = 1e-4;           // depth aggregation temperature
  double background_eps = 0.01;  // background logit on the encoded-depth scale
};

inline void validate(const SoftRenderConfig& cfg) {
  check(cfg.sigma > 0.0 && cfg.gamma > 0.0 && cfg.background_eps > 0.0,
        "render config: sigma, gamma, background_eps must be positive");
}

// Rendered depth patch plus its provenance within a keypoint's view set.
struct ViewPatch {
  int size = 0;
  std::vector<double> pixels;  // row-major, values in [0,1]
  int view_index = 1;          // 1-based viewpoint id
  int rotation_index = 0;      // quarter turns applied
};

struct Camera {
  Vec3 position = Vec3::Zero();
  Vec3 forward = Vec3::UnitZ();
  Vec3 right = Vec3::UnitX();
  Vec3 up = Vec3::UnitY();
  double fov_y = 60.0 * M_PI / 180.0;
  double near_z = 0.01;
  double far_z = 4.0;
  int image_size = 64;

  double focal_px() const {
    return (image_size / 2.0) / std::tan(fov_y / 2.0);
  }
};

namespace render_detail {

// Forward-mode scalar carrying partials with respect to (theta, phi, rho).
struct Dual3 {
  double v = 0.0;
  Eigen::Vector3d g = Eigen::Vector3d::Zero();

  Dual3() = default;
  Dual3(double value) : v(value) {}  // NOLINT: implicit constants are the point
  static Dual3 var(double value, int slot) {
    Dual3 d(value);
    d.g[slot] = 1.0;
    return d;
  }
};

inline Dual3 operator+(const Dual3& a, const Dual3& b) {
  Dual3 r(a.v + b.v);
  r.g = a.g + b.g;
  return r;
}
inline Dual3 operator-(const Dual3& a, const Dual3& b) {
  Dual3 r(a.v - b.v);
  r.g = a.g - b.g;
  return r;
}
inline Dual3 operator-(const Dual3& a) {
  Dual3 r(-a.v);
  r.g = -a.g;
  return r;
}
inline Dual3 operator*(const Dual3& a, const Dual3& b) {
  Dual3 r(a.v * b.v);
  r.g = a.g * b.v + b.g * a.v;
  return r;
}
inline Dual3 operator/(const Dual3& a, const Dual3& b) {
  Dual3 r(a.v / b.v);
  r.g = a.g / b.v - b.g * (a.v / (b.v * b.v));
  return r;
}
inline Dual3 sqrt(const Dual3& a) {
  Dual3 r(std::sqrt(a.v));
  r.g = a.g / (2.0 * r.v);
  return r;
}
inline Dual3 exp(const Dual3& a) {
  Dual3 r(std::exp(a.v));
  r.g = a.g * r.v;
  return r;
}
inline Dual3 sin(const Dual3& a) {
  Dual3 r(std::sin(a.v));
  r.g = a.g * std::cos(a.v);
  return r;
}
inline Dual3 cos(const Dual3& a) {
  Dual3 r(std::cos(a.v));
  r.g = -a.g * std::sin(a.v);
  return r;
}
// log(1 + e^x), overflow-safe; d/dx = sigmoid(x)
inline Dual3 softplus(const Dual3& a) {
  Dual3 r;
  if (a.v > 35.0) {
    r.v = a.v;
    r.g = a.g;
  } else if (a.v < -35.0) {
    r.v = std::exp(a.v);
    r.g = a.g * r.v;
  } else {
    r.v = std::log1p(std::exp(a.v));
    r.g = a.g / (1.0 + std::exp(-a.v));
  }
  return r;
}
inline double value_of(const Dual3& a) { return a.v; }
inline double value_of(double a) { return a; }

inline double softplus(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

// Tiny templated 3-vector so camera math runs on double or Dual3 alike.
template <class S>
struct V3 {
  S x{}, y{}, z{};
};

template <class S>
V3<S> v3_sub(const V3<S>& a, const V3<S>& b) {
  return {a.x - b.x, a.y - b.y, a.z - b.z};
}
template <class S>
S v3_dot(const V3<S>& a, const V3<S>& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}
template <class S>
V3<S> v3_cross(const V3<S>& a, const V3<S>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
template <class S>
V3<S> v3_scale(const V3<S>& a, const S& s) {
  return {a.x * s, a.y * s, a.z * s};
}
template <class S>
V3<S> v3_normalize(const V3<S>& a) {
  using std::sqrt;
  const S inv = S(1.0) / sqrt(v3_dot(a, a));
  return v3_scale(a, inv);
}

template <class S>
V3<S> v3_const(const Vec3& v) {
  return {S(v.x()), S(v.y()), S(v.z())};
}

template <class S>
struct CamBasis {
  V3<S> pos, fwd, right, up;
};

// Spherical position + look-at basis toward the frame origin. The up
// reference is nudged exactly like build_lrf when it (nearly) aligns with the
// viewing direction.
template <class S>
CamBasis<S> cam_basis(const S& theta, const S& phi, const S& rho,
                      const Vec3& up_ref) {
  using std::cos;
  using std::sin;
  CamBasis<S> cb;
  const S cp = cos(phi);
  cb.pos = {rho * cp * cos(theta), rho * cp * sin(theta), rho * sin(phi)};
  cb.fwd = v3_normalize(v3_scale(cb.pos, S(-1.0)));
  Vec3 u = up_ref;
  const double align = std::fabs(value_of(v3_dot(cb.fwd, v3_const<S>(u))));
  if (align > 1.0 - 1e-6) {
    u.x() += 1e-3;
    u.normalize();
    if (std::fabs(value_of(v3_dot(cb.fwd, v3_const<S>(u)))) > 1.0 - 1e-6) {
      u.y() += 1e-3;
      u.normalize();
    }
  }
  cb.right = v3_normalize(v3_cross(cb.fwd, v3_const<S>(u)));
  cb.up = v3_cross(cb.right, cb.fwd);
  return cb;
}

template <class S>
struct ProjPoint {
  S u, v, z, r_px, c;  // pixel coords, view depth, screen radius, encoded depth
  bool culled = true;
};

// Pinhole projection of one sphere.
template <class S>
ProjPoint<S> project_one(const CamBasis<S>& cb, const Vec3& q, double radius,
                         double focal, double cx, double cy, double near_z,
                         double far_z) {
  ProjPoint<S> p{S(0.0), S(0.0), S(0.0), S(0.0), S(0.0), true};
  const V3<S> rel = v3_sub(v3_const<S>(q), cb.pos);
  p.z = v3_dot(rel, cb.fwd);
  const double zv = value_of(p.z);
  if (zv <= near_z || zv >= far_z) return p;  // culled
  p.culled = false;
  const S xc = v3_dot(rel, cb.right);
  const S yc = v3_dot(rel, cb.up);
  p.u = S(cx) + xc * S(focal) / p.z;
  p.v = S(cy) - yc * S(focal) / p.z;
  p.r_px = S(radius) * S(focal) / p.z;
  // encoded depth: nearer is brighter, clamped into [0,1]
  S c = (S(far_z) - p.z) * S(1.0 / (far_z - near_z));
  if (value_of(c) < 0.0) c = S(0.0);
  if (value_of(c) > 1.0) c = S(1.0);
  p.c = c;
  return p;
}

// Points with coverage logits below this threshold are outside a pixel's soft
// support and contribute exactly nothing. The support ring shrinks with
// sigma, which is what makes the soft render approach the hard one.
constexpr double kSupportLogCutoff = 46.0;

template <class S>
struct SoftScene {
  std::vector<ProjPoint<S>> pts;
  std::vector<std::vector<int>> candidates;  // per pixel, ascending point index
  int size = 0;
  double sigma = 0.0, gamma = 0.0, eps_b = 0.0;
};

template <class S>
SoftScene<S> build_soft_scene(const CamBasis<S>& cb, const PointCloud& cloud,
                              const SoftRenderConfig& cfg, int size,
                              double focal, double near_z, double far_z) {
  SoftScene<S> scene;
  scene.size = size;
  scene.sigma = cfg.sigma;
  scene.gamma = cfg.gamma;
  scene.eps_b = cfg.background_eps;
  const double cx = (size - 1) / 2.0, cy = (size - 1) / 2.0;
  scene.pts.reserve(cloud.size());
  for (std::size_t j = 0; j < cloud.size(); ++j) {
    scene.pts.push_back(project_one(cb, cloud.points[j], cloud.radii[j], focal,
                                    cx, cy, near_z, far_z));
  }
  scene.candidates.assign(static_cast<std::size_t>(size) * size, {});
  // support radius in pixels: disk radius plus the sigmoid cutoff ring
  const double cut_px = std::sqrt(kSupportLogCutoff * cfg.sigma) * size;
  for (std::size_t j = 0; j < scene.pts.size(); ++j) {
    const auto& p = scene.pts[j];
    if (p.culled) continue;
    const double reach = value_of(p.r_px) + cut_px;
    const int r0 = std::max(0, static_cast<int>(std::ceil(value_of(p.v) - reach)));
    const int r1 = std::min(size - 1, static_cast<int>(std::floor(value_of(p.v) + reach)));
    const int c0 = std::max(0, static_cast<int>(std::ceil(value_of(p.u) - reach)));
    const int c1 = std::min(size - 1, static_cast<int>(std::floor(value_of(p.u) + reach)));
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        const double du = c - value_of(p.u), dv = r - value_of(p.v);
        if (std::sqrt(du * du + dv * dv) <= reach) {
          scene.candidates[static_cast<std::size_t>(r) * size + c].push_back(
              static_cast<int>(j));
        }
      }
    }
  }
  return scene;
}

// Smooth aggregation for one pixel (Dual3 or double). Candidates are scanned
// in ascending point-index order, fixing the summation order. If weights_out
// is non-null it receives each candidate's normalized weight and w_b.
template <class S>
S soft_pixel(const SoftScene<S>& scene, int r, int c,
             std::vector<std::pair<int, double>>* weights_out = nullptr,
             double* wb_out = nullptr) {
  using std::exp;
  using std::sqrt;
  const auto& cand = scene.candidates[static_cast<std::size_t>(r) * scene.size + c];
  const double eb = scene.eps_b / scene.gamma;
  if (cand.empty()) {
    if (wb_out) *wb_out = 1.0;
    return S(0.0);
  }
  // logits e_j = log D_j + c_j / gamma, log-sum-exp stabilized together with
  // the background logit e_b
  std::vector<S> logits;
  std::vector<int> kept;
  logits.reserve(cand.size());
  kept.reserve(cand.size());
  double peak = eb;
  for (int j : cand) {
    const auto& p = scene.pts[static_cast<std::size_t>(j)];
    // signed squared distance logit of the coverage sigmoid; the tiny bias
    // keeps sqrt differentiable when a pixel center coincides with a
    // projected center (the gradient limit there is finite)
    const S dd = (S(static_cast<double>(c)) - p.u) * (S(static_cast<double>(c)) - p.u) +
                 (S(static_cast<double>(r)) - p.v) * (S(static_cast<double>(r)) - p.v) +
                 S(1e-30);
    const S dist = sqrt(dd);
    const S d = (p.r_px - dist) * S(1.0 / scene.size);
    const S s = d * (value_of(d) >= 0.0 ? d : -d) * S(1.0 / scene.sigma);
    if (value_of(s) <= -kSupportLogCutoff) continue;  // outside soft support
    const S log_d = -softplus(-s);
    const S e = log_d + p.c * S(1.0 / scene.gamma);
    logits.push_back(e);
    kept.push_back(j);
    peak = std::max(peak, value_of(e));
  }
  if (kept.empty()) {
    if (wb_out) *wb_out = 1.0;
    return S(0.0);
  }
  S denom = S(0.0);
  const double wb_num = std::exp(eb - peak);
  denom = denom + S(wb_num);
  std::vector<S> nums(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    nums[i] = exp(logits[i] - S(peak));
    denom = denom + nums[i];
  }
  S acc = S(0.0);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& p = scene.pts[static_cast<std::size_t>(kept[i])];
    acc = acc + (nums[i] / denom) * p.c;
  }
  if (weights_out) {
    weights_out->clear();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      weights_out->emplace_back(kept[i], value_of(nums[i] / denom));
    }
  }
  if (wb_out) *wb_out = wb_num / value_of(denom);
  return acc;
}

inline CamBasis<double> basis_of(const Camera& cam) {
  CamBasis<double> cb;
  cb.pos = {cam.position.x(), cam.position.y(), cam.position.z()};
  cb.fwd = {cam.forward.x(), cam.forward.y(), cam.forward.z()};
  cb.right = {cam.right.x(), cam.right.y(), cam.right.z()};
  cb.up = {cam.up.x(), cam.up.y(), cam.up.z()};
  return cb;
}

}  // namespace render_detail

// Camera on the viewpoint sphere, looking at the local-frame origin.
inline Camera camera_from_viewpoint(double theta, double phi, double rho,
                                    const Vec3& up, int image_size = 64) {
  check(rho > 0.0, "camera_from_viewpoint: rho must be positive");
  const auto cb = render_detail::cam_basis<double>(theta, phi, rho, up);
  Camera cam;
  cam.position = Vec3(cb.pos.x, cb.pos.y, cb.pos.z);
  cam.forward = Vec3(cb.fwd.x, cb.fwd.y, cb.fwd.z);
  cam.right = Vec3(cb.right.x, cb.right.y, cb.right.z);
  cam.up = Vec3(cb.up.x, cb.up.y, cb.up.z);
  cam.image_size = image_size;
  return cam;
}

// Per-point projection results in pixel coordinates.
struct ProjectedPoint {
  double u = 0.0, v = 0.0;   // pixel coords (x right, y down)
  double z = 0.0;            // view depth
  double screen_radius = 0.0;
  bool culled = true;
};

inline std::vector<ProjectedPoint> project_points(const Camera& cam,
                                                  const PointCloud& cloud) {
  check(cloud.has_radii(), "project_points: cloud has no radii");
  const double f = cam.focal_px();
  const double cx = (cam.image_size - 1) / 2.0, cy = (cam.image_size - 1) / 2.0;
  const auto cb = render_detail::basis_of(cam);
  std::vector<ProjectedPoint> out(cloud.size());
  for (std::size_t j = 0; j < cloud.size(); ++j) {
    const auto p = render_detail::project_one<double>(
        cb, cloud.points[j], cloud.radii[j], f, cx, cy, cam.near_z, cam.far_z);
    out[j].culled = p.culled;
    out[j].z = p.z;
    if (!p.culled) {
      out[j].u = p.u;
      out[j].v = p.v;
      out[j].screen_radius = p.r_px;
    }
  }
  return out;
}

// Conventional rasterization: the nearest sphere whose projected disk covers
// the pixel center wins; depth ties keep the lower point index. Uncovered
// pixels stay at the background value 0.
inline ViewPatch render_hard(const Camera& cam, const PointCloud& cloud,
                             const SoftRenderConfig& cfg) {
  validate(cfg);
  check(cloud.points.empty() || cloud.has_radii(),
        "render_hard: cloud has no radii");
  const int size = cam.image_size;
  ViewPatch patch;
  patch.size = size;
  patch.pixels.assign(static_cast<std::size_t>(size) * size, 0.0);
  if (cloud.points.empty()) return patch;
  const auto proj = project_points(cam, cloud);
  std::vector<double> zbuf(static_cast<std::size_t>(size) * size,
                           std::numeric_limits<double>::infinity());
  const double depth_span = cam.far_z - cam.near_z;
  for (std::size_t j = 0; j < proj.size(); ++j) {
    const auto& p = proj[j];
    if (p.culled) continue;
    const double r2 = p.screen_radius * p.screen_radius;
    const int r0 = std::max(0, static_cast<int>(std::ceil(p.v - p.screen_radius)));
    const int r1 = std::min(size - 1, static_cast<int>(std::floor(p.v + p.screen_radius)));
    const int c0 = std::max(0, static_cast<int>(std::ceil(p.u - p.screen_radius)));
    const int c1 = std::min(size - 1, static_cast<int>(std::floor(p.u + p.screen_radius)));
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        const double du = c - p.u, dv = r - p.v;
        if (du * du + dv * dv > r2) continue;
        double& zb = zbuf[static_cast<std::size_t>(r) * size + c];
        if (p.z < zb) {  // strict: equal depth keeps the earlier (lower) index
          zb = p.z;
          patch.pixels[static_cast<std::size_t>(r) * size + c] =
              std::clamp((cam.far_z - p.z) / depth_span, 0.0, 1.0);
        }
      }
    }
  }
  return patch;
}

// Smooth probabilistic rendering: every pixel is a convex combination of the
// encoded depths of nearby spheres and the background.
inline ViewPatch render_soft(const Camera& cam, const PointCloud& cloud,
                             const SoftRenderConfig& cfg) {
  validate(cfg);
  check(cloud.points.empty() || cloud.has_radii(),
        "render_soft: cloud has no radii");
  const int size = cam.image_size;
  ViewPatch patch;
  patch.size = size;
  patch.pixels.assign(static_cast<std::size_t>(size) * size, 0.0);
  if (cloud.points.empty()) return patch;
  const auto cb = render_detail::basis_of(cam);
  const auto scene = render_detail::build_soft_scene<double>(
      cb, cloud, cfg, size, cam.focal_px(), cam.near_z, cam.far_z);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      patch.pixels[static_cast<std::size_t>(r) * size + c] =
          render_detail::soft_pixel(scene, r, c);
    }
  }
  return patch;
}

// Normalized per-pixel weights of the smooth formulation, for inspection:
// (point index, weight) pairs plus the background weight.
inline std::pair<std::vector<std::pair<int, double>>, double> soft_pixel_weights(
    const Camera& cam, const PointCloud& cloud, const SoftRenderConfig& cfg,
    int row, int col) {
  validate(cfg);
  const auto cb = render_detail::basis_of(cam);
  const auto scene = render_detail::build_soft_scene<double>(
      cb, cloud, cfg, cam.image_size, cam.focal_px(), cam.near_z, cam.far_z);
  std::vector<std::pair<int, double>> weights;
  double wb = 0.0;
  render_detail::soft_pixel(scene, row, col, &weights, &wb);
  return {std::move(weights), wb};
}

// d(loss)/d(theta, phi, rho) given upstream pixel gradients, differentiating
// the smooth formulation regardless of which forward produced the pixels.
inline Vec3 render_backward(double theta, double phi, double rho, const Vec3& up,
                            const PointCloud& cloud, const SoftRenderConfig& cfg,
                            const std::vector<double>& upstream,
                            int image_size = 64) {
  validate(cfg);
  check(upstream.size() ==
            static_cast<std::size_t>(image_size) * static_cast<std::size_t>(image_size),
        "render_backward: upstream gradient must match the image size");
  if (cloud.points.empty()) return Vec3::Zero();
  check(cloud.has_radii(), "render_backward: cloud has no radii");
  using render_detail::Dual3;
  const Dual3 th = Dual3::var(theta, 0);
  const Dual3 ph = Dual3::var(phi, 1);
  const Dual3 rh = Dual3::var(rho, 2);
  const auto cb = render_detail::cam_basis<Dual3>(th, ph, rh, up);
  Camera proto;
  proto.image_size = image_size;
  const auto scene = render_detail::build_soft_scene<Dual3>(
      cb, cloud, cfg, image_size, proto.focal_px(), proto.near_z, proto.far_z);
  Vec3 grad = Vec3::Zero();
  for (int r = 0; r < image_size; ++r) {
    for (int c = 0; c < image_size; ++c) {
      const double g = upstream[static_cast<std::size_t>(r) * image_size + c];
      if (g == 0.0) continue;
      const Dual3 px = render_detail::soft_pixel(scene, r, c);
      grad += g * px.g;
    }
  }
  return grad;
}

enum class RenderMode { kHard, kSoft };

// Renders viewpoint k of the set as a tape operation: the forward pass uses
// the requested mode, while backward always differentiates the smooth
// formulation into theta[k], phi[k], rho[k].
template <class T>
Tensor<T> render_view(Tape<T>* tape, ViewpointSet<T>& viewpoints, int k,
                      std::shared_ptr<const PointCloud> cloud,
                      const SoftRenderConfig& cfg,
                      RenderMode mode = RenderMode::kHard, int image_size = 64) {
  check(k >= 0 && k < viewpoints.count(), "render_view: view index out of range");
  const double theta = static_cast<double>(viewpoints.theta.data()[k]);
  const double phi = static_cast<double>(viewpoints.phi.data()[k]);
  const double rho = static_cast<double>(viewpoints.rho.data()[k]);
  const Camera cam = camera_from_viewpoint(theta, phi, rho, viewpoints.up,
                                           image_size);
  const ViewPatch patch = mode == RenderMode::kHard
                              ? render_hard(cam, *cloud, cfg)
                              : render_soft(cam, *cloud, cfg);
  Tensor<T> out({image_size, image_size});
  for (std::size_t i = 0; i < patch.pixels.size(); ++i) {
    out.data()[i] = static_cast<T>(patch.pixels[i]);
  }
  const bool wants = tape && (viewpoints.theta.requires_grad() ||
                              viewpoints.phi.requires_grad() ||
                              viewpoints.rho.requires_grad());
  if (wants) {
    out.set_requires_grad(true);
    auto tn = viewpoints.theta.node();
    auto pn = viewpoints.phi.node();
    auto rn = viewpoints.rho.node();
    auto yn = out.node();
    const Vec3 up = viewpoints.up;
    tape->record(
        "render_view", {tn, pn, rn}, yn,
        [tn, pn, rn, yn, cloud, cfg, up, k, image_size] {
          if (yn->grad.empty()) return;
          std::vector<double> upstream(yn->grad.size());
          bool any = false;
          for (std::size_t i = 0; i < upstream.size(); ++i) {
            upstream[i] = static_cast<double>(yn->grad[i]);
            any = any || upstream[i] != 0.0;
          }
          if (!any) return;
          const Vec3 g = render_backward(
              static_cast<double>(tn->data[static_cast<std::size_t>(k)]),
              static_cast<double>(pn->data[static_cast<std::size_t>(k)]),
              static_cast<double>(rn->data[static_cast<std::size_t>(k)]), up,
              *cloud, cfg, upstream, image_size);
          if (tn->requires_grad) {
            ensure_grad<T>(tn);
            tn->grad[static_cast<std::size_t>(k)] += static_cast<T>(g[0]);
          }
          if (pn->requires_grad) {
            ensure_grad<T>(pn);
            pn->grad[static_cast<std::size_t>(k)] += static_cast<T>(g[1]);
          }
          if (rn->requires_grad) {
            ensure_grad<T>(rn);
            rn->grad[static_cast<std::size_t>(k)] += static_cast<T>(g[2]);
          }
        });
  }
  return out;
}

// The four quarter-turn copies of a patch, rotation_index 0..3. One turn
// sends pixel (r, c) to (c, H-1-r).
inline std::vector<ViewPatch> augment_rotations(const ViewPatch& patch) {
  const int n = patch.size;
  check(static_cast<std::size_t>(n) * n == patch.pixels.size(),
        "augment_rotations: patch is not square");
  std::vector<ViewPatch> out(4, patch);
  for (int q = 1; q < 4; ++q) {
    out[q].rotation_index = q;
    const ViewPatch& prev = out[q - 1];
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        out[q].pixels[static_cast<std::size_t>(c) * n + (n - 1 - r)] =
            prev.pixels[static_cast<std::size_t>(r) * n + c];
      }
    }
  }
  out[0].rotation_index = 0;
  return out;
}

// All 4n patches of one keypoint: local frame, crop, per-view render, quarter
// turns. view-major, rotation-minor order; deterministic for fixed inputs.
template <class T>
std::vector<ViewPatch> render_keypoint(const PointCloud& cloud, int keypoint,
                                       const ViewpointSet<T>& viewpoints,
                                       const SoftRenderConfig& cfg,
                                       double crop_radius = 1.0,
                                       RenderMode mode = RenderMode::kHard,
                                       int image_size = 64) {
  check(keypoint >= 0 && static_cast<std::size_t>(keypoint) < cloud.size(),
        "render_keypoint: index out of range");
  check(cloud.has_normals(), "render_keypoint: cloud has no normals");
  const LocalFrame frame = intrinsic_lrf(cloud, keypoint, 24, viewpoints.up);
  const PointCloud local = crop_local(cloud, frame, crop_radius);
  std::vector<ViewPatch> out;
  out.reserve(static_cast<std::size_t>(viewpoints.count()) * 4);
  for (int k = 0; k < viewpoints.count(); ++k) {
    const Camera cam = camera_from_viewpoint(
        static_cast<double>(viewpoints.theta.data()[k]),
        static_cast<double>(viewpoints.phi.data()[k]),
        static_cast<double>(viewpoints.rho.data()[k]), viewpoints.up, image_size);
    ViewPatch base = mode == RenderMode::kHard ? render_hard(cam, local, cfg)
                                               : render_soft(cam, local, cfg);
    base.view_index = k + 1;
    for (ViewPatch& rotated : augment_rotations(base)) {
      rotated.view_index = k + 1;
      out.push_back(std::move(rotated));
    }
  }
  return out;
}

// 8-bit grayscale dump (binary PGM), value = round(255 * pixel).
inline void write_pgm(const std::string& path, const ViewPatch& patch) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "write_pgm: cannot open " + path);
  out << "P5\n" << patch.size << " " << patch.size << "\n255\n";
  for (double p : patch.pixels) {
    const int v = std::clamp(static_cast<int>(std::lround(255.0 * p)), 0, 255);
    out.put(static_cast<char>(v));
  }
  check(out.good(), "write_pgm: write failed for " + path);
}

}  // namespace mvdesc
