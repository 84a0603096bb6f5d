#pragma once

// Point-cloud container, kd-tree queries, normal estimation, local reference
// frames, and per-point sphere radii.

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvdesc/common.hpp"

namespace mvdesc {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;   // empty or one per point, unit length
  std::vector<double> radii;   // empty or one per point, strictly positive
  std::optional<Vec3> sensor_origin;  // recorded capture position, if known

  std::size_t size() const { return points.size(); }
  bool has_normals() const { return !normals.empty(); }
  bool has_radii() const { return !radii.empty(); }
};

// Throws if the cloud breaks one of its structural invariants.
inline void validate(const PointCloud& cloud) {
  for (const Vec3& p : cloud.points) {
    check(p.allFinite(), "point cloud: non-finite coordinate");
  }
  if (cloud.has_normals()) {
    check(cloud.normals.size() == cloud.points.size(),
          "point cloud: normal count mismatch");
    for (const Vec3& n : cloud.normals) {
      check(n.allFinite() && std::fabs(n.norm() - 1.0) <= 1e-6,
            "point cloud: normal not unit length");
    }
  }
  if (cloud.has_radii()) {
    check(cloud.radii.size() == cloud.points.size(),
          "point cloud: radius count mismatch");
    for (double r : cloud.radii) {
      check(std::isfinite(r) && r > 0.0, "point cloud: radius not positive");
    }
  }
}

// Rigid local frame at a keypoint. rotation columns are the frame's x/y/z
// axes expressed in world coordinates; z is the keypoint normal.
struct LocalFrame {
  Vec3 origin = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();

  Vec3 to_local(const Vec3& q) const { return rotation.transpose() * (q - origin); }
  Vec3 to_world(const Vec3& q) const { return rotation * q + origin; }
};

// kd-tree over cloud positions. Results are exact: k nearest with ties broken
// by ascending point index, and inclusive radius search in ascending index
// order. Immutable after construction.
class SpatialIndex {
 public:
  explicit SpatialIndex(const PointCloud& cloud) : pts_(cloud.points) {
    check(!pts_.empty(), "spatial index: empty cloud");
    order_.resize(pts_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    nodes_.reserve(2 * pts_.size() / kLeafSize + 2);
    root_ = build(0, static_cast<int>(order_.size()));
  }

  // Indices of the k nearest points, sorted by (distance, index). k beyond N
  // returns all N points.
  std::vector<int> knn(const Vec3& center, int k) const {
    check(k >= 1, "knn: k must be >= 1");
    k = std::min<int>(k, static_cast<int>(pts_.size()));
    // max-heap keyed by (squared distance, index): top is the current worst,
    // and among equal distances the larger index is evicted first.
    std::priority_queue<std::pair<double, int>> heap;
    knn_walk(root_, center, k, heap);
    std::vector<int> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      out[i] = heap.top().second;
      heap.pop();
    }
    return out;
  }

  // Indices of all points within r of center (inclusive), ascending.
  std::vector<int> radius_search(const Vec3& center, double r) const {
    check(r >= 0.0, "radius_search: negative radius");
    std::vector<int> out;
    radius_walk(root_, center, r * r, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  std::size_t size() const { return pts_.size(); }

 private:
  static constexpr int kLeafSize = 16;

  struct Node {
    int axis = -1;        // -1 marks a leaf
    double split = 0.0;
    int begin = 0, end = 0;  // leaf range into order_
    int left = -1, right = -1;
  };

  int build(int begin, int end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    Vec3 lo = pts_[order_[begin]], hi = lo;
    for (int i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(pts_[order_[i]]);
      hi = hi.cwiseMax(pts_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid,
                     order_.begin() + end, [&](int a, int b) {
                       return pts_[a][axis] < pts_[b][axis];
                     });
    node.axis = axis;
    node.split = pts_[order_[mid]][axis];
    nodes_.push_back(node);
    const int self = static_cast<int>(nodes_.size()) - 1;
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[self].left = l;
    nodes_[self].right = r;
    return self;
  }

  void knn_walk(int ni, const Vec3& c, int k,
                std::priority_queue<std::pair<double, int>>& heap) const {
    const Node& node = nodes_[static_cast<std::size_t>(ni)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[static_cast<std::size_t>(i)];
        const std::pair<double, int> cand{(pts_[idx] - c).squaredNorm(), idx};
        if (static_cast<int>(heap.size()) < k) {
          heap.push(cand);
        } else if (cand < heap.top()) {
          heap.pop();
          heap.push(cand);
        }
      }
      return;
    }
    const double delta = c[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    knn_walk(near, c, k, heap);
    // Visit the far side unless it provably cannot improve the heap; equality
    // still descends because a tie with a lower index must win.
    if (static_cast<int>(heap.size()) < k || delta * delta <= heap.top().first) {
      knn_walk(far, c, k, heap);
    }
  }

  void radius_walk(int ni, const Vec3& c, double r2, std::vector<int>& out) const {
    const Node& node = nodes_[static_cast<std::size_t>(ni)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[static_cast<std::size_t>(i)];
        if ((pts_[idx] - c).squaredNorm() <= r2) out.push_back(idx);
      }
      return;
    }
    const double delta = c[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    radius_walk(near, c, r2, out);
    if (delta * delta <= r2) radius_walk(far, c, r2, out);
  }

  std::vector<Vec3> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Per-point normals from the smallest covariance eigenvector of each point's
// k-neighborhood (the point itself counts as its own nearest neighbor), with
// signs flipped toward the orientation reference.
inline PointCloud estimate_normals(const PointCloud& cloud, int k,
                                   const Vec3& orientation_reference) {
  check(k >= 3, "estimate_normals: k must be >= 3");
  check(cloud.size() > static_cast<std::size_t>(k),
        "estimate_normals: need more than k points, have " +
            std::to_string(cloud.size()));
  const SpatialIndex index(cloud);
  PointCloud out = cloud;
  out.normals.assign(cloud.size(), Vec3::Zero());
  parallel_for(static_cast<int>(cloud.size()), [&](int i) {
    const auto nbrs = index.knn(cloud.points[static_cast<std::size_t>(i)], k);
    Vec3 mean = Vec3::Zero();
    for (int j : nbrs) mean += cloud.points[static_cast<std::size_t>(j)];
    mean /= static_cast<double>(nbrs.size());
    Mat3 cov = Mat3::Zero();
    for (int j : nbrs) {
      const Vec3 d = cloud.points[static_cast<std::size_t>(j)] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    Vec3 n = eig.eigenvectors().col(0);  // smallest eigenvalue
    const Vec3 toward =
        orientation_reference - cloud.points[static_cast<std::size_t>(i)];
    if (n.dot(toward) < 0.0) n = -n;
    out.normals[static_cast<std::size_t>(i)] = n;
  });
  return out;
}

// Local frame with z along the normal and x/y fixed by a shared up vector.
// A (nearly) parallel up vector is nudged before the cross products.
inline LocalFrame build_lrf(const Vec3& keypoint, const Vec3& normal,
                            const Vec3& up) {
  check(std::fabs(normal.norm() - 1.0) <= 1e-3, "build_lrf: normal not unit");
  check(std::fabs(up.norm() - 1.0) <= 1e-3, "build_lrf: up not unit");
  const Vec3 z = normal;
  Vec3 u = up;
  if (std::fabs(u.dot(z)) > 1.0 - 1e-6) {
    u.x() += 1e-3;
    u.normalize();
    if (std::fabs(u.dot(z)) > 1.0 - 1e-6) {
      // normal lies along the perturbed axis; nudge a second coordinate
      u.y() += 1e-3;
      u.normalize();
    }
  }
  const Vec3 x = u.cross(z).normalized();
  const Vec3 y = z.cross(x);
  LocalFrame f;
  f.origin = keypoint;
  f.rotation.col(0) = x;
  f.rotation.col(1) = y;
  f.rotation.col(2) = z;
  return f;
}

// Local frame whose azimuth comes from the shape itself: z is the stored
// normal and x follows the dominant tangent-plane direction of the k-nearest
// neighborhood, with its sign fixed by the distribution's skewness along that
// direction. Frames at corresponding points of differently posed captures of
// one surface therefore agree (up to sampling jitter, and up to a half-turn
// when the skewness vanishes). Neighborhoods with no dominant direction fall
// back to the shared up reference.
inline LocalFrame intrinsic_lrf(const PointCloud& cloud, int keypoint, int k,
                                const Vec3& up) {
  check(keypoint >= 0 && static_cast<std::size_t>(keypoint) < cloud.size(),
        "intrinsic_lrf: index out of range");
  check(cloud.has_normals(), "intrinsic_lrf: cloud has no normals");
  check(k >= 1, "intrinsic_lrf: k must be >= 1");
  const Vec3 p = cloud.points[static_cast<std::size_t>(keypoint)];
  const Vec3 z = cloud.normals[static_cast<std::size_t>(keypoint)];
  const SpatialIndex index(cloud);
  const auto nbrs = index.knn(p, k);
  std::vector<Vec3> tangents;
  tangents.reserve(nbrs.size());
  Mat3 cov = Mat3::Zero();
  for (int j : nbrs) {
    const Vec3 d = cloud.points[static_cast<std::size_t>(j)] - p;
    const Vec3 t = d - d.dot(z) * z;
    cov += t * t.transpose();
    tangents.push_back(t);
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  const double lambda_mid = eig.eigenvalues()[1];
  const double lambda_max = eig.eigenvalues()[2];
  // a dominant direction must clearly beat the perpendicular one
  if (lambda_max > 1e-18 && lambda_max > 1.6 * lambda_mid) {
    Vec3 x = eig.eigenvectors().col(2);
    x -= x.dot(z) * z;
    if (x.squaredNorm() > 1e-24) {
      x.normalize();
      double skew = 0.0;
      for (const Vec3& t : tangents) {
        const double s = t.dot(x);
        skew += s * s * s;
      }
      if (skew < 0.0) x = -x;
      LocalFrame f;
      f.origin = p;
      f.rotation.col(0) = x;
      f.rotation.col(1) = z.cross(x);
      f.rotation.col(2) = z;
      return f;
    }
  }
  return build_lrf(p, z, up);
}

struct FixedRadius {
  double r = 0.0;
};

struct AdaptiveRadius {
  int k = 8;
  double scale = 1.0;
};

inline PointCloud compute_radii(const PointCloud& cloud, FixedRadius mode) {
  check(mode.r > 0.0, "compute_radii: fixed radius must be positive");
  PointCloud out = cloud;
  out.radii.assign(cloud.size(), mode.r);
  return out;
}

// scale x mean distance to the k nearest other points.
inline PointCloud compute_radii(const PointCloud& cloud, AdaptiveRadius mode) {
  check(mode.k >= 1, "compute_radii: k must be >= 1");
  check(mode.scale > 0.0, "compute_radii: scale must be positive");
  check(cloud.size() > static_cast<std::size_t>(mode.k),
        "compute_radii: need more than k points, have " +
            std::to_string(cloud.size()));
  const SpatialIndex index(cloud);
  PointCloud out = cloud;
  out.radii.assign(cloud.size(), 0.0);
  parallel_for(static_cast<int>(cloud.size()), [&](int i) {
    // query k+1 and drop the point itself
    auto nbrs = index.knn(cloud.points[static_cast<std::size_t>(i)], mode.k + 1);
    const auto self = std::find(nbrs.begin(), nbrs.end(), i);
    if (self != nbrs.end()) {
      nbrs.erase(self);
    } else {
      nbrs.pop_back();
    }
    double mean = 0.0;
    for (int j : nbrs) {
      mean += (cloud.points[static_cast<std::size_t>(j)] -
               cloud.points[static_cast<std::size_t>(i)])
                  .norm();
    }
    mean /= static_cast<double>(nbrs.size());
    out.radii[static_cast<std::size_t>(i)] = mode.scale * mean;
  });
  return out;
}

// Points within crop_radius of the frame origin, expressed in frame
// coordinates. Normals rotate along; radii copy; the capture origin does not
// survive the change of coordinates.
inline PointCloud crop_local(const PointCloud& cloud, const LocalFrame& frame,
                             double crop_radius) {
  check(crop_radius > 0.0, "crop_local: crop_radius must be positive");
  PointCloud out;
  const double r2 = crop_radius * crop_radius;
  const Mat3 rt = frame.rotation.transpose();
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 d = cloud.points[i] - frame.origin;
    if (d.squaredNorm() > r2) continue;
    out.points.push_back(rt * d);
    if (cloud.has_normals()) out.normals.push_back(rt * cloud.normals[i]);
    if (cloud.has_radii()) out.radii.push_back(cloud.radii[i]);
  }
  return out;
}

}  // namespace mvdesc
