#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mmp/common.hpp"

namespace mmp {

// ---------------------------------------------------------------------------
// Rigid transforms

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_yaw(double yaw, const Vec3& t = Vec3::Zero()) {
    RigidTransform out;
    const double c = std::cos(yaw), s = std::sin(yaw);
    out.rotation << c, -s, 0, s, c, 0, 0, 0, 1;
    out.translation = t;
    return out;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform out;
    out.rotation = rotation.transpose();
    out.translation = -(rotation.transpose() * translation);
    return out;
  }

  RigidTransform compose(const RigidTransform& other) const {
    // this ∘ other: apply `other` first.
    RigidTransform out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  bool is_valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
    return err.cwiseAbs().maxCoeff() < tol && std::abs(rotation.determinant() - 1.0) < tol;
  }
};

// ---------------------------------------------------------------------------
// Camera model

struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();   // pixels
  RigidTransform extrinsics;            // sensor frame -> camera frame
  int width = 0;
  int height = 0;

  static CameraModel pinhole(double fx, double fy, double cx, double cy,
                             int width, int height,
                             const RigidTransform& extrinsics = RigidTransform::identity()) {
    CameraModel cam;
    cam.intrinsics << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    cam.extrinsics = extrinsics;
    cam.width = width;
    cam.height = height;
    return cam;
  }

  /// Row-major flattening of intrinsics (9) and extrinsics as 3x4 (12).
  Vec flatten_calibration() const {
    Vec out(21);
    int k = 0;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out(k++) = intrinsics(r, c);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out(k++) = extrinsics.rotation(r, c);
      out(k++) = extrinsics.translation(r);
    }
    return out;
  }
};

struct PixelProjection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool valid = false;
};

inline PixelProjection project_point(const Vec3& p, const CameraModel& cam) {
  PixelProjection out;
  if (!p.allFinite()) return out;
  const Vec3 pc = cam.extrinsics.apply(p);
  if (pc.z() <= 0.0) {
    out.depth = pc.z();
    return out;
  }
  const Vec3 uvw = cam.intrinsics * pc;
  out.u = uvw.x() / pc.z();
  out.v = uvw.y() / pc.z();
  out.depth = pc.z();
  out.valid = true;
  return out;
}

/// Projects each point; per-point invalid flags, never a global failure.
/// No image-bounds filtering here, callers filter.
inline std::vector<PixelProjection> project_points(std::span<const Vec3> points,
                                                   const CameraModel& cam) {
  std::vector<PixelProjection> out(points.size());
  for (size_t i = 0; i < points.size(); ++i) out[i] = project_point(points[i], cam);
  return out;
}

/// Inverse of project_point given the camera-frame depth.
inline Vec3 back_project(double u, double v, double depth, const CameraModel& cam) {
  const Vec3 ray = cam.intrinsics.inverse() * Vec3(u, v, 1.0);
  return cam.extrinsics.inverse().apply(ray * depth);
}

// ---------------------------------------------------------------------------
// Dense 2D feature maps

struct FeatureMap2D {
  int height = 0;
  int width = 0;
  int dim = 0;
  double scale = 1.0;          // downsampling ratio relative to nominal image size
  Mat values;                  // (height*width) x dim, row-major cells

  static FeatureMap2D zeros(int height, int width, int dim, double scale = 1.0) {
    FeatureMap2D m;
    m.height = height;
    m.width = width;
    m.dim = dim;
    m.scale = scale;
    m.values = Mat::Zero(height * width, dim);
    return m;
  }

  Mat::RowXpr at(int y, int x) { return values.row(y * width + x); }
  Eigen::RowVectorXd at(int y, int x) const { return values.row(y * width + x); }
};

/// 4-neighbor bilinear blend. Samples fully outside [0,W-1]x[0,H-1] return
/// zero; partially outside clamp to the border.
inline Vec bilinear_sample(const FeatureMap2D& map, double u, double v) {
  Vec out = Vec::Zero(map.dim);
  if (u < 0.0 || u > static_cast<double>(map.width - 1) ||
      v < 0.0 || v > static_cast<double>(map.height - 1) || !std::isfinite(u) ||
      !std::isfinite(v))
    return out;
  const double x0f = std::floor(u), y0f = std::floor(v);
  const double wx = u - x0f, wy = v - y0f;
  const int x0 = static_cast<int>(x0f), y0 = static_cast<int>(y0f);
  struct Tap { int x, y; double w; };
  const Tap taps[4] = {{x0, y0, (1 - wx) * (1 - wy)},
                       {x0 + 1, y0, wx * (1 - wy)},
                       {x0, y0 + 1, (1 - wx) * wy},
                       {x0 + 1, y0 + 1, wx * wy}};
  // Taps straddling the border (sample exactly on it) clamp inward.
  for (const Tap& t : taps) {
    if (t.w == 0.0) continue;
    const int cx = std::clamp(t.x, 0, map.width - 1);
    const int cy = std::clamp(t.y, 0, map.height - 1);
    out += t.w * map.at(cy, cx).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Voxel grid

struct GridSpec {
  Vec3 origin = Vec3::Zero();       // meters, minimum corner
  Vec3 cell_size = Vec3::Ones();    // meters per cell
  Vec3i extent = Vec3i::Ones();     // cells per axis

  void validate() const {
    if (!(cell_size.array() > 0).all())
      throw std::invalid_argument("GridSpec: cell_size must be strictly positive");
    if (!(extent.array() >= 1).all())
      throw std::invalid_argument("GridSpec: extent must be >= 1 per axis");
  }

  std::optional<Vec3i> cell_of(const Vec3& p) const {
    Vec3i c;
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p(a) - origin(a)) / cell_size(a));
      if (f < 0 || f >= static_cast<double>(extent(a))) return std::nullopt;
      c(a) = static_cast<int>(f);
    }
    return c;
  }

  Vec3 cell_center(const Vec3i& c) const {
    return origin + ((c.cast<double>().array() + 0.5) * cell_size.array()).matrix();
  }
};

struct SparseFeatureMap {
  Mat features;                 // N x D
  std::vector<Vec3i> coords;    // N integer cell coordinates

  int size() const { return static_cast<int>(coords.size()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

struct LidarPoint {
  Vec3 position = Vec3::Zero();
  double intensity = 0.0;
};

/// Per-cell statistics (count, centroid offset from cell center, mean
/// intensity) pushed through a fixed seeded linear projection to `dim`
/// channels. Points outside the extent are dropped.
inline SparseFeatureMap voxelize(std::span<const LidarPoint> points, const GridSpec& grid,
                                 int dim, std::uint64_t seed = 7) {
  grid.validate();
  struct CellStats {
    int count = 0;
    Vec3 sum = Vec3::Zero();
    double intensity_sum = 0.0;
  };
  // Dense linear index -> slot; insertion order fixes output order.
  std::vector<Vec3i> order;
  std::vector<CellStats> stats;
  std::unordered_map<std::int64_t, int> slot;
  const std::int64_t sy = grid.extent.z();
  const std::int64_t sx = static_cast<std::int64_t>(grid.extent.y()) * grid.extent.z();
  for (const LidarPoint& p : points) {
    const auto c = grid.cell_of(p.position);
    if (!c) continue;
    const std::int64_t key = c->x() * sx + c->y() * sy + c->z();
    auto [it, inserted] = slot.try_emplace(key, static_cast<int>(order.size()));
    if (inserted) {
      order.push_back(*c);
      stats.emplace_back();
    }
    CellStats& s = stats[it->second];
    s.count += 1;
    s.sum += p.position;
    s.intensity_sum += p.intensity;
  }
  Rng rng(seed);
  const Mat proj = random_matrix(dim, 5, rng, 1.0 / std::sqrt(5.0));
  SparseFeatureMap out;
  out.coords = order;
  out.features = Mat::Zero(order.size(), dim);
  for (size_t i = 0; i < order.size(); ++i) {
    const CellStats& s = stats[i];
    const Vec3 centroid = s.sum / s.count;
    const Vec3 off = centroid - grid.cell_center(order[i]);
    Vec stat(5);
    stat << static_cast<double>(s.count), off.x(), off.y(), off.z(),
        s.intensity_sum / s.count;
    out.features.row(i) = (proj * stat).transpose();
  }
  return out;
}

/// Dense X-by-Y BEV map; cells stacked along z reduce by element-wise max.
inline FeatureMap2D bev_scatter(const SparseFeatureMap& sparse, const GridSpec& grid) {
  grid.validate();
  FeatureMap2D bev = FeatureMap2D::zeros(grid.extent.y(), grid.extent.x(), sparse.dim());
  std::vector<char> touched(static_cast<size_t>(grid.extent.x()) * grid.extent.y(), 0);
  for (int i = 0; i < sparse.size(); ++i) {
    const Vec3i& c = sparse.coords[i];
    if ((c.array() < 0).any() || c.x() >= grid.extent.x() || c.y() >= grid.extent.y() ||
        c.z() >= grid.extent.z())
      throw std::out_of_range("bev_scatter: coordinate out of extent at feature " +
                              std::to_string(i) + " (" + std::to_string(c.x()) + "," +
                              std::to_string(c.y()) + "," + std::to_string(c.z()) + ")");
    const size_t cell = static_cast<size_t>(c.y()) * grid.extent.x() + c.x();
    auto row = bev.values.row(cell);
    if (!touched[cell]) {
      row = sparse.features.row(i);
      touched[cell] = 1;
    } else {
      row = row.cwiseMax(sparse.features.row(i));
    }
  }
  return bev;
}

}  // namespace mmp
