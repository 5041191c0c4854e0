#pragma once

#include <cmath>
#include <vector>

#include "mmp/common.hpp"
#include "mmp/geometry.hpp"
#include "mmp/serialization.hpp"
#include "mmp/ssm.hpp"

namespace mmp {

enum class Modality { Lidar, Image };

/// Concatenation of features from both modalities in one coordinate space.
/// Every feature stays traceable to its source list through source_index.
struct FusedFeatureSet {
  Mat features;                     // M x D
  std::vector<Vec3i> coords;        // M
  std::vector<Modality> modality;   // M
  std::vector<int> source_index;    // M, index into the originating modality's list
  std::vector<int> camera_index;    // M, for image features; -1 for lidar

  int size() const { return static_cast<int>(coords.size()); }
};

/// LiDAR-to-Image branch projection: voxel centers are projected, in-bounds
/// positive-depth voxels keep their feature and take integer pixel-grid
/// coordinates (feature-map resolution, z = 0). Image features are indexed
/// by their pixel cell.
inline FusedFeatureSet lidar_to_image_fuse(const SparseFeatureMap& voxels, const GridSpec& grid,
                                           const CameraModel& cam, const FeatureMap2D& image_feats,
                                           int camera_index = 0) {
  FusedFeatureSet out;
  std::vector<int> kept;
  std::vector<Vec3i> kept_px;
  for (int i = 0; i < voxels.size(); ++i) {
    const PixelProjection pp = project_point(grid.cell_center(voxels.coords[i]), cam);
    if (!pp.valid) continue;
    if (pp.u < 0 || pp.u >= cam.width || pp.v < 0 || pp.v >= cam.height) continue;
    const int px = static_cast<int>(std::lround(pp.u / image_feats.scale));
    const int py = static_cast<int>(std::lround(pp.v / image_feats.scale));
    if (px < 0 || px >= image_feats.width || py < 0 || py >= image_feats.height) continue;
    kept.push_back(i);
    kept_px.push_back({px, py, 0});
  }
  const int n_img = image_feats.height * image_feats.width;
  out.features = Mat(kept.size() + n_img, voxels.dim());
  for (size_t j = 0; j < kept.size(); ++j) {
    out.features.row(j) = voxels.features.row(kept[j]);
    out.coords.push_back(kept_px[j]);
    out.modality.push_back(Modality::Lidar);
    out.source_index.push_back(kept[j]);
    out.camera_index.push_back(-1);
  }
  for (int y = 0; y < image_feats.height; ++y)
    for (int x = 0; x < image_feats.width; ++x) {
      out.features.row(out.size()) = image_feats.at(y, x);
      out.coords.push_back({x, y, 0});
      out.modality.push_back(Modality::Image);
      out.source_index.push_back(y * image_feats.width + x);
      out.camera_index.push_back(camera_index);
    }
  return out;
}

struct AssociationConfig {
  double radius = 4.0;          // pixels at feature-map scale
  bool neighbors26 = false;     // 6-connected empty neighbors by default
};

namespace detail {

struct Candidate {
  Vec3i cell;
  double u, v, depth;
};

/// Non-empty voxels plus their immediate empty neighbors, projected to the
/// feature-map pixel grid. Only valid in-image projections survive.
inline std::vector<Candidate> association_candidates(const SparseFeatureMap& voxels,
                                                     const GridSpec& grid, const CameraModel& cam,
                                                     double scale, bool neighbors26) {
  std::unordered_map<std::int64_t, char> occupied;
  const std::int64_t sy = grid.extent.z();
  const std::int64_t sx = static_cast<std::int64_t>(grid.extent.y()) * grid.extent.z();
  const auto key_of = [&](const Vec3i& c) { return c.x() * sx + c.y() * sy + c.z(); };
  for (const Vec3i& c : voxels.coords) occupied[key_of(c)] = 1;

  std::vector<Vec3i> cells;
  std::unordered_map<std::int64_t, char> added;
  const auto push_cell = [&](const Vec3i& c) {
    if ((c.array() < 0).any() || c.x() >= grid.extent.x() || c.y() >= grid.extent.y() ||
        c.z() >= grid.extent.z())
      return;
    const std::int64_t k = key_of(c);
    if (added.count(k)) return;
    added[k] = 1;
    cells.push_back(c);
  };
  for (const Vec3i& c : voxels.coords) {
    push_cell(c);
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
          if (manhattan == 0) continue;
          if (!neighbors26 && manhattan != 1) continue;
          const Vec3i nb = c + Vec3i(dx, dy, dz);
          if (!occupied.count(key_of(nb))) push_cell(nb);
        }
  }
  std::vector<Candidate> out;
  for (const Vec3i& c : cells) {
    const PixelProjection pp = project_point(grid.cell_center(c), cam);
    if (!pp.valid) continue;
    out.push_back({c, pp.u / scale, pp.v / scale, pp.depth});
  }
  return out;
}

}  // namespace detail

/// Image-to-LiDAR branch association: each image feature looks for its three
/// nearest projected candidates within the radius and takes the 3D cell of
/// the minimum-depth one. Features with no candidate in radius are excluded.
/// Ties on pixel distance break toward the lower candidate index.
inline FusedFeatureSet image_to_lidar_associate(const SparseFeatureMap& voxels,
                                                const GridSpec& grid, const CameraModel& cam,
                                                const FeatureMap2D& image_feats,
                                                const AssociationConfig& cfg = {},
                                                int camera_index = 0) {
  if (cfg.radius <= 0) throw std::invalid_argument("image_to_lidar_associate: radius must be > 0");
  const auto candidates =
      detail::association_candidates(voxels, grid, cam, image_feats.scale, cfg.neighbors26);

  FusedFeatureSet out;
  std::vector<std::pair<int, Vec3i>> assoc;  // (image cell index, assigned cell)
  for (int y = 0; y < image_feats.height; ++y)
    for (int x = 0; x < image_feats.width; ++x) {
      // Up to three nearest candidates within radius, then min depth.
      int best[3] = {-1, -1, -1};
      double best_d[3] = {0, 0, 0};
      for (size_t ci = 0; ci < candidates.size(); ++ci) {
        const double du = candidates[ci].u - x, dv = candidates[ci].v - y;
        const double dist = std::sqrt(du * du + dv * dv);
        if (dist > cfg.radius) continue;
        for (int s = 0; s < 3; ++s) {
          if (best[s] < 0 || dist < best_d[s]) {
            for (int t = 2; t > s; --t) {
              best[t] = best[t - 1];
              best_d[t] = best_d[t - 1];
            }
            best[s] = static_cast<int>(ci);
            best_d[s] = dist;
            break;
          }
        }
      }
      if (best[0] < 0) continue;
      int chosen = best[0];
      for (int s = 1; s < 3; ++s)
        if (best[s] >= 0 && candidates[best[s]].depth < candidates[chosen].depth)
          chosen = best[s];
      assoc.emplace_back(y * image_feats.width + x, candidates[chosen].cell);
    }

  out.features = Mat(voxels.size() + assoc.size(), voxels.dim());
  for (int i = 0; i < voxels.size(); ++i) {
    out.features.row(i) = voxels.features.row(i);
    out.coords.push_back(voxels.coords[i]);
    out.modality.push_back(Modality::Lidar);
    out.source_index.push_back(i);
    out.camera_index.push_back(-1);
  }
  for (const auto& [img_idx, cell] : assoc) {
    out.features.row(out.size()) =
        image_feats.values.row(img_idx);
    out.coords.push_back(cell);
    out.modality.push_back(Modality::Image);
    out.source_index.push_back(img_idx);
    out.camera_index.push_back(camera_index);
  }
  return out;
}

/// One MM-Block: positional encoding, serialize along the spec axis, group,
/// BiMamba, then restore the original feature order. Coordinates and tags
/// are untouched.
inline FusedFeatureSet mm_block_forward(const FusedFeatureSet& fused, const WindowSpec& spec,
                                        int group_size, const BimambaParams& params) {
  FusedFeatureSet out = fused;
  const int n = fused.size();
  if (n == 0) return out;
  SparseFeatureMap tmp;
  tmp.features = fused.features;
  tmp.coords = fused.coords;
  const int dim = static_cast<int>(fused.features.cols());
  for (int i = 0; i < n; ++i)
    tmp.features.row(i) += positional_encoding(fused.coords[i], dim).transpose();
  const SerializedMap ser = serialize(tmp, spec);
  const GroupedSequence grouped =
      group(ser.features, ser.permutation, group_size, Vec::Zero(dim));
  const GroupedSequence encoded = bimamba_forward(grouped, params);
  const Mat ordered = ungroup(encoded);
  for (int i = 0; i < n; ++i) out.features.row(ser.permutation[i]) = ordered.row(i);
  return out;
}

struct MmeConfig {
  int blocks = 4;                // MM-Blocks per branch, alternating X/Y partition
  WindowSpec window;             // axis field is overridden per block
  int group_size = 256;
  AssociationConfig association;
  int state_dim = 16;
  std::uint64_t seed = 1234;
};

struct MmeOutput {
  SparseFeatureMap voxels;
  std::vector<FeatureMap2D> image_feats;  // per camera
};

/// Runs the Image-to-LiDAR branch (3D space; updates voxel features) and the
/// LiDAR-to-Image branch per camera (2D space; updates image features).
/// Image features that found no association pass through unchanged.
inline MmeOutput mme_forward(const SparseFeatureMap& voxels,
                             const std::vector<FeatureMap2D>& image_feats,
                             const std::vector<CameraModel>& cameras, const GridSpec& grid,
                             const MmeConfig& cfg) {
  if (image_feats.size() != cameras.size())
    throw std::invalid_argument("mme_forward: one feature map per camera required");
  const int dim = voxels.dim();
  for (const auto& im : image_feats)
    if (im.dim != dim) throw std::invalid_argument("mme_forward: feature dim mismatch across modalities");

  std::vector<BimambaParams> block_params;
  {
    Rng rng(cfg.seed);
    for (int b = 0; b < cfg.blocks; ++b)
      block_params.push_back(BimambaParams::seeded(dim, rng.next_u64(), cfg.state_dim));
  }
  const auto run_branch = [&](FusedFeatureSet fused, bool planar) {
    for (int b = 0; b < cfg.blocks; ++b) {
      WindowSpec spec = cfg.window;
      spec.axis = (b % 2 == 0) ? PartitionAxis::X : PartitionAxis::Y;
      if (planar) spec.wz = 1;
      fused = mm_block_forward(fused, spec, cfg.group_size, block_params[b]);
    }
    return fused;
  };

  MmeOutput out;
  out.voxels = voxels;
  out.image_feats = image_feats;

  // Image-to-LiDAR branch: all cameras' associated image features join the
  // voxels in 3D space; voxel updates are read back by source index.
  {
    FusedFeatureSet fused;
    fused.features = Mat(voxels.size(), dim);
    for (int i = 0; i < voxels.size(); ++i) {
      fused.features.row(i) = voxels.features.row(i);
      fused.coords.push_back(voxels.coords[i]);
      fused.modality.push_back(Modality::Lidar);
      fused.source_index.push_back(i);
      fused.camera_index.push_back(-1);
    }
    for (size_t j = 0; j < cameras.size(); ++j) {
      const FusedFeatureSet cam_set = image_to_lidar_associate(
          voxels, grid, cameras[j], image_feats[j], cfg.association, static_cast<int>(j));
      for (int i = 0; i < cam_set.size(); ++i) {
        if (cam_set.modality[i] != Modality::Image) continue;
        fused.features.conservativeResize(fused.features.rows() + 1, Eigen::NoChange);
        fused.features.row(fused.features.rows() - 1) = cam_set.features.row(i);
        fused.coords.push_back(cam_set.coords[i]);
        fused.modality.push_back(Modality::Image);
        fused.source_index.push_back(cam_set.source_index[i]);
        fused.camera_index.push_back(static_cast<int>(j));
      }
    }
    const FusedFeatureSet encoded = run_branch(fused, false);
    for (int i = 0; i < encoded.size(); ++i)
      if (encoded.modality[i] == Modality::Lidar)
        out.voxels.features.row(encoded.source_index[i]) = encoded.features.row(i);
  }

  // LiDAR-to-Image branch: per camera in its own image plane.
  for (size_t j = 0; j < cameras.size(); ++j) {
    const FusedFeatureSet fused = lidar_to_image_fuse(voxels, grid, cameras[j], image_feats[j],
                                                      static_cast<int>(j));
    const FusedFeatureSet encoded = run_branch(fused, true);
    for (int i = 0; i < encoded.size(); ++i)
      if (encoded.modality[i] == Modality::Image)
        out.image_feats[j].values.row(encoded.source_index[i]) = encoded.features.row(i);
  }
  return out;
}

}  // namespace mmp
