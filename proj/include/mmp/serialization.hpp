#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mmp/common.hpp"
#include "mmp/geometry.hpp"

namespace mmp {

enum class PartitionAxis { X, Y };

struct WindowSpec {
  int wx = 1, wy = 1, wz = 1;
  PartitionAxis axis = PartitionAxis::X;

  void validate() const {
    if (wx < 1 || wy < 1 || wz < 1)
      throw std::invalid_argument("WindowSpec: window dims must be >= 1");
  }
  std::int64_t cells() const {
    return static_cast<std::int64_t>(wx) * wy * wz;
  }
};

struct SerializationKey {
  std::int64_t window_index = 0;
  std::int64_t in_window_index = 0;
  std::int64_t global_index = 0;
};

namespace detail {

/// For Y-axis partition the x/y roles are swapped before any index math.
inline Vec3i axis_order(const Vec3i& c, PartitionAxis axis) {
  return axis == PartitionAxis::X ? c : Vec3i(c.y(), c.x(), c.z());
}

inline void check_nonnegative(const Vec3i& c) {
  if ((c.array() < 0).any())
    throw std::invalid_argument("serialization: negative coordinate (features must be pre-shifted)");
}

}  // namespace detail

inline Vec3i window_coords(const Vec3i& c, const WindowSpec& spec) {
  detail::check_nonnegative(c);
  const Vec3i s = detail::axis_order(c, spec.axis);
  return {s.x() / spec.wx, s.y() / spec.wy, s.z() / spec.wz};
}

inline std::int64_t in_window_index(const Vec3i& c, const WindowSpec& spec) {
  detail::check_nonnegative(c);
  const Vec3i s = detail::axis_order(c, spec.axis);
  return static_cast<std::int64_t>(s.x() % spec.wx) * spec.wy * spec.wz +
         static_cast<std::int64_t>(s.y() % spec.wy) * spec.wz + (s.z() % spec.wz);
}

/// Row-major linearization of window coordinates. With `counts_as_strides`
/// (default) strides are the per-axis window counts, which is injective for
/// any extent. The alternative uses the window sizes as strides, which
/// collides once window coordinates reach the window dims; kept selectable
/// for A/B comparison.
inline std::int64_t window_index(const Vec3i& wc, const WindowSpec& spec, const Vec3i& counts,
                                 bool counts_as_strides = true) {
  if ((wc.array() < 0).any() || wc.x() >= counts.x() || wc.y() >= counts.y() ||
      wc.z() >= counts.z())
    throw std::out_of_range("window_index: window coordinate outside counts");
  if (counts_as_strides)
    return static_cast<std::int64_t>(wc.x()) * counts.y() * counts.z() +
           static_cast<std::int64_t>(wc.y()) * counts.z() + wc.z();
  return static_cast<std::int64_t>(wc.x()) * spec.wy * spec.wz +
         static_cast<std::int64_t>(wc.y()) * spec.wz + wc.z();
}

inline SerializationKey serialization_key(const Vec3i& c, const WindowSpec& spec,
                                          const Vec3i& counts, bool counts_as_strides = true) {
  SerializationKey key;
  key.window_index = window_index(window_coords(c, spec), spec, counts, counts_as_strides);
  key.in_window_index = in_window_index(c, spec);
  key.global_index = key.window_index * spec.cells() + key.in_window_index;
  return key;
}

/// Window counts spanning the given coordinates (in partition-axis order).
inline Vec3i window_counts(const std::vector<Vec3i>& coords, const WindowSpec& spec) {
  Vec3i max_wc = Vec3i::Zero();
  for (const Vec3i& c : coords) max_wc = max_wc.cwiseMax(window_coords(c, spec));
  return max_wc + Vec3i::Ones();
}

struct SerializedMap {
  Mat features;                        // N x D, serialized order
  std::vector<Vec3i> coords;           // matching order
  std::vector<int> permutation;        // sequence position -> original index
  std::vector<SerializationKey> keys;  // matching order
};

/// Sorts features by (window index, in-window index). The sort is stable, so
/// coincident keys keep input order.
inline SerializedMap serialize(const SparseFeatureMap& sparse, const WindowSpec& spec,
                               bool counts_as_strides = true) {
  spec.validate();
  const Vec3i counts = window_counts(sparse.coords, spec);
  const int n = sparse.size();
  std::vector<SerializationKey> keys(n);
  for (int i = 0; i < n; ++i)
    keys[i] = serialization_key(sparse.coords[i], spec, counts, counts_as_strides);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
    if (keys[a].window_index != keys[b].window_index)
      return keys[a].window_index < keys[b].window_index;
    return keys[a].in_window_index < keys[b].in_window_index;
  });
  SerializedMap out;
  out.features = Mat(n, sparse.dim());
  out.coords.resize(n);
  out.keys.resize(n);
  out.permutation = perm;
  for (int i = 0; i < n; ++i) {
    out.features.row(i) = sparse.features.row(perm[i]);
    out.coords[i] = sparse.coords[perm[i]];
    out.keys[i] = keys[perm[i]];
  }
  return out;
}

struct GroupedSequence {
  int group_size = 0;
  Mat groups;                      // (K*group_size) x D, group-major
  std::vector<char> mask;          // K*group_size, 1 = real feature
  std::vector<int> permutation;    // sequence position -> original feature index

  int group_count() const {
    return group_size == 0 ? 0 : static_cast<int>(groups.rows()) / group_size;
  }
};

inline GroupedSequence group(const Mat& ordered, const std::vector<int>& permutation,
                             int group_size, const Vec& pad_value) {
  if (group_size < 1) throw std::invalid_argument("group: group_size must be >= 1");
  const int n = static_cast<int>(ordered.rows());
  const int k = (n + group_size - 1) / group_size;
  GroupedSequence out;
  out.group_size = group_size;
  out.groups = Mat(static_cast<std::int64_t>(std::max(k, 0)) * group_size, ordered.cols());
  out.mask.assign(out.groups.rows(), 0);
  out.permutation = permutation;
  for (int i = 0; i < out.groups.rows(); ++i) {
    if (i < n) {
      out.groups.row(i) = ordered.row(i);
      out.mask[i] = 1;
    } else {
      out.groups.row(i) = pad_value.transpose();
    }
  }
  return out;
}

/// Drops padding; inverse of group() on the ordered sequence.
inline Mat ungroup(const GroupedSequence& grouped) {
  int n = 0;
  for (char m : grouped.mask) n += m;
  Mat out(n, grouped.groups.cols());
  int j = 0;
  for (int i = 0; i < grouped.groups.rows(); ++i)
    if (grouped.mask[i]) out.row(j++) = grouped.groups.row(i);
  return out;
}

/// Sinusoidal encoding over the three axes, dim/3 channels per axis,
/// geometric frequency spacing with base 10000.
inline Vec positional_encoding(const Vec3i& c, int dim) {
  if (dim % 6 != 0) throw std::invalid_argument("positional_encoding: dim must be divisible by 6");
  const int per_axis = dim / 3;
  const int pairs = per_axis / 2;
  Vec out(dim);
  for (int a = 0; a < 3; ++a) {
    const double p = static_cast<double>(c(a));
    for (int i = 0; i < pairs; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / pairs);
      out(a * per_axis + i) = std::sin(p * freq);
      out(a * per_axis + pairs + i) = std::cos(p * freq);
    }
  }
  return out;
}

}  // namespace mmp
