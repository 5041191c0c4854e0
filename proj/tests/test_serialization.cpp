#include <algorithm>
#include <cstring>
#include <set>
#include <string>
#include <unordered_set>

#include <catch2/catch_amalgamated.hpp>

#include "mmp/serialization.hpp"

using namespace mmp;

namespace {

/// Independent lexicographic oracle: sort by (window coords, in-window
/// offsets) in partition priority order, stably.
std::vector<int> oracle_permutation(const std::vector<Vec3i>& coords, const WindowSpec& spec) {
  struct Key {
    std::array<int, 6> v;
  };
  std::vector<Key> keys(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) {
    Vec3i c = coords[i];
    if (spec.axis == PartitionAxis::Y) std::swap(c.x(), c.y());
    keys[i].v = {c.x() / spec.wx, c.y() / spec.wy, c.z() / spec.wz,
                 c.x() % spec.wx, c.y() % spec.wy, c.z() % spec.wz};
  }
  std::vector<int> perm(coords.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int a, int b) { return keys[a].v < keys[b].v; });
  return perm;
}

SparseFeatureMap random_sparse(Rng& rng, int n, int dim, int coord_max) {
  SparseFeatureMap out;
  out.features = random_matrix(n, dim, rng, 1.0);
  for (int i = 0; i < n; ++i)
    out.coords.push_back({rng.uniform_int(0, coord_max), rng.uniform_int(0, coord_max),
                          rng.uniform_int(0, coord_max)});
  return out;
}

}  // namespace

TEST_CASE("window coordinate examples", "[serialization]") {
  WindowSpec spec{4, 4, 4, PartitionAxis::X};
  REQUIRE(window_coords({5, 3, 9}, spec) == Vec3i(1, 0, 2));
  REQUIRE(window_coords({0, 0, 0}, spec) == Vec3i(0, 0, 0));
  spec.axis = PartitionAxis::Y;
  REQUIRE(window_coords({5, 3, 9}, spec) == Vec3i(0, 1, 2));
  REQUIRE_THROWS(window_coords({-1, 0, 0}, spec));
}

TEST_CASE("in-window index", "[serialization]") {
  const WindowSpec spec{4, 4, 4, PartitionAxis::X};
  REQUIRE(in_window_index({5, 3, 9}, spec) == 29);
  REQUIRE(in_window_index({4, 0, 8}, spec) == 0);

  SECTION("bijection over one window") {
    std::set<std::int64_t> seen;
    for (int x = 0; x < 4; ++x)
      for (int y = 0; y < 4; ++y)
        for (int z = 0; z < 4; ++z) seen.insert(in_window_index({x, y, z}, spec));
    REQUIRE(seen.size() == 64);
    REQUIRE(*seen.begin() == 0);
    REQUIRE(*seen.rbegin() == 63);
  }
}

TEST_CASE("window index linearization", "[serialization]") {
  const WindowSpec spec{4, 4, 4, PartitionAxis::X};
  const Vec3i counts(3, 3, 3);
  REQUIRE(window_index({0, 0, 0}, spec, counts) == 0);
  REQUIRE(window_index({1, 0, 2}, spec, counts) == 11);
  REQUIRE_THROWS(window_index({3, 0, 0}, spec, counts));

  SECTION("bijection over the window grid") {
    std::set<std::int64_t> seen;
    for (int x = 0; x < 3; ++x)
      for (int y = 0; y < 3; ++y)
        for (int z = 0; z < 3; ++z) seen.insert(window_index({x, y, z}, spec, counts));
    REQUIRE(seen.size() == 27);
    REQUIRE(*seen.rbegin() == 26);
  }
  SECTION("sizes-as-strides variant kept for comparison") {
    // The literal form collides once window coords reach the window dims.
    REQUIRE(window_index({1, 0, 2}, spec, counts, false) == 1 * 16 + 2);
  }
}

TEST_CASE("serialize ordering example", "[serialization]") {
  SparseFeatureMap sparse;
  sparse.coords = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {4, 0, 0}};
  sparse.features = Mat::Identity(4, 4);
  const WindowSpec spec{2, 2, 2, PartitionAxis::X};
  const SerializedMap ser = serialize(sparse, spec);
  REQUIRE(ser.coords[0] == Vec3i(0, 0, 0));
  REQUIRE(ser.coords[1] == Vec3i(0, 1, 0));
  REQUIRE(ser.coords[2] == Vec3i(1, 0, 0));
  REQUIRE(ser.coords[3] == Vec3i(4, 0, 0));
  // Multiset of features preserved through the permutation.
  for (int i = 0; i < 4; ++i) REQUIRE(ser.features(i, ser.permutation[i]) == 1.0);
}

TEST_CASE("serialize single feature", "[serialization]") {
  SparseFeatureMap sparse;
  sparse.coords = {{7, 3, 2}};
  sparse.features = Mat::Ones(1, 3);
  const SerializedMap ser = serialize(sparse, {4, 4, 4, PartitionAxis::X});
  REQUIRE(ser.permutation == std::vector<int>{0});
}

TEST_CASE("serialize equals lexicographic oracle", "[serialization]") {
  Rng rng(21);
  for (int it = 0; it < 300; ++it) {
    const WindowSpec spec{rng.uniform_int(1, 6), rng.uniform_int(1, 6), rng.uniform_int(1, 6),
                          rng.uniform() < 0.5 ? PartitionAxis::X : PartitionAxis::Y};
    const SparseFeatureMap sparse = random_sparse(rng, rng.uniform_int(1, 200), 2, 30);
    const SerializedMap ser = serialize(sparse, spec);
    REQUIRE(ser.permutation == oracle_permutation(sparse.coords, spec));
  }
}

TEST_CASE("axis swap equivalence", "[serialization]") {
  Rng rng(22);
  for (int it = 0; it < 50; ++it) {
    const SparseFeatureMap sparse = random_sparse(rng, 100, 2, 20);
    SparseFeatureMap swapped = sparse;
    for (Vec3i& c : swapped.coords) std::swap(c.x(), c.y());
    const WindowSpec spec_x{3, 5, 2, PartitionAxis::X};
    const WindowSpec spec_y{3, 5, 2, PartitionAxis::Y};
    REQUIRE(serialize(swapped, spec_x).permutation == serialize(sparse, spec_y).permutation);
  }
}

TEST_CASE("global index increases along the sequence", "[serialization]") {
  Rng rng(23);
  const SparseFeatureMap sparse = random_sparse(rng, 300, 2, 25);
  const SerializedMap ser = serialize(sparse, {4, 4, 4, PartitionAxis::X});
  for (size_t i = 1; i < ser.keys.size(); ++i) {
    if (ser.keys[i - 1].global_index != ser.keys[i].global_index)
      REQUIRE(ser.keys[i - 1].global_index < ser.keys[i].global_index);
    REQUIRE(ser.keys[i].global_index ==
            ser.keys[i].window_index * 64 + ser.keys[i].in_window_index);
  }
}

TEST_CASE("grouping", "[serialization]") {
  SECTION("padding counts") {
    const Mat ordered = Mat::Ones(5, 3);
    const GroupedSequence g = group(ordered, {0, 1, 2, 3, 4}, 4, Vec::Zero(3));
    REQUIRE(g.group_count() == 2);
    int pad = 0;
    for (char m : g.mask) pad += m == 0;
    REQUIRE(pad == 3);
  }
  SECTION("exact fit has no padding") {
    const GroupedSequence g = group(Mat::Ones(4, 3), {0, 1, 2, 3}, 4, Vec::Zero(3));
    REQUIRE(g.group_count() == 1);
    for (char m : g.mask) REQUIRE(m == 1);
  }
  SECTION("round trip fuzz") {
    Rng rng(31);
    for (int it = 0; it < 50; ++it) {
      const int n = rng.uniform_int(1, 2000);
      const Mat ordered = random_matrix(n, 4, rng, 1.0);
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      const GroupedSequence g = group(ordered, perm, rng.uniform_int(1, 300), Vec::Zero(4));
      REQUIRE(ungroup(g) == ordered);
    }
  }
  SECTION("zero group size rejected") {
    REQUIRE_THROWS(group(Mat::Ones(2, 2), {0, 1}, 0, Vec::Zero(2)));
  }
}

TEST_CASE("positional encoding", "[serialization]") {
  SECTION("origin gives sin 0 cos 1") {
    const Vec enc = positional_encoding({0, 0, 0}, 12);
    // Layout per axis: [sin pair, cos pair].
    for (int a = 0; a < 3; ++a) {
      REQUIRE(enc(a * 4 + 0) == 0.0);
      REQUIRE(enc(a * 4 + 1) == 0.0);
      REQUIRE(enc(a * 4 + 2) == 1.0);
      REQUIRE(enc(a * 4 + 3) == 1.0);
    }
  }
  SECTION("dim must divide by 6") { REQUIRE_THROWS(positional_encoding({0, 0, 0}, 8)); }
  SECTION("purity") {
    REQUIRE(positional_encoding({5, 9, 2}, 12) == positional_encoding({5, 9, 2}, 12));
  }
  SECTION("distinct over a desk-scale grid") {
    std::unordered_set<std::string> seen;
    const int n = 64;
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y)
        for (int z = 0; z < n; ++z) {
          const Vec enc = positional_encoding({x, y, z}, 12);
          std::string key(reinterpret_cast<const char*>(enc.data()),
                          enc.size() * sizeof(double));
          REQUIRE(seen.insert(std::move(key)).second);
        }
  }
}
