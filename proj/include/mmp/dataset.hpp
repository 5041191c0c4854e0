#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmp/simulator.hpp"

namespace mmp {

// Dataset directory layout: meta.json plus one binary record per frame
// (frame_000000.bin ...). Records are little-endian with length-prefixed
// sections; a magic and version byte guard against foreign or stale files.

inline constexpr char kFrameMagic[4] = {'M', 'M', 'P', 'F'};
inline constexpr std::uint8_t kDatasetVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("dataset: truncated while reading " + what);
  return v;
}

inline std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06d.bin", index);
  return buf;
}

}  // namespace detail

inline void write_frame(const FrameRecord& frame, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open " + path + " for writing");
  os.write(kFrameMagic, 4);
  detail::put<std::uint8_t>(os, kDatasetVersion);
  detail::put<double>(os, frame.timestamp);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) detail::put<double>(os, frame.ego_pose.rotation(r, c));
  for (int r = 0; r < 3; ++r) detail::put<double>(os, frame.ego_pose.translation(r));

  detail::put<std::uint64_t>(os, frame.points.size());
  for (const LidarPoint& p : frame.points) {
    detail::put<float>(os, static_cast<float>(p.position.x()));
    detail::put<float>(os, static_cast<float>(p.position.y()));
    detail::put<float>(os, static_cast<float>(p.position.z()));
    detail::put<float>(os, static_cast<float>(p.intensity));
  }

  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(frame.image_feats.size()));
  for (const auto& pyramid : frame.image_feats) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(pyramid.size()));
    for (const FeatureMap2D& map : pyramid) {
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(map.height));
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(map.width));
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(map.dim));
      detail::put<double>(os, map.scale);
      for (int i = 0; i < map.values.rows(); ++i)
        for (int j = 0; j < map.values.cols(); ++j)
          detail::put<float>(os, static_cast<float>(map.values(i, j)));
    }
  }

  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(frame.boxes.size()));
  for (const GroundTruthBox& gt : frame.boxes) {
    const float fields[9] = {
        static_cast<float>(gt.box.center.x()), static_cast<float>(gt.box.center.y()),
        static_cast<float>(gt.box.center.z()), static_cast<float>(gt.box.size.x()),
        static_cast<float>(gt.box.size.y()),   static_cast<float>(gt.box.size.z()),
        static_cast<float>(gt.box.yaw),        static_cast<float>(gt.velocity.x()),
        static_cast<float>(gt.velocity.y())};
    for (float f : fields) detail::put<float>(os, f);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(gt.agent_id));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(gt.box.class_id));
  }
  if (!os) throw std::runtime_error("dataset: write failure on " + path);
}

inline FrameRecord read_frame(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kFrameMagic, 4) != 0)
    throw std::runtime_error("dataset: bad magic bytes in " + path);
  const auto version = detail::get<std::uint8_t>(is, "version");
  if (version != kDatasetVersion)
    throw std::runtime_error("dataset: unsupported version " + std::to_string(version) + " in " +
                             path);
  FrameRecord frame;
  frame.timestamp = detail::get<double>(is, "timestamp");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) frame.ego_pose.rotation(r, c) = detail::get<double>(is, "ego pose");
  for (int r = 0; r < 3; ++r) frame.ego_pose.translation(r) = detail::get<double>(is, "ego pose");

  const auto n_points = detail::get<std::uint64_t>(is, "point count");
  frame.points.resize(n_points);
  for (auto& p : frame.points) {
    p.position.x() = detail::get<float>(is, "points");
    p.position.y() = detail::get<float>(is, "points");
    p.position.z() = detail::get<float>(is, "points");
    p.intensity = detail::get<float>(is, "points");
  }

  const auto n_cams = detail::get<std::uint32_t>(is, "camera count");
  frame.image_feats.resize(n_cams);
  for (auto& pyramid : frame.image_feats) {
    const auto n_scales = detail::get<std::uint32_t>(is, "scale count");
    for (std::uint32_t l = 0; l < n_scales; ++l) {
      const int h = detail::get<std::uint32_t>(is, "map shape");
      const int w = detail::get<std::uint32_t>(is, "map shape");
      const int d = detail::get<std::uint32_t>(is, "map shape");
      const double scale = detail::get<double>(is, "map scale");
      FeatureMap2D map = FeatureMap2D::zeros(h, w, d, scale);
      for (int i = 0; i < map.values.rows(); ++i)
        for (int j = 0; j < map.values.cols(); ++j) map.values(i, j) = detail::get<float>(is, "map values");
      pyramid.push_back(std::move(map));
    }
  }

  const auto n_boxes = detail::get<std::uint32_t>(is, "box count");
  frame.boxes.resize(n_boxes);
  for (auto& gt : frame.boxes) {
    float fields[9];
    for (float& f : fields) f = detail::get<float>(is, "boxes");
    gt.box.center = Vec3(fields[0], fields[1], fields[2]);
    gt.box.size = Vec3(fields[3], fields[4], fields[5]);
    gt.box.yaw = fields[6];
    gt.velocity = Vec2(fields[7], fields[8]);
    gt.agent_id = static_cast<int>(detail::get<std::uint32_t>(is, "boxes"));
    gt.box.class_id = static_cast<int>(detail::get<std::uint32_t>(is, "boxes"));
  }
  return frame;
}

inline void write_dataset(const std::vector<FrameRecord>& records, const std::string& dir,
                          const nlohmann::json& extra_meta = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta = extra_meta;
  meta["version"] = kDatasetVersion;
  meta["frames"] = records.size();
  std::ofstream ms(dir + "/meta.json");
  if (!ms) throw std::runtime_error("dataset: cannot write " + dir + "/meta.json");
  ms << meta.dump(1) << "\n";
  for (size_t i = 0; i < records.size(); ++i)
    write_frame(records[i], dir + "/" + detail::frame_name(static_cast<int>(i)));
}

/// Streaming reader: frames load one at a time, never all at once.
class DatasetReader {
 public:
  explicit DatasetReader(const std::string& dir) : dir_(dir) {
    std::ifstream ms(dir + "/meta.json");
    if (!ms) throw std::runtime_error("dataset: missing " + dir + "/meta.json");
    ms >> meta_;
    if (!meta_.contains("version") || meta_["version"].get<int>() != kDatasetVersion)
      throw std::runtime_error("dataset: unsupported meta version in " + dir);
    frames_ = meta_["frames"].get<int>();
  }

  int frames() const { return frames_; }
  const nlohmann::json& meta() const { return meta_; }
  FrameRecord frame(int index) const {
    if (index < 0 || index >= frames_)
      throw std::out_of_range("dataset: frame index " + std::to_string(index) + " out of range");
    return read_frame(dir_ + "/" + detail::frame_name(index));
  }

 private:
  std::string dir_;
  nlohmann::json meta_;
  int frames_ = 0;
};

inline std::vector<FrameRecord> read_dataset(const std::string& dir) {
  DatasetReader reader(dir);
  std::vector<FrameRecord> out;
  out.reserve(reader.frames());
  for (int i = 0; i < reader.frames(); ++i) out.push_back(reader.frame(i));
  return out;
}

}  // namespace mmp
