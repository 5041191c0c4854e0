#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmp/common.hpp"
#include "mmp/geometry.hpp"
#include "mmp/tracker.hpp"

namespace mmp {

enum class AgentClass : int { Pedestrian = 0, Car = 1, Cyclist = 2 };
inline constexpr int kRobotClass = 3;

struct MotionMode {
  double linear = 0.0;    // m/s
  double angular = 0.0;   // rad/s
  double duration = 1.0;  // seconds before the schedule advances
};

enum class BehaviorKind { Stationary, Unicycle, Waypoints };

struct AgentSpec {
  AgentClass cls = AgentClass::Pedestrian;
  Vec2 position = Vec2::Zero();
  double yaw = 0.0;
  BehaviorKind behavior = BehaviorKind::Unicycle;
  std::vector<MotionMode> schedule;   // cycled, for Unicycle
  std::vector<Vec2> waypoints;        // for Waypoints
  double waypoint_speed = 1.0;
  Vec3 size = Vec3(0.6, 0.6, 1.7);    // l, w, h
};

struct ScenarioConfig {
  std::vector<AgentSpec> agents;
  std::vector<MotionMode> ego_schedule;  // empty = stationary ego
  double rate_hz = 10.0;

  void validate() const {
    if (agents.empty()) throw std::invalid_argument("ScenarioConfig: field 'agents' must be non-empty");
    if (rate_hz <= 0) throw std::invalid_argument("ScenarioConfig: field 'rate_hz' must be positive");
  }
};

struct GroundTruthBox {
  int agent_id = 0;
  Box3D box;
  Vec2 velocity = Vec2::Zero();
};

struct FrameRecord {
  double timestamp = 0.0;
  RigidTransform ego_pose;                             // sensor frame -> world frame
  std::vector<LidarPoint> points;                      // sensor frame
  std::vector<std::vector<FeatureMap2D>> image_feats;  // per camera, per scale
  std::vector<GroundTruthBox> boxes;                   // world frame
};

namespace detail {

struct UnicycleState {
  Vec2 position = Vec2::Zero();
  double yaw = 0.0;
  int mode = 0;
  double mode_elapsed = 0.0;
};

inline void step_unicycle(UnicycleState& s, const std::vector<MotionMode>& schedule, double dt) {
  if (schedule.empty()) return;
  const MotionMode& m = schedule[s.mode % schedule.size()];
  s.position.x() += m.linear * std::cos(s.yaw) * dt;
  s.position.y() += m.linear * std::sin(s.yaw) * dt;
  s.yaw = wrap_angle(s.yaw + m.angular * dt);
  s.mode_elapsed += dt;
  if (s.mode_elapsed >= m.duration - 1e-12) {
    s.mode_elapsed = 0.0;
    s.mode += 1;
  }
}

}  // namespace detail

/// Advances all agents and the ego at the configured rate. Fully determined
/// by (scenario, seed); the seed only perturbs nothing here but is kept for
/// interface symmetry with the renderers.
inline std::vector<FrameRecord> simulate(const ScenarioConfig& scenario, std::uint64_t /*seed*/,
                                         int frames) {
  scenario.validate();
  const double dt = 1.0 / scenario.rate_hz;
  std::vector<detail::UnicycleState> agents(scenario.agents.size());
  std::vector<int> waypoint_target(scenario.agents.size(), 0);
  for (size_t i = 0; i < scenario.agents.size(); ++i) {
    agents[i].position = scenario.agents[i].position;
    agents[i].yaw = scenario.agents[i].yaw;
  }
  detail::UnicycleState ego;

  std::vector<FrameRecord> out;
  for (int f = 0; f < frames; ++f) {
    FrameRecord rec;
    rec.timestamp = f * dt;
    rec.ego_pose = RigidTransform::from_yaw(ego.yaw, Vec3(ego.position.x(), ego.position.y(), 0));
    for (size_t i = 0; i < scenario.agents.size(); ++i) {
      const AgentSpec& spec = scenario.agents[i];
      GroundTruthBox gt;
      gt.agent_id = static_cast<int>(i);
      gt.box.center = Vec3(agents[i].position.x(), agents[i].position.y(), spec.size.z() / 2);
      gt.box.size = spec.size;
      gt.box.yaw = agents[i].yaw;
      gt.box.class_id = static_cast<int>(spec.cls);
      double speed = 0.0;
      if (spec.behavior == BehaviorKind::Unicycle && !spec.schedule.empty())
        speed = spec.schedule[agents[i].mode % spec.schedule.size()].linear;
      else if (spec.behavior == BehaviorKind::Waypoints)
        speed = spec.waypoint_speed;
      gt.velocity = speed * Vec2(std::cos(agents[i].yaw), std::sin(agents[i].yaw));
      rec.boxes.push_back(gt);
    }
    out.push_back(std::move(rec));

    // Advance the world to the next frame.
    for (size_t i = 0; i < scenario.agents.size(); ++i) {
      const AgentSpec& spec = scenario.agents[i];
      switch (spec.behavior) {
        case BehaviorKind::Stationary:
          break;
        case BehaviorKind::Unicycle:
          detail::step_unicycle(agents[i], spec.schedule, dt);
          break;
        case BehaviorKind::Waypoints: {
          if (spec.waypoints.empty()) break;
          const Vec2 target = spec.waypoints[waypoint_target[i] % spec.waypoints.size()];
          const Vec2 delta = target - agents[i].position;
          const double dist = delta.norm();
          if (dist < spec.waypoint_speed * dt) {
            agents[i].position = target;
            waypoint_target[i] += 1;
          } else {
            agents[i].yaw = std::atan2(delta.y(), delta.x());
            agents[i].position += spec.waypoint_speed * dt * delta / dist;
          }
          break;
        }
      }
    }
    detail::step_unicycle(ego, scenario.ego_schedule, dt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// LiDAR rendering

struct LidarConfig {
  int beams = 16;
  int rays_per_beam = 360;
  double vertical_fov_low = -0.26;   // radians
  double vertical_fov_high = 0.26;
  double max_range = 50.0;
  double range_sigma = 0.01;
  double sensor_height = 0.8;
};

namespace detail {

/// Ray vs oriented box (slab method in the box frame). Returns hit range.
inline std::optional<double> ray_box_intersect(const Vec3& origin, const Vec3& dir,
                                               const Box3D& box) {
  const double c = std::cos(-box.yaw), s = std::sin(-box.yaw);
  const auto to_box = [&](const Vec3& p) {
    const Vec3 d = p - box.center;
    return Vec3(c * d.x() - s * d.y(), s * d.x() + c * d.y(), d.z());
  };
  const Vec3 o = to_box(origin);
  const Vec3 rd = to_box(origin + dir) - o;
  const Vec3 half = box.size / 2;
  double tmin = 0.0, tmax = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(rd(a)) < 1e-12) {
      if (std::abs(o(a)) > half(a)) return std::nullopt;
      continue;
    }
    double t1 = (-half(a) - o(a)) / rd(a);
    double t2 = (half(a) - o(a)) / rd(a);
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return std::nullopt;
  }
  if (tmin <= 1e-9) return std::nullopt;  // origin inside or behind
  return tmin;
}

}  // namespace detail

/// Ray-casts box surfaces and the ground plane; nearest hit per ray with
/// Gaussian range noise. Points are returned in the sensor frame.
inline std::vector<LidarPoint> render_pointcloud(const FrameRecord& frame, const LidarConfig& cfg,
                                                 std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LidarPoint> out;
  const RigidTransform world_to_sensor = frame.ego_pose.inverse();
  const Vec3 origin_world = frame.ego_pose.apply(Vec3(0, 0, cfg.sensor_height));
  for (int b = 0; b < cfg.beams; ++b) {
    const double elev = cfg.beams == 1 ? cfg.vertical_fov_low
                                       : cfg.vertical_fov_low +
                                             (cfg.vertical_fov_high - cfg.vertical_fov_low) * b /
                                                 (cfg.beams - 1);
    for (int r = 0; r < cfg.rays_per_beam; ++r) {
      const double azim = 2.0 * M_PI * r / cfg.rays_per_beam;
      const double ego_yaw = std::atan2(frame.ego_pose.rotation(1, 0), frame.ego_pose.rotation(0, 0));
      const Vec3 dir(std::cos(elev) * std::cos(azim + ego_yaw),
                     std::cos(elev) * std::sin(azim + ego_yaw), std::sin(elev));
      double best = std::numeric_limits<double>::infinity();
      double intensity = 0.0;
      for (const GroundTruthBox& gt : frame.boxes) {
        const auto hit = detail::ray_box_intersect(origin_world, dir, gt.box);
        if (hit && *hit < best) {
          best = *hit;
          intensity = 0.5 + 0.1 * gt.box.class_id;
        }
      }
      // Ground plane z = 0.
      if (dir.z() < -1e-9) {
        const double t = -origin_world.z() / dir.z();
        if (t > 0 && t < best) {
          best = t;
          intensity = 0.1;
        }
      }
      if (!std::isfinite(best) || best > cfg.max_range) continue;
      const double noisy = best + rng.normal(0.0, cfg.range_sigma);
      const Vec3 p_world = origin_world + noisy * dir;
      LidarPoint lp;
      lp.position = world_to_sensor.apply(p_world);
      lp.intensity = intensity;
      out.push_back(lp);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic image features

/// Two forward-facing cameras with adjacent 60-degree fields of view.
inline std::vector<CameraModel> default_cameras(int width = 512, int height = 288) {
  const auto make = [&](double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Vec3 zc(c, s, 0);           // optical axis
    const Vec3 xc(s, -c, 0);          // right
    const Vec3 yc(0, 0, -1);          // down
    RigidTransform ext;
    ext.rotation.row(0) = xc;
    ext.rotation.row(1) = yc;
    ext.rotation.row(2) = zc;
    const Vec3 cam_pos(0, 0, 1.0);    // sensor-frame camera position
    ext.translation = -(ext.rotation * cam_pos);
    const double fx = (width / 2.0) / std::tan(M_PI / 6.0);  // 60 deg horizontal FOV
    return CameraModel::pinhole(fx, fx, width / 2.0, height / 2.0, width, height, ext);
  };
  return {make(M_PI / 6.0), make(-M_PI / 6.0)};
}

/// Rasterizes per-pixel class one-hot, normalized inverse depth and a
/// constant bias into `channels` at the 8x, 16x and 32x scales.
inline std::vector<FeatureMap2D> render_image_features(const FrameRecord& frame,
                                                       const CameraModel& cam, int channels) {
  if (channels < 4) throw std::invalid_argument("render_image_features: channels must be >= 4");
  std::vector<FeatureMap2D> pyramid;
  const RigidTransform cam_to_sensor = cam.extrinsics.inverse();
  for (const double scale : {8.0, 16.0, 32.0}) {
    const int w = std::max(1, static_cast<int>(cam.width / scale));
    const int h = std::max(1, static_cast<int>(cam.height / scale));
    FeatureMap2D map = FeatureMap2D::zeros(h, w, channels, scale);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double u = (x + 0.5) * scale;
        const double v = (y + 0.5) * scale;
        const Vec3 dir_cam = cam.intrinsics.inverse() * Vec3(u, v, 1.0);
        const Vec3 origin_world = frame.ego_pose.apply(cam_to_sensor.apply(Vec3::Zero()));
        const Vec3 through_world = frame.ego_pose.apply(cam_to_sensor.apply(dir_cam));
        const Vec3 dir_world = (through_world - origin_world).normalized();
        double best = std::numeric_limits<double>::infinity();
        int cls = -1;
        for (const GroundTruthBox& gt : frame.boxes) {
          const auto hit = detail::ray_box_intersect(origin_world, dir_world, gt.box);
          if (hit && *hit < best) {
            best = *hit;
            cls = gt.box.class_id;
          }
        }
        auto row = map.at(y, x);
        if (cls >= 0 && cls < 3) row(cls) = 1.0;
        if (std::isfinite(best)) row(3) = 1.0 / (1.0 + best);
        if (channels > 4) row(4) = 1.0;  // constant bias
      }
    pyramid.push_back(std::move(map));
  }
  return pyramid;
}

// ---------------------------------------------------------------------------
// Pseudo detections

struct DetectionNoise {
  double sigma_pos = 0.0;
  double sigma_yaw = 0.0;
  double sigma_size = 0.0;
  double fp_rate = 0.0;
  double fn_rate = 0.0;
  double range = 21.0;  // clutter placement range
};

/// Ground-truth boxes perturbed by Gaussian noise, dropped i.i.d. at the
/// false-negative rate, with uniform clutter added at the false-positive
/// rate. Output is in the sensor frame of the ego pose.
inline std::vector<Box3D> pseudo_detect(const FrameRecord& frame, const DetectionNoise& noise,
                                        std::uint64_t seed) {
  if (noise.fp_rate < 0 || noise.fp_rate >= 1 || noise.fn_rate < 0 || noise.fn_rate >= 1)
    throw std::invalid_argument("pseudo_detect: rates must lie in [0,1)");
  Rng rng(seed);
  const RigidTransform world_to_sensor = frame.ego_pose.inverse();
  const double ego_yaw =
      std::atan2(frame.ego_pose.rotation(1, 0), frame.ego_pose.rotation(0, 0));
  std::vector<Box3D> out;
  for (const GroundTruthBox& gt : frame.boxes) {
    if (rng.uniform() < noise.fn_rate) continue;
    Box3D d = gt.box;
    d.center.x() += rng.normal(0.0, noise.sigma_pos);
    d.center.y() += rng.normal(0.0, noise.sigma_pos);
    d.yaw = wrap_angle(d.yaw + rng.normal(0.0, noise.sigma_yaw));
    for (int a = 0; a < 3; ++a)
      d.size(a) = std::max(0.1, d.size(a) + rng.normal(0.0, noise.sigma_size));
    d.confidence = 0.7 + 0.3 * rng.uniform();
    d.center = world_to_sensor.apply(d.center);
    d.yaw = wrap_angle(d.yaw - ego_yaw);
    out.push_back(d);
  }
  if (rng.uniform() < noise.fp_rate) {
    Box3D fp;
    fp.center = Vec3(rng.uniform(-noise.range, noise.range), rng.uniform(-noise.range, noise.range),
                     0.8);
    fp.size = Vec3(0.5, 0.5, 1.6);
    fp.yaw = rng.uniform(-M_PI, M_PI);
    fp.class_id = rng.uniform_int(0, 2);
    fp.confidence = 0.3 + 0.3 * rng.uniform();
    out.push_back(fp);
  }
  return out;
}

}  // namespace mmp
