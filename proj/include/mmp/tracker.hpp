#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Cholesky>

#include "mmp/common.hpp"
#include "mmp/geometry.hpp"

namespace mmp {

struct Box3D {
  Vec3 center = Vec3::Zero();  // meters
  Vec3 size = Vec3::Ones();    // l, w, h
  double yaw = 0.0;            // radians, (-pi, pi]
  int class_id = 0;
  double confidence = 1.0;

  void validate() const {
    if (!(size.array() > 0).all()) throw std::invalid_argument("Box3D: sizes must be positive");
  }

  /// BEV corners, counter-clockwise.
  std::array<Vec2, 4> bev_corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double hl = size.x() / 2, hw = size.y() / 2;
    std::array<Vec2, 4> out;
    const double lx[4] = {hl, -hl, -hl, hl};
    const double ly[4] = {hw, hw, -hw, -hw};
    for (int i = 0; i < 4; ++i)
      out[i] = Vec2(center.x() + c * lx[i] - s * ly[i], center.y() + s * lx[i] + c * ly[i]);
    return out;
  }
};

enum class TrackStatus { Tentative, Confirmed, Dead };

/// Kalman state layout: [x, y, z, yaw, l, w, h, vx, vy, yaw_rate].
struct Tracklet {
  int id = -1;
  int class_id = 0;
  Vec state = Vec::Zero(10);
  Mat covariance = Mat::Identity(10, 10);
  int hits = 0;
  int misses = 0;
  TrackStatus status = TrackStatus::Tentative;
  std::vector<std::pair<double, Vec2>> history;  // (timestamp, BEV position)

  Box3D box() const {
    Box3D b;
    b.center = state.head<3>();
    b.yaw = wrap_angle(state(3));
    b.size = state.segment<3>(4);
    b.class_id = class_id;
    return b;
  }
  Vec2 velocity() const { return state.segment<2>(7); }
};

struct TrackerConfig {
  int birth_hits = 3;
  int death_misses = 4;
  double gate_stage1 = 2.5;  // meters center distance, Car baseline
  double gate_stage2 = 5.0;
  std::vector<double> class_gate_scale = {0.6, 1.0, 0.8};  // pedestrian, car, cyclist
  enum class Metric { CenterDistance, GiouBev } metric = Metric::CenterDistance;
  bool greedy = false;  // Hungarian by default
  bool parallel = true;
  double process_noise_pos = 0.15;
  double process_noise_vel = 0.6;
  double process_noise_yaw = 0.05;
  double process_noise_size = 0.01;
  double meas_noise_pos = 0.2;
  double meas_noise_yaw = 0.1;
  double meas_noise_size = 0.1;
};

inline constexpr double kForbiddenCost = 1e9;

namespace detail {

inline void check_covariance(const Mat& p) {
  Eigen::LLT<Mat> llt(p);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("tracker: covariance lost positive definiteness");
}

}  // namespace detail

/// Constant-velocity / constant-turn-rate prediction with additive process
/// noise.
inline Tracklet predict(const Tracklet& tr, double dt, const TrackerConfig& cfg = {}) {
  if (dt <= 0) throw std::invalid_argument("predict: dt must be > 0");
  detail::check_covariance(tr.covariance);
  Mat f = Mat::Identity(10, 10);
  f(0, 7) = dt;  // x += vx dt
  f(1, 8) = dt;  // y += vy dt
  f(3, 9) = dt;  // yaw += rate dt
  Tracklet out = tr;
  out.state = f * tr.state;
  out.state(3) = wrap_angle(out.state(3));
  Vec q(10);
  const double p2 = cfg.process_noise_pos * cfg.process_noise_pos * dt;
  const double v2 = cfg.process_noise_vel * cfg.process_noise_vel * dt;
  const double y2 = cfg.process_noise_yaw * cfg.process_noise_yaw * dt;
  const double s2 = cfg.process_noise_size * cfg.process_noise_size * dt;
  q << p2, p2, p2, y2, s2, s2, s2, v2, v2, y2;
  out.covariance = f * tr.covariance * f.transpose() + Mat(q.asDiagonal());
  return out;
}

/// Standard Kalman update on (center, yaw, sizes), Joseph form; yaw
/// innovation wrapped to (-pi, pi].
inline Tracklet update(const Tracklet& tr, const Box3D& det, const TrackerConfig& cfg = {}) {
  Mat h = Mat::Zero(7, 10);
  for (int i = 0; i < 7; ++i) h(i, i) = 1.0;
  Vec z(7);
  z << det.center, det.yaw, det.size;
  Vec innovation = z - h * tr.state;
  innovation(3) = wrap_angle(innovation(3));
  Vec r(7);
  const double mp = cfg.meas_noise_pos * cfg.meas_noise_pos;
  const double my = cfg.meas_noise_yaw * cfg.meas_noise_yaw;
  const double ms = cfg.meas_noise_size * cfg.meas_noise_size;
  r << mp, mp, mp, my, ms, ms, ms;
  const Mat s = h * tr.covariance * h.transpose() + Mat(r.asDiagonal());
  Eigen::LLT<Mat> llt(s);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("update: singular innovation covariance");
  const Mat k = tr.covariance * h.transpose() * llt.solve(Mat::Identity(7, 7));
  Tracklet out = tr;
  out.state = tr.state + k * innovation;
  out.state(3) = wrap_angle(out.state(3));
  const Mat ikh = Mat::Identity(10, 10) - k * h;
  out.covariance = ikh * tr.covariance * ikh.transpose() + k * Mat(r.asDiagonal()) * k.transpose();
  out.hits += 1;
  out.misses = 0;
  return out;
}

// ---------------------------------------------------------------------------
// Rotated BEV IoU / GIoU (shared with eval metrics)

namespace detail {

inline double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  const int n = static_cast<int>(poly.size());
  for (int i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return std::abs(a) / 2.0;
}

/// Sutherland-Hodgman clip of a convex polygon against a convex clip polygon.
inline std::vector<Vec2> clip_convex(const std::vector<Vec2>& subject,
                                     const std::vector<Vec2>& clip) {
  std::vector<Vec2> output = subject;
  const int n = static_cast<int>(clip.size());
  for (int i = 0; i < n && !output.empty(); ++i) {
    const Vec2 a = clip[i];
    const Vec2 b = clip[(i + 1) % n];
    const auto inside = [&](const Vec2& p) {
      return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x()) >= -1e-12;
    };
    const auto intersect = [&](const Vec2& p, const Vec2& q) {
      const Vec2 d1 = q - p, d2 = b - a;
      const double denom = d1.x() * d2.y() - d1.y() * d2.x();
      const double t = ((a.x() - p.x()) * d2.y() - (a.y() - p.y()) * d2.x()) / denom;
      return Vec2(p + t * d1);
    };
    std::vector<Vec2> input = std::move(output);
    output.clear();
    for (size_t j = 0; j < input.size(); ++j) {
      const Vec2& cur = input[j];
      const Vec2& prev = input[(j + input.size() - 1) % input.size()];
      if (inside(cur)) {
        if (!inside(prev)) output.push_back(intersect(prev, cur));
        output.push_back(cur);
      } else if (inside(prev)) {
        output.push_back(intersect(prev, cur));
      }
    }
  }
  return output;
}

inline std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  const auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Vec2> hull;
  for (const Vec2& p : pts) {
    while (hull.size() >= 2 && cross(hull[hull.size() - 2], hull.back(), p) <= 0) hull.pop_back();
    hull.push_back(p);
  }
  const size_t lower = hull.size() + 1;
  for (auto it = pts.rbegin(); it != pts.rend(); ++it) {
    while (hull.size() >= lower && cross(hull[hull.size() - 2], hull.back(), *it) <= 0)
      hull.pop_back();
    hull.push_back(*it);
  }
  hull.pop_back();
  return hull;
}

}  // namespace detail

inline double bev_iou(const Box3D& a, const Box3D& b) {
  const auto ca = a.bev_corners();
  const auto cb = b.bev_corners();
  const std::vector<Vec2> pa(ca.begin(), ca.end());
  const std::vector<Vec2> pb(cb.begin(), cb.end());
  const double area_a = detail::polygon_area(pa);
  const double area_b = detail::polygon_area(pb);
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double inter = detail::polygon_area(detail::clip_convex(pa, pb));
  const double uni = area_a + area_b - inter;
  return uni <= 0.0 ? 0.0 : std::clamp(inter / uni, 0.0, 1.0);
}

/// Generalized BEV IoU with the enclosing convex hull as the reference area.
inline double bev_giou(const Box3D& a, const Box3D& b) {
  const auto ca = a.bev_corners();
  const auto cb = b.bev_corners();
  const std::vector<Vec2> pa(ca.begin(), ca.end());
  const std::vector<Vec2> pb(cb.begin(), cb.end());
  const double area_a = detail::polygon_area(pa);
  const double area_b = detail::polygon_area(pb);
  const double inter = detail::polygon_area(detail::clip_convex(pa, pb));
  const double uni = area_a + area_b - inter;
  std::vector<Vec2> all(pa);
  all.insert(all.end(), pb.begin(), pb.end());
  const double hull = detail::polygon_area(detail::convex_hull(all));
  if (uni <= 0.0 || hull <= 0.0) return 0.0;
  return inter / uni - (hull - uni) / hull;
}

// ---------------------------------------------------------------------------
// Association

/// Per-class cost matrix. Pairs beyond the gate take the forbidden sentinel.
inline Mat association_cost(const std::vector<Tracklet>& tracklets,
                            const std::vector<Box3D>& detections, const TrackerConfig& cfg,
                            double gate) {
  Mat cost(tracklets.size(), detections.size());
  parallel_for(static_cast<int>(tracklets.size()), [&](int t) {
    const Box3D tb = tracklets[t].box();
    for (size_t d = 0; d < detections.size(); ++d) {
      const double dist = (tb.center.head<2>() - detections[d].center.head<2>()).norm();
      if (dist > gate) {
        cost(t, d) = kForbiddenCost;
        continue;
      }
      if (cfg.metric == TrackerConfig::Metric::GiouBev)
        cost(t, d) = 1.0 - bev_giou(tb, detections[d]);
      else
        cost(t, d) = dist;
    }
  }, cfg.parallel);
  return cost;
}

struct Assignment {
  std::vector<std::pair<int, int>> matches;  // (row, col)
  std::vector<int> unmatched_rows;
  std::vector<int> unmatched_cols;
};

namespace detail {

/// O(n^3) Hungarian algorithm (potentials formulation) on a rectangular
/// matrix padded to square.
inline std::vector<int> hungarian(const Mat& cost) {
  const int n = static_cast<int>(std::max(cost.rows(), cost.cols()));
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  const double pad = 0.0;
  const auto c = [&](int r, int col) {
    return (r < rows && col < cols) ? cost(r, col) : pad;
  };
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = std::numeric_limits<double>::infinity();
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(rows, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] >= 1 && p[j] <= rows && j <= cols) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline std::vector<int> greedy_assign(const Mat& cost) {
  struct Entry { double c; int r, col; };
  std::vector<Entry> entries;
  for (int r = 0; r < cost.rows(); ++r)
    for (int col = 0; col < cost.cols(); ++col)
      if (cost(r, col) < kForbiddenCost) entries.push_back({cost(r, col), r, col});
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.c < b.c;
  });
  std::vector<int> row_to_col(cost.rows(), -1);
  std::vector<char> col_used(cost.cols(), 0);
  for (const Entry& e : entries) {
    if (row_to_col[e.r] != -1 || col_used[e.col]) continue;
    row_to_col[e.r] = e.col;
    col_used[e.col] = 1;
  }
  return row_to_col;
}

}  // namespace detail

/// Minimum-total-cost one-to-one assignment, forbidden pairs excluded.
/// All-forbidden input leaves everything unmatched.
inline Assignment solve_assignment(const Mat& cost, bool greedy = false) {
  Assignment out;
  if (cost.rows() == 0 || cost.cols() == 0) {
    for (int r = 0; r < cost.rows(); ++r) out.unmatched_rows.push_back(r);
    for (int c = 0; c < cost.cols(); ++c) out.unmatched_cols.push_back(c);
    return out;
  }
  const std::vector<int> row_to_col =
      greedy ? detail::greedy_assign(cost) : detail::hungarian(cost);
  std::vector<char> col_matched(cost.cols(), 0);
  for (int r = 0; r < cost.rows(); ++r) {
    const int c = row_to_col[r];
    if (c >= 0 && cost(r, c) < kForbiddenCost) {
      out.matches.emplace_back(r, c);
      col_matched[c] = 1;
    } else {
      out.unmatched_rows.push_back(r);
    }
  }
  for (int c = 0; c < cost.cols(); ++c)
    if (!col_matched[c]) out.unmatched_cols.push_back(c);
  return out;
}

// ---------------------------------------------------------------------------
// Frame-level tracking

struct TrackRecord {
  int frame = 0;
  int id = 0;
  int class_id = 0;
  Box3D box;
  Vec2 velocity = Vec2::Zero();
};

struct TrackerState {
  std::vector<Tracklet> tracklets;
  int next_id = 1;
  int frame = 0;
  double last_timestamp = -std::numeric_limits<double>::infinity();
};

namespace detail {

inline Tracklet spawn_tracklet(const Box3D& det, int id, const TrackerConfig&) {
  Tracklet tr;
  tr.id = id;
  tr.class_id = det.class_id;
  tr.state.head<3>() = det.center;
  tr.state(3) = det.yaw;
  tr.state.segment<3>(4) = det.size;
  Vec p0(10);
  p0 << 0.5, 0.5, 0.5, 0.3, 0.2, 0.2, 0.2, 4.0, 4.0, 1.0;
  tr.covariance = p0.asDiagonal();
  tr.hits = 1;
  return tr;
}

}  // namespace detail

/// One tracking step: ego compensation, predict, two-stage per-class
/// association, update / miss / spawn / retire. Returns the confirmed
/// tracklets' records for this frame.
inline std::vector<TrackRecord> track_frame(TrackerState& state, std::vector<Box3D> detections,
                                            double timestamp, const RigidTransform& ego_pose,
                                            const TrackerConfig& cfg = {}) {
  if (timestamp <= state.last_timestamp)
    throw std::invalid_argument("track_frame: timestamps must be strictly increasing");
  const double dt = std::isfinite(state.last_timestamp) ? timestamp - state.last_timestamp : 0.1;
  state.last_timestamp = timestamp;
  state.frame += 1;

  // Sensor frame -> world frame.
  for (Box3D& d : detections) {
    d.center = ego_pose.apply(d.center);
    const double ego_yaw = std::atan2(ego_pose.rotation(1, 0), ego_pose.rotation(0, 0));
    d.yaw = wrap_angle(d.yaw + ego_yaw);
  }

  // Predict all (batch-parallel).
  parallel_for(static_cast<int>(state.tracklets.size()), [&](int i) {
    state.tracklets[i] = predict(state.tracklets[i], dt, cfg);
  }, cfg.parallel);

  std::vector<char> track_matched(state.tracklets.size(), 0);
  std::vector<char> det_matched(detections.size(), 0);
  std::vector<std::pair<int, int>> matches;  // (tracklet index, detection index)

  std::vector<int> class_ids;
  for (const Tracklet& t : state.tracklets)
    if (std::find(class_ids.begin(), class_ids.end(), t.class_id) == class_ids.end())
      class_ids.push_back(t.class_id);
  for (const Box3D& d : detections)
    if (std::find(class_ids.begin(), class_ids.end(), d.class_id) == class_ids.end())
      class_ids.push_back(d.class_id);
  std::sort(class_ids.begin(), class_ids.end());

  for (const double gate_base : {cfg.gate_stage1, cfg.gate_stage2}) {
    for (const int cls : class_ids) {
      std::vector<int> tr_idx, det_idx;
      for (size_t i = 0; i < state.tracklets.size(); ++i)
        if (!track_matched[i] && state.tracklets[i].class_id == cls)
          tr_idx.push_back(static_cast<int>(i));
      for (size_t i = 0; i < detections.size(); ++i)
        if (!det_matched[i] && detections[i].class_id == cls) det_idx.push_back(static_cast<int>(i));
      if (tr_idx.empty() || det_idx.empty()) continue;
      std::vector<Tracklet> trs;
      std::vector<Box3D> dets;
      for (int i : tr_idx) trs.push_back(state.tracklets[i]);
      for (int i : det_idx) dets.push_back(detections[i]);
      const double scale = cls < static_cast<int>(cfg.class_gate_scale.size())
                               ? cfg.class_gate_scale[cls]
                               : 1.0;
      const Mat cost = association_cost(trs, dets, cfg, gate_base * scale);
      const Assignment assign = solve_assignment(cost, cfg.greedy);
      for (const auto& [r, c] : assign.matches) {
        track_matched[tr_idx[r]] = 1;
        det_matched[det_idx[c]] = 1;
        matches.emplace_back(tr_idx[r], det_idx[c]);
      }
    }
  }

  // Batched update of matched pairs.
  parallel_for(static_cast<int>(matches.size()), [&](int i) {
    const auto& [t, d] = matches[i];
    state.tracklets[t] = update(state.tracklets[t], detections[d], cfg);
  }, cfg.parallel);

  // Life-cycle mutation after the frame barrier.
  for (size_t i = 0; i < state.tracklets.size(); ++i) {
    Tracklet& tr = state.tracklets[i];
    if (!track_matched[i]) tr.misses += 1;
    if (tr.hits >= cfg.birth_hits && tr.status == TrackStatus::Tentative)
      tr.status = TrackStatus::Confirmed;
    if (tr.misses >= cfg.death_misses) tr.status = TrackStatus::Dead;
    tr.history.emplace_back(timestamp, Vec2(tr.state(0), tr.state(1)));
  }
  for (size_t i = 0; i < detections.size(); ++i)
    if (!det_matched[i]) {
      Tracklet tr = detail::spawn_tracklet(detections[i], state.next_id++, cfg);
      tr.history.emplace_back(timestamp, Vec2(tr.state(0), tr.state(1)));
      state.tracklets.push_back(std::move(tr));
    }
  std::erase_if(state.tracklets, [](const Tracklet& t) { return t.status == TrackStatus::Dead; });

  std::vector<TrackRecord> out;
  for (const Tracklet& tr : state.tracklets) {
    if (tr.status != TrackStatus::Confirmed) continue;
    TrackRecord rec;
    rec.frame = state.frame;
    rec.id = tr.id;
    rec.class_id = tr.class_id;
    rec.box = tr.box();
    rec.velocity = tr.velocity();
    out.push_back(rec);
  }
  return out;
}

}  // namespace mmp
