#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "mmp/common.hpp"
#include "mmp/tracker.hpp"

namespace mmp {

struct EvalConfig {
  std::vector<double> iou_thresholds = {0.5, 0.7, 0.5};  // per class
  std::vector<int> top_k = {3, 5, 10};

  double threshold_for(int class_id) const {
    if (class_id < 0 || class_id >= static_cast<int>(iou_thresholds.size()))
      throw std::invalid_argument("EvalConfig: no IoU threshold for class " + std::to_string(class_id));
    return iou_thresholds[class_id];
  }
};

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
};

/// KITTI-style AP: confidence-ranked greedy matching against the best
/// still-unmatched ground truth at IoU >= threshold, then 41-point
/// interpolated precision-recall integration. Equal confidences keep input
/// order. Returns nullopt when there is no ground truth.
inline std::optional<double> average_precision(const std::vector<Box3D>& detections,
                                               const std::vector<Box3D>& ground_truth,
                                               int class_id, const EvalConfig& cfg,
                                               PrCurve* curve = nullptr) {
  std::vector<const Box3D*> gt;
  for (const Box3D& g : ground_truth)
    if (g.class_id == class_id) gt.push_back(&g);
  if (gt.empty()) return std::nullopt;
  const double thresh = cfg.threshold_for(class_id);

  std::vector<int> det_idx;
  for (size_t i = 0; i < detections.size(); ++i)
    if (detections[i].class_id == class_id) det_idx.push_back(static_cast<int>(i));
  std::stable_sort(det_idx.begin(), det_idx.end(), [&](int a, int b) {
    return detections[a].confidence > detections[b].confidence;
  });

  std::vector<char> gt_matched(gt.size(), 0);
  std::vector<char> is_tp;
  for (const int di : det_idx) {
    int best = -1;
    double best_iou = thresh;
    for (size_t gi = 0; gi < gt.size(); ++gi) {
      if (gt_matched[gi]) continue;
      const double iou = bev_iou(detections[di], *gt[gi]);
      if (iou >= best_iou) {
        best_iou = iou;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      gt_matched[best] = 1;
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }

  std::vector<double> precision, recall;
  int tp = 0;
  for (size_t i = 0; i < is_tp.size(); ++i) {
    tp += is_tp[i];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt.size()));
  }
  if (curve) {
    curve->precision = precision;
    curve->recall = recall;
  }
  std::vector<double> suffix_max(precision.size());
  double running = 0.0;
  for (int j = static_cast<int>(precision.size()) - 1; j >= 0; --j) {
    running = std::max(running, precision[j]);
    suffix_max[j] = running;
  }
  double ap = 0.0;
  for (int i = 0; i <= 40; ++i) {
    const double r = static_cast<double>(i) / 40.0;
    double pmax = 0.0;
    for (size_t j = 0; j < recall.size(); ++j)
      if (recall[j] >= r) {
        pmax = suffix_max[j];
        break;
      }
    ap += pmax;
  }
  return ap / 41.0;
}

namespace detail {

/// Indices of the k highest-scoring predictions, score ties by lower index.
inline std::vector<int> top_k_indices(const Vec& scores, int k) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(k)));
  return idx;
}

}  // namespace detail

/// Minimum over the k highest-scoring predictions of the mean pointwise
/// Euclidean distance to the truth. `predictions[i]` is T x 2.
inline double min_ade(const std::vector<Mat>& predictions, const Vec& scores, const Mat& truth,
                      int k) {
  if (k > static_cast<int>(predictions.size()))
    throw std::invalid_argument("min_ade: k exceeds prediction count");
  double best = std::numeric_limits<double>::infinity();
  for (const int i : detail::top_k_indices(scores, k)) {
    const double ade = (predictions[i] - truth).rowwise().norm().mean();
    best = std::min(best, ade);
  }
  return best;
}

inline double min_fde(const std::vector<Mat>& predictions, const Vec& scores, const Mat& truth,
                      int k) {
  if (k > static_cast<int>(predictions.size()))
    throw std::invalid_argument("min_fde: k exceeds prediction count");
  const int last = static_cast<int>(truth.rows()) - 1;
  double best = std::numeric_limits<double>::infinity();
  for (const int i : detail::top_k_indices(scores, k)) {
    const double fde = (predictions[i].row(last) - truth.row(last)).norm();
    best = std::min(best, fde);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Tracking quality report

struct GtTrackPoint {
  int frame = 0;
  int agent_id = 0;
  int class_id = 0;
  Vec2 position = Vec2::Zero();
};

struct TrackingReport {
  int id_switches = 0;
  int misses = 0;
  int false_tracks = 0;
  int gt_total = 0;
  std::map<int, int> matched_frames_per_agent;   // agent id -> matched frame count
  std::map<int, int> visible_frames_per_agent;   // agent id -> GT frame count
};

/// Per-frame GT-to-tracklet matching by BEV center distance (Hungarian).
/// An identity switch is counted when an agent's matched track id changes.
inline TrackingReport tracking_report(const std::vector<TrackRecord>& stream,
                                      const std::vector<GtTrackPoint>& ground_truth,
                                      double match_distance = 2.0) {
  TrackingReport rep;
  std::map<int, std::vector<const TrackRecord*>> by_frame;
  for (const TrackRecord& r : stream) by_frame[r.frame].push_back(&r);
  std::map<int, std::vector<const GtTrackPoint*>> gt_by_frame;
  for (const GtTrackPoint& g : ground_truth) {
    gt_by_frame[g.frame].push_back(&g);
    rep.visible_frames_per_agent[g.agent_id] += 1;
  }
  rep.gt_total = static_cast<int>(ground_truth.size());

  std::map<int, int> last_track_of_agent;
  for (const auto& [frame, gts] : gt_by_frame) {
    const auto it = by_frame.find(frame);
    const std::vector<const TrackRecord*> tracks =
        it == by_frame.end() ? std::vector<const TrackRecord*>{} : it->second;
    Mat cost(gts.size(), tracks.size());
    for (size_t g = 0; g < gts.size(); ++g)
      for (size_t t = 0; t < tracks.size(); ++t) {
        const Vec2 tp(tracks[t]->box.center.x(), tracks[t]->box.center.y());
        const double d = (gts[g]->position - tp).norm();
        cost(g, t) = d <= match_distance ? d : kForbiddenCost;
      }
    const Assignment assign = solve_assignment(cost);
    std::vector<char> track_used(tracks.size(), 0);
    for (const auto& [g, t] : assign.matches) {
      track_used[t] = 1;
      const int agent = gts[g]->agent_id;
      rep.matched_frames_per_agent[agent] += 1;
      const auto prev = last_track_of_agent.find(agent);
      if (prev != last_track_of_agent.end() && prev->second != tracks[t]->id) rep.id_switches += 1;
      last_track_of_agent[agent] = tracks[t]->id;
    }
    rep.misses += static_cast<int>(assign.unmatched_rows.size());
    for (size_t t = 0; t < tracks.size(); ++t)
      if (!track_used[t]) rep.false_tracks += 1;
  }
  return rep;
}

}  // namespace mmp
