#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mmp/common.hpp"

namespace mmp {

// ---------------------------------------------------------------------------
// Configuration

struct TrajConfig {
  int t_obs = 16;
  int t_min = 2;
  int t_pred = 24;
  int num_classes = 3;  // targets; the robot joins as neighbor class num_classes
  std::vector<double> neighbor_thresholds = {2.0, 5.0, 3.0, 2.0};  // per class + robot, meters
  int modes = 7;
  int embed_dim = 64;
  int decoder_layers = 2;
  int attn_heads = 4;
  int ffn_hidden = 128;
  std::vector<double> class_speed_scale = {1.0, 4.0, 2.0};
  double sentinel = 1e6;    // meters, missing neighbor positions
  double dt = 0.1;          // seconds per frame
  int k_max = 32;           // neighbor cap, nearest first
  double lambda_score = 1.0;
  double recip_floor = 1e-3;  // reciprocal guard near zero

  int n() const { return modes * modes; }
  int obs_flat() const { return 2 * t_obs; }
  int pred_flat() const { return 2 * t_pred; }

  void validate() const {
    if (t_min > t_obs) throw std::invalid_argument("TrajConfig: t_min must be <= t_obs");
    if (modes < 1) throw std::invalid_argument("TrajConfig: modes must be >= 1");
    if (static_cast<int>(neighbor_thresholds.size()) != num_classes + 1)
      throw std::invalid_argument("TrajConfig: one neighbor threshold per class plus the robot");
    for (double d : neighbor_thresholds)
      if (d <= 0) throw std::invalid_argument("TrajConfig: thresholds must be positive");
    if (embed_dim % attn_heads != 0)
      throw std::invalid_argument("TrajConfig: embed_dim must be divisible by attn_heads");
  }
};

// ---------------------------------------------------------------------------
// Reference trajectories

struct ReferenceTrajectorySet {
  // Per class: n x (2*t_pred), rows flattened [x0, y0, x1, y1, ...].
  std::vector<Mat> trajectories;
  std::vector<std::pair<double, double>> mode_descriptors;  // (linear, angular) per mode
};

/// The m base motion modes: stationary, slow forward, fast forward, and the
/// four turn variants. Linear speeds scale per class.
inline std::vector<std::pair<double, double>> default_motion_modes(int m) {
  const std::vector<std::pair<double, double>> base = {
      {0.0, 0.0}, {0.8, 0.0}, {2.0, 0.0}, {0.8, 0.4}, {0.8, 1.2}, {0.8, -0.4}, {0.8, -1.2}};
  std::vector<std::pair<double, double>> out;
  for (int i = 0; i < m; ++i)
    out.push_back(i < static_cast<int>(base.size())
                      ? base[i]
                      : std::make_pair(0.4 * (i + 1), 0.2 * (i % 3 - 1)));
  return out;
}

/// Kinematic unicycle rollout from the origin heading +X. Each of the n = m^2
/// references runs mode a for the first half and mode b for the second half,
/// continuing from the stage-1 terminal pose.
inline ReferenceTrajectorySet generate_references(const TrajConfig& cfg, std::uint64_t seed = 0,
                                                  double jitter_sigma = 0.0) {
  cfg.validate();
  ReferenceTrajectorySet out;
  out.mode_descriptors = default_motion_modes(cfg.modes);
  Rng rng(seed);
  const int half = (cfg.t_pred + 1) / 2;
  for (int cls = 0; cls < cfg.num_classes; ++cls) {
    const double scale = cls < static_cast<int>(cfg.class_speed_scale.size())
                             ? cfg.class_speed_scale[cls]
                             : 1.0;
    Mat refs(cfg.n(), cfg.pred_flat());
    int row = 0;
    for (int a = 0; a < cfg.modes; ++a)
      for (int b = 0; b < cfg.modes; ++b, ++row) {
        double x = 0, y = 0, heading = 0;
        for (int t = 0; t < cfg.t_pred; ++t) {
          const auto& [v, w] = out.mode_descriptors[t < half ? a : b];
          x += scale * v * std::cos(heading) * cfg.dt;
          y += scale * v * std::sin(heading) * cfg.dt;
          heading += w * cfg.dt;
          refs(row, 2 * t) = x + jitter_sigma * rng.normal();
          refs(row, 2 * t + 1) = y + jitter_sigma * rng.normal();
        }
      }
    out.trajectories.push_back(std::move(refs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct ObjectHistory {
  int id = 0;
  int class_id = 0;                // 0..num_classes-1, or the robot class
  std::vector<Vec2> positions;     // world frame, oldest first, last = current
  std::vector<Vec2> future;        // world frame ground truth (training only)
};

/// One normalized prediction element. world = R(angle) * p + translation.
struct TrajElement {
  int source_id = 0;
  int class_id = 0;
  Mat observed;                    // t_obs x 2, canonical frame
  std::vector<Mat> neighbors;      // k entries, t_obs x 2, sentinel-filled
  std::vector<int> neighbor_class;
  double norm_angle = 0.0;
  Vec2 norm_translation = Vec2::Zero();
  Mat future;                      // t_pred x 2, canonical frame; may be empty
};

struct TrajBatch {
  std::vector<TrajElement> elements;
  std::vector<std::pair<int, std::string>> rejected;  // (source id, reason)
};

inline Vec2 to_canonical(const Vec2& world, double angle, const Vec2& translation) {
  const double c = std::cos(-angle), s = std::sin(-angle);
  const Vec2 d = world - translation;
  return {c * d.x() - s * d.y(), s * d.x() + c * d.y()};
}

inline Vec2 from_canonical(const Vec2& canonical, double angle, const Vec2& translation) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * canonical.x() - s * canonical.y() + translation.x(),
          s * canonical.x() + c * canonical.y() + translation.y()};
}

namespace detail {

/// Last t_obs positions, front-padded with the earliest.
inline std::vector<Vec2> padded_window(const std::vector<Vec2>& positions, int t_obs) {
  std::vector<Vec2> out(t_obs);
  const int len = static_cast<int>(positions.size());
  const int take = std::min(len, t_obs);
  for (int t = 0; t < t_obs; ++t) {
    const int src = len - t_obs + t;
    out[t] = src < len - take ? positions[len - take] : positions[src];
  }
  return out;
}

}  // namespace detail

/// Normalizes each eligible history into the canonical frame (last position
/// at the origin, earliest on the positive X axis) and gathers neighbors by
/// the class-threshold rule. Histories shorter than t_min are rejected with
/// a reason.
inline TrajBatch preprocess(const std::vector<ObjectHistory>& histories, const TrajConfig& cfg) {
  cfg.validate();
  TrajBatch batch;
  for (size_t target = 0; target < histories.size(); ++target) {
    const ObjectHistory& hist = histories[target];
    if (hist.class_id >= cfg.num_classes) continue;  // the robot is never a target
    if (static_cast<int>(hist.positions.size()) < cfg.t_min) {
      batch.rejected.emplace_back(hist.id, "history shorter than t_min");
      continue;
    }
    TrajElement el;
    el.source_id = hist.id;
    el.class_id = hist.class_id;

    const auto window = detail::padded_window(hist.positions, cfg.t_obs);
    const Vec2 last = window.back();
    const Vec2 earliest = window.front();
    const Vec2 disp = earliest - last;
    el.norm_translation = last;
    el.norm_angle = disp.norm() < 1e-6 ? 0.0 : std::atan2(disp.y(), disp.x());

    el.observed = Mat(cfg.t_obs, 2);
    for (int t = 0; t < cfg.t_obs; ++t)
      el.observed.row(t) = to_canonical(window[t], el.norm_angle, el.norm_translation).transpose();

    // Neighbor selection by minimum pairwise distance over the shared window.
    struct Scored { double dist; size_t idx; };
    std::vector<Scored> picked;
    for (size_t other = 0; other < histories.size(); ++other) {
      if (other == target) continue;
      const ObjectHistory& nb = histories[other];
      if (nb.positions.empty()) continue;
      const double d_i = cfg.neighbor_thresholds[hist.class_id];
      const double d_j = cfg.neighbor_thresholds[std::min(
          nb.class_id, static_cast<int>(cfg.neighbor_thresholds.size()) - 1)];
      const double gate = std::max(d_i, d_j);
      // Shared window: align both histories at the current frame.
      const int len_t = static_cast<int>(hist.positions.size());
      const int len_n = static_cast<int>(nb.positions.size());
      const int shared = std::min({len_t, len_n, cfg.t_obs});
      double min_dist = std::numeric_limits<double>::infinity();
      for (int s = 0; s < shared; ++s) {
        const Vec2 a = hist.positions[len_t - 1 - s];
        const Vec2 b = nb.positions[len_n - 1 - s];
        min_dist = std::min(min_dist, (a - b).norm());
      }
      if (min_dist < gate) picked.push_back({min_dist, other});
    }
    std::stable_sort(picked.begin(), picked.end(),
                     [](const Scored& a, const Scored& b) { return a.dist < b.dist; });
    if (static_cast<int>(picked.size()) > cfg.k_max) picked.resize(cfg.k_max);

    for (const Scored& sc : picked) {
      const ObjectHistory& nb = histories[sc.idx];
      Mat nmat = Mat::Constant(cfg.t_obs, 2, cfg.sentinel);
      const int len_n = static_cast<int>(nb.positions.size());
      const int have = std::min(len_n, cfg.t_obs);
      for (int s = 0; s < have; ++s) {
        const Vec2 p = nb.positions[len_n - 1 - s];
        nmat.row(cfg.t_obs - 1 - s) =
            to_canonical(p, el.norm_angle, el.norm_translation).transpose();
      }
      el.neighbors.push_back(std::move(nmat));
      el.neighbor_class.push_back(std::min(nb.class_id, cfg.num_classes));
    }

    if (!hist.future.empty()) {
      el.future = Mat(cfg.t_pred, 2);
      for (int t = 0; t < cfg.t_pred && t < static_cast<int>(hist.future.size()); ++t)
        el.future.row(t) =
            to_canonical(hist.future[t], el.norm_angle, el.norm_translation).transpose();
    }
    batch.elements.push_back(std::move(el));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Parameters

struct LinearParams {
  Mat w;
  Vec b;
  static LinearParams seeded(int out_dim, int in_dim, Rng& rng) {
    return {random_matrix(out_dim, in_dim, rng, 1.0 / std::sqrt(in_dim)), Vec::Zero(out_dim)};
  }
  static LinearParams zeros(int out_dim, int in_dim) {
    return {Mat::Zero(out_dim, in_dim), Vec::Zero(out_dim)};
  }
};

struct TrajAttnParams {
  Mat w_q, w_k, w_v, w_o;  // d x d
};

struct TrajDecoderLayerParams {
  TrajAttnParams self_attn;
  TrajAttnParams cross_attn;
  LinearParams ffn1;  // hidden x d
  LinearParams ffn2;  // d x hidden
  Vec ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
};

struct TrajParams {
  std::vector<LinearParams> phi;         // per class: d x (obs_flat + pred_flat)
  std::vector<LinearParams> psi;         // per neighbor class (num_classes + 1): d x obs_flat
  std::vector<TrajDecoderLayerParams> layers;
  std::vector<LinearParams> head_traj;   // per class: pred_flat x d
  std::vector<LinearParams> head_score;  // per class: 1 x d

  static TrajParams seeded(const TrajConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    TrajParams p;
    const int d = cfg.embed_dim;
    for (int c = 0; c < cfg.num_classes; ++c)
      p.phi.push_back(LinearParams::seeded(d, cfg.obs_flat() + cfg.pred_flat(), rng));
    for (int c = 0; c <= cfg.num_classes; ++c)
      p.psi.push_back(LinearParams::seeded(d, cfg.obs_flat(), rng));
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      TrajDecoderLayerParams layer;
      const double s = 1.0 / std::sqrt(d);
      layer.self_attn = {random_matrix(d, d, rng, s), random_matrix(d, d, rng, s),
                         random_matrix(d, d, rng, s), random_matrix(d, d, rng, s)};
      layer.cross_attn = {random_matrix(d, d, rng, s), random_matrix(d, d, rng, s),
                          random_matrix(d, d, rng, s), random_matrix(d, d, rng, s)};
      layer.ffn1 = LinearParams::seeded(cfg.ffn_hidden, d, rng);
      layer.ffn2 = LinearParams::seeded(d, cfg.ffn_hidden, rng);
      layer.ln1_g = layer.ln2_g = layer.ln3_g = Vec::Ones(d);
      layer.ln1_b = layer.ln2_b = layer.ln3_b = Vec::Zero(d);
      p.layers.push_back(std::move(layer));
    }
    for (int c = 0; c < cfg.num_classes; ++c) {
      // Zero-init heads: the zero-parameter model predicts the references.
      p.head_traj.push_back(LinearParams::zeros(cfg.pred_flat(), d));
      p.head_score.push_back(LinearParams::zeros(1, d));
    }
    return p;
  }
};

struct PredictionSet {
  Mat trajectories;  // n x pred_flat, canonical frame
  Vec scores;        // n-simplex
};

// ---------------------------------------------------------------------------
// Forward pass with caches for backprop

namespace detail {

inline double recip_guarded(double v, double floor) {
  const double mag = std::max(std::abs(v), floor);
  return (v < 0 ? -1.0 : 1.0) / mag;
}

inline double recip_guarded_grad(double v, double floor) {
  return std::abs(v) > floor ? -1.0 / (v * v) : 0.0;
}

struct LayerNormCache {
  Mat input;
  Mat xhat;
  Vec inv_sigma;  // per row
};

inline Mat layer_norm_fwd(const Mat& x, const Vec& gain, const Vec& bias, LayerNormCache& cache,
                          double eps = 1e-6) {
  cache.input = x;
  cache.xhat = Mat(x.rows(), x.cols());
  cache.inv_sigma = Vec(x.rows());
  Mat out(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_sigma(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
    out.row(r) = cache.xhat.row(r).array() * gain.transpose().array() + bias.transpose().array();
  }
  return out;
}

inline Mat layer_norm_bwd(const Mat& dout, const Vec& gain, const LayerNormCache& cache,
                          Vec& dgain, Vec& dbias) {
  Mat dx(dout.rows(), dout.cols());
  for (int r = 0; r < dout.rows(); ++r) {
    dgain += (dout.row(r).array() * cache.xhat.row(r).array()).matrix().transpose();
    dbias += dout.row(r).transpose();
    const Eigen::ArrayXd dxhat = dout.row(r).transpose().array() * gain.array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat * cache.xhat.row(r).transpose().array()).mean();
    dx.row(r) = (cache.inv_sigma(r) *
                 (dxhat - m1 - cache.xhat.row(r).transpose().array() * m2))
                    .matrix()
                    .transpose();
  }
  return dx;
}

struct AttnCache {
  Mat q_in, kv_in;                 // layer inputs
  Mat q, k, v;                     // projected
  std::vector<Mat> softmax;        // per head
  Mat concat;                      // pre-output-projection
};

inline Mat attention_fwd(const Mat& q_in, const Mat& kv_in, const TrajAttnParams& p, int heads,
                         AttnCache& cache) {
  const int d = static_cast<int>(q_in.cols());
  const int dh = d / heads;
  cache.q_in = q_in;
  cache.kv_in = kv_in;
  cache.q = q_in * p.w_q.transpose();
  cache.k = kv_in * p.w_k.transpose();
  cache.v = kv_in * p.w_v.transpose();
  cache.softmax.clear();
  cache.concat = Mat(q_in.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Mat scores = cache.q.middleCols(h * dh, dh) * cache.k.middleCols(h * dh, dh).transpose() /
                 std::sqrt(static_cast<double>(dh));
    for (int r = 0; r < scores.rows(); ++r) {
      const double mx = scores.row(r).maxCoeff();
      scores.row(r) = (scores.row(r).array() - mx).exp();
      scores.row(r) /= scores.row(r).sum();
    }
    cache.concat.middleCols(h * dh, dh) = scores * cache.v.middleCols(h * dh, dh);
    cache.softmax.push_back(std::move(scores));
  }
  return cache.concat * p.w_o.transpose();
}

/// Returns gradients w.r.t. q_in; accumulates into dkv_in and the parameter
/// gradients.
inline Mat attention_bwd(const Mat& dout, const TrajAttnParams& p, int heads,
                         const AttnCache& cache, TrajAttnParams& grad, Mat& dkv_in) {
  const int d = static_cast<int>(cache.q_in.cols());
  const int dh = d / heads;
  grad.w_o += dout.transpose() * cache.concat;
  const Mat dconcat = dout * p.w_o;
  Mat dq = Mat::Zero(cache.q.rows(), d);
  Mat dk = Mat::Zero(cache.k.rows(), d);
  Mat dv = Mat::Zero(cache.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Mat& s = cache.softmax[h];
    const Mat dO = dconcat.middleCols(h * dh, dh);
    Mat ds = dO * cache.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) = s.transpose() * dO;
    Mat dz(s.rows(), s.cols());
    for (int r = 0; r < s.rows(); ++r) {
      const double dot = (ds.row(r).array() * s.row(r).array()).sum();
      dz.row(r) = s.row(r).array() * (ds.row(r).array() - dot);
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    dq.middleCols(h * dh, dh) = dz * cache.k.middleCols(h * dh, dh) * inv_sqrt;
    dk.middleCols(h * dh, dh) = dz.transpose() * cache.q.middleCols(h * dh, dh) * inv_sqrt;
  }
  grad.w_q += dq.transpose() * cache.q_in;
  grad.w_k += dk.transpose() * cache.kv_in;
  grad.w_v += dv.transpose() * cache.kv_in;
  dkv_in += dk * p.w_k + dv * p.w_v;
  return dq * p.w_q;
}

struct LayerCache {
  LayerNormCache ln1, ln2, ln3;
  AttnCache self_attn, cross_attn;
  Mat after_self, after_cross;  // residual stream snapshots
  Mat ffn_pre;                  // hidden pre-activation
  Mat ffn_ln;                   // normed FFN input
  bool has_cross = false;
};

struct ForwardCache {
  Vec x_flat;
  Mat ex_inputs;   // n x (obs_flat + pred_flat), per-reference concat rows
  Mat e_x;         // n x d
  Mat recips;      // k x obs_flat, reciprocal-transformed neighbor rows
  Mat e_n;         // k x d
  std::vector<LayerCache> layers;
  Mat e_o;         // n x d
  Mat offsets;     // n x pred_flat
  Vec logits;      // n
  Vec scores;      // n
};

}  // namespace detail

inline Vec flatten_rows(const Mat& m) {
  Vec out(m.rows() * m.cols());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) out(r * m.cols() + c) = m(r, c);
  return out;
}

inline Mat unflatten_rows(const Vec& v, int cols) {
  Mat out(v.size() / cols, cols);
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < cols; ++c) out(r, c) = v(r * cols + c);
  return out;
}

/// Encoder: observed trajectory concatenated with each flattened reference
/// through the class-specific layer; neighbors reciprocal-transformed
/// through their class-specific layer.
inline void encode(const TrajElement& el, const ReferenceTrajectorySet& refs,
                   const TrajParams& params, const TrajConfig& cfg, detail::ForwardCache& cache) {
  if (el.class_id < 0 || el.class_id >= cfg.num_classes)
    throw std::invalid_argument("encode: unknown class id " + std::to_string(el.class_id));
  const Mat& r = refs.trajectories[el.class_id];
  cache.x_flat = flatten_rows(el.observed);
  cache.ex_inputs = Mat(cfg.n(), cfg.obs_flat() + cfg.pred_flat());
  for (int i = 0; i < cfg.n(); ++i) {
    cache.ex_inputs.row(i).head(cfg.obs_flat()) = cache.x_flat.transpose();
    cache.ex_inputs.row(i).tail(cfg.pred_flat()) = r.row(i);
  }
  const LinearParams& phi = params.phi[el.class_id];
  cache.e_x = (cache.ex_inputs * phi.w.transpose()).rowwise() + phi.b.transpose();

  const int k = static_cast<int>(el.neighbors.size());
  cache.recips = Mat(k, cfg.obs_flat());
  cache.e_n = Mat(k, cfg.embed_dim);
  for (int j = 0; j < k; ++j) {
    if (el.neighbor_class[j] < 0 || el.neighbor_class[j] > cfg.num_classes)
      throw std::invalid_argument("encode: unknown neighbor class id");
    const Vec n_flat = flatten_rows(el.neighbors[j]);
    for (int i = 0; i < cfg.obs_flat(); ++i)
      cache.recips(j, i) = detail::recip_guarded(n_flat(i), cfg.recip_floor);
    const LinearParams& psi = params.psi[el.neighbor_class[j]];
    cache.e_n.row(j) = (psi.w * cache.recips.row(j).transpose() + psi.b).transpose();
  }
}

/// Two pre-norm decoder layers: self attention over the n queries, cross
/// attention to the neighbors (skipped cleanly when k = 0), FFN.
inline Mat decode(const Mat& e_x, const Mat& e_n, const TrajParams& params, const TrajConfig& cfg,
                  std::vector<detail::LayerCache>& caches) {
  Mat x = e_x;
  caches.clear();
  caches.resize(params.layers.size());
  for (size_t l = 0; l < params.layers.size(); ++l) {
    const TrajDecoderLayerParams& p = params.layers[l];
    detail::LayerCache& c = caches[l];
    {
      const Mat normed = detail::layer_norm_fwd(x, p.ln1_g, p.ln1_b, c.ln1);
      x = x + detail::attention_fwd(normed, normed, p.self_attn, cfg.attn_heads, c.self_attn);
    }
    c.after_self = x;
    c.has_cross = e_n.rows() > 0;
    if (c.has_cross) {
      const Mat normed = detail::layer_norm_fwd(x, p.ln2_g, p.ln2_b, c.ln2);
      x = x + detail::attention_fwd(normed, e_n, p.cross_attn, cfg.attn_heads, c.cross_attn);
    }
    c.after_cross = x;
    c.ffn_ln = detail::layer_norm_fwd(x, p.ln3_g, p.ln3_b, c.ln3);
    c.ffn_pre = (c.ffn_ln * p.ffn1.w.transpose()).rowwise() + p.ffn1.b.transpose();
    x = x + ((c.ffn_pre.cwiseMax(0.0) * p.ffn2.w.transpose()).rowwise() + p.ffn2.b.transpose());
  }
  return x;
}

/// Trajectory head outputs offsets added to the class references; score head
/// plus softmax gives the n-simplex.
inline PredictionSet heads(const Mat& e_o, int class_id, const ReferenceTrajectorySet& refs,
                           const TrajParams& params, const TrajConfig& cfg,
                           detail::ForwardCache* cache = nullptr) {
  const LinearParams& th = params.head_traj[class_id];
  const LinearParams& sh = params.head_score[class_id];
  const Mat offsets = (e_o * th.w.transpose()).rowwise() + th.b.transpose();
  PredictionSet out;
  out.trajectories = refs.trajectories[class_id] + offsets;
  Vec logits = e_o * sh.w.row(0).transpose() + Vec::Constant(e_o.rows(), sh.b(0));
  const double mx = logits.maxCoeff();
  Vec ex = (logits.array() - mx).exp();
  out.scores = ex / ex.sum();
  if (cache) {
    cache->offsets = offsets;
    cache->logits = logits;
    cache->scores = out.scores;
  }
  return out;
}

inline PredictionSet forward(const TrajElement& el, const ReferenceTrajectorySet& refs,
                             const TrajParams& params, const TrajConfig& cfg,
                             detail::ForwardCache& cache) {
  encode(el, refs, params, cfg, cache);
  cache.e_o = decode(cache.e_x, cache.e_n, params, cfg, cache.layers);
  return heads(cache.e_o, el.class_id, refs, params, cfg, &cache);
}

// ---------------------------------------------------------------------------
// Loss

/// Mean pointwise displacement between flattened trajectories.
inline double ade_flat(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  double acc = 0.0;
  const int t = static_cast<int>(a.size()) / 2;
  for (int i = 0; i < t; ++i) {
    const double dx = a(2 * i) - b(2 * i);
    const double dy = a(2 * i + 1) - b(2 * i + 1);
    acc += std::sqrt(dx * dx + dy * dy);
  }
  return acc / t;
}

/// Positive sample: the reference with the smallest ADE to the truth, ties
/// to the lowest index.
inline int positive_sample(const Mat& refs_for_class, const Eigen::RowVectorXd& truth_flat) {
  int best = 0;
  double best_ade = std::numeric_limits<double>::infinity();
  for (int i = 0; i < refs_for_class.rows(); ++i) {
    const double a = ade_flat(refs_for_class.row(i), truth_flat);
    if (a < best_ade) {
      best_ade = a;
      best = i;
    }
  }
  return best;
}

struct LossResult {
  double total = 0.0;
  double smooth_l1 = 0.0;
  double cross_entropy = 0.0;
  int positive_index = 0;
};

inline double smooth_l1(double e) { return std::abs(e) < 1.0 ? 0.5 * e * e : std::abs(e) - 0.5; }
inline double smooth_l1_grad(double e) {
  return std::abs(e) < 1.0 ? e : (e > 0 ? 1.0 : -1.0);
}

inline LossResult loss(const PredictionSet& pred, const Mat& truth,
                       const Mat& refs_for_class, const TrajConfig& cfg) {
  const Vec truth_flat = flatten_rows(truth);
  LossResult out;
  out.positive_index = positive_sample(refs_for_class, truth_flat.transpose());
  const Eigen::RowVectorXd diff =
      pred.trajectories.row(out.positive_index) - truth_flat.transpose();
  for (int i = 0; i < diff.size(); ++i) out.smooth_l1 += smooth_l1(diff(i));
  out.smooth_l1 /= diff.size();
  out.cross_entropy = -std::log(std::max(pred.scores(out.positive_index), 1e-300));
  out.total = out.smooth_l1 + cfg.lambda_score * out.cross_entropy;
  return out;
}

}  // namespace mmp
