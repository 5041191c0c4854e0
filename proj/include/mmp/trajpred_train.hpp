#pragma once

#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmp/common.hpp"
#include "mmp/trajpred.hpp"

namespace mmp {

// ---------------------------------------------------------------------------
// Gradient container and parameter traversal

struct TrajGradients {
  TrajParams params;
  std::vector<Mat> references;  // per class, n x pred_flat

  static TrajGradients zeros_like(const TrajParams& p, const ReferenceTrajectorySet& refs) {
    TrajGradients g;
    g.params = p;
    const auto zero_linear = [](LinearParams& lp) {
      lp.w.setZero();
      lp.b.setZero();
    };
    for (auto& lp : g.params.phi) zero_linear(lp);
    for (auto& lp : g.params.psi) zero_linear(lp);
    for (auto& layer : g.params.layers) {
      layer.self_attn.w_q.setZero();
      layer.self_attn.w_k.setZero();
      layer.self_attn.w_v.setZero();
      layer.self_attn.w_o.setZero();
      layer.cross_attn.w_q.setZero();
      layer.cross_attn.w_k.setZero();
      layer.cross_attn.w_v.setZero();
      layer.cross_attn.w_o.setZero();
      zero_linear(layer.ffn1);
      zero_linear(layer.ffn2);
      layer.ln1_g.setZero();
      layer.ln1_b.setZero();
      layer.ln2_g.setZero();
      layer.ln2_b.setZero();
      layer.ln3_g.setZero();
      layer.ln3_b.setZero();
    }
    for (auto& lp : g.params.head_traj) zero_linear(lp);
    for (auto& lp : g.params.head_score) zero_linear(lp);
    for (const Mat& r : refs.trajectories) g.references.push_back(Mat::Zero(r.rows(), r.cols()));
    return g;
  }
};

struct ParamView {
  std::string name;
  double* data;
  std::int64_t size;
};

/// Fixed-order traversal of every learnable tensor, including the reference
/// trajectory positions. The same order is used by the optimizer, the
/// gradient checks, and the checkpoint format.
inline std::vector<ParamView> param_views(TrajParams& p, std::vector<Mat>& references) {
  std::vector<ParamView> out;
  const auto add_mat = [&](const std::string& name, Mat& m) {
    out.push_back({name, m.data(), m.size()});
  };
  const auto add_vec = [&](const std::string& name, Vec& v) {
    out.push_back({name, v.data(), v.size()});
  };
  for (size_t c = 0; c < p.phi.size(); ++c) {
    add_mat("phi" + std::to_string(c) + ".w", p.phi[c].w);
    add_vec("phi" + std::to_string(c) + ".b", p.phi[c].b);
  }
  for (size_t c = 0; c < p.psi.size(); ++c) {
    add_mat("psi" + std::to_string(c) + ".w", p.psi[c].w);
    add_vec("psi" + std::to_string(c) + ".b", p.psi[c].b);
  }
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto& lay = p.layers[l];
    add_mat(pre + "self.wq", lay.self_attn.w_q);
    add_mat(pre + "self.wk", lay.self_attn.w_k);
    add_mat(pre + "self.wv", lay.self_attn.w_v);
    add_mat(pre + "self.wo", lay.self_attn.w_o);
    add_mat(pre + "cross.wq", lay.cross_attn.w_q);
    add_mat(pre + "cross.wk", lay.cross_attn.w_k);
    add_mat(pre + "cross.wv", lay.cross_attn.w_v);
    add_mat(pre + "cross.wo", lay.cross_attn.w_o);
    add_mat(pre + "ffn1.w", lay.ffn1.w);
    add_vec(pre + "ffn1.b", lay.ffn1.b);
    add_mat(pre + "ffn2.w", lay.ffn2.w);
    add_vec(pre + "ffn2.b", lay.ffn2.b);
    add_vec(pre + "ln1.g", lay.ln1_g);
    add_vec(pre + "ln1.b", lay.ln1_b);
    add_vec(pre + "ln2.g", lay.ln2_g);
    add_vec(pre + "ln2.b", lay.ln2_b);
    add_vec(pre + "ln3.g", lay.ln3_g);
    add_vec(pre + "ln3.b", lay.ln3_b);
  }
  for (size_t c = 0; c < p.head_traj.size(); ++c) {
    add_mat("head_traj" + std::to_string(c) + ".w", p.head_traj[c].w);
    add_vec("head_traj" + std::to_string(c) + ".b", p.head_traj[c].b);
  }
  for (size_t c = 0; c < p.head_score.size(); ++c) {
    add_mat("head_score" + std::to_string(c) + ".w", p.head_score[c].w);
    add_vec("head_score" + std::to_string(c) + ".b", p.head_score[c].b);
  }
  for (size_t c = 0; c < references.size(); ++c)
    add_mat("references" + std::to_string(c), references[c]);
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

/// Analytic gradients for one element, accumulated into `grad`. Returns the
/// loss. The reference positions receive gradients through both the encoder
/// concat path and the prediction-head offset path.
inline LossResult backward(const TrajElement& el, const ReferenceTrajectorySet& refs,
                           const TrajParams& params, const TrajConfig& cfg, TrajGradients& grad) {
  detail::ForwardCache cache;
  const PredictionSet pred = forward(el, refs, params, cfg, cache);
  if (el.future.rows() != cfg.t_pred)
    throw std::invalid_argument("backward: element has no ground-truth future");
  const LossResult ls = loss(pred, el.future, refs.trajectories[el.class_id], cfg);
  const int cls = el.class_id;
  const int t_star = ls.positive_index;
  const int pf = cfg.pred_flat();

  // Head gradients.
  const Vec truth_flat = flatten_rows(el.future);
  Eigen::RowVectorXd d_pred = Eigen::RowVectorXd::Zero(pf);
  {
    const Eigen::RowVectorXd diff = pred.trajectories.row(t_star) - truth_flat.transpose();
    for (int i = 0; i < pf; ++i) d_pred(i) = smooth_l1_grad(diff(i)) / pf;
  }
  // Offset path: d offsets row t_star = d_pred; reference row likewise.
  grad.references[cls].row(t_star) += d_pred;
  Mat d_offsets = Mat::Zero(cfg.n(), pf);
  d_offsets.row(t_star) = d_pred;

  Vec d_logits = cache.scores * cfg.lambda_score;
  d_logits(t_star) -= cfg.lambda_score;

  const LinearParams& th = params.head_traj[cls];
  const LinearParams& sh = params.head_score[cls];
  grad.params.head_traj[cls].w += d_offsets.transpose() * cache.e_o;
  grad.params.head_traj[cls].b += d_offsets.colwise().sum().transpose();
  grad.params.head_score[cls].w.row(0) += (cache.e_o.transpose() * d_logits).transpose();
  grad.params.head_score[cls].b(0) += d_logits.sum();

  Mat d_eo = d_offsets * th.w + d_logits * sh.w.row(0);

  // Decoder layers in reverse.
  Mat d_en = Mat::Zero(cache.e_n.rows(), cache.e_n.cols());
  Mat dx = d_eo;
  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const TrajDecoderLayerParams& p = params.layers[l];
    TrajDecoderLayerParams& g = grad.params.layers[l];
    const detail::LayerCache& c = cache.layers[l];
    // FFN block: x_out = x + ffn2(relu(ffn1(LN3(x))))
    {
      const Mat relu = c.ffn_pre.cwiseMax(0.0);
      const Mat d_ffn_out = dx;  // residual: dx flows through both paths
      g.ffn2.w += d_ffn_out.transpose() * relu;
      g.ffn2.b += d_ffn_out.colwise().sum().transpose();
      Mat d_relu = d_ffn_out * p.ffn2.w;
      for (int r = 0; r < d_relu.rows(); ++r)
        for (int col = 0; col < d_relu.cols(); ++col)
          if (c.ffn_pre(r, col) <= 0.0) d_relu(r, col) = 0.0;
      g.ffn1.w += d_relu.transpose() * c.ffn_ln;
      g.ffn1.b += d_relu.colwise().sum().transpose();
      const Mat d_ln_in = d_relu * p.ffn1.w;
      dx += detail::layer_norm_bwd(d_ln_in, p.ln3_g, c.ln3, g.ln3_g, g.ln3_b);
    }
    // Cross attention block.
    if (c.has_cross) {
      const Mat d_attn_out = dx;
      const Mat d_q_in =
          detail::attention_bwd(d_attn_out, p.cross_attn, cfg.attn_heads, c.cross_attn,
                                g.cross_attn, d_en);
      dx += detail::layer_norm_bwd(d_q_in, p.ln2_g, c.ln2, g.ln2_g, g.ln2_b);
    }
    // Self attention block: q and kv are the same normed matrix.
    {
      const Mat d_attn_out = dx;
      Mat d_kv = Mat::Zero(dx.rows(), dx.cols());
      const Mat d_q =
          detail::attention_bwd(d_attn_out, p.self_attn, cfg.attn_heads, c.self_attn,
                                g.self_attn, d_kv);
      dx += detail::layer_norm_bwd(d_q + d_kv, p.ln1_g, c.ln1, g.ln1_g, g.ln1_b);
    }
  }

  // Encoder gradients.
  const LinearParams& phi = params.phi[cls];
  grad.params.phi[cls].w += dx.transpose() * cache.ex_inputs;
  grad.params.phi[cls].b += dx.colwise().sum().transpose();
  // Concat path into the references: the tail block of each input row.
  grad.references[cls] += dx * phi.w.rightCols(pf);

  for (int j = 0; j < cache.e_n.rows(); ++j) {
    const int ncls = el.neighbor_class[j];
    grad.params.psi[ncls].w += d_en.row(j).transpose() * cache.recips.row(j);
    grad.params.psi[ncls].b += d_en.row(j).transpose();
  }
  return ls;
}

// ---------------------------------------------------------------------------
// Training

struct OptimizerSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  int steps = 2000;
  std::uint64_t seed = 99;
  bool class_balanced = true;  // inverse-frequency class sampling
  bool parallel = true;
};

struct TrainResult {
  TrajParams params;
  ReferenceTrajectorySet references;
  std::vector<double> loss_curve;
};

inline TrainResult train(const std::vector<TrajElement>& dataset, const TrajConfig& cfg,
                         const OptimizerSettings& opt, TrajParams initial_params,
                         ReferenceTrajectorySet initial_refs) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset must be non-empty");
  cfg.validate();
  TrainResult result;
  result.params = std::move(initial_params);
  result.references = std::move(initial_refs);

  // Inverse-frequency sampling weights per element.
  std::vector<int> class_count(cfg.num_classes, 0);
  for (const TrajElement& el : dataset) class_count[el.class_id] += 1;
  std::vector<double> cum_weight(dataset.size());
  double acc = 0.0;
  for (size_t i = 0; i < dataset.size(); ++i) {
    acc += opt.class_balanced ? 1.0 / std::max(1, class_count[dataset[i].class_id]) : 1.0;
    cum_weight[i] = acc;
  }

  TrajGradients grad = TrajGradients::zeros_like(result.params, result.references);
  auto p_views = param_views(result.params, result.references.trajectories);
  auto g_views = param_views(grad.params, grad.references);
  std::vector<std::vector<double>> m(p_views.size()), v(p_views.size());
  for (size_t i = 0; i < p_views.size(); ++i) {
    m[i].assign(p_views[i].size, 0.0);
    v[i].assign(p_views[i].size, 0.0);
  }

  Rng rng(opt.seed);
  const int batch = std::min<int>(opt.batch_size, static_cast<int>(dataset.size()));
  std::vector<TrajGradients> slot_grads;
  for (int b = 0; b < batch; ++b)
    slot_grads.push_back(TrajGradients::zeros_like(result.params, result.references));

  for (int step = 0; step < opt.steps; ++step) {
    std::vector<int> indices(batch);
    for (int b = 0; b < batch; ++b) {
      const double u = rng.uniform() * acc;
      indices[b] = static_cast<int>(
          std::lower_bound(cum_weight.begin(), cum_weight.end(), u) - cum_weight.begin());
      indices[b] = std::min<int>(indices[b], static_cast<int>(dataset.size()) - 1);
    }
    std::vector<double> losses(batch, 0.0);
    parallel_for(batch, [&](int b) {
      auto views = param_views(slot_grads[b].params, slot_grads[b].references);
      for (auto& view : views) std::fill(view.data, view.data + view.size, 0.0);
      losses[b] = backward(dataset[indices[b]], result.references, result.params, cfg,
                           slot_grads[b]).total;
    }, opt.parallel);

    // Fixed-order reduction keeps parallel and sequential training identical.
    double batch_loss = 0.0;
    for (auto& view : g_views) std::fill(view.data, view.data + view.size, 0.0);
    for (int b = 0; b < batch; ++b) {
      batch_loss += losses[b];
      auto views = param_views(slot_grads[b].params, slot_grads[b].references);
      for (size_t i = 0; i < g_views.size(); ++i)
        for (std::int64_t j = 0; j < g_views[i].size; ++j) g_views[i].data[j] += views[i].data[j];
    }
    batch_loss /= batch;
    if (!std::isfinite(batch_loss))
      throw std::runtime_error("train: loss diverged (non-finite) at step " +
                               std::to_string(step));
    result.loss_curve.push_back(batch_loss);

    const double bc1 = 1.0 - std::pow(opt.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(opt.beta2, step + 1);
    for (size_t i = 0; i < p_views.size(); ++i)
      for (std::int64_t j = 0; j < p_views[i].size; ++j) {
        const double g = g_views[i].data[j] / batch;
        m[i][j] = opt.beta1 * m[i][j] + (1 - opt.beta1) * g;
        v[i][j] = opt.beta2 * v[i][j] + (1 - opt.beta2) * g * g;
        p_views[i].data[j] -=
            opt.learning_rate * (m[i][j] / bc1) / (std::sqrt(v[i][j] / bc2) + opt.eps);
      }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference

struct ObjectPrediction {
  int source_id = 0;
  int class_id = 0;
  std::vector<Mat> trajectories;  // n entries, t_pred x 2, world frame, score-ranked
  Vec scores;                     // matching order
};

/// Full pipeline: preprocess, forward, de-normalize through the stored
/// inverse transform, rank by score.
inline std::vector<ObjectPrediction> predict(const std::vector<ObjectHistory>& histories,
                                             const TrajParams& params,
                                             const ReferenceTrajectorySet& refs,
                                             const TrajConfig& cfg) {
  const TrajBatch batch = preprocess(histories, cfg);
  std::vector<ObjectPrediction> out;
  for (const TrajElement& el : batch.elements) {
    detail::ForwardCache cache;
    const PredictionSet pred = forward(el, refs, params, cfg, cache);
    std::vector<int> order(cfg.n());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return pred.scores(a) > pred.scores(b); });
    ObjectPrediction op;
    op.source_id = el.source_id;
    op.class_id = el.class_id;
    op.scores = Vec(cfg.n());
    for (int r = 0; r < cfg.n(); ++r) {
      const int i = order[r];
      op.scores(r) = pred.scores(i);
      Mat world(cfg.t_pred, 2);
      for (int t = 0; t < cfg.t_pred; ++t) {
        const Vec2 canon(pred.trajectories(i, 2 * t), pred.trajectories(i, 2 * t + 1));
        world.row(t) = from_canonical(canon, el.norm_angle, el.norm_translation).transpose();
      }
      op.trajectories.push_back(std::move(world));
    }
    out.push_back(std::move(op));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const TrajConfig& cfg, TrajParams& params,
                                         ReferenceTrajectorySet& refs) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["config"] = {{"t_obs", cfg.t_obs},
                 {"t_min", cfg.t_min},
                 {"t_pred", cfg.t_pred},
                 {"num_classes", cfg.num_classes},
                 {"neighbor_thresholds", cfg.neighbor_thresholds},
                 {"modes", cfg.modes},
                 {"embed_dim", cfg.embed_dim},
                 {"decoder_layers", cfg.decoder_layers},
                 {"attn_heads", cfg.attn_heads},
                 {"ffn_hidden", cfg.ffn_hidden},
                 {"class_speed_scale", cfg.class_speed_scale},
                 {"sentinel", cfg.sentinel},
                 {"dt", cfg.dt},
                 {"k_max", cfg.k_max},
                 {"lambda_score", cfg.lambda_score},
                 {"recip_floor", cfg.recip_floor}};
  nlohmann::json tensors = nlohmann::json::object();
  for (const ParamView& view : param_views(params, refs.trajectories)) {
    std::vector<double> data(view.data, view.data + view.size);
    tensors[view.name] = data;
  }
  j["tensors"] = tensors;
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& [lin, ang] : refs.mode_descriptors) modes.push_back({lin, ang});
  j["mode_descriptors"] = modes;
  return j;
}

struct Checkpoint {
  TrajConfig config;
  TrajParams params;
  ReferenceTrajectorySet references;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j["version"].get<int>() != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported or missing version");
  Checkpoint ck;
  const auto& c = j["config"];
  ck.config.t_obs = c["t_obs"];
  ck.config.t_min = c["t_min"];
  ck.config.t_pred = c["t_pred"];
  ck.config.num_classes = c["num_classes"];
  ck.config.neighbor_thresholds = c["neighbor_thresholds"].get<std::vector<double>>();
  ck.config.modes = c["modes"];
  ck.config.embed_dim = c["embed_dim"];
  ck.config.decoder_layers = c["decoder_layers"];
  ck.config.attn_heads = c["attn_heads"];
  ck.config.ffn_hidden = c["ffn_hidden"];
  ck.config.class_speed_scale = c["class_speed_scale"].get<std::vector<double>>();
  ck.config.sentinel = c["sentinel"];
  ck.config.dt = c["dt"];
  ck.config.k_max = c["k_max"];
  ck.config.lambda_score = c["lambda_score"];
  ck.config.recip_floor = c["recip_floor"];
  ck.params = TrajParams::seeded(ck.config, 0);
  ck.references = generate_references(ck.config);
  for (const ParamView& view : param_views(ck.params, ck.references.trajectories)) {
    const auto& arr = j["tensors"].at(view.name);
    if (static_cast<std::int64_t>(arr.size()) != view.size)
      throw std::runtime_error("checkpoint: tensor size mismatch for " + view.name);
    for (std::int64_t i = 0; i < view.size; ++i) view.data[i] = arr[i].get<double>();
  }
  ck.references.mode_descriptors.clear();
  for (const auto& pair : j["mode_descriptors"])
    ck.references.mode_descriptors.emplace_back(pair[0].get<double>(), pair[1].get<double>());
  return ck;
}

inline void save_checkpoint(const std::string& path, const TrajConfig& cfg, TrajParams& params,
                            ReferenceTrajectorySet& refs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << checkpoint_to_json(cfg, params, refs).dump(1);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return checkpoint_from_json(j);
}

}  // namespace mmp
