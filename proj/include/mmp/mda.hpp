#pragma once

#include <cmath>
#include <vector>

#include "mmp/common.hpp"
#include "mmp/geometry.hpp"

namespace mmp {

struct MdaConfig {
  int heads = 8;        // M
  int cameras = 2;      // J
  int scales = 3;       // L
  int points = 8;       // K
  int dim = 48;         // embed dim d, divisible by heads
  double offset_scale = 1.0 / 16.0;  // fraction of the normalized range per axis

  void validate() const {
    if (heads < 1 || cameras < 1 || scales < 1 || points < 1 || dim < 1)
      throw std::invalid_argument("MdaConfig: all fields must be positive");
    if (dim % heads != 0)
      throw std::invalid_argument("MdaConfig: dim must be divisible by heads");
  }
};

struct QuerySet {
  Mat features;          // Q x d
  Mat reference_points;  // Q x 3, normalized perception-range coords in [0,1]^3

  void validate() const {
    if (features.rows() < 1) throw std::invalid_argument("QuerySet: Q must be >= 1");
    if (reference_points.minCoeff() < 0.0 || reference_points.maxCoeff() > 1.0)
      throw std::invalid_argument("QuerySet: reference points must lie in [0,1]^3");
  }
};

struct MdaParams {
  Mat w_offset;   // (M*K*3) x d
  Vec b_offset;
  Mat w_bev;      // (M*K) x d
  Vec b_bev;
  Mat w_img;      // (M*L*K) x d, applied to Q + MLP(E_j)
  Vec b_img;
  Mat cam_mlp1;   // h x 21
  Vec cam_b1;
  Mat cam_mlp2;   // d x h
  Vec cam_b2;
  Mat w_out;      // d x 2d

  static MdaParams seeded(const MdaConfig& cfg, std::uint64_t seed, int cam_hidden = 32) {
    cfg.validate();
    Rng rng(seed);
    MdaParams p;
    const int d = cfg.dim;
    const double s = 1.0 / std::sqrt(d);
    p.w_offset = random_matrix(cfg.heads * cfg.points * 3, d, rng, s);
    p.b_offset = random_vector(cfg.heads * cfg.points * 3, rng, 0.5);
    p.w_bev = random_matrix(cfg.heads * cfg.points, d, rng, s);
    p.b_bev = Vec::Zero(cfg.heads * cfg.points);
    p.w_img = random_matrix(cfg.heads * cfg.scales * cfg.points, d, rng, s);
    p.b_img = Vec::Zero(cfg.heads * cfg.scales * cfg.points);
    p.cam_mlp1 = random_matrix(cam_hidden, 21, rng, 1.0 / std::sqrt(21.0));
    p.cam_b1 = random_vector(cam_hidden, rng, 0.1);
    p.cam_mlp2 = random_matrix(d, cam_hidden, rng, 1.0 / std::sqrt(cam_hidden));
    p.cam_b2 = Vec::Zero(d);
    p.w_out = random_matrix(d, 2 * d, rng, 1.0 / std::sqrt(2.0 * d));
    return p;
  }
};

inline Vec camera_embedding(const CameraModel& cam, const MdaParams& params) {
  const Vec h = (params.cam_mlp1 * cam.flatten_calibration() + params.cam_b1).cwiseMax(0.0);
  return params.cam_mlp2 * h + params.cam_b2;
}

/// Eq-style sampling locations: one 3D offset per head and point, scaled to
/// stay near the reference; points may leave [0,1]^3 and are clamped only
/// when sampled.
inline Mat sampling_points(const Vec& query, const Vec3& ref, const MdaParams& params,
                           const MdaConfig& cfg) {
  const Vec off = params.w_offset * query + params.b_offset;
  Mat pts(cfg.heads * cfg.points, 3);
  for (int i = 0; i < cfg.heads * cfg.points; ++i)
    for (int a = 0; a < 3; ++a)
      pts(i, a) = ref(a) + cfg.offset_scale * off(3 * i + a);
  return pts;
}

struct AttentionWeights {
  Mat bev;                 // M x K, softmax over K per head
  std::vector<Mat> image;  // per camera: M x (L*K), softmax over L*K per head
};

namespace detail {

inline void softmax_rows(Mat& m) {
  for (int r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

}  // namespace detail

inline AttentionWeights attention_weights(const Vec& query, const std::vector<CameraModel>& cams,
                                          const MdaParams& params, const MdaConfig& cfg) {
  AttentionWeights out;
  const Vec bev_logits = params.w_bev * query + params.b_bev;
  out.bev = Eigen::Map<const Mat>(bev_logits.data(), cfg.points, cfg.heads).transpose();
  detail::softmax_rows(out.bev);
  for (const CameraModel& cam : cams) {
    const Vec cond = query + camera_embedding(cam, params);
    const Vec logits = params.w_img * cond + params.b_img;
    Mat w = Eigen::Map<const Mat>(logits.data(), cfg.scales * cfg.points, cfg.heads).transpose();
    detail::softmax_rows(w);
    out.image.push_back(std::move(w));
  }
  return out;
}

inline Vec3 denormalize_point(const Vec3& p_norm, const GridSpec& grid) {
  return grid.origin +
         (p_norm.array() * grid.cell_size.array() * grid.extent.cast<double>().array()).matrix();
}

/// Per head: weighted sum over K of bilinear BEV samples (z dropped); head
/// slices of the BEV channel axis concatenate back to d.
inline Vec aggregate_bev(const Mat& points, const Mat& weights, const FeatureMap2D& bev_map,
                         const MdaConfig& cfg) {
  const int per_head = cfg.dim / cfg.heads;
  Vec out = Vec::Zero(cfg.dim);
  for (int m = 0; m < cfg.heads; ++m)
    for (int k = 0; k < cfg.points; ++k) {
      const int idx = m * cfg.points + k;
      const double x = std::clamp(points(idx, 0), 0.0, 1.0);
      const double y = std::clamp(points(idx, 1), 0.0, 1.0);
      const Vec sample = bilinear_sample(bev_map, x * (bev_map.width - 1), y * (bev_map.height - 1));
      out.segment(m * per_head, per_head) += weights(m, k) * sample.segment(m * per_head, per_head);
    }
  return out;
}

/// Per camera and head: weighted sum over L*K of bilinear image samples at
/// per-scale pixel coordinates. Points behind the camera sample zero.
inline std::vector<Vec> aggregate_image(const Mat& points, const AttentionWeights& weights,
                                        const std::vector<std::vector<FeatureMap2D>>& pyramids,
                                        const std::vector<CameraModel>& cams, const GridSpec& grid,
                                        const MdaConfig& cfg) {
  const int per_head = cfg.dim / cfg.heads;
  std::vector<Vec> out;
  for (size_t j = 0; j < cams.size(); ++j) {
    Vec vj = Vec::Zero(cfg.dim);
    for (int m = 0; m < cfg.heads; ++m)
      for (int l = 0; l < cfg.scales; ++l)
        for (int k = 0; k < cfg.points; ++k) {
          const int idx = m * cfg.points + k;
          const Vec3 world = denormalize_point(points.row(idx).transpose(), grid);
          const PixelProjection pp = project_point(world, cams[j]);
          if (!pp.valid) continue;
          const FeatureMap2D& map = pyramids[j][l];
          const Vec sample = bilinear_sample(map, pp.u / map.scale, pp.v / map.scale);
          vj.segment(m * per_head, per_head) +=
              weights.image[j](m, l * cfg.points + k) * sample.segment(m * per_head, per_head);
        }
    out.push_back(std::move(vj));
  }
  return out;
}

/// Full deformable attention for a query set: image aggregates summed over
/// views, concatenated with the BEV aggregate, projected by w_out.
inline Mat mda_forward(const QuerySet& queries, const FeatureMap2D& bev_map,
                       const std::vector<std::vector<FeatureMap2D>>& pyramids,
                       const std::vector<CameraModel>& cams, const GridSpec& grid,
                       const MdaParams& params, const MdaConfig& cfg) {
  cfg.validate();
  if (queries.features.cols() != cfg.dim) throw std::invalid_argument("mda_forward: query dim mismatch");
  if (bev_map.dim != cfg.dim) throw std::invalid_argument("mda_forward: BEV dim mismatch");
  if (static_cast<int>(cams.size()) != cfg.cameras || pyramids.size() != cams.size())
    throw std::invalid_argument("mda_forward: camera count mismatch");
  const int q_count = static_cast<int>(queries.features.rows());
  Mat out(q_count, cfg.dim);
  parallel_for(q_count, [&](int q) {
    const Vec query = queries.features.row(q).transpose();
    const Vec3 ref = queries.reference_points.row(q).transpose();
    const Mat pts = sampling_points(query, ref, params, cfg);
    const AttentionWeights w = attention_weights(query, cams, params, cfg);
    const Vec v_bev = aggregate_bev(pts, w.bev, bev_map, cfg);
    const std::vector<Vec> v_img = aggregate_image(pts, w, pyramids, cams, grid, cfg);
    Vec img_sum = Vec::Zero(cfg.dim);
    for (const Vec& v : v_img) img_sum += v;
    Vec cat(2 * cfg.dim);
    cat << img_sum, v_bev;
    out.row(q) = (params.w_out * cat).transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// DETR-like decoder layers around the deformable attention

struct AttentionBlockParams {
  Mat w_q, w_k, w_v, w_o;  // d x d
  int heads = 4;
};

struct DecoderLayerParams {
  AttentionBlockParams self_attn;
  MdaParams mda;
  Mat ffn_w1;  // hidden x d
  Vec ffn_b1;
  Mat ffn_w2;  // d x hidden
  Vec ffn_b2;
  // Pre-norm layer scales/biases.
  Vec ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;

  static DecoderLayerParams seeded(const MdaConfig& cfg, std::uint64_t seed, int ffn_hidden = 128,
                                   int self_heads = 4) {
    Rng rng(seed);
    DecoderLayerParams p;
    const int d = cfg.dim;
    const double s = 1.0 / std::sqrt(d);
    p.self_attn.heads = self_heads;
    p.self_attn.w_q = random_matrix(d, d, rng, s);
    p.self_attn.w_k = random_matrix(d, d, rng, s);
    p.self_attn.w_v = random_matrix(d, d, rng, s);
    p.self_attn.w_o = random_matrix(d, d, rng, s);
    p.mda = MdaParams::seeded(cfg, rng.next_u64());
    p.ffn_w1 = random_matrix(ffn_hidden, d, rng, s);
    p.ffn_b1 = Vec::Zero(ffn_hidden);
    p.ffn_w2 = random_matrix(d, ffn_hidden, rng, 1.0 / std::sqrt(ffn_hidden));
    p.ffn_b2 = Vec::Zero(d);
    p.ln1_g = p.ln2_g = p.ln3_g = Vec::Ones(d);
    p.ln1_b = p.ln2_b = p.ln3_b = Vec::Zero(d);
    return p;
  }
};

inline Mat layer_norm_rows(const Mat& x, const Vec& gain, const Vec& bias, double eps = 1e-6) {
  Mat out(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    out.row(r) = (((x.row(r).array() - mean) / std::sqrt(var + eps)) * gain.transpose().array() +
                  bias.transpose().array());
  }
  return out;
}

/// Standard multi-head attention; rows of the softmax matrix sum to 1.
inline Mat multi_head_attention(const Mat& queries, const Mat& keys, const Mat& values,
                                const AttentionBlockParams& p) {
  const int d = static_cast<int>(queries.cols());
  if (d % p.heads != 0) throw std::invalid_argument("multi_head_attention: dim not divisible by heads");
  const int dh = d / p.heads;
  const Mat q = queries * p.w_q.transpose();
  const Mat k = keys * p.w_k.transpose();
  const Mat v = values * p.w_v.transpose();
  Mat concat(queries.rows(), d);
  for (int h = 0; h < p.heads; ++h) {
    Mat scores = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(dh);
    detail::softmax_rows(scores);
    concat.middleCols(h * dh, dh) = scores * v.middleCols(h * dh, dh);
  }
  return concat * p.w_o.transpose();
}

/// Pre-norm: x + SelfAttn(LN(x)); x + MDA(LN(x)); x + FFN(LN(x)).
/// Reference points are held fixed across layers.
inline QuerySet decoder_layer_forward(const QuerySet& queries, const FeatureMap2D& bev_map,
                                      const std::vector<std::vector<FeatureMap2D>>& pyramids,
                                      const std::vector<CameraModel>& cams, const GridSpec& grid,
                                      const DecoderLayerParams& p, const MdaConfig& cfg) {
  QuerySet out = queries;
  {
    const Mat n = layer_norm_rows(out.features, p.ln1_g, p.ln1_b);
    out.features += multi_head_attention(n, n, n, p.self_attn);
  }
  {
    QuerySet normed = out;
    normed.features = layer_norm_rows(out.features, p.ln2_g, p.ln2_b);
    out.features += mda_forward(normed, bev_map, pyramids, cams, grid, p.mda, cfg);
  }
  {
    const Mat n = layer_norm_rows(out.features, p.ln3_g, p.ln3_b);
    const Mat h = ((n * p.ffn_w1.transpose()).rowwise() + p.ffn_b1.transpose()).cwiseMax(0.0);
    out.features += ((h * p.ffn_w2.transpose()).rowwise() + p.ffn_b2.transpose());
  }
  return out;
}

/// Runs all layers sequentially and returns every layer's query features;
/// inference consumes only the last.
inline std::vector<Mat> decoder_forward(const QuerySet& initial, const FeatureMap2D& bev_map,
                                        const std::vector<std::vector<FeatureMap2D>>& pyramids,
                                        const std::vector<CameraModel>& cams, const GridSpec& grid,
                                        const std::vector<DecoderLayerParams>& layers,
                                        const MdaConfig& cfg) {
  if (layers.empty()) throw std::invalid_argument("decoder_forward: layer count must be >= 1");
  std::vector<Mat> outputs;
  QuerySet q = initial;
  for (const DecoderLayerParams& layer : layers) {
    q = decoder_layer_forward(q, bev_map, pyramids, cams, grid, layer, cfg);
    outputs.push_back(q.features);
  }
  return outputs;
}

}  // namespace mmp
