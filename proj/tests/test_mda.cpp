#include <catch2/catch_amalgamated.hpp>

#include "mmp/mda.hpp"
#include "mmp/simulator.hpp"

using namespace mmp;
using Catch::Approx;

namespace {

MdaConfig small_config() {
  MdaConfig cfg;
  cfg.heads = 4;
  cfg.cameras = 2;
  cfg.scales = 3;
  cfg.points = 4;
  cfg.dim = 16;
  return cfg;
}

GridSpec test_grid() {
  GridSpec grid;
  grid.origin = Vec3(-8, -8, 0);
  grid.cell_size = Vec3(0.5, 0.5, 0.5);
  grid.extent = Vec3i(32, 32, 8);
  return grid;
}

struct Context {
  FeatureMap2D bev;
  std::vector<std::vector<FeatureMap2D>> pyramids;
  std::vector<CameraModel> cams;
};

Context random_context(Rng& rng, const MdaConfig& cfg, double constant = -1.0) {
  Context ctx;
  ctx.cams = default_cameras(128, 96);
  ctx.bev = FeatureMap2D::zeros(10, 10, cfg.dim);
  ctx.bev.values = constant >= 0 ? Mat::Constant(100, cfg.dim, constant)
                                 : random_matrix(100, cfg.dim, rng, 1.0);
  for (int j = 0; j < cfg.cameras; ++j) {
    std::vector<FeatureMap2D> pyr;
    for (const double scale : {8.0, 16.0, 32.0}) {
      const int h = std::max(1, static_cast<int>(96 / scale));
      const int w = std::max(1, static_cast<int>(128 / scale));
      FeatureMap2D m = FeatureMap2D::zeros(h, w, cfg.dim, scale);
      m.values = constant >= 0 ? Mat::Constant(h * w, cfg.dim, constant)
                               : random_matrix(h * w, cfg.dim, rng, 1.0);
      pyr.push_back(std::move(m));
    }
    ctx.pyramids.push_back(std::move(pyr));
  }
  return ctx;
}

/// Fully hand-unrolled Eq.-chain oracle for one query.
Vec mda_oracle(const Vec& query, const Vec3& ref, const Context& ctx, const GridSpec& grid,
               const MdaParams& p, const MdaConfig& cfg) {
  const int per_head = cfg.dim / cfg.heads;
  // Offsets.
  const Vec off = p.w_offset * query + p.b_offset;
  // BEV weights: softmax over K within each head.
  Mat wb(cfg.heads, cfg.points);
  {
    const Vec logits = p.w_bev * query + p.b_bev;
    for (int m = 0; m < cfg.heads; ++m) {
      double mx = -1e300, sum = 0;
      for (int k = 0; k < cfg.points; ++k) mx = std::max(mx, logits(m * cfg.points + k));
      for (int k = 0; k < cfg.points; ++k) sum += std::exp(logits(m * cfg.points + k) - mx);
      for (int k = 0; k < cfg.points; ++k)
        wb(m, k) = std::exp(logits(m * cfg.points + k) - mx) / sum;
    }
  }
  Vec v_pc = Vec::Zero(cfg.dim);
  Vec img_sum = Vec::Zero(cfg.dim);
  for (int m = 0; m < cfg.heads; ++m)
    for (int k = 0; k < cfg.points; ++k) {
      Vec3 pt;
      for (int a = 0; a < 3; ++a)
        pt(a) = ref(a) + cfg.offset_scale * off(3 * (m * cfg.points + k) + a);
      const double x = std::clamp(pt.x(), 0.0, 1.0) * (ctx.bev.width - 1);
      const double y = std::clamp(pt.y(), 0.0, 1.0) * (ctx.bev.height - 1);
      const Vec s = bilinear_sample(ctx.bev, x, y);
      v_pc.segment(m * per_head, per_head) += wb(m, k) * s.segment(m * per_head, per_head);
    }
  for (size_t j = 0; j < ctx.cams.size(); ++j) {
    // Image weights: softmax over L*K per head, conditioned on the camera.
    const Vec h = (p.cam_mlp1 * ctx.cams[j].flatten_calibration() + p.cam_b1).cwiseMax(0.0);
    const Vec cond = query + p.cam_mlp2 * h + p.cam_b2;
    const Vec logits = p.w_img * cond + p.b_img;
    for (int m = 0; m < cfg.heads; ++m) {
      double mx = -1e300, sum = 0;
      const int base = m * cfg.scales * cfg.points;
      for (int i = 0; i < cfg.scales * cfg.points; ++i) mx = std::max(mx, logits(base + i));
      for (int i = 0; i < cfg.scales * cfg.points; ++i) sum += std::exp(logits(base + i) - mx);
      for (int l = 0; l < cfg.scales; ++l)
        for (int k = 0; k < cfg.points; ++k) {
          const double w = std::exp(logits(base + l * cfg.points + k) - mx) / sum;
          Vec3 pt;
          for (int a = 0; a < 3; ++a)
            pt(a) = ref(a) + cfg.offset_scale * off(3 * (m * cfg.points + k) + a);
          const Vec3 world =
              grid.origin +
              (pt.array() * grid.cell_size.array() * grid.extent.cast<double>().array()).matrix();
          const PixelProjection pp = project_point(world, ctx.cams[j]);
          if (!pp.valid) continue;
          const FeatureMap2D& map = ctx.pyramids[j][l];
          const Vec s = bilinear_sample(map, pp.u / map.scale, pp.v / map.scale);
          img_sum.segment(m * per_head, per_head) += w * s.segment(m * per_head, per_head);
        }
    }
  }
  Vec cat(2 * cfg.dim);
  cat << img_sum, v_pc;
  return p.w_out * cat;
}

}  // namespace

TEST_CASE("sampling points", "[mda]") {
  const MdaConfig cfg = small_config();
  MdaParams p = MdaParams::seeded(cfg, 1);
  Rng rng(2);
  const Vec q = random_vector(cfg.dim, rng, 1.0);
  const Vec3 ref(0.5, 0.4, 0.3);
  SECTION("zero offset projection collapses to the reference") {
    p.w_offset.setZero();
    p.b_offset.setZero();
    const Mat pts = sampling_points(q, ref, p, cfg);
    REQUIRE(pts.rows() == cfg.heads * cfg.points);
    for (int i = 0; i < pts.rows(); ++i)
      REQUIRE((pts.row(i).transpose() - Vec3(ref)).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("purity") {
    REQUIRE(sampling_points(q, ref, p, cfg) == sampling_points(q, ref, p, cfg));
  }
}

TEST_CASE("attention weights", "[mda]") {
  const MdaConfig cfg = small_config();
  const std::vector<CameraModel> cams = default_cameras(128, 96);
  Rng rng(3);
  const Vec q = random_vector(cfg.dim, rng, 1.0);
  SECTION("uniform softmax on equal logits") {
    MdaParams p = MdaParams::seeded(cfg, 4);
    p.w_bev.setZero();
    p.b_bev.setZero();
    p.w_img.setZero();
    p.b_img.setZero();
    const AttentionWeights w = attention_weights(q, cams, p, cfg);
    REQUIRE((w.bev.array() - 1.0 / cfg.points).abs().maxCoeff() < 1e-12);
    for (const Mat& wi : w.image)
      REQUIRE((wi.array() - 1.0 / (cfg.scales * cfg.points)).abs().maxCoeff() < 1e-12);
  }
  SECTION("normalized over the correct axes") {
    const MdaParams p = MdaParams::seeded(cfg, 5);
    const AttentionWeights w = attention_weights(q, cams, p, cfg);
    for (int m = 0; m < cfg.heads; ++m) {
      REQUIRE(w.bev.row(m).sum() == Approx(1.0).margin(1e-9));
      for (const Mat& wi : w.image) REQUIRE(wi.row(m).sum() == Approx(1.0).margin(1e-9));
    }
    REQUIRE(w.bev.minCoeff() >= 0.0);
  }
  SECTION("camera embedding sensitivity") {
    const MdaParams p = MdaParams::seeded(cfg, 6);
    std::vector<CameraModel> perturbed = cams;
    perturbed[1].extrinsics.translation += Vec3(0.5, 0, 0);
    const AttentionWeights w0 = attention_weights(q, cams, p, cfg);
    const AttentionWeights w1 = attention_weights(q, perturbed, p, cfg);
    REQUIRE((w0.image[1] - w1.image[1]).cwiseAbs().maxCoeff() > 1e-9);
    REQUIRE((w0.image[0] - w1.image[0]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("aggregation convexity", "[mda]") {
  const MdaConfig cfg = small_config();
  const GridSpec grid = test_grid();
  Rng rng(7);
  Context ctx = random_context(rng, cfg, 2.5);
  const MdaParams p = MdaParams::seeded(cfg, 8);
  const Vec q = random_vector(cfg.dim, rng, 1.0);
  const Vec3 ref(0.5, 0.5, 0.2);
  Mat pts = Mat::Zero(cfg.heads * cfg.points, 3);
  pts.rowwise() = Eigen::RowVector3d(0.5, 0.5, 0.2);
  const AttentionWeights w = attention_weights(q, ctx.cams, p, cfg);
  SECTION("constant BEV map returns the constant") {
    const Vec out = aggregate_bev(pts, w.bev, ctx.bev, cfg);
    REQUIRE((out.array() - 2.5).abs().maxCoeff() < 1e-9);
  }
  SECTION("points behind every camera give zero image aggregate") {
    Mat behind = Mat::Zero(cfg.heads * cfg.points, 3);
    behind.rowwise() = Eigen::RowVector3d(0.05, 0.5, 0.1);  // behind both forward cameras
    const auto v = aggregate_image(behind, w, ctx.pyramids, ctx.cams, grid, cfg);
    for (const Vec& vj : v) REQUIRE(vj.norm() == 0.0);
  }
}

TEST_CASE("mda forward equals hand-unrolled oracle", "[mda]") {
  const MdaConfig cfg = small_config();
  const GridSpec grid = test_grid();
  Rng rng(9);
  for (int it = 0; it < 10; ++it) {
    const Context ctx = random_context(rng, cfg);
    const MdaParams p = MdaParams::seeded(cfg, rng.next_u64());
    QuerySet queries;
    const int nq = 3;
    queries.features = random_matrix(nq, cfg.dim, rng, 1.0);
    queries.reference_points = Mat(nq, 3);
    for (int i = 0; i < nq; ++i)
      queries.reference_points.row(i) =
          Eigen::RowVector3d(rng.uniform(), rng.uniform(), rng.uniform());
    const Mat out = mda_forward(queries, ctx.bev, ctx.pyramids, ctx.cams, grid, p, cfg);
    REQUIRE(out.rows() == nq);
    for (int i = 0; i < nq; ++i) {
      const Vec expect = mda_oracle(queries.features.row(i).transpose(),
                                    queries.reference_points.row(i).transpose(), ctx, grid, p, cfg);
      REQUIRE((out.row(i).transpose() - expect).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("decoder layers", "[mda]") {
  const MdaConfig cfg = small_config();
  const GridSpec grid = test_grid();
  Rng rng(11);
  const Context ctx = random_context(rng, cfg);
  QuerySet queries;
  queries.features = random_matrix(4, cfg.dim, rng, 1.0);
  queries.reference_points = Mat::Constant(4, 3, 0.5);

  SECTION("zeroed parameters with residuals are the identity") {
    DecoderLayerParams p = DecoderLayerParams::seeded(cfg, 1);
    p.self_attn.w_o.setZero();
    p.mda.w_out.setZero();
    p.ffn_w2.setZero();
    p.ffn_b2.setZero();
    const QuerySet out = decoder_layer_forward(queries, ctx.bev, ctx.pyramids, ctx.cams, grid, p, cfg);
    REQUIRE((out.features - queries.features).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(out.reference_points == queries.reference_points);
  }
  SECTION("single-query self-attention by hand") {
    // One query: every softmax is the scalar 1, so attention reduces to
    // w_o * w_v * x.
    DecoderLayerParams p = DecoderLayerParams::seeded(cfg, 2);
    const Mat x = random_matrix(1, cfg.dim, rng, 1.0);
    const Mat n = layer_norm_rows(x, p.ln1_g, p.ln1_b);
    const Mat attn = multi_head_attention(n, n, n, p.self_attn);
    const Mat expect = (n * p.self_attn.w_v.transpose()) * p.self_attn.w_o.transpose();
    REQUIRE((attn - expect).cwiseAbs().maxCoeff() < 1e-9);
  }
  SECTION("stacked decoder") {
    std::vector<DecoderLayerParams> layers = {DecoderLayerParams::seeded(cfg, 3),
                                              DecoderLayerParams::seeded(cfg, 4)};
    const auto outs = decoder_forward(queries, ctx.bev, ctx.pyramids, ctx.cams, grid, layers, cfg);
    REQUIRE(outs.size() == 2);
    const QuerySet one =
        decoder_layer_forward(queries, ctx.bev, ctx.pyramids, ctx.cams, grid, layers[0], cfg);
    REQUIRE(outs[0] == one.features);
    const auto again = decoder_forward(queries, ctx.bev, ctx.pyramids, ctx.cams, grid, layers, cfg);
    REQUIRE(again[1] == outs[1]);
  }
}
