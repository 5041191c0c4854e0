#pragma once

#include <cmath>
#include <vector>

#include "mmp/common.hpp"
#include "mmp/serialization.hpp"

namespace mmp {

/// Per-channel discretized diagonal state-space parameters. The recurrence is
///   h_t = a ∘ h_{t-1} + b · x_t,   y_t = c · h_t + d · x_t
/// with an independent state vector per channel.
struct SsmParams {
  int dim = 0;        // channels
  int state_dim = 0;  // states per channel
  Mat a;              // dim x state_dim, |entries| < 1
  Mat b;              // dim x state_dim
  Mat c;              // dim x state_dim
  Vec d;              // dim passthrough
  Mat conv_kernel;    // dim x kernel_width, short causal conv

  static SsmParams seeded(int dim, int state_dim, std::uint64_t seed, int kernel_width = 4) {
    Rng rng(seed);
    SsmParams p;
    p.dim = dim;
    p.state_dim = state_dim;
    p.a = Mat(dim, state_dim);
    for (int i = 0; i < dim; ++i)
      for (int s = 0; s < state_dim; ++s) p.a(i, s) = rng.uniform(0.05, 0.95);
    p.b = random_matrix(dim, state_dim, rng, 1.0 / std::sqrt(state_dim));
    p.c = random_matrix(dim, state_dim, rng, 1.0 / std::sqrt(state_dim));
    p.d = random_vector(dim, rng, 1.0);
    p.conv_kernel = random_matrix(dim, kernel_width, rng, 1.0 / std::sqrt(kernel_width));
    return p;
  }

  static SsmParams zeros(int dim, int state_dim, int kernel_width = 4) {
    SsmParams p;
    p.dim = dim;
    p.state_dim = state_dim;
    p.a = Mat::Zero(dim, state_dim);
    p.b = Mat::Zero(dim, state_dim);
    p.c = Mat::Zero(dim, state_dim);
    p.d = Vec::Zero(dim);
    p.conv_kernel = Mat::Zero(dim, kernel_width);
    return p;
  }

  void validate() const {
    if (a.cwiseAbs().maxCoeff() >= 1.0)
      throw std::invalid_argument("SsmParams: |a| entries must be < 1");
  }
};

/// Naive sequential recurrence. Masked positions contribute zero input and
/// emit zero output; the hidden state passes through unchanged.
inline Mat ssm_scan_sequential(const Mat& sequence, const std::vector<char>& mask,
                               const SsmParams& params) {
  const int t_len = static_cast<int>(sequence.rows());
  if (!sequence.allFinite()) throw std::invalid_argument("ssm_scan: non-finite input");
  if (sequence.cols() != params.dim) throw std::invalid_argument("ssm_scan: channel mismatch");
  Mat out = Mat::Zero(t_len, params.dim);
  Mat h = Mat::Zero(params.dim, params.state_dim);
  for (int t = 0; t < t_len; ++t) {
    if (!mask.empty() && !mask[t]) continue;
    for (int ch = 0; ch < params.dim; ++ch) {
      const double x = sequence(t, ch);
      double y = params.d(ch) * x;
      for (int s = 0; s < params.state_dim; ++s) {
        h(ch, s) = params.a(ch, s) * h(ch, s) + params.b(ch, s) * x;
        y += params.c(ch, s) * h(ch, s);
      }
      out(t, ch) = y;
    }
  }
  return out;
}

/// Blocked evaluation: a first pass carries the entry state across blocks,
/// then each block is evaluated independently from its entry state. Equals
/// the sequential recurrence up to fp reassociation.
inline Mat ssm_scan(const Mat& sequence, const std::vector<char>& mask, const SsmParams& params,
                    int block = 64) {
  const int t_len = static_cast<int>(sequence.rows());
  if (!sequence.allFinite()) throw std::invalid_argument("ssm_scan: non-finite input");
  if (sequence.cols() != params.dim) throw std::invalid_argument("ssm_scan: channel mismatch");
  if (block < 1) block = t_len;
  const int nblocks = (t_len + block - 1) / block;

  // Pass 1: entry state of each block.
  std::vector<Mat> entry(nblocks + 1, Mat::Zero(params.dim, params.state_dim));
  for (int bi = 0; bi < nblocks; ++bi) {
    Mat h = entry[bi];
    const int lo = bi * block, hi = std::min(t_len, lo + block);
    for (int t = lo; t < hi; ++t) {
      if (!mask.empty() && !mask[t]) continue;
      for (int ch = 0; ch < params.dim; ++ch)
        for (int s = 0; s < params.state_dim; ++s)
          h(ch, s) = params.a(ch, s) * h(ch, s) + params.b(ch, s) * sequence(t, ch);
    }
    entry[bi + 1] = h;
  }

  // Pass 2: per-block outputs, independent given entry states.
  Mat out = Mat::Zero(t_len, params.dim);
  parallel_for(nblocks, [&](int bi) {
    Mat h = entry[bi];
    const int lo = bi * block, hi = std::min(t_len, lo + block);
    for (int t = lo; t < hi; ++t) {
      if (!mask.empty() && !mask[t]) continue;
      for (int ch = 0; ch < params.dim; ++ch) {
        const double x = sequence(t, ch);
        double y = params.d(ch) * x;
        for (int s = 0; s < params.state_dim; ++s) {
          h(ch, s) = params.a(ch, s) * h(ch, s) + params.b(ch, s) * x;
          y += params.c(ch, s) * h(ch, s);
        }
        out(t, ch) = y;
      }
    }
  });
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

/// One directional path of a BiMamba block: causal per-channel conv + SiLU,
/// then the SSM scan. `reversed` runs over the flipped sequence.
inline Mat mamba_direction(const Mat& u, const std::vector<char>& mask, const SsmParams& params,
                           bool reversed) {
  const int t_len = static_cast<int>(u.rows());
  Mat seq = u;
  std::vector<char> m = mask;
  if (reversed) {
    seq = u.colwise().reverse();
    if (!m.empty()) std::reverse(m.begin(), m.end());
  }
  // Causal conv over unmasked positions only.
  const int kw = static_cast<int>(params.conv_kernel.cols());
  Mat conv = Mat::Zero(t_len, params.dim);
  for (int t = 0; t < t_len; ++t) {
    if (!m.empty() && !m[t]) continue;
    for (int ch = 0; ch < params.dim; ++ch) {
      double acc = 0.0;
      for (int k = 0; k < kw; ++k) {
        const int tt = t - k;
        if (tt < 0) break;
        if (!m.empty() && !m[tt]) continue;
        acc += params.conv_kernel(ch, kw - 1 - k) * seq(tt, ch);
      }
      conv(t, ch) = silu(acc);
    }
  }
  Mat y = ssm_scan(conv, m, params);
  if (reversed) y = y.colwise().reverse().eval();
  return y;
}

/// Standard Mamba block layout: input projection to the expanded width with a
/// SiLU gate, two independent directional conv+SSM paths summed, output
/// projection, residual add.
struct BimambaParams {
  int dim = 0;     // model width
  int inner = 0;   // expanded width
  Mat w_in;        // inner x dim
  Mat w_gate;      // inner x dim
  Mat w_out;       // dim x inner
  SsmParams fwd;
  SsmParams rev;

  static BimambaParams seeded(int dim, std::uint64_t seed, int state_dim = 16, int expansion = 2) {
    Rng rng(seed);
    BimambaParams p;
    p.dim = dim;
    p.inner = dim * expansion;
    p.w_in = random_matrix(p.inner, dim, rng, 1.0 / std::sqrt(dim));
    p.w_gate = random_matrix(p.inner, dim, rng, 1.0 / std::sqrt(dim));
    p.w_out = random_matrix(dim, p.inner, rng, 0.5 / std::sqrt(p.inner));
    p.fwd = SsmParams::seeded(p.inner, state_dim, rng.next_u64());
    p.rev = SsmParams::seeded(p.inner, state_dim, rng.next_u64());
    return p;
  }

  static BimambaParams zeros(int dim, int state_dim = 16, int expansion = 2) {
    BimambaParams p;
    p.dim = dim;
    p.inner = dim * expansion;
    p.w_in = Mat::Zero(p.inner, dim);
    p.w_gate = Mat::Zero(p.inner, dim);
    p.w_out = Mat::Zero(dim, p.inner);
    p.fwd = SsmParams::zeros(p.inner, state_dim);
    p.rev = SsmParams::zeros(p.inner, state_dim);
    return p;
  }
};

/// Applies the block to each group independently; hidden state never crosses
/// a group boundary. Mask and permutation are preserved.
inline GroupedSequence bimamba_forward(const GroupedSequence& grouped, const BimambaParams& params) {
  if (grouped.groups.cols() != params.dim)
    throw std::invalid_argument("bimamba_forward: feature dim mismatch");
  GroupedSequence out = grouped;
  const int k = grouped.group_count();
  const int gs = grouped.group_size;
  parallel_for(k, [&](int gi) {
    const Mat x = grouped.groups.middleRows(static_cast<std::int64_t>(gi) * gs, gs);
    std::vector<char> mask(grouped.mask.begin() + static_cast<std::int64_t>(gi) * gs,
                           grouped.mask.begin() + static_cast<std::int64_t>(gi + 1) * gs);
    Mat u = x * params.w_in.transpose();
    Mat g = x * params.w_gate.transpose();
    Mat scanned = mamba_direction(u, mask, params.fwd, false) +
                  mamba_direction(u, mask, params.rev, true);
    Mat gated = scanned.binaryExpr(g, [](double s, double gv) { return s * silu(gv); });
    Mat y = x + gated * params.w_out.transpose();
    for (int t = 0; t < gs; ++t)
      if (mask[t]) out.groups.row(static_cast<std::int64_t>(gi) * gs + t) = y.row(t);
  });
  return out;
}

}  // namespace mmp
