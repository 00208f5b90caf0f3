#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "spl/errors.hpp"
#include "spl/pole_image.hpp"
#include "spl/rng.hpp"
#include "spl/session_io.hpp"  // little-endian float helpers

namespace spl {

/// A unit-norm descriptor vector.
using Embedding = std::vector<double>;

/// Residual-convolution stack dimensions. Defaults give the production
/// encoder: 80x360 input, stem 1->8 stride 2, residual blocks 8->16 and
/// 16->32 (each stride-2 with a 1x1 projection shortcut), global average
/// pool, linear head to a 128-D embedding. All sizes are parameters so the
/// same code runs as a miniature instance in gradient tests.
struct EncoderConfig {
  int input_rows = 80;
  int input_cols = 360;
  int stem_channels = 8;
  int block1_channels = 16;
  int block2_channels = 32;
  int embed_dim = 128;
};

namespace nn {

inline int conv_out_size(int in, int ksize, int stride, int pad) {
  return (in + 2 * pad - ksize) / stride + 1;
}

/// One convolution layer; weights are [cout][cin][k][k] row-major.
struct Conv {
  int cin = 1, cout = 1, ksize = 3, stride = 1, pad = 1;
  std::vector<double> w;
  std::vector<double> b;

  void resize() {
    w.assign(static_cast<std::size_t>(cout) * cin * ksize * ksize, 0.0);
    b.assign(static_cast<std::size_t>(cout), 0.0);
  }
};

/// out[co] (+)= bias + sum_ci w * in. When accumulate is set the existing
/// contents of `out` are kept (used to fuse the residual sum).
inline void conv_forward(const Conv& conv, const double* in, int hin, int win, double* out,
                         bool accumulate) {
  const int hout = conv_out_size(hin, conv.ksize, conv.stride, conv.pad);
  const int wout = conv_out_size(win, conv.ksize, conv.stride, conv.pad);
  const int s = conv.stride;
  for (int co = 0; co < conv.cout; ++co) {
    double* out_plane = out + static_cast<std::size_t>(co) * hout * wout;
    const double bias = conv.b[co];
    if (accumulate) {
      for (int i = 0; i < hout * wout; ++i) out_plane[i] += bias;
    } else {
      for (int i = 0; i < hout * wout; ++i) out_plane[i] = bias;
    }
    for (int ci = 0; ci < conv.cin; ++ci) {
      const double* in_plane = in + static_cast<std::size_t>(ci) * hin * win;
      for (int kh = 0; kh < conv.ksize; ++kh) {
        const int oh_lo = conv.pad - kh <= 0 ? 0 : (conv.pad - kh + s - 1) / s;
        const int oh_hi = std::min(hout - 1, (hin - 1 - kh + conv.pad) / s);
        for (int kw = 0; kw < conv.ksize; ++kw) {
          const double wv =
              conv.w[((static_cast<std::size_t>(co) * conv.cin + ci) * conv.ksize + kh) *
                         conv.ksize + kw];
          if (wv == 0.0) continue;
          const int ow_lo = conv.pad - kw <= 0 ? 0 : (conv.pad - kw + s - 1) / s;
          const int ow_hi = std::min(wout - 1, (win - 1 - kw + conv.pad) / s);
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const double* in_row = in_plane + (oh * s + kh - conv.pad) * win + (ow_lo * s + kw - conv.pad);
            double* out_row = out_plane + oh * wout + ow_lo;
            const int n = ow_hi - ow_lo + 1;
            if (s == 1) {
              for (int i = 0; i < n; ++i) out_row[i] += wv * in_row[i];
            } else {
              for (int i = 0; i < n; ++i) out_row[i] += wv * in_row[i * s];
            }
          }
        }
      }
    }
  }
}

/// Accumulates weight/bias gradients and, when grad_in is non-null,
/// accumulates the input gradient (callers zero it beforehand).
inline void conv_backward(const Conv& conv, const double* in, int hin, int win,
                          const double* grad_out, double* grad_in, Conv& grads) {
  const int hout = conv_out_size(hin, conv.ksize, conv.stride, conv.pad);
  const int wout = conv_out_size(win, conv.ksize, conv.stride, conv.pad);
  const int s = conv.stride;
  for (int co = 0; co < conv.cout; ++co) {
    const double* g_plane = grad_out + static_cast<std::size_t>(co) * hout * wout;
    double gb = 0.0;
    for (int i = 0; i < hout * wout; ++i) gb += g_plane[i];
    grads.b[co] += gb;
    for (int ci = 0; ci < conv.cin; ++ci) {
      const double* in_plane = in + static_cast<std::size_t>(ci) * hin * win;
      double* gin_plane =
          grad_in ? grad_in + static_cast<std::size_t>(ci) * hin * win : nullptr;
      for (int kh = 0; kh < conv.ksize; ++kh) {
        const int oh_lo = conv.pad - kh <= 0 ? 0 : (conv.pad - kh + s - 1) / s;
        const int oh_hi = std::min(hout - 1, (hin - 1 - kh + conv.pad) / s);
        for (int kw = 0; kw < conv.ksize; ++kw) {
          const std::size_t widx =
              ((static_cast<std::size_t>(co) * conv.cin + ci) * conv.ksize + kh) * conv.ksize + kw;
          const double wv = conv.w[widx];
          const int ow_lo = conv.pad - kw <= 0 ? 0 : (conv.pad - kw + s - 1) / s;
          const int ow_hi = std::min(wout - 1, (win - 1 - kw + conv.pad) / s);
          double gw = 0.0;
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const double* in_row =
                in_plane + (oh * s + kh - conv.pad) * win + (ow_lo * s + kw - conv.pad);
            const double* g_row = g_plane + oh * wout + ow_lo;
            double* gin_row =
                gin_plane ? gin_plane + (oh * s + kh - conv.pad) * win + (ow_lo * s + kw - conv.pad)
                          : nullptr;
            const int n = ow_hi - ow_lo + 1;
            if (s == 1) {
              for (int i = 0; i < n; ++i) gw += g_row[i] * in_row[i];
              if (gin_row) {
                for (int i = 0; i < n; ++i) gin_row[i] += wv * g_row[i];
              }
            } else {
              for (int i = 0; i < n; ++i) gw += g_row[i] * in_row[i * s];
              if (gin_row) {
                for (int i = 0; i < n; ++i) gin_row[i * s] += wv * g_row[i];
              }
            }
          }
          grads.w[widx] += gw;
        }
      }
    }
  }
}

inline void relu_inplace(std::vector<double>& v) {
  for (double& x : v) x = x > 0.0 ? x : 0.0;
}

/// grad *= (activation > 0), where `activation` is the post-ReLU buffer.
inline void relu_backward_inplace(std::vector<double>& grad, const std::vector<double>& activation) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (activation[i] <= 0.0) grad[i] = 0.0;
  }
}

}  // namespace nn

/// Trainable weights of the encoder.
struct EncoderParams {
  EncoderConfig cfg;
  nn::Conv stem;      // 1 -> stem_channels, 3x3 stride 2
  nn::Conv b1_conv1;  // stem -> block1, 3x3 stride 2
  nn::Conv b1_conv2;  // block1 -> block1, 3x3 stride 1
  nn::Conv b1_proj;   // stem -> block1, 1x1 stride 2
  nn::Conv b2_conv1;  // block1 -> block2, 3x3 stride 2
  nn::Conv b2_conv2;  // block2 -> block2, 3x3 stride 1
  nn::Conv b2_proj;   // block1 -> block2, 1x1 stride 2
  std::vector<double> head_w;  // [embed_dim][block2_channels]
  std::vector<double> head_b;  // [embed_dim]
};

struct TensorRef {
  const char* name;
  std::vector<int> shape;
  std::vector<double>* data;
};

inline std::vector<TensorRef> tensor_refs(EncoderParams& p) {
  auto conv_refs = [](const char* wn, const char* bn, nn::Conv& c,
                      std::vector<TensorRef>& out) {
    out.push_back({wn, {c.cout, c.cin, c.ksize, c.ksize}, &c.w});
    out.push_back({bn, {c.cout}, &c.b});
  };
  std::vector<TensorRef> refs;
  conv_refs("stem.w", "stem.b", p.stem, refs);
  conv_refs("block1.conv1.w", "block1.conv1.b", p.b1_conv1, refs);
  conv_refs("block1.conv2.w", "block1.conv2.b", p.b1_conv2, refs);
  conv_refs("block1.proj.w", "block1.proj.b", p.b1_proj, refs);
  conv_refs("block2.conv1.w", "block2.conv1.b", p.b2_conv1, refs);
  conv_refs("block2.conv2.w", "block2.conv2.b", p.b2_conv2, refs);
  conv_refs("block2.proj.w", "block2.proj.b", p.b2_proj, refs);
  refs.push_back({"head.w", {p.cfg.embed_dim, p.cfg.block2_channels}, &p.head_w});
  refs.push_back({"head.b", {p.cfg.embed_dim}, &p.head_b});
  return refs;
}

inline std::vector<TensorRef> tensor_refs(const EncoderParams& p) {
  return tensor_refs(const_cast<EncoderParams&>(p));  // refs are read by const users
}

namespace detail {

inline void configure_layers(EncoderParams& p) {
  const EncoderConfig& c = p.cfg;
  p.stem = {1, c.stem_channels, 3, 2, 1, {}, {}};
  p.b1_conv1 = {c.stem_channels, c.block1_channels, 3, 2, 1, {}, {}};
  p.b1_conv2 = {c.block1_channels, c.block1_channels, 3, 1, 1, {}, {}};
  p.b1_proj = {c.stem_channels, c.block1_channels, 1, 2, 0, {}, {}};
  p.b2_conv1 = {c.block1_channels, c.block2_channels, 3, 2, 1, {}, {}};
  p.b2_conv2 = {c.block2_channels, c.block2_channels, 3, 1, 1, {}, {}};
  p.b2_proj = {c.block1_channels, c.block2_channels, 1, 2, 0, {}, {}};
  for (nn::Conv* conv : {&p.stem, &p.b1_conv1, &p.b1_conv2, &p.b1_proj, &p.b2_conv1, &p.b2_conv2,
                         &p.b2_proj}) {
    conv->resize();
  }
  p.head_w.assign(static_cast<std::size_t>(c.embed_dim) * c.block2_channels, 0.0);
  p.head_b.assign(static_cast<std::size_t>(c.embed_dim), 0.0);
}

}  // namespace detail

inline EncoderParams zeroed_params(const EncoderConfig& cfg) {
  EncoderParams p;
  p.cfg = cfg;
  detail::configure_layers(p);
  return p;
}

/// He-uniform convolution weights (limit sqrt(6/fan_in)), zero biases,
/// fully determined by the seed.
inline EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  EncoderParams p = zeroed_params(cfg);
  Rng rng(seed);
  auto he_fill = [&rng](std::vector<double>& w, int fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& x : w) x = rng.uniform(-limit, limit);
  };
  for (nn::Conv* conv : {&p.stem, &p.b1_conv1, &p.b1_conv2, &p.b1_proj, &p.b2_conv1, &p.b2_conv2,
                         &p.b2_proj}) {
    he_fill(conv->w, conv->cin * conv->ksize * conv->ksize);
  }
  he_fill(p.head_w, cfg.block2_channels);
  return p;
}

/// Per-stage activation buffers; reusable across forward passes.
struct EncoderWorkspace {
  int h0 = 0, w0 = 0, h1 = 0, w1 = 0, h2 = 0, w2 = 0, h3 = 0, w3 = 0;
  std::vector<double> x0, stem_out, b1_h1, b1_out, b2_h1, b2_out;
  std::vector<double> gap, prenorm, embedding;
  std::vector<double> g_stem_out, g_b1_h1, g_b1_out, g_b2_h1, g_b2_out, g_gap, g_prenorm;

  void resize(const EncoderConfig& c) {
    h0 = c.input_rows;
    w0 = c.input_cols;
    h1 = nn::conv_out_size(h0, 3, 2, 1);
    w1 = nn::conv_out_size(w0, 3, 2, 1);
    h2 = nn::conv_out_size(h1, 3, 2, 1);
    w2 = nn::conv_out_size(w1, 3, 2, 1);
    h3 = nn::conv_out_size(h2, 3, 2, 1);
    w3 = nn::conv_out_size(w2, 3, 2, 1);
    x0.assign(static_cast<std::size_t>(h0) * w0, 0.0);
    stem_out.assign(static_cast<std::size_t>(c.stem_channels) * h1 * w1, 0.0);
    b1_h1.assign(static_cast<std::size_t>(c.block1_channels) * h2 * w2, 0.0);
    b1_out.assign(static_cast<std::size_t>(c.block1_channels) * h2 * w2, 0.0);
    b2_h1.assign(static_cast<std::size_t>(c.block2_channels) * h3 * w3, 0.0);
    b2_out.assign(static_cast<std::size_t>(c.block2_channels) * h3 * w3, 0.0);
    gap.assign(static_cast<std::size_t>(c.block2_channels), 0.0);
    prenorm.assign(static_cast<std::size_t>(c.embed_dim), 0.0);
    embedding.assign(static_cast<std::size_t>(c.embed_dim), 0.0);
    g_stem_out.assign(stem_out.size(), 0.0);
    g_b1_h1.assign(b1_h1.size(), 0.0);
    g_b1_out.assign(b1_out.size(), 0.0);
    g_b2_h1.assign(b2_h1.size(), 0.0);
    g_b2_out.assign(b2_out.size(), 0.0);
    g_gap.assign(gap.size(), 0.0);
    g_prenorm.assign(prenorm.size(), 0.0);
  }
};

/// Forward pass through the full stack, leaving all activations in the
/// workspace for a subsequent backward pass. Deterministic; the output in
/// ws.embedding is L2-normalized.
inline void forward_trace(const EncoderParams& p, const PoleImage& image, EncoderWorkspace& ws) {
  const EncoderConfig& c = p.cfg;
  if (image.num_rows != c.input_rows || image.num_cols != c.input_cols) {
    throw ShapeError("encoder expects a " + std::to_string(c.input_rows) + "x" +
                     std::to_string(c.input_cols) + " image, got " +
                     std::to_string(image.num_rows) + "x" + std::to_string(image.num_cols));
  }
  ws.resize(c);
  std::copy(image.pixels.begin(), image.pixels.end(), ws.x0.begin());

  nn::conv_forward(p.stem, ws.x0.data(), ws.h0, ws.w0, ws.stem_out.data(), false);
  nn::relu_inplace(ws.stem_out);

  nn::conv_forward(p.b1_conv1, ws.stem_out.data(), ws.h1, ws.w1, ws.b1_h1.data(), false);
  nn::relu_inplace(ws.b1_h1);
  nn::conv_forward(p.b1_conv2, ws.b1_h1.data(), ws.h2, ws.w2, ws.b1_out.data(), false);
  nn::conv_forward(p.b1_proj, ws.stem_out.data(), ws.h1, ws.w1, ws.b1_out.data(), true);
  nn::relu_inplace(ws.b1_out);

  nn::conv_forward(p.b2_conv1, ws.b1_out.data(), ws.h2, ws.w2, ws.b2_h1.data(), false);
  nn::relu_inplace(ws.b2_h1);
  nn::conv_forward(p.b2_conv2, ws.b2_h1.data(), ws.h3, ws.w3, ws.b2_out.data(), false);
  nn::conv_forward(p.b2_proj, ws.b1_out.data(), ws.h2, ws.w2, ws.b2_out.data(), true);
  nn::relu_inplace(ws.b2_out);

  const double inv_hw = 1.0 / static_cast<double>(ws.h3 * ws.w3);
  for (int ch = 0; ch < c.block2_channels; ++ch) {
    const double* plane = ws.b2_out.data() + static_cast<std::size_t>(ch) * ws.h3 * ws.w3;
    double sum = 0.0;
    for (int i = 0; i < ws.h3 * ws.w3; ++i) sum += plane[i];
    ws.gap[ch] = sum * inv_hw;
  }

  for (int d = 0; d < c.embed_dim; ++d) {
    const double* wrow = p.head_w.data() + static_cast<std::size_t>(d) * c.block2_channels;
    double acc = p.head_b[d];
    for (int ch = 0; ch < c.block2_channels; ++ch) acc += wrow[ch] * ws.gap[ch];
    ws.prenorm[d] = acc;
  }

  double norm_sq = 0.0;
  for (const double v : ws.prenorm) norm_sq += v * v;
  const double norm = std::sqrt(norm_sq);
  if (norm < 1e-30) {
    // Degenerate all-zero head output: fall back to a fixed unit vector so
    // the unit-norm contract holds everywhere.
    std::fill(ws.embedding.begin(), ws.embedding.end(), 0.0);
    ws.embedding[0] = 1.0;
  } else {
    for (int d = 0; d < c.embed_dim; ++d) ws.embedding[d] = ws.prenorm[d] / norm;
  }
}

/// Map one Pole-Image to its unit-norm embedding.
inline Embedding forward(const EncoderParams& p, const PoleImage& image) {
  EncoderWorkspace ws;
  forward_trace(p, image, ws);
  return ws.embedding;
}

/// Backward pass from d(loss)/d(embedding), accumulating parameter
/// gradients into `grads` (same layout as the params, caller-zeroed).
/// Requires `ws` to hold the trace of the matching forward pass.
inline void backward_from_embedding(const EncoderParams& p, EncoderWorkspace& ws,
                                    const std::vector<double>& grad_embedding,
                                    EncoderParams& grads) {
  const EncoderConfig& c = p.cfg;

  // Through the L2 normalization: g_v = (g_y - y (y . g_y)) / |v|.
  double norm_sq = 0.0;
  for (const double v : ws.prenorm) norm_sq += v * v;
  const double norm = std::sqrt(norm_sq);
  if (norm < 1e-30) {
    std::fill(ws.g_prenorm.begin(), ws.g_prenorm.end(), 0.0);
  } else {
    double dot = 0.0;
    for (int d = 0; d < c.embed_dim; ++d) dot += ws.embedding[d] * grad_embedding[d];
    for (int d = 0; d < c.embed_dim; ++d) {
      ws.g_prenorm[d] = (grad_embedding[d] - ws.embedding[d] * dot) / norm;
    }
  }

  std::fill(ws.g_gap.begin(), ws.g_gap.end(), 0.0);
  for (int d = 0; d < c.embed_dim; ++d) {
    const double g = ws.g_prenorm[d];
    const double* wrow = p.head_w.data() + static_cast<std::size_t>(d) * c.block2_channels;
    double* gwrow = grads.head_w.data() + static_cast<std::size_t>(d) * c.block2_channels;
    grads.head_b[d] += g;
    for (int ch = 0; ch < c.block2_channels; ++ch) {
      gwrow[ch] += g * ws.gap[ch];
      ws.g_gap[ch] += g * wrow[ch];
    }
  }

  const double inv_hw = 1.0 / static_cast<double>(ws.h3 * ws.w3);
  for (int ch = 0; ch < c.block2_channels; ++ch) {
    const double g = ws.g_gap[ch] * inv_hw;
    double* plane = ws.g_b2_out.data() + static_cast<std::size_t>(ch) * ws.h3 * ws.w3;
    for (int i = 0; i < ws.h3 * ws.w3; ++i) plane[i] = g;
  }

  // Block 2.
  nn::relu_backward_inplace(ws.g_b2_out, ws.b2_out);
  std::fill(ws.g_b2_h1.begin(), ws.g_b2_h1.end(), 0.0);
  nn::conv_backward(p.b2_conv2, ws.b2_h1.data(), ws.h3, ws.w3, ws.g_b2_out.data(),
                    ws.g_b2_h1.data(), grads.b2_conv2);
  nn::relu_backward_inplace(ws.g_b2_h1, ws.b2_h1);
  std::fill(ws.g_b1_out.begin(), ws.g_b1_out.end(), 0.0);
  nn::conv_backward(p.b2_conv1, ws.b1_out.data(), ws.h2, ws.w2, ws.g_b2_h1.data(),
                    ws.g_b1_out.data(), grads.b2_conv1);
  nn::conv_backward(p.b2_proj, ws.b1_out.data(), ws.h2, ws.w2, ws.g_b2_out.data(),
                    ws.g_b1_out.data(), grads.b2_proj);

  // Block 1.
  nn::relu_backward_inplace(ws.g_b1_out, ws.b1_out);
  std::fill(ws.g_b1_h1.begin(), ws.g_b1_h1.end(), 0.0);
  nn::conv_backward(p.b1_conv2, ws.b1_h1.data(), ws.h2, ws.w2, ws.g_b1_out.data(),
                    ws.g_b1_h1.data(), grads.b1_conv2);
  nn::relu_backward_inplace(ws.g_b1_h1, ws.b1_h1);
  std::fill(ws.g_stem_out.begin(), ws.g_stem_out.end(), 0.0);
  nn::conv_backward(p.b1_conv1, ws.stem_out.data(), ws.h1, ws.w1, ws.g_b1_h1.data(),
                    ws.g_stem_out.data(), grads.b1_conv1);
  nn::conv_backward(p.b1_proj, ws.stem_out.data(), ws.h1, ws.w1, ws.g_b1_out.data(),
                    ws.g_stem_out.data(), grads.b1_proj);

  // Stem; no input gradient needed.
  nn::relu_backward_inplace(ws.g_stem_out, ws.stem_out);
  nn::conv_backward(p.stem, ws.x0.data(), ws.h0, ws.w0, ws.g_stem_out.data(), nullptr, grads.stem);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct InfoNceResult {
  double loss = 0.0;
  std::vector<double> grad_anchors;    // [batch x dim]
  std::vector<double> grad_positives;  // [batch x dim]
};

/// NT-Xent / InfoNCE over a batch of (anchor, positive) embedding pairs.
/// Candidates per anchor are its positive plus the other batch positives as
/// in-batch negatives; logits are cosine similarities divided by tau
/// (inputs must be unit-norm). With `bidirectional` set, the SimCLR-style
/// symmetric form over all 2B views is used instead.
inline InfoNceResult infonce_loss(const std::vector<double>& anchors,
                                  const std::vector<double>& positives, int batch, int dim,
                                  double tau, bool bidirectional = false) {
  if (batch < 2) {
    throw BatchError("infonce_loss: batch size " + std::to_string(batch) +
                     " is insufficient, need >= 2 pairs for in-batch negatives");
  }
  if (tau <= 0.0) throw ConfigError("infonce_loss: temperature must be > 0");
  if (anchors.size() != static_cast<std::size_t>(batch) * dim ||
      positives.size() != static_cast<std::size_t>(batch) * dim) {
    throw ShapeError("infonce_loss: embedding buffers do not match batch x dim");
  }

  InfoNceResult result;
  result.grad_anchors.assign(anchors.size(), 0.0);
  result.grad_positives.assign(positives.size(), 0.0);

  if (!bidirectional) {
    std::vector<double> logits(static_cast<std::size_t>(batch) * batch);
    for (int i = 0; i < batch; ++i) {
      for (int j = 0; j < batch; ++j) {
        double dot = 0.0;
        const double* a = anchors.data() + static_cast<std::size_t>(i) * dim;
        const double* p = positives.data() + static_cast<std::size_t>(j) * dim;
        for (int d = 0; d < dim; ++d) dot += a[d] * p[d];
        logits[static_cast<std::size_t>(i) * batch + j] = dot / tau;
      }
    }
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (int i = 0; i < batch; ++i) {
      const double* row = logits.data() + static_cast<std::size_t>(i) * batch;
      double m = row[0];
      for (int j = 1; j < batch; ++j) m = std::max(m, row[j]);
      double sum = 0.0;
      for (int j = 0; j < batch; ++j) sum += std::exp(row[j] - m);
      const double lse = m + std::log(sum);
      loss += lse - row[i];
      for (int j = 0; j < batch; ++j) {
        const double softmax = std::exp(row[j] - lse);
        const double dlogit = (softmax - (i == j ? 1.0 : 0.0)) * inv_b;
        const double scale = dlogit / tau;
        const double* a = anchors.data() + static_cast<std::size_t>(i) * dim;
        const double* p = positives.data() + static_cast<std::size_t>(j) * dim;
        double* ga = result.grad_anchors.data() + static_cast<std::size_t>(i) * dim;
        double* gp = result.grad_positives.data() + static_cast<std::size_t>(j) * dim;
        for (int d = 0; d < dim; ++d) {
          ga[d] += scale * p[d];
          gp[d] += scale * a[d];
        }
      }
    }
    result.loss = loss * inv_b;
    return result;
  }

  // Bidirectional: views v[2i] = anchor_i, v[2i+1] = positive_i; every view
  // is an anchor against the other 2B-1 views.
  const int n = 2 * batch;
  auto view = [&](int idx) {
    return idx % 2 == 0 ? anchors.data() + static_cast<std::size_t>(idx / 2) * dim
                        : positives.data() + static_cast<std::size_t>(idx / 2) * dim;
  };
  auto grad_view = [&](int idx) {
    return idx % 2 == 0 ? result.grad_anchors.data() + static_cast<std::size_t>(idx / 2) * dim
                        : result.grad_positives.data() + static_cast<std::size_t>(idx / 2) * dim;
  };
  std::vector<double> sims(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0.0;
      const double* a = view(i);
      const double* b = view(j);
      for (int d = 0; d < dim; ++d) dot += a[d] * b[d];
      sims[static_cast<std::size_t>(i) * n + j] = dot / tau;
    }
  }
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int i = 0; i < n; ++i) {
    const int partner = i % 2 == 0 ? i + 1 : i - 1;
    const double* row = sims.data() + static_cast<std::size_t>(i) * n;
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j != i) m = std::max(m, row[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j != i) sum += std::exp(row[j] - m);
    }
    const double lse = m + std::log(sum);
    loss += lse - row[partner];
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double softmax = std::exp(row[j] - lse);
      const double dlogit = (softmax - (j == partner ? 1.0 : 0.0)) * inv_n;
      const double scale = dlogit / tau;
      const double* a = view(i);
      const double* b = view(j);
      double* ga = grad_view(i);
      double* gb = grad_view(j);
      for (int d = 0; d < dim; ++d) {
        ga[d] += scale * b[d];
        gb[d] += scale * a[d];
      }
    }
  }
  result.loss = loss * inv_n;
  return result;
}

struct CrossEntropyResult {
  double loss = 0.0;
  std::vector<double> grad_logits;  // [batch x classes]
};

/// Softmax cross-entropy over track-ID classes, mean over the batch.
inline CrossEntropyResult cross_entropy_loss(const std::vector<double>& logits, int batch,
                                             int classes, const std::vector<int>& labels) {
  if (classes < 2) throw LabelError("cross_entropy_loss: need at least 2 classes");
  if (logits.size() != static_cast<std::size_t>(batch) * classes ||
      static_cast<int>(labels.size()) != batch) {
    throw ShapeError("cross_entropy_loss: logits/labels do not match batch x classes");
  }
  CrossEntropyResult result;
  result.grad_logits.assign(logits.size(), 0.0);
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (int i = 0; i < batch; ++i) {
    const int label = labels[i];
    if (label < 0 || label >= classes) {
      throw LabelError("cross_entropy_loss: label " + std::to_string(label) +
                       " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = logits.data() + static_cast<std::size_t>(i) * classes;
    double m = row[0];
    for (int ci = 1; ci < classes; ++ci) m = std::max(m, row[ci]);
    double sum = 0.0;
    for (int ci = 0; ci < classes; ++ci) sum += std::exp(row[ci] - m);
    const double lse = m + std::log(sum);
    result.loss += (lse - row[label]) * inv_b;
    double* grow = result.grad_logits.data() + static_cast<std::size_t>(i) * classes;
    for (int ci = 0; ci < classes; ++ci) {
      grow[ci] = (std::exp(row[ci] - lse) - (ci == label ? 1.0 : 0.0)) * inv_b;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step_count = 0;
};

inline AdamState make_adam_state(EncoderParams& params) {
  AdamState state;
  for (const TensorRef& ref : tensor_refs(params)) {
    state.m.emplace_back(ref.data->size(), 0.0);
    state.v.emplace_back(ref.data->size(), 0.0);
  }
  return state;
}

namespace detail {

inline void adam_update_tensor(std::vector<double>& param, const std::vector<double>& grad,
                               std::vector<double>& m, std::vector<double>& v, double lr,
                               double beta1, double beta2, double eps, std::int64_t t) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

}  // namespace detail

/// One Adam update over every encoder tensor. Zero gradients leave the
/// parameters bit-identical.
inline void adam_step(EncoderParams& params, EncoderParams& grads, AdamState& state, double lr,
                      double beta1, double beta2, double eps) {
  ++state.step_count;
  auto prefs = tensor_refs(params);
  auto grefs = tensor_refs(grads);
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    detail::adam_update_tensor(*prefs[i].data, *grefs[i].data, state.m[i], state.v[i], lr, beta1,
                               beta2, eps, state.step_count);
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Objective { kContrastive, kSupervised };

struct TrainConfig {
  Objective objective = Objective::kContrastive;
  double temperature = 0.07;
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size_sl = 64;
  int batch_size_cl = 32;  // positive pairs per batch
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cl_bidirectional = false;
  std::uint64_t rng_seed = 0;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.temperature <= 0.0) throw ConfigError("train: temperature must be > 0");
  if (cfg.learning_rate < 0.0) throw ConfigError("train: learning_rate must be >= 0");
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.batch_size_sl < 1 || cfg.batch_size_cl < 1) {
    throw ConfigError("train: batch sizes must be >= 1");
  }
}

struct TrainExample {
  PoleImage image;
  std::int64_t track_id = 0;
};

struct TrainResult {
  EncoderParams initial_params;
  EncoderParams params;
  std::vector<double> loss_history;  // one mean-loss entry per epoch
};

namespace detail {

inline void zero_grads(EncoderParams& grads) {
  for (const TensorRef& ref : tensor_refs(grads)) {
    std::fill(ref.data->begin(), ref.data->end(), 0.0);
  }
}

/// Draw `count` distinct values from [0, n) by partial Fisher-Yates.
inline std::vector<std::size_t> sample_distinct(Rng& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.uniform_int(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace detail

/// Train the encoder on automatically labeled Pole-Images.
///
/// CL batches sample tracks and draw two distinct observations per track as
/// positive pairs; SL attaches a linear classifier over track-ID classes
/// that is discarded after training. The run is a pure function of
/// (dataset, config): gradient accumulation order is fixed, so repeated
/// runs with the same seed are bit-identical on a fixed platform.
inline TrainResult train(const std::vector<TrainExample>& dataset, const EncoderConfig& ecfg,
                         const TrainConfig& cfg) {
  validate(cfg);
  if (dataset.empty()) throw DatasetError("train: dataset is empty");

  std::map<std::int64_t, std::vector<std::size_t>> by_track;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    by_track[dataset[i].track_id].push_back(i);
  }

  TrainResult result;
  result.params = init_params(ecfg, derive_seed(cfg.rng_seed, "train.init"));
  result.initial_params = result.params;
  EncoderParams grads = zeroed_params(ecfg);
  AdamState adam = make_adam_state(result.params);
  Rng rng(derive_seed(cfg.rng_seed, "train.batches"));
  EncoderWorkspace ws;

  if (cfg.objective == Objective::kContrastive) {
    std::vector<const std::vector<std::size_t>*> eligible;
    for (const auto& [track_id, indices] : by_track) {
      if (indices.size() >= 2) eligible.push_back(&indices);
    }
    if (eligible.empty()) {
      throw DatasetError("contrastive training requires a track with >= 2 observations");
    }
    if (eligible.size() < 2) {
      throw DatasetError("contrastive training requires >= 2 multi-observation tracks "
                         "for in-batch negatives");
    }
    const int b = static_cast<int>(std::min<std::size_t>(cfg.batch_size_cl, eligible.size()));
    const int steps_per_epoch = std::max<int>(
        1, static_cast<int>((dataset.size() + 2 * b - 1) / (2 * static_cast<std::size_t>(b))));
    const int dim = ecfg.embed_dim;

    std::vector<std::size_t> anchor_idx(b), positive_idx(b);
    std::vector<double> anchor_emb(static_cast<std::size_t>(b) * dim);
    std::vector<double> positive_emb(static_cast<std::size_t>(b) * dim);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      double epoch_loss = 0.0;
      for (int step = 0; step < steps_per_epoch; ++step) {
        const std::vector<std::size_t> tracks =
            detail::sample_distinct(rng, eligible.size(), static_cast<std::size_t>(b));
        for (int k = 0; k < b; ++k) {
          const std::vector<std::size_t>& members = *eligible[tracks[k]];
          const std::size_t i = rng.uniform_int(members.size());
          std::size_t j = rng.uniform_int(members.size() - 1);
          if (j >= i) ++j;
          anchor_idx[k] = members[i];
          positive_idx[k] = members[j];
        }
        // Pass 1: embeddings only (the loss couples the whole batch).
        for (int k = 0; k < b; ++k) {
          forward_trace(result.params, dataset[anchor_idx[k]].image, ws);
          std::copy(ws.embedding.begin(), ws.embedding.end(),
                    anchor_emb.begin() + static_cast<std::size_t>(k) * dim);
          forward_trace(result.params, dataset[positive_idx[k]].image, ws);
          std::copy(ws.embedding.begin(), ws.embedding.end(),
                    positive_emb.begin() + static_cast<std::size_t>(k) * dim);
        }
        const InfoNceResult loss_grad = infonce_loss(anchor_emb, positive_emb, b, dim,
                                                     cfg.temperature, cfg.cl_bidirectional);
        epoch_loss += loss_grad.loss;
        // Pass 2: re-run each forward for its trace and push the embedding
        // gradient back through, in fixed sample order.
        detail::zero_grads(grads);
        std::vector<double> g(dim);
        for (int k = 0; k < b; ++k) {
          forward_trace(result.params, dataset[anchor_idx[k]].image, ws);
          std::copy(loss_grad.grad_anchors.begin() + static_cast<std::size_t>(k) * dim,
                    loss_grad.grad_anchors.begin() + static_cast<std::size_t>(k + 1) * dim,
                    g.begin());
          backward_from_embedding(result.params, ws, g, grads);
          forward_trace(result.params, dataset[positive_idx[k]].image, ws);
          std::copy(loss_grad.grad_positives.begin() + static_cast<std::size_t>(k) * dim,
                    loss_grad.grad_positives.begin() + static_cast<std::size_t>(k + 1) * dim,
                    g.begin());
          backward_from_embedding(result.params, ws, g, grads);
        }
        adam_step(result.params, grads, adam, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                  cfg.adam_eps);
      }
      result.loss_history.push_back(epoch_loss / steps_per_epoch);
    }
    return result;
  }

  // Supervised: linear classifier over track-ID classes on top of the
  // embedding, discarded after training.
  std::vector<std::int64_t> class_ids;
  for (const auto& [track_id, indices] : by_track) class_ids.push_back(track_id);
  const int classes = static_cast<int>(class_ids.size());
  if (classes < 2) {
    throw DatasetError("supervised training requires >= 2 distinct track-id classes");
  }
  std::map<std::int64_t, int> class_of;
  for (int ci = 0; ci < classes; ++ci) class_of[class_ids[ci]] = ci;

  const int dim = ecfg.embed_dim;
  std::vector<double> cls_w(static_cast<std::size_t>(classes) * dim);
  std::vector<double> cls_b(classes, 0.0);
  {
    Rng cls_rng(derive_seed(cfg.rng_seed, "train.classifier"));
    const double limit = std::sqrt(6.0 / static_cast<double>(dim));
    for (double& w : cls_w) w = cls_rng.uniform(-limit, limit);
  }
  std::vector<double> cls_gw(cls_w.size(), 0.0), cls_gb(cls_b.size(), 0.0);
  std::vector<double> cls_mw(cls_w.size(), 0.0), cls_vw(cls_w.size(), 0.0);
  std::vector<double> cls_mb(cls_b.size(), 0.0), cls_vb(cls_b.size(), 0.0);

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    double epoch_loss = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_sl) {
      const int batch =
          static_cast<int>(std::min<std::size_t>(cfg.batch_size_sl, order.size() - start));
      detail::zero_grads(grads);
      std::fill(cls_gw.begin(), cls_gw.end(), 0.0);
      std::fill(cls_gb.begin(), cls_gb.end(), 0.0);
      double batch_loss = 0.0;
      const double inv_b = 1.0 / static_cast<double>(batch);
      std::vector<double> g_embedding(dim);
      for (int k = 0; k < batch; ++k) {
        const TrainExample& ex = dataset[order[start + k]];
        forward_trace(result.params, ex.image, ws);
        std::vector<double> logits(classes);
        for (int ci = 0; ci < classes; ++ci) {
          const double* wrow = cls_w.data() + static_cast<std::size_t>(ci) * dim;
          double acc = cls_b[ci];
          for (int d = 0; d < dim; ++d) acc += wrow[d] * ws.embedding[d];
          logits[ci] = acc;
        }
        const CrossEntropyResult ce =
            cross_entropy_loss(logits, 1, classes, {class_of.at(ex.track_id)});
        batch_loss += ce.loss * inv_b;
        std::fill(g_embedding.begin(), g_embedding.end(), 0.0);
        for (int ci = 0; ci < classes; ++ci) {
          const double gl = ce.grad_logits[ci] * inv_b;
          const double* wrow = cls_w.data() + static_cast<std::size_t>(ci) * dim;
          double* gwrow = cls_gw.data() + static_cast<std::size_t>(ci) * dim;
          cls_gb[ci] += gl;
          for (int d = 0; d < dim; ++d) {
            gwrow[d] += gl * ws.embedding[d];
            g_embedding[d] += gl * wrow[d];
          }
        }
        backward_from_embedding(result.params, ws, g_embedding, grads);
      }
      adam_step(result.params, grads, adam, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps);
      // Classifier tensors ride the same step counter.
      detail::adam_update_tensor(cls_w, cls_gw, cls_mw, cls_vw, cfg.learning_rate, cfg.adam_beta1,
                                 cfg.adam_beta2, cfg.adam_eps, adam.step_count);
      detail::adam_update_tensor(cls_b, cls_gb, cls_mb, cls_vb, cfg.learning_rate, cfg.adam_beta1,
                                 cfg.adam_beta2, cfg.adam_eps, adam.step_count);
      epoch_loss += batch_loss;
      ++steps;
    }
    result.loss_history.push_back(epoch_loss / std::max(1, steps));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints ("SPLE 1": versioned header, then named LE f64 tensors)
// ---------------------------------------------------------------------------

inline void save_checkpoint(const EncoderParams& params, const std::string& path) {
  std::string out;
  auto refs = tensor_refs(params);
  out += "SPLE 1 " + std::to_string(refs.size()) + "\n";
  const EncoderConfig& c = params.cfg;
  out += "C " + std::to_string(c.input_rows) + " " + std::to_string(c.input_cols) + " " +
         std::to_string(c.stem_channels) + " " + std::to_string(c.block1_channels) + " " +
         std::to_string(c.block2_channels) + " " + std::to_string(c.embed_dim) + "\n";
  for (const TensorRef& ref : refs) {
    out += "T ";
    out += ref.name;
    out += " " + std::to_string(ref.shape.size());
    for (const int d : ref.shape) out += " " + std::to_string(d);
    out += "\n";
    for (const double v : *ref.data) detail::write_f64_le(out, v);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write failed for '" + path + "'");
}

inline EncoderParams load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for reading");
  std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t start = pos;
    while (pos < data.size() && data[pos] != '\n') ++pos;
    std::string line = data.substr(start, pos - start);
    if (pos < data.size()) ++pos;
    return line;
  };

  const std::string header_line = next_line();
  const auto header = detail::split_ws(header_line);
  if (header.size() != 3 || header[0] != "SPLE" || header[1] != "1") {
    throw FormatError("'" + path + "': malformed checkpoint header, expected 'SPLE 1 <n>'");
  }
  const std::int64_t num_tensors = detail::parse_i64(header[2], 1);

  const std::string cfg_text = next_line();
  const auto cfg_line = detail::split_ws(cfg_text);
  if (cfg_line.size() != 7 || cfg_line[0] != "C") {
    throw FormatError("'" + path + "': malformed checkpoint config line");
  }
  EncoderConfig cfg;
  cfg.input_rows = static_cast<int>(detail::parse_i64(cfg_line[1], 2));
  cfg.input_cols = static_cast<int>(detail::parse_i64(cfg_line[2], 2));
  cfg.stem_channels = static_cast<int>(detail::parse_i64(cfg_line[3], 2));
  cfg.block1_channels = static_cast<int>(detail::parse_i64(cfg_line[4], 2));
  cfg.block2_channels = static_cast<int>(detail::parse_i64(cfg_line[5], 2));
  cfg.embed_dim = static_cast<int>(detail::parse_i64(cfg_line[6], 2));

  EncoderParams params = zeroed_params(cfg);
  auto refs = tensor_refs(params);
  if (static_cast<std::int64_t>(refs.size()) != num_tensors) {
    throw FormatError("'" + path + "': expected " + std::to_string(refs.size()) +
                      " tensors, header says " + std::to_string(num_tensors));
  }
  for (const TensorRef& ref : refs) {
    const std::string tensor_line = next_line();
    const auto tline = detail::split_ws(tensor_line);
    if (tline.size() < 3 || tline[0] != "T" || tline[1] != ref.name) {
      throw FormatError("'" + path + "': expected tensor '" + ref.name + "'");
    }
    const int ndim = static_cast<int>(detail::parse_i64(tline[2], 3));
    if (static_cast<int>(tline.size()) != 3 + ndim || ndim != static_cast<int>(ref.shape.size())) {
      throw FormatError("'" + path + "': tensor '" + ref.name + "' has unexpected rank");
    }
    for (int d = 0; d < ndim; ++d) {
      if (detail::parse_i64(tline[3 + d], 3) != ref.shape[d]) {
        throw FormatError("'" + path + "': tensor '" + ref.name + "' has unexpected shape");
      }
    }
    const std::size_t bytes = ref.data->size() * 8;
    if (pos + bytes > data.size()) {
      throw FormatError("'" + path + "': truncated tensor data for '" + ref.name + "'");
    }
    for (std::size_t i = 0; i < ref.data->size(); ++i) {
      (*ref.data)[i] = detail::read_f64_le(data.data() + pos + i * 8);
    }
    pos += bytes;
    for (const double v : *ref.data) {
      if (!std::isfinite(v)) {
        throw FormatError("'" + path + "': non-finite value in tensor '" + ref.name + "'");
      }
    }
  }
  return params;
}

}  // namespace spl
