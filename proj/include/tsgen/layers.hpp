#pragma once

#include <string>
#include <vector>

#include "tsgen/ops.hpp"
#include "tsgen/rng.hpp"

namespace tsgen {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

namespace init {

// uniform in +-1/sqrt(fan_in)
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
  return Tensor<T>::rand_uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace init

// ---------------------------------------------------------------------------

template <typename T>
struct LinearLayer {
  Tensor<T> w;  // [out, in]
  Tensor<T> b;  // [out]
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, Rng& rng, bool bias = true) : has_bias(bias) {
    w = init::fan_in_uniform<T>({out, in}, in, rng);
    if (bias) b = init::fan_in_uniform<T>({out}, in, rng);
  }

  Var apply(Tape<T>& tp, Var x) {
    return ops::linear(tp, x, tp.param(w), has_bias ? tp.param(b) : Var{});
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".w", &w});
    if (has_bias) out.push_back({prefix + ".b", &b});
  }
};

template <typename T>
struct Conv1dLayer {
  Tensor<T> kernel;  // [d_out, d_in, k]
  Tensor<T> b;       // [d_out]
  int dilation = 1;
  bool causal = false;

  Conv1dLayer() = default;
  Conv1dLayer(std::size_t din, std::size_t dout, std::size_t k, Rng& rng, int dil = 1,
              bool causal_pad = false)
      : dilation(dil), causal(causal_pad) {
    if (!causal_pad && k % 2 == 0)
      throw ConfigError("conv1d: kernel width must be odd for same padding");
    kernel = init::fan_in_uniform<T>({dout, din, k}, din * k, rng);
    b = init::fan_in_uniform<T>({dout}, din * k, rng);
  }

  Var apply(Tape<T>& tp, Var x) {
    return ops::conv1d(tp, x, tp.param(kernel), tp.param(b), dilation, causal);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".kernel", &kernel});
    out.push_back({prefix + ".b", &b});
  }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gain;
  Tensor<T> offset;
  T eps = T(1e-5);

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::size_t d) {
    gain = Tensor<T>::full({d}, T(1));
    offset = Tensor<T>::zeros({d});
  }

  Var apply(Tape<T>& tp, Var x) {
    return ops::layer_norm(tp, x, tp.param(gain), tp.param(offset), eps);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gain", &gain});
    out.push_back({prefix + ".offset", &offset});
  }
};

// ---------------------------------------------------------------------------
// scaled dot-product attention with head split/merge and output projection;
// cross-attention reads keys/values from a separate memory sequence
// ---------------------------------------------------------------------------

template <typename T>
struct MultiHeadAttention {
  std::size_t heads = 1;
  std::size_t width = 0;
  LinearLayer<T> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_width, std::size_t n_heads, Rng& rng)
      : heads(n_heads), width(model_width) {
    if (model_width % n_heads != 0)
      throw ConfigError("attention width " + std::to_string(model_width) +
                        " not divisible by " + std::to_string(n_heads) + " heads");
    wq = LinearLayer<T>(model_width, model_width, rng);
    wk = LinearLayer<T>(model_width, model_width, rng);
    wv = LinearLayer<T>(model_width, model_width, rng);
    wo = LinearLayer<T>(model_width, model_width, rng);
  }

  // q_src == kv_src gives self-attention
  Var apply(Tape<T>& tp, Var q_src, Var kv_src) {
    const std::size_t dh = width / heads;
    Var q = ops::split_heads(tp, wq.apply(tp, q_src), heads);
    Var k = ops::split_heads(tp, wk.apply(tp, kv_src), heads);
    Var v = ops::split_heads(tp, wv.apply(tp, kv_src), heads);
    Var scores = ops::scale(tp, ops::bmm_nt(tp, q, k), T(1) / std::sqrt(static_cast<T>(dh)));
    Var probs = ops::softmax_last(tp, scores);
    Var ctx = ops::merge_heads(tp, ops::bmm_nn(tp, probs, v), heads);
    return wo.apply(tp, ctx);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    wq.collect(prefix + ".q", out);
    wk.collect(prefix + ".k", out);
    wv.collect(prefix + ".v", out);
    wo.collect(prefix + ".o", out);
  }
};

// ---------------------------------------------------------------------------
// pre-norm transformer blocks, feed-forward expansion 4x
// ---------------------------------------------------------------------------

template <typename T>
struct FeedForward {
  LinearLayer<T> up, down;

  FeedForward() = default;
  FeedForward(std::size_t width, Rng& rng)
      : up(width, 4 * width, rng), down(4 * width, width, rng) {}

  Var apply(Tape<T>& tp, Var x) { return down.apply(tp, ops::gelu(tp, up.apply(tp, x))); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
  }
};

template <typename T>
struct EncoderBlock {
  LayerNormLayer<T> norm_attn, norm_ffn;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;

  EncoderBlock() = default;
  EncoderBlock(std::size_t width, std::size_t heads, Rng& rng)
      : norm_attn(width), norm_ffn(width), attn(width, heads, rng), ffn(width, rng) {}

  Var apply(Tape<T>& tp, Var x) {
    Var h = ops::layer_norm(tp, x, tp.param(norm_attn.gain), tp.param(norm_attn.offset),
                            norm_attn.eps);
    x = ops::add(tp, x, attn.apply(tp, h, h));
    Var f = norm_ffn.apply(tp, x);
    return ops::add(tp, x, ffn.apply(tp, f));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    norm_attn.collect(prefix + ".norm_attn", out);
    attn.collect(prefix + ".attn", out);
    norm_ffn.collect(prefix + ".norm_ffn", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

template <typename T>
struct DecoderBlock {
  LayerNormLayer<T> norm_self, norm_cross, norm_ffn;
  MultiHeadAttention<T> self_attn, cross_attn;
  FeedForward<T> ffn;

  DecoderBlock() = default;
  DecoderBlock(std::size_t width, std::size_t heads, Rng& rng)
      : norm_self(width),
        norm_cross(width),
        norm_ffn(width),
        self_attn(width, heads, rng),
        cross_attn(width, heads, rng),
        ffn(width, rng) {}

  Var apply(Tape<T>& tp, Var x, Var memory) {
    Var h = norm_self.apply(tp, x);
    x = ops::add(tp, x, self_attn.apply(tp, h, h));
    Var c = norm_cross.apply(tp, x);
    x = ops::add(tp, x, cross_attn.apply(tp, c, memory));
    Var f = norm_ffn.apply(tp, x);
    return ops::add(tp, x, ffn.apply(tp, f));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    norm_self.collect(prefix + ".norm_self", out);
    self_attn.collect(prefix + ".self_attn", out);
    norm_cross.collect(prefix + ".norm_cross", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    norm_ffn.collect(prefix + ".norm_ffn", out);
    ffn.collect(prefix + ".ffn", out);
  }
};

// ---------------------------------------------------------------------------
// gated recurrent unit cell: h' = u * h + (1 - u) * c
// ---------------------------------------------------------------------------

template <typename T>
struct GruCellLayer {
  LinearLayer<T> wr, wu, wc;            // input -> gates, with bias
  LinearLayer<T> ur, uu, uc;            // hidden -> gates, no bias

  GruCellLayer() = default;
  GruCellLayer(std::size_t input_dim, std::size_t hidden_dim, Rng& rng)
      : wr(input_dim, hidden_dim, rng),
        wu(input_dim, hidden_dim, rng),
        wc(input_dim, hidden_dim, rng),
        ur(hidden_dim, hidden_dim, rng, /*bias=*/false),
        uu(hidden_dim, hidden_dim, rng, /*bias=*/false),
        uc(hidden_dim, hidden_dim, rng, /*bias=*/false) {}

  Var step(Tape<T>& tp, Var x_t, Var h_prev) {
    Var r = ops::sigmoid(tp, ops::add(tp, wr.apply(tp, x_t), ur.apply(tp, h_prev)));
    Var u = ops::sigmoid(tp, ops::add(tp, wu.apply(tp, x_t), uu.apply(tp, h_prev)));
    Var c = ops::tanh_op(
        tp, ops::add(tp, wc.apply(tp, x_t), uc.apply(tp, ops::mul(tp, r, h_prev))));
    Var keep = ops::mul(tp, u, h_prev);
    Var blend = ops::mul(tp, ops::affine(tp, u, T(-1), T(1)), c);
    return ops::add(tp, keep, blend);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    wr.collect(prefix + ".wr", out);
    wu.collect(prefix + ".wu", out);
    wc.collect(prefix + ".wc", out);
    ur.collect(prefix + ".ur", out);
    uu.collect(prefix + ".uu", out);
    uc.collect(prefix + ".uc", out);
  }
};

}  // namespace tsgen
