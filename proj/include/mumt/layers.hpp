#pragma once

#include <cmath>
#include <string>

#include "mumt/rng.hpp"
#include "mumt/tensor_ops.hpp"

// Neural blocks assembled by the model: linear/layer-norm/dropout, sinusoidal
// positional encoding, multi-head attention, post-norm transformer encoder
// layer, batch norm, and strided 1d conv blocks. Sequences are batch-major
// [B x T x D] internally; conv blocks expose the channels-first [B x C x L]
// contract and transpose at the boundary.

namespace mumt {

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

// Forward-pass context. rng drives dropout masks and must be set in train
// mode; update_bn_stats is switched off by the gradient-check harness so a
// train-mode forward stays a pure function.
struct ForwardCtx {
  bool train = false;
  Rng* rng = nullptr;
  bool update_bn_stats = true;
};

struct EncoderLayerParams {
  int64_t d_model;
  int64_t n_heads;
  int64_t ffn_dim;
  double dropout_p;

  EncoderLayerParams(int64_t d, int64_t heads, int64_t ffn, double dropout)
      : d_model(d), n_heads(heads), ffn_dim(ffn), dropout_p(dropout) {
    if (d <= 0 || heads <= 0 || ffn <= 0)
      throw ValueError("encoder layer dims must be positive");
    if (d % heads != 0)
      throw ValueError("d_model " + std::to_string(d) + " not divisible by n_heads " +
                       std::to_string(heads));
    if (dropout < 0.0 || dropout >= 1.0)
      throw ValueError("dropout_p must lie in [0, 1), got " + std::to_string(dropout));
  }
};

struct Conv1dBlockParams {
  int64_t in_channels;
  int64_t out_channels;
  int64_t kernel = 3;
  int64_t stride = 1;
  int64_t padding = 1;

  Conv1dBlockParams(int64_t in_ch, int64_t out_ch, int64_t stride_)
      : in_channels(in_ch), out_channels(out_ch), stride(stride_) {
    if (in_ch <= 0 || out_ch <= 0) throw ValueError("conv channels must be positive");
    if (stride_ != 1 && stride_ != 2)
      throw ValueError("conv stride must be 1 or 2, got " + std::to_string(stride_));
  }

  int64_t output_length(int64_t len) const {
    return (len + 2 * padding - kernel) / stride + 1;
  }
};

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng) : in_(in), out_(out) {
    double limit = std::sqrt(6.0 / double(in + out));
    std::vector<S> w(size_t(in * out));
    for (auto& v : w) v = S(rng.uniform(-limit, limit));
    weight_ = Tensor<S>::from_data({in, out}, std::move(w), true);
    bias_ = Tensor<S>::zeros({out}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    if (x.shape().back() != in_)
      throw ShapeError("linear expects input width " + std::to_string(in_) + ", got " +
                       shape_str(x.shape()));
    return ops::add(ops::matmul(x, weight_), bias_);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    params.push_back({prefix + ".weight", weight_});
    params.push_back({prefix + ".bias", bias_});
  }

  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }

 private:
  int64_t in_ = 0, out_ = 0;
  Tensor<S> weight_, bias_;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int64_t n) : n_(n) {
    gamma_ = Tensor<S>::filled({n}, S(1), true);
    beta_ = Tensor<S>::zeros({n}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return ops::layer_norm(x, gamma_, beta_, S(1e-5)); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    params.push_back({prefix + ".gamma", gamma_});
    params.push_back({prefix + ".beta", beta_});
  }

 private:
  int64_t n_ = 0;
  Tensor<S> gamma_, beta_;
};

template <typename S>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double p) : p_(p) {
    if (p < 0.0 || p >= 1.0) throw ValueError("dropout probability must lie in [0, 1)");
  }

  Tensor<S> forward(const Tensor<S>& x, const ForwardCtx& ctx) const {
    if (!ctx.train || p_ == 0.0) return x;
    if (!ctx.rng) throw ValueError("train-mode dropout requires an rng in the forward context");
    std::vector<S> mask(size_t(x.numel()));
    S keep_scale = S(1.0 / (1.0 - p_));
    for (auto& v : mask) v = ctx.rng->uniform() < p_ ? S(0) : keep_scale;
    return ops::mul(x, Tensor<S>::from_data(x.shape(), std::move(mask)));
  }

 private:
  double p_ = 0.0;
};

// Fixed sinusoidal table: sin on even columns, cos on odd, frequency
// 1/10000^(2i/d_model) for column pair i.
template <typename S>
Tensor<S> positional_encoding(int64_t length, int64_t d_model) {
  if (length < 1 || d_model < 1) throw ValueError("positional encoding dims must be >= 1");
  std::vector<S> pe(size_t(length * d_model));
  for (int64_t pos = 0; pos < length; ++pos)
    for (int64_t col = 0; col < d_model; ++col) {
      double freq = std::pow(10000.0, -double(2 * (col / 2)) / double(d_model));
      double angle = double(pos) * freq;
      pe[pos * d_model + col] = S(col % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return Tensor<S>::from_data({length, d_model}, std::move(pe));
}

template <typename S>
struct AttentionResult {
  Tensor<S> output;
  Tensor<S> weights;
};

// softmax(q.k^T / sqrt(d)).v without projections; q,k,v are [B x T x d].
template <typename S>
AttentionResult<S> scaled_dot_product_attention(const Tensor<S>& q, const Tensor<S>& k,
                                                const Tensor<S>& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw ShapeError("attention expects rank-3 [B x T x d] tensors");
  if (q.shape().back() != k.shape().back())
    throw ShapeError("attention q/k width mismatch: " + shape_str(q.shape()) + " vs " +
                     shape_str(k.shape()));
  if (k.dim(1) != v.dim(1) || k.dim(0) != v.dim(0))
    throw ShapeError("attention k/v shape mismatch: " + shape_str(k.shape()) + " vs " +
                     shape_str(v.shape()));
  if (k.dim(1) < 1) throw ShapeError("attention over an empty key sequence");
  S scale = S(1.0 / std::sqrt(double(q.shape().back())));
  Tensor<S> logits = ops::mul_scalar(ops::matmul(q, ops::transpose(k, 1, 2)), scale);
  Tensor<S> weights = ops::softmax(logits, 2);
  return {ops::matmul(weights, v), weights};
}

template <typename S>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int64_t d_model, int64_t n_heads, Rng& rng)
      : d_(d_model), heads_(n_heads), wq_(d_model, d_model, rng), wk_(d_model, d_model, rng),
        wv_(d_model, d_model, rng), wo_(d_model, d_model, rng) {
    if (d_model % n_heads != 0) throw ValueError("d_model not divisible by n_heads");
  }

  Tensor<S> forward(const Tensor<S>& q_in, const Tensor<S>& k_in, const Tensor<S>& v_in) {
    int64_t b = q_in.dim(0), tq = q_in.dim(1), tk = k_in.dim(1);
    int64_t dh = d_ / heads_;
    auto split = [&](const Tensor<S>& x, int64_t t) {
      // [B x T x d] -> [(B*heads) x T x dh]
      auto h = ops::reshape(x, {b, t, heads_, dh});
      return ops::reshape(ops::transpose(h, 1, 2), {b * heads_, t, dh});
    };
    Tensor<S> qh = split(wq_.forward(q_in), tq);
    Tensor<S> kh = split(wk_.forward(k_in), tk);
    Tensor<S> vh = split(wv_.forward(v_in), tk);
    auto attn = scaled_dot_product_attention(qh, kh, vh);
    last_weights_ = attn.weights.detach();  // [(B*heads) x Tq x Tk] diagnostics
    auto merged = ops::reshape(ops::transpose(ops::reshape(attn.output, {b, heads_, tq, dh}), 1, 2),
                               {b, tq, d_});
    return wo_.forward(merged);
  }

  // Per-head weights from the most recent forward, [ (B*heads) x Tq x Tk ].
  const Tensor<S>& last_weights() const { return last_weights_; }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    wq_.collect(prefix + ".wq", params);
    wk_.collect(prefix + ".wk", params);
    wv_.collect(prefix + ".wv", params);
    wo_.collect(prefix + ".wo", params);
  }

 private:
  int64_t d_ = 0, heads_ = 0;
  Linear<S> wq_, wk_, wv_, wo_;
  Tensor<S> last_weights_;
};

// Post-norm encoder layer: self-attention + residual + norm, then
// d_model -> ffn -> d_model with relu + residual + norm. Dropout sits after
// the attention output and after the FFN.
template <typename S>
class TransformerEncoderLayer {
 public:
  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(const EncoderLayerParams& p, Rng& rng)
      : d_(p.d_model), attn_(p.d_model, p.n_heads, rng), norm1_(p.d_model), norm2_(p.d_model),
        ffn1_(p.d_model, p.ffn_dim, rng), ffn2_(p.ffn_dim, p.d_model, rng), drop_(p.dropout_p) {}

  Tensor<S> forward(const Tensor<S>& x, const ForwardCtx& ctx) {
    if (x.rank() != 3 || x.shape().back() != d_)
      throw ShapeError("encoder layer expects [B x T x " + std::to_string(d_) + "], got " +
                       shape_str(x.shape()));
    Tensor<S> a = drop_.forward(attn_.forward(x, x, x), ctx);
    Tensor<S> x1 = norm1_.forward(ops::add(x, a));
    Tensor<S> f = drop_.forward(ffn2_.forward(ops::relu(ffn1_.forward(x1))), ctx);
    return norm2_.forward(ops::add(x1, f));
  }

  const Tensor<S>& last_attention_weights() const { return attn_.last_weights(); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    attn_.collect(prefix + ".attn", params);
    norm1_.collect(prefix + ".norm1", params);
    norm2_.collect(prefix + ".norm2", params);
    ffn1_.collect(prefix + ".ffn1", params);
    ffn2_.collect(prefix + ".ffn2", params);
  }

 private:
  int64_t d_ = 0;
  MultiHeadAttention<S> attn_;
  LayerNorm<S> norm1_, norm2_;
  Linear<S> ffn1_, ffn2_;
  Dropout<S> drop_;
};

// Batch normalization over the feature (last) axis of [B x C] or [B x L x C].
// Train mode normalizes with batch statistics (requires >= 2 rows) and updates
// running stats; eval mode uses the stored running statistics.
template <typename S>
class BatchNorm1d {
 public:
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  BatchNorm1d() = default;
  explicit BatchNorm1d(int64_t features) : c_(features) {
    gamma_ = Tensor<S>::filled({features}, S(1), true);
    beta_ = Tensor<S>::zeros({features}, true);
    running_mean_ = Tensor<S>::zeros({features});
    running_var_ = Tensor<S>::filled({features}, S(1));
  }

  Tensor<S> forward(const Tensor<S>& x, const ForwardCtx& ctx) {
    if (x.shape().back() != c_)
      throw ShapeError("batch norm expects feature width " + std::to_string(c_) + ", got " +
                       shape_str(x.shape()));
    if (x.rank() != 2 && x.rank() != 3)
      throw ShapeError("batch norm expects rank 2 or 3 input, got " + shape_str(x.shape()));
    if (!ctx.train) {
      std::vector<S> scale(static_cast<size_t>(c_));
      std::vector<S> shift(static_cast<size_t>(c_));
      for (int64_t i = 0; i < c_; ++i) {
        scale[i] = S(1.0 / std::sqrt(double(running_var_.data()[i]) + kEps));
        shift[i] = running_mean_.data()[i];
      }
      Tensor<S> xc = ops::sub(x, Tensor<S>::from_data({c_}, std::move(shift)));
      Tensor<S> xhat = ops::mul(xc, Tensor<S>::from_data({c_}, std::move(scale)));
      return ops::add(ops::mul(xhat, gamma_), beta_);
    }

    int64_t n = x.numel() / c_;
    if (x.dim(0) < 2)
      throw ValueError(
          "batch norm in train mode needs batch size >= 2 (batch statistics are degenerate "
          "otherwise); got batch of " +
          std::to_string(x.dim(0)));
    Tensor<S> mu = x.rank() == 2 ? ops::mean(x, 0) : ops::mean(ops::mean(x, 1), 0);
    Tensor<S> centered = ops::sub(x, mu);
    Tensor<S> sq = ops::mul(centered, centered);
    Tensor<S> var = x.rank() == 2 ? ops::mean(sq, 0) : ops::mean(ops::mean(sq, 1), 0);
    // rsqrt via exp/log keeps the primitive set closed; var + eps > 0 always.
    Tensor<S> rstd = ops::exp(ops::mul_scalar(ops::log(ops::add_scalar(var, S(kEps))), S(-0.5)));
    Tensor<S> y = ops::add(ops::mul(ops::mul(centered, rstd), gamma_), beta_);

    if (ctx.update_bn_stats) {
      double unbias = double(n) / double(n - 1);
      for (int64_t i = 0; i < c_; ++i) {
        running_mean_.data_mut()[i] =
            S((1.0 - kMomentum) * double(running_mean_.data()[i]) + kMomentum * double(mu.data()[i]));
        running_var_.data_mut()[i] = S((1.0 - kMomentum) * double(running_var_.data()[i]) +
                                       kMomentum * unbias * double(var.data()[i]));
      }
    }
    return y;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    params.push_back({prefix + ".gamma", gamma_});
    params.push_back({prefix + ".beta", beta_});
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<S>>& buffers) {
    buffers.push_back({prefix + ".running_mean", running_mean_});
    buffers.push_back({prefix + ".running_var", running_var_});
  }

 private:
  int64_t c_ = 0;
  Tensor<S> gamma_, beta_, running_mean_, running_var_;
};

// conv -> batch norm -> relu over [B x C_in x L], returning [B x C_out x L']
// with L' = (L + 2*padding - kernel)/stride + 1. The convolution is an
// im2col composite (pad/gather/reshape/matmul), so its gradient falls out of
// the primitives.
template <typename S>
class Conv1dBlock {
 public:
  Conv1dBlock() = default;
  Conv1dBlock(const Conv1dBlockParams& p, Rng& rng) : p_(p), bn_(p.out_channels) {
    int64_t fan_in = p.kernel * p.in_channels;
    double limit = std::sqrt(1.0 / double(fan_in));
    std::vector<S> w(size_t(fan_in * p.out_channels));
    for (auto& v : w) v = S(rng.uniform(-limit, limit));
    weight_ = Tensor<S>::from_data({fan_in, p.out_channels}, std::move(w), true);
    bias_ = Tensor<S>::zeros({p.out_channels}, true);
  }

  Tensor<S> forward(const Tensor<S>& x, const ForwardCtx& ctx) {
    if (x.rank() != 3 || x.dim(1) != p_.in_channels)
      throw ShapeError("conv block expects [B x " + std::to_string(p_.in_channels) +
                       " x L], got " + shape_str(x.shape()));
    int64_t len = x.dim(2);
    if (len < p_.kernel - p_.padding)
      throw ShapeError("conv input length " + std::to_string(len) + " shorter than kernel " +
                       std::to_string(p_.kernel) + " minus padding");
    int64_t b = x.dim(0);
    int64_t out_len = p_.output_length(len);

    Tensor<S> tl = ops::transpose(x, 1, 2);  // [B x L x C]
    if (p_.padding > 0) {
      Tensor<S> zeros = Tensor<S>::zeros({b, p_.padding, p_.in_channels});
      tl = ops::concat(std::vector<Tensor<S>>{zeros, tl, zeros}, 1);
    }
    std::vector<int64_t> idx;
    idx.reserve(size_t(out_len * p_.kernel));
    for (int64_t t = 0; t < out_len; ++t)
      for (int64_t j = 0; j < p_.kernel; ++j) idx.push_back(t * p_.stride + j);
    Tensor<S> cols = ops::gather(tl, 1, idx);                       // [B x L'*k x C]
    cols = ops::reshape(cols, {b, out_len, p_.kernel * p_.in_channels});
    Tensor<S> y = ops::add(ops::matmul(cols, weight_), bias_);      // [B x L' x C_out]
    y = ops::relu(bn_.forward(y, ctx));
    return ops::transpose(y, 1, 2);  // [B x C_out x L']
  }

  const Conv1dBlockParams& params() const { return p_; }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& params) {
    params.push_back({prefix + ".weight", weight_});
    params.push_back({prefix + ".bias", bias_});
    bn_.collect(prefix + ".bn", params);
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedTensor<S>>& buffers) {
    bn_.collect_buffers(prefix + ".bn", buffers);
  }

 private:
  Conv1dBlockParams p_{1, 1, 1};
  Tensor<S> weight_, bias_;
  BatchNorm1d<S> bn_;
};

// Equal-segment temporal reduction: [B x T x D] -> [B x R x D] by averaging
// contiguous blocks of T/R steps.
template <typename S>
Tensor<S> segment_average(const Tensor<S>& x, int64_t reduced_len) {
  if (x.rank() != 3) throw ShapeError("segment_average expects [B x T x D]");
  int64_t t = x.dim(1);
  if (t % reduced_len != 0)
    throw ShapeError("sequence length " + std::to_string(t) + " not divisible by reduced length " +
                     std::to_string(reduced_len));
  int64_t seg = t / reduced_len;
  return ops::mean(ops::reshape(x, {x.dim(0), reduced_len, seg, x.dim(2)}), 2);
}

}  // namespace mumt
