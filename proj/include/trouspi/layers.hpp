#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace trouspi {

constexpr double kLeakySlope = 0.2;
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.9;
constexpr std::size_t kAttentionReduction = 16;  // CBAM / SE channel reduction

enum class Mode { train, eval };

enum class Activation { identity, leaky_relu, relu, sigmoid_act, tanh_act };

inline Tensor apply_activation(const Tensor& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::leaky_relu: return leaky_relu(x, kLeakySlope);
    case Activation::relu: return relu(x);
    case Activation::sigmoid_act: return sigmoid(x);
    case Activation::tanh_act: return tanh(x);
  }
  fail("apply_activation: unknown kind");
}

// ----------------------------------------------------------------------------
// Parameter registry
// ----------------------------------------------------------------------------

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable;
};

/// Ordered, hierarchically named parameter store. Iteration order is
/// registration order, which makes initialisation, optimisation, and
/// checkpoint layout deterministic.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> data,
             bool trainable = true) {
    require(!index_.count(name), "param store: duplicate name '", name, "'");
    Tensor t = trainable ? Tensor::leaf(std::move(shape), std::move(data))
                         : Tensor::from(std::move(shape), std::move(data));
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "param store: unknown name '", name, "'");
    return entries_[it->second].tensor;
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }

  std::size_t trainable_scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Uniform Glorot initial values: U(-L, L) with L = sqrt(6 / (fan_in + fan_out)).
inline std::vector<double> glorot_uniform(Rng& rng, std::size_t fan_in,
                                          std::size_t fan_out, std::size_t n) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

// ----------------------------------------------------------------------------
// Atrous convolution stage
// ----------------------------------------------------------------------------

struct ConvParams {
  Tensor w;  // K×C×kh×kw
  Tensor b;  // K
  std::size_t r1 = 1, r2 = 1;
};

inline ConvParams make_conv(ParamStore& store, const std::string& prefix,
                            std::size_t in_channels, std::size_t out_channels,
                            std::size_t kh, std::size_t kw, std::size_t r1,
                            std::size_t r2, Rng& rng) {
  ConvParams p;
  std::size_t fan_in = in_channels * kh * kw, fan_out = out_channels * kh * kw;
  p.w = store.add(prefix + ".w", {out_channels, in_channels, kh, kw},
                  glorot_uniform(rng, fan_in, fan_out,
                                 out_channels * in_channels * kh * kw));
  p.b = store.add(prefix + ".b", {out_channels},
                  std::vector<double>(out_channels, 0.0));
  p.r1 = r1;
  p.r2 = r2;
  return p;
}

/// Dilated same-padding cross-correlation followed by an activation.
inline Tensor atrous_conv2d(const Tensor& x, const ConvParams& p, Activation a) {
  return apply_activation(conv2d(x, p.w, p.b, p.r1, p.r2), a);
}

// ----------------------------------------------------------------------------
// Channel/spatial attention blocks
// ----------------------------------------------------------------------------

namespace detail {

/// Mean over the two trailing spatial axes: B×C×H×W → B×C, C×H×W → C.
inline Tensor spatial_mean(const Tensor& x) {
  return reduce_mean(reduce_mean(x, x.ndim() - 1), x.ndim() - 2);
}

inline Tensor spatial_max(const Tensor& x) {
  return reduce_max(reduce_max(x, x.ndim() - 1), x.ndim() - 2);
}

/// Ensure a channel vector is 2-D (rows × C) for matmul, tracking whether the
/// input was unbatched.
inline Tensor as_rows(const Tensor& v, bool& was_vector) {
  was_vector = v.ndim() == 1;
  return was_vector ? reshape(v, {1, v.shape()[0]}) : v;
}

}  // namespace detail

struct CBAMParams {
  Tensor mlp_w1, mlp_b1;  // C→C/r shared MLP
  Tensor mlp_w2, mlp_b2;  // C/r→C
  Tensor conv_w, conv_b;  // 1×2×7×7 spatial-attention kernel
};

// Sigmoid-gate bias at init. Zero biases leave every attention gate near
// 0.5, and a branch stacks six gates (CBAM channel + spatial, SE, per
// block), so signal and gradient through the convolution stack would be
// attenuated by ~0.5^6 at the start of training. Opening the gates
// (sigmoid(2) ≈ 0.88) lets the branch train; the gates remain free to
// close where attention should suppress.
constexpr double kGateOpenBias = 2.0;

inline CBAMParams make_cbam(ParamStore& store, const std::string& prefix,
                            std::size_t channels, Rng& rng) {
  CBAMParams p;
  std::size_t r = std::max<std::size_t>(1, channels / kAttentionReduction);
  p.mlp_w1 = store.add(prefix + ".mlp_w1", {channels, r},
                       glorot_uniform(rng, channels, r, channels * r));
  p.mlp_b1 = store.add(prefix + ".mlp_b1", {r}, std::vector<double>(r, 0.0));
  p.mlp_w2 = store.add(prefix + ".mlp_w2", {r, channels},
                       glorot_uniform(rng, r, channels, r * channels));
  p.mlp_b2 = store.add(prefix + ".mlp_b2", {channels},
                       std::vector<double>(channels, kGateOpenBias));
  p.conv_w = store.add(prefix + ".conv_w", {1, 2, 7, 7},
                       glorot_uniform(rng, 2 * 49, 49, 2 * 49));
  p.conv_b = store.add(prefix + ".conv_b", {1}, {kGateOpenBias});
  return p;
}

/// Channel attention then spatial attention, each a sigmoid gate.
inline Tensor cbam(const Tensor& f, const CBAMParams& p) {
  require(f.ndim() == 3 || f.ndim() == 4, "cbam: expects C×H×W or B×C×H×W, got ",
          shape_str(f.shape()));
  std::size_t c_axis = f.ndim() - 3;
  require(f.shape()[c_axis] == p.mlp_w1.shape()[0], "cbam: input has ",
          f.shape()[c_axis], " channels, params expect ", p.mlp_w1.shape()[0]);

  auto mlp = [&p](const Tensor& v) {
    return add_rowwise(
        matmul(relu(add_rowwise(matmul(v, p.mlp_w1), p.mlp_b1)), p.mlp_w2),
        p.mlp_b2);
  };

  bool was_vec = false;
  Tensor avg = detail::as_rows(detail::spatial_mean(f), was_vec);
  Tensor mx = detail::as_rows(detail::spatial_max(f), was_vec);
  Tensor mc = sigmoid(mlp(avg) + mlp(mx));  // rows × C
  if (was_vec) mc = reshape(mc, {mc.shape()[1]});
  Tensor f1 = scale_channels(f, mc);

  Tensor ch_mean = reduce_mean(f1, c_axis);  // B×H×W or H×W
  Tensor ch_max = reduce_max(f1, c_axis);
  Shape lifted = ch_mean.shape();
  lifted.insert(lifted.begin() + c_axis, 1);
  Tensor stacked =
      concat({reshape(ch_mean, lifted), reshape(ch_max, lifted)}, c_axis);
  Tensor ms_map = conv2d(stacked, p.conv_w, p.conv_b, 1, 1);
  Tensor ms = sigmoid(reshape(ms_map, ch_mean.shape()));
  return scale_spatial(f1, ms);
}

struct SEParams {
  Tensor w1, b1;  // C→C/r
  Tensor w2, b2;  // C/r→C
};

inline SEParams make_se(ParamStore& store, const std::string& prefix,
                        std::size_t channels, Rng& rng) {
  SEParams p;
  std::size_t r = std::max<std::size_t>(1, channels / kAttentionReduction);
  p.w1 = store.add(prefix + ".w1", {channels, r},
                   glorot_uniform(rng, channels, r, channels * r));
  p.b1 = store.add(prefix + ".b1", {r}, std::vector<double>(r, 0.0));
  p.w2 = store.add(prefix + ".w2", {r, channels},
                   glorot_uniform(rng, r, channels, r * channels));
  p.b2 = store.add(prefix + ".b2", {channels},
                   std::vector<double>(channels, kGateOpenBias));
  return p;
}

/// Squeeze-and-excitation: global-average descriptor → two dense maps → gate.
inline Tensor se_block(const Tensor& f, const SEParams& p) {
  require(f.ndim() == 3 || f.ndim() == 4, "se_block: expects C×H×W or B×C×H×W, got ",
          shape_str(f.shape()));
  std::size_t c_axis = f.ndim() - 3;
  require(f.shape()[c_axis] == p.w1.shape()[0], "se_block: input has ",
          f.shape()[c_axis], " channels, params expect ", p.w1.shape()[0]);
  bool was_vec = false;
  Tensor pooled = detail::as_rows(detail::spatial_mean(f), was_vec);
  Tensor gate = sigmoid(add_rowwise(
      matmul(relu(add_rowwise(matmul(pooled, p.w1), p.b1)), p.w2), p.b2));
  if (was_vec) gate = reshape(gate, {gate.shape()[1]});
  return scale_channels(f, gate);
}

// ----------------------------------------------------------------------------
// Batch normalisation layer (owns running statistics)
// ----------------------------------------------------------------------------

struct BatchNormState {
  Tensor gamma, beta;               // trainable
  Tensor running_mean, running_var;  // persistent, not trainable
  double eps = kBnEps;
  double momentum = kBnMomentum;
};

inline BatchNormState make_batch_norm(ParamStore& store, const std::string& prefix,
                                      std::size_t channels) {
  BatchNormState s;
  s.gamma = store.add(prefix + ".gamma", {channels},
                      std::vector<double>(channels, 1.0));
  s.beta =
      store.add(prefix + ".beta", {channels}, std::vector<double>(channels, 0.0));
  s.running_mean = store.add(prefix + ".running_mean", {channels},
                             std::vector<double>(channels, 0.0), false);
  s.running_var = store.add(prefix + ".running_var", {channels},
                            std::vector<double>(channels, 1.0), false);
  return s;
}

/// Train mode normalises with current-batch statistics and folds them into the
/// running estimates; eval mode applies the stored running statistics.
inline Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode) {
  if (mode == Mode::train) {
    auto res = batch_norm_train(x, state.gamma, state.beta, state.eps);
    auto& rm = state.running_mean.mutable_data();
    auto& rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = state.momentum * rm[c] + (1.0 - state.momentum) * res.batch_mean[c];
      rv[c] = state.momentum * rv[c] + (1.0 - state.momentum) * res.batch_var[c];
    }
    return res.y;
  }
  return batch_norm_eval(x, state.gamma, state.beta, state.running_mean.data(),
                         state.running_var.data(), state.eps);
}

// ----------------------------------------------------------------------------
// Gated recurrent unit
// ----------------------------------------------------------------------------

struct GRUCellParams {
  Tensor Wz, Wr, Wh;  // input maps, D×H
  Tensor Uz, Ur, Uh;  // recurrent maps, H×H
  Tensor bz, br, bh;  // H
};

inline GRUCellParams make_gru(ParamStore& store, const std::string& prefix,
                              std::size_t in_dim, std::size_t hidden, Rng& rng) {
  GRUCellParams p;
  auto mat = [&](const std::string& n, std::size_t rows, std::size_t cols) {
    return store.add(prefix + "." + n, {rows, cols},
                     glorot_uniform(rng, rows, cols, rows * cols));
  };
  auto vec = [&](const std::string& n) {
    return store.add(prefix + "." + n, {hidden}, std::vector<double>(hidden, 0.0));
  };
  p.Wz = mat("Wz", in_dim, hidden);
  p.Wr = mat("Wr", in_dim, hidden);
  p.Wh = mat("Wh", in_dim, hidden);
  p.Uz = mat("Uz", hidden, hidden);
  p.Ur = mat("Ur", hidden, hidden);
  p.Uh = mat("Uh", hidden, hidden);
  p.bz = vec("bz");
  p.br = vec("br");
  p.bh = vec("bh");
  return p;
}

enum class Direction { forward, reverse };

/// One recurrence step. x: B×D (or D), h: B×H (or H).
/// z = σ(Wz·x + Uz·h + bz); r = σ(Wr·x + Ur·h + br);
/// h̃ = tanh(Wh·x + Uh·(r⊗h) + bh); h′ = (1−z)⊗h + z⊗h̃.
inline Tensor gru_cell(const Tensor& x, const Tensor& h, const GRUCellParams& p) {
  bool vec_in = x.ndim() == 1;
  Tensor xr = vec_in ? reshape(x, {1, x.shape()[0]}) : x;
  Tensor hr = vec_in ? reshape(h, {1, h.shape()[0]}) : h;
  require(xr.ndim() == 2 && hr.ndim() == 2, "gru_cell: inputs must be vectors or matrices");
  require(xr.shape()[1] == p.Wz.shape()[0], "gru_cell: input dim ", xr.shape()[1],
          " does not match weights (", p.Wz.shape()[0], ")");
  require(hr.shape()[1] == p.Uz.shape()[0], "gru_cell: state dim ", hr.shape()[1],
          " does not match weights (", p.Uz.shape()[0], ")");
  Tensor z = sigmoid(add_rowwise(matmul(xr, p.Wz), p.bz) + matmul(hr, p.Uz));
  Tensor r = sigmoid(add_rowwise(matmul(xr, p.Wr), p.br) + matmul(hr, p.Ur));
  Tensor hh = tanh(add_rowwise(matmul(xr, p.Wh), p.bh) + matmul(r * hr, p.Uh));
  Tensor out = (1.0 - z) * hr + z * hh;
  return vec_in ? reshape(out, {out.shape()[1]}) : out;
}

/// Run the cell along the time axis from a zero state. X: B×m×D (or m×D);
/// output is time-aligned with the input: forward direction row t is the state
/// after consuming rows 0..t, reverse direction row t the state after
/// consuming rows m-1..t.
///
/// The input-side affine map of all three gates is hoisted out of the time
/// loop as one (B·m)×3H product; per-step work is only the recurrent part.
inline Tensor gru_layer(const Tensor& x_in, const GRUCellParams& p,
                        Direction dir) {
  bool unbatched = x_in.ndim() == 2;
  Tensor X = unbatched
                 ? reshape(x_in, {1, x_in.shape()[0], x_in.shape()[1]})
                 : x_in;
  require(X.ndim() == 3, "gru_layer: input must be m×D or B×m×D, got ",
          shape_str(x_in.shape()));
  std::size_t B = X.shape()[0], m = X.shape()[1], D = X.shape()[2];
  std::size_t H = p.Uz.shape()[0];
  require(m >= 1, "gru_layer: empty sequence");
  require(D == p.Wz.shape()[0], "gru_layer: input dim ", D,
          " does not match weights (", p.Wz.shape()[0], ")");

  Tensor w_all = concat({p.Wz, p.Wr, p.Wh}, 1);   // D×3H
  Tensor b_all = concat({p.bz, p.br, p.bh}, 0);   // 3H
  Tensor u_zr = concat({p.Uz, p.Ur}, 1);          // H×2H
  Tensor gates =
      reshape(add_rowwise(matmul(reshape(X, {B * m, D}), w_all), b_all),
              {B, m, 3 * H});

  Tensor h = Tensor::zeros({B, H});
  std::vector<Tensor> outputs(m);
  for (std::size_t step = 0; step < m; ++step) {
    std::size_t t = dir == Direction::forward ? step : m - 1 - step;
    Tensor gt = reshape(slice(gates, {0, t, 0}, {B, 1, 3 * H}), {B, 3 * H});
    Tensor xz = slice(gt, {0, 0}, {B, H});
    Tensor xr = slice(gt, {0, H}, {B, H});
    Tensor xh = slice(gt, {0, 2 * H}, {B, H});
    Tensor rec = matmul(h, u_zr);  // B×2H
    Tensor z = sigmoid(xz + slice(rec, {0, 0}, {B, H}));
    Tensor r = sigmoid(xr + slice(rec, {0, H}, {B, H}));
    Tensor hh = tanh(xh + matmul(r * h, p.Uh));
    h = (1.0 - z) * h + z * hh;
    outputs[t] = reshape(h, {B, 1, H});
  }
  Tensor out = concat(outputs, 1);
  return unbatched ? reshape(out, {m, H}) : out;
}

struct UGRUParams {
  GRUCellParams reverse_layer;  // consumes the raw input, time-reversed
  GRUCellParams forward_layer;  // consumes concat(reverse output, input)
};

inline UGRUParams make_ugru(ParamStore& store, const std::string& prefix,
                            std::size_t in_dim, std::size_t hidden, Rng& rng) {
  UGRUParams p;
  p.reverse_layer = make_gru(store, prefix + ".rev", in_dim, hidden, rng);
  p.forward_layer = make_gru(store, prefix + ".fwd", hidden + in_dim, hidden, rng);
  return p;
}

/// Reverse pass over the input, concatenate that output with the input along
/// the feature axis, then a forward pass over the concatenation.
inline Tensor ugru_block(const Tensor& x, const UGRUParams& p) {
  Tensor r = gru_layer(x, p.reverse_layer, Direction::reverse);
  std::size_t feature_axis = x.ndim() - 1;
  Tensor combined = concat({r, x}, feature_axis);
  return gru_layer(combined, p.forward_layer, Direction::forward);
}

struct BiGRUParams {
  GRUCellParams fwd;
  GRUCellParams bwd;
};

inline BiGRUParams make_bigru(ParamStore& store, const std::string& prefix,
                              std::size_t in_dim, std::size_t hidden, Rng& rng) {
  BiGRUParams p;
  p.fwd = make_gru(store, prefix + ".fwd", in_dim, hidden, rng);
  p.bwd = make_gru(store, prefix + ".bwd", in_dim, hidden, rng);
  return p;
}

/// Bidirectional layer with summed direction outputs, keeping the stream
/// embedding at the shared hidden size.
inline Tensor bigru_block(const Tensor& x, const BiGRUParams& p) {
  return gru_layer(x, p.fwd, Direction::forward) +
         gru_layer(x, p.bwd, Direction::reverse);
}

// ----------------------------------------------------------------------------
// Attention pooling
// ----------------------------------------------------------------------------

struct TemporalAttentionParams {
  Tensor w1;  // F×A, applied to each hidden state
  Tensor w2;  // F×A, applied to the last hidden state
  Tensor b;   // A
  Tensor v;   // A
};

inline TemporalAttentionParams make_temporal_attention(ParamStore& store,
                                                       const std::string& prefix,
                                                       std::size_t feature_dim,
                                                       std::size_t attn_dim,
                                                       Rng& rng) {
  TemporalAttentionParams p;
  p.w1 = store.add(prefix + ".w1", {feature_dim, attn_dim},
                   glorot_uniform(rng, feature_dim, attn_dim,
                                  feature_dim * attn_dim));
  p.w2 = store.add(prefix + ".w2", {feature_dim, attn_dim},
                   glorot_uniform(rng, feature_dim, attn_dim,
                                  feature_dim * attn_dim));
  p.b = store.add(prefix + ".b", {attn_dim}, std::vector<double>(attn_dim, 0.0));
  p.v = store.add(prefix + ".v", {attn_dim},
                  glorot_uniform(rng, attn_dim, 1, attn_dim));
  return p;
}

/// Additive attention over time conditioned on the final state:
/// score_t = vᵀ·tanh(W₁·h_t + W₂·h_m + b); output = Σ softmax(score)_t · h_t.
/// H: B×m×F (or m×F) → B×F (or F).
inline Tensor temporal_attention(const Tensor& h_in,
                                 const TemporalAttentionParams& p) {
  bool unbatched = h_in.ndim() == 2;
  Tensor H = unbatched ? reshape(h_in, {1, h_in.shape()[0], h_in.shape()[1]}) : h_in;
  require(H.ndim() == 3, "temporal_attention: input must be m×F or B×m×F, got ",
          shape_str(h_in.shape()));
  std::size_t B = H.shape()[0], m = H.shape()[1], F = H.shape()[2];
  require(m >= 1, "temporal_attention: empty sequence");
  require(F == p.w1.shape()[0], "temporal_attention: feature dim ", F,
          " does not match weights (", p.w1.shape()[0], ")");
  std::size_t A = p.w1.shape()[1];

  Tensor last = reshape(slice(H, {0, m - 1, 0}, {B, 1, F}), {B, F});
  Tensor keys = reshape(matmul(reshape(H, {B * m, F}), p.w1), {B, m, A});
  Tensor query = matmul(last, p.w2);  // B×A
  Tensor act = tanh(add_rowwise(add_time_broadcast(keys, query), p.b));
  Tensor scores = reshape(
      matmul(reshape(act, {B * m, A}), reshape(p.v, {A, 1})), {B, m});
  Tensor alpha = softmax(scores, 1);
  Tensor out = weighted_sum_rows(H, alpha);
  return unbatched ? reshape(out, {F}) : out;
}

struct ModalityAttentionParams {
  Tensor w;  // F×A, shared across modality vectors
  Tensor b;  // A
  Tensor u;  // A
};

inline ModalityAttentionParams make_modality_attention(ParamStore& store,
                                                       const std::string& prefix,
                                                       std::size_t feature_dim,
                                                       std::size_t attn_dim,
                                                       Rng& rng) {
  ModalityAttentionParams p;
  p.w = store.add(prefix + ".w", {feature_dim, attn_dim},
                  glorot_uniform(rng, feature_dim, attn_dim,
                                 feature_dim * attn_dim));
  p.b = store.add(prefix + ".b", {attn_dim}, std::vector<double>(attn_dim, 0.0));
  p.u = store.add(prefix + ".u", {attn_dim},
                  glorot_uniform(rng, attn_dim, 1, attn_dim));
  return p;
}

/// Additive attention across stream embeddings with one shared score map:
/// s_i = uᵀ·tanh(W·v_i + b); output = Σ softmax(s)_i · v_i.
/// Each v_i: B×F (or F); all must agree in shape.
inline Tensor modality_attention(const std::vector<Tensor>& v,
                                 const ModalityAttentionParams& p) {
  require(!v.empty(), "modality_attention: no modalities");
  bool unbatched = v[0].ndim() == 1;
  std::size_t F = v[0].shape()[unbatched ? 0 : 1];
  require(F == p.w.shape()[0], "modality_attention: feature dim ", F,
          " does not match weights (", p.w.shape()[0], ")");
  std::vector<Tensor> rows;
  for (const auto& m : v) {
    require(m.shape() == v[0].shape(),
            "modality_attention: modality shape mismatch ", shape_str(m.shape()),
            " vs ", shape_str(v[0].shape()));
    rows.push_back(unbatched ? reshape(m, {1, F}) : m);
  }
  std::size_t B = rows[0].shape()[0];
  std::size_t A = p.w.shape()[1];
  std::vector<Tensor> scores;
  for (const auto& r : rows)
    scores.push_back(
        matmul(tanh(add_rowwise(matmul(r, p.w), p.b)), reshape(p.u, {A, 1})));
  Tensor beta = softmax(concat(scores, 1), 1);  // B×k
  Tensor out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Tensor bi = reshape(slice(beta, {0, i}, {B, 1}), {B});
    Tensor term = scale_rows(rows[i], bi);
    out = out.defined() ? out + term : term;
  }
  return unbatched ? reshape(out, {F}) : out;
}

// ----------------------------------------------------------------------------
// Dense head and dropout layer
// ----------------------------------------------------------------------------

struct DenseParams {
  Tensor w;  // in×out
  Tensor b;  // out
};

// init_scale multiplies the Glorot weight draw. Classifier output layers
// pass 0 so the model starts at an unsaturated p = 0.5 for every sample;
// otherwise the random head projects the first-batch embeddings to large
// logits and early training is spent undoing saturation instead of
// learning features.
inline DenseParams make_dense(ParamStore& store, const std::string& prefix,
                              std::size_t in_dim, std::size_t out_dim, Rng& rng,
                              double init_scale = 1.0) {
  DenseParams p;
  auto w = glorot_uniform(rng, in_dim, out_dim, in_dim * out_dim);
  for (double& v : w) v *= init_scale;
  p.w = store.add(prefix + ".w", {in_dim, out_dim}, std::move(w));
  p.b = store.add(prefix + ".b", {out_dim}, std::vector<double>(out_dim, 0.0));
  return p;
}

inline Tensor dense(const Tensor& x, const DenseParams& p, Activation a) {
  bool vec_in = x.ndim() == 1;
  Tensor xr = vec_in ? reshape(x, {1, x.shape()[0]}) : x;
  Tensor y = apply_activation(add_rowwise(matmul(xr, p.w), p.b), a);
  return vec_in ? reshape(y, {y.shape()[1]}) : y;
}

/// Mode-aware dropout: identity in eval mode, inverted dropout in train mode.
inline Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (mode == Mode::eval || rate == 0.0) {
    require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got ", rate);
    return x;
  }
  return dropout(x, rate, rng);
}

}  // namespace trouspi
