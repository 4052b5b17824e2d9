#pragma once

// Minimal decoder-only transformer in double precision.
//
// Block structure (pre-norm, RMS normalization):
//   a      = rmsnorm(h_i) * attn_norm
//   attn   = causal multi-head attention over a, projected by W_O
//   mid    = h_i + attn
//   b      = rmsnorm(mid) * ffn_norm
//   h_ffn  = silu(b W_gate) * (b W_up)
//   h_i+1  = mid + h_ffn W_down
// Logits are rmsnorm(h_L) * final_norm times the (untied) unembedding.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "plnd/errors.hpp"
#include "plnd/hash.hpp"
#include "plnd/matrix.hpp"
#include "plnd/rng.hpp"

namespace plnd {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

inline constexpr double kRmsEps = 1e-5;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t d_head = 8;
  std::size_t d_inter = 64;
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 16;

  std::size_t d_mid() const noexcept { return n_heads * d_head; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_head, "d_head");
    positive(d_inter, "d_inter");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (d_inter < d_model) throw ConfigError("d_inter must be >= d_model");
    if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Matrix kinds that carry neurons. Q/K/V/GATE/UP neurons are columns,
// O/DOWN neurons are rows.
enum class NeuronKind : std::uint8_t { Q, K, V, O, Gate, Up, Down };

inline constexpr std::array<NeuronKind, 7> kAllKinds = {
    NeuronKind::Q,    NeuronKind::K,  NeuronKind::V,   NeuronKind::O,
    NeuronKind::Gate, NeuronKind::Up, NeuronKind::Down};

inline constexpr std::string_view kind_name(NeuronKind k) noexcept {
  switch (k) {
    case NeuronKind::Q: return "Q";
    case NeuronKind::K: return "K";
    case NeuronKind::V: return "V";
    case NeuronKind::O: return "O";
    case NeuronKind::Gate: return "GATE";
    case NeuronKind::Up: return "UP";
    case NeuronKind::Down: return "DOWN";
  }
  return "?";
}

inline NeuronKind parse_kind(std::string_view s) {
  for (NeuronKind k : kAllKinds)
    if (kind_name(k) == s) return k;
  throw InputError("unknown neuron kind '" + std::string(s) + "'");
}

inline constexpr bool is_attention_kind(NeuronKind k) noexcept {
  return k == NeuronKind::Q || k == NeuronKind::K || k == NeuronKind::V || k == NeuronKind::O;
}

inline std::size_t kind_dim(const ModelConfig& c, NeuronKind k) noexcept {
  return is_attention_kind(k) ? c.d_mid() : c.d_inter;
}

struct NeuronId {
  std::uint32_t layer = 0;
  NeuronKind kind = NeuronKind::Q;
  std::uint32_t index = 0;

  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

inline void check_neuron(const ModelConfig& c, const NeuronId& n) {
  if (n.layer >= c.n_layers)
    throw InputError("neuron layer " + std::to_string(n.layer) + " out of range");
  if (n.index >= kind_dim(c, n.kind))
    throw InputError("neuron index " + std::to_string(n.index) + " out of range for kind " +
                     std::string(kind_name(n.kind)));
}

struct LayerWeights {
  Matrix wq, wk, wv;  // d_model x d_mid
  Matrix wo;          // d_mid x d_model
  Matrix w_gate, w_up;  // d_model x d_inter
  Matrix w_down;      // d_inter x d_model
  Matrix attn_norm, ffn_norm;  // 1 x d_model
};

struct TransformerWeights {
  ModelConfig config;
  Matrix tok_emb;  // vocab x d_model
  Matrix pos_emb;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  Matrix final_norm;  // 1 x d_model
  Matrix unembed;     // d_model x vocab
};

// Gradients mirror the parameter layout exactly.
using GradientBundle = TransformerWeights;

// Visits every tensor in a fixed order with its canonical name. The order is
// the serialization order of the weight file.
template <class W, class F>
  requires std::is_same_v<std::remove_const_t<W>, TransformerWeights>
void for_each_tensor(W& w, F&& f) {
  f(std::string("tok_emb"), w.tok_emb);
  f(std::string("pos_emb"), w.pos_emb);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& L = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "attn_norm", L.attn_norm);
    f(p + "wq", L.wq);
    f(p + "wk", L.wk);
    f(p + "wv", L.wv);
    f(p + "wo", L.wo);
    f(p + "ffn_norm", L.ffn_norm);
    f(p + "w_gate", L.w_gate);
    f(p + "w_up", L.w_up);
    f(p + "w_down", L.w_down);
  }
  f(std::string("final_norm"), w.final_norm);
  f(std::string("unembed"), w.unembed);
}

// All-zero parameters with the shapes declared by `config`.
inline TransformerWeights zero_weights(const ModelConfig& c) {
  c.validate();
  TransformerWeights w;
  w.config = c;
  w.tok_emb = Matrix(c.vocab_size, c.d_model);
  w.pos_emb = Matrix(c.max_seq_len, c.d_model);
  w.layers.resize(c.n_layers);
  for (auto& L : w.layers) {
    L.wq = Matrix(c.d_model, c.d_mid());
    L.wk = Matrix(c.d_model, c.d_mid());
    L.wv = Matrix(c.d_model, c.d_mid());
    L.wo = Matrix(c.d_mid(), c.d_model);
    L.w_gate = Matrix(c.d_model, c.d_inter);
    L.w_up = Matrix(c.d_model, c.d_inter);
    L.w_down = Matrix(c.d_inter, c.d_model);
    L.attn_norm = Matrix(1, c.d_model);
    L.ffn_norm = Matrix(1, c.d_model);
  }
  w.final_norm = Matrix(1, c.d_model);
  w.unembed = Matrix(c.d_model, c.vocab_size);
  return w;
}

// Initialization scheme. Projections (W_Q, W_K, W_V, W_O, W_gate, W_up,
// W_down, unembedding) are N(0, proj_std_scale / sqrt(d_model)); token and
// positional embeddings are N(0, embed_std); norm gains are 1.
struct InitScheme {
  double proj_std_scale = 0.02;
  double embed_std = 1.0;
};

inline TransformerWeights init_random(const ModelConfig& config, std::uint64_t seed,
                                      const InitScheme& scheme = {}) {
  TransformerWeights w = zero_weights(config);
  Rng rng(derive_seed(seed, "init"));
  const double proj_std = scheme.proj_std_scale / std::sqrt(static_cast<double>(config.d_model));
  auto gaussian = [&](Matrix& m, double std) {
    for (double& x : m.flat()) x = rng.normal(0.0, std);
  };
  gaussian(w.tok_emb, scheme.embed_std);
  gaussian(w.pos_emb, scheme.embed_std);
  for (auto& L : w.layers) {
    L.attn_norm.fill(1.0);
    gaussian(L.wq, proj_std);
    gaussian(L.wk, proj_std);
    gaussian(L.wv, proj_std);
    gaussian(L.wo, proj_std);
    L.ffn_norm.fill(1.0);
    gaussian(L.w_gate, proj_std);
    gaussian(L.w_up, proj_std);
    gaussian(L.w_down, proj_std);
  }
  w.final_norm.fill(1.0);
  gaussian(w.unembed, proj_std);
  return w;
}

inline bool bit_identical(const TransformerWeights& a, const TransformerWeights& b) {
  if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
  std::vector<const Matrix*> ta, tb;
  for_each_tensor(a, [&](const std::string&, const Matrix& m) { ta.push_back(&m); });
  for_each_tensor(b, [&](const std::string&, const Matrix& m) { tb.push_back(&m); });
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!ta[i]->bit_equal(*tb[i])) return false;
  return true;
}

inline bool all_finite(const TransformerWeights& w) {
  bool ok = true;
  for_each_tensor(w, [&](const std::string&, const Matrix& m) { ok = ok && all_finite(m); });
  return ok;
}

inline std::string model_hash(const TransformerWeights& w) {
  Fnv1a h;
  const auto& c = w.config;
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.d_head, c.d_inter, c.vocab_size,
                        c.max_seq_len})
    h.u64(v);
  for_each_tensor(w, [&](const std::string& name, const Matrix& m) {
    h.str(name);
    h.f64s(m.flat());
  });
  return h.hex();
}

inline std::string tokens_hash(std::span<const TokenId> tokens) {
  Fnv1a h;
  h.u64(tokens.size());
  for (TokenId t : tokens) h.u64(t);
  return h.hex();
}

// ---------------------------------------------------------------------------
// Neuron deactivation

// Zeroes the row or column that constitutes `n`.
inline void zero_neuron(LayerWeights& L, NeuronKind kind, std::size_t index) {
  switch (kind) {
    case NeuronKind::Q: L.wq.zero_column(index); break;
    case NeuronKind::K: L.wk.zero_column(index); break;
    case NeuronKind::V: L.wv.zero_column(index); break;
    case NeuronKind::O: L.wo.zero_row(index); break;
    case NeuronKind::Gate: L.w_gate.zero_column(index); break;
    case NeuronKind::Up: L.w_up.zero_column(index); break;
    case NeuronKind::Down: L.w_down.zero_row(index); break;
  }
}

inline void zero_neuron(TransformerWeights& w, const NeuronId& n) {
  check_neuron(w.config, n);
  zero_neuron(w.layers[n.layer], n.kind, n.index);
}

// Set of neurons to deactivate. Members are kept sorted and unique.
class DeactivationMask {
 public:
  DeactivationMask() = default;
  explicit DeactivationMask(std::vector<NeuronId> ids) : ids_(std::move(ids)) {
    std::sort(ids_.begin(), ids_.end());
    ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  }

  const std::vector<NeuronId>& ids() const noexcept { return ids_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  bool contains(const NeuronId& n) const {
    return std::binary_search(ids_.begin(), ids_.end(), n);
  }

  void validate(const ModelConfig& c) const {
    for (const auto& n : ids_) check_neuron(c, n);
  }

 private:
  std::vector<NeuronId> ids_;
};

// Copy of `w` with every masked neuron physically zeroed.
inline TransformerWeights apply_mask(const TransformerWeights& w, const DeactivationMask& mask) {
  mask.validate(w.config);
  TransformerWeights out = w;
  for (const auto& n : mask.ids()) zero_neuron(out.layers[n.layer], n.kind, n.index);
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

struct LayerTrace {
  Matrix attn_in;                  // normalized input to attention, l x d_model
  std::vector<double> attn_rstd;   // 1 / rms per position
  Matrix q, k, v;                  // l x d_mid
  std::vector<Matrix> probs;       // per head, l x l, zero above the diagonal
  Matrix ctx;                      // l x d_mid
  Matrix attn_out;                 // l x d_model
  Matrix mid;                      // h_i + attn_out
  Matrix ffn_in;                   // normalized input to the FFN
  std::vector<double> ffn_rstd;
  Matrix gate, up;                 // l x d_inter, pre-activation
  Matrix h_ffn;                    // silu(gate) * up
  Matrix ffn_out;                  // l x d_model
};

struct ForwardTrace {
  Tokens tokens;
  std::vector<Matrix> hidden;  // h_0 .. h_{n_layers}
  std::vector<LayerTrace> layers;
  Matrix final_in;             // normalized h_L
  std::vector<double> final_rstd;
  Matrix logits;               // l x vocab
};

inline double sigmoid(double z) noexcept { return 1.0 / (1.0 + std::exp(-z)); }
inline double silu(double z) noexcept { return z * sigmoid(z); }

// y = x * gain / rms(x), row-wise. Returns per-row 1/rms.
inline std::vector<double> rmsnorm(const Matrix& x, const Matrix& gain, Matrix& y) {
  const std::size_t d = x.cols();
  y = Matrix(x.rows(), d);
  std::vector<double> rstd(x.rows());
  for (std::size_t p = 0; p < x.rows(); ++p) {
    double ss = 0.0;
    for (double v : x.row(p)) ss += v * v;
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    rstd[p] = r;
    for (std::size_t j = 0; j < d; ++j) y(p, j) = x(p, j) * r * gain(0, j);
  }
  return rstd;
}

// Causal softmax of one head's scaled logits. `logits` is l x l; entries
// above the diagonal are ignored and set to zero in the result.
inline void causal_softmax_rows(Matrix& logits) {
  const std::size_t l = logits.rows();
  for (std::size_t p = 0; p < l; ++p) {
    double mx = logits(p, 0);
    for (std::size_t r = 1; r <= p; ++r) mx = std::max(mx, logits(p, r));
    double sum = 0.0;
    for (std::size_t r = 0; r <= p; ++r) {
      const double e = std::exp(logits(p, r) - mx);
      logits(p, r) = e;
      sum += e;
    }
    for (std::size_t r = 0; r <= p; ++r) logits(p, r) /= sum;
    for (std::size_t r = p + 1; r < l; ++r) logits(p, r) = 0.0;
  }
}

// Scaled causal logits q_h k_h^T / sqrt(d_head) for head h.
inline Matrix head_logits(const Matrix& q, const Matrix& k, std::size_t head, std::size_t d_head) {
  const std::size_t l = q.rows();
  const std::size_t off = head * d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  Matrix s(l, l);
  for (std::size_t p = 0; p < l; ++p)
    for (std::size_t r = 0; r <= p; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d_head; ++j) acc += q(p, off + j) * k(r, off + j);
      s(p, r) = acc * scale;
    }
  return s;
}

// Attention sub-structure on an already-normalized input. Fills q/k/v/probs/ctx
// and returns the projected output.
inline Matrix attention_sublayer(const LayerWeights& L, const ModelConfig& c, const Matrix& a,
                                 LayerTrace& t) {
  t.q = matmul(a, L.wq);
  t.k = matmul(a, L.wk);
  t.v = matmul(a, L.wv);
  const std::size_t l = a.rows();
  t.probs.assign(c.n_heads, Matrix());
  t.ctx = Matrix(l, c.d_mid());
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    Matrix p = head_logits(t.q, t.k, h, c.d_head);
    causal_softmax_rows(p);
    const std::size_t off = h * c.d_head;
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t r = 0; r <= i; ++r) {
        const double pr = p(i, r);
        for (std::size_t j = 0; j < c.d_head; ++j) t.ctx(i, off + j) += pr * t.v(r, off + j);
      }
    t.probs[h] = std::move(p);
  }
  return matmul(t.ctx, L.wo);
}

// SiLU-gated FFN sub-structure on an already-normalized input.
inline Matrix ffn_sublayer(const LayerWeights& L, const Matrix& b, LayerTrace& t) {
  t.gate = matmul(b, L.w_gate);
  t.up = matmul(b, L.w_up);
  t.h_ffn = Matrix(b.rows(), L.w_up.cols());
  for (std::size_t i = 0; i < t.h_ffn.size(); ++i)
    t.h_ffn.data()[i] = silu(t.gate.data()[i]) * t.up.data()[i];
  return matmul(t.h_ffn, L.w_down);
}

// One full transformer block applied to h.
inline Matrix layer_forward(const LayerWeights& L, const ModelConfig& c, const Matrix& h,
                            LayerTrace& t) {
  t.attn_rstd = rmsnorm(h, L.attn_norm, t.attn_in);
  t.attn_out = attention_sublayer(L, c, t.attn_in, t);
  t.mid = h + t.attn_out;
  t.ffn_rstd = rmsnorm(t.mid, L.ffn_norm, t.ffn_in);
  t.ffn_out = ffn_sublayer(L, t.ffn_in, t);
  return t.mid + t.ffn_out;
}

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (tokens.size() > c.max_seq_len)
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  for (TokenId t : tokens)
    if (t >= c.vocab_size)
      throw InputError("token id " + std::to_string(t) + " out of range (vocab " +
                       std::to_string(c.vocab_size) + ")");
}

inline Matrix embed(const TransformerWeights& w, std::span<const TokenId> tokens) {
  const std::size_t d = w.config.d_model;
  Matrix h(tokens.size(), d);
  for (std::size_t p = 0; p < tokens.size(); ++p)
    for (std::size_t j = 0; j < d; ++j) h(p, j) = w.tok_emb(tokens[p], j) + w.pos_emb(p, j);
  return h;
}

inline ForwardTrace forward_unmasked(const TransformerWeights& w, std::span<const TokenId> tokens) {
  check_tokens(w.config, tokens);
  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.hidden.reserve(w.config.n_layers + 1);
  tr.hidden.push_back(embed(w, tokens));
  tr.layers.resize(w.config.n_layers);
  for (std::size_t i = 0; i < w.config.n_layers; ++i)
    tr.hidden.push_back(layer_forward(w.layers[i], w.config, tr.hidden.back(), tr.layers[i]));
  tr.final_rstd = rmsnorm(tr.hidden.back(), w.final_norm, tr.final_in);
  tr.logits = matmul(tr.final_in, w.unembed);
  return tr;
}

// Full traced forward pass. A masked neuron behaves exactly as if its
// row/column were zero in the weights.
inline ForwardTrace forward(const TransformerWeights& w, std::span<const TokenId> tokens,
                            const DeactivationMask* mask = nullptr) {
  if (mask == nullptr || mask->empty()) return forward_unmasked(w, tokens);
  return forward_unmasked(apply_mask(w, *mask), tokens);
}

// log-softmax value of `target` in a logit row.
inline double log_prob(std::span<const double> logits, std::size_t target) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return logits[target] - mx - std::log(sum);
}

inline double loss_from_trace(const ForwardTrace& tr) {
  const std::size_t l = tr.tokens.size();
  double total = 0.0;
  for (std::size_t p = 0; p + 1 < l; ++p) total -= log_prob(tr.logits.row(p), tr.tokens[p + 1]);
  return total / static_cast<double>(l - 1);
}

// Mean next-token cross-entropy over positions 0..l-2.
inline double loss_ce(const TransformerWeights& w, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw InputError("loss needs at least 2 tokens");
  return loss_from_trace(forward_unmasked(w, tokens));
}

}  // namespace plnd
