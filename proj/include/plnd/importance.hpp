#pragma once

// Neuron importance: the norm of the change in a (sub-)structure's output when
// one neuron is zeroed, with the structure's input held fixed. All matrix norms
// are Frobenius norms over (sequence x hidden) entries.
//
// Two families live here:
//  * oracles, which physically zero one neuron and recompute, and
//  * batched formulas, which produce every neuron's score of one matrix kind
//    from a single forward pass.

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "plnd/model.hpp"

namespace plnd {

// Per-layer, per-kind score vectors.
struct ImportanceMap {
  struct Layer {
    std::array<std::vector<double>, kAllKinds.size()> scores;

    std::vector<double>& operator[](NeuronKind k) { return scores[static_cast<std::size_t>(k)]; }
    const std::vector<double>& operator[](NeuronKind k) const {
      return scores[static_cast<std::size_t>(k)];
    }
  };

  std::vector<Layer> layers;

  double at(const NeuronId& n) const { return layers.at(n.layer)[n.kind].at(n.index); }
};

inline void check_layer(const ModelConfig& c, std::size_t layer) {
  if (layer >= c.n_layers)
    throw InputError("layer " + std::to_string(layer) + " out of range (n_layers " +
                     std::to_string(c.n_layers) + ")");
}

// ---------------------------------------------------------------------------
// Kernels on raw matrices

// Score of neuron k when the intermediate activation `act` (l x n) feeds a
// projection `proj` (n x d): the change from zeroing act[:, k] is the rank-one
// matrix act[:, k] (x) proj[k, :], whose Frobenius norm factors into the
// product of the two vector norms. One pass over both matrices yields every k.
inline std::vector<double> rank_one_scores(const Matrix& act, const Matrix& proj) {
  const std::size_t n = act.cols();
  std::vector<double> col_sq(n, 0.0);
  for (std::size_t p = 0; p < act.rows(); ++p) {
    const auto row = act.row(p);
    for (std::size_t k = 0; k < n; ++k) col_sq[k] += row[k] * row[k];
  }
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    double row_sq = 0.0;
    for (double v : proj.row(k)) row_sq += v * v;
    out[k] = std::sqrt(col_sq[k]) * std::sqrt(row_sq);
  }
  return out;
}

// Reference for rank_one_scores: recompute act * proj with column k of act
// zeroed and take the norm of the difference.
inline double masked_product_delta(const Matrix& act, const Matrix& proj, std::size_t k) {
  Matrix masked = act;
  masked.zero_column(k);
  return frobenius_norm(matmul(act, proj) - matmul(masked, proj));
}

// Batched query/key scores for all d_mid columns. For column k of head h the
// logit perturbation is Delta_k[p][r] = q[p,k] * k[r,k]; the score is
//   || softmax((S - Delta_k) / sqrt(d_head)) - softmax(S / sqrt(d_head)) ||_F
// with causal masking inside both softmaxes. Zeroing key column k removes the
// same term, so the key vector equals the query vector.
inline std::vector<double> qk_scores(const Matrix& q, const Matrix& k, std::size_t n_heads,
                                     std::size_t d_head) {
  const std::size_t l = q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  std::vector<double> sq(n_heads * d_head, 0.0);
  Matrix perturbed(d_head, l);  // row j: logits of the current query row with column j removed
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * d_head;
    Matrix base = head_logits(q, k, h, d_head);
    Matrix base_probs = base;
    causal_softmax_rows(base_probs);
    for (std::size_t p = 0; p < l; ++p) {
      // Delta tensor slice for this query row, over all columns of the head.
      for (std::size_t j = 0; j < d_head; ++j)
        for (std::size_t r = 0; r <= p; ++r)
          perturbed(j, r) = base(p, r) - q(p, off + j) * k(r, off + j) * scale;
      for (std::size_t j = 0; j < d_head; ++j) {
        double mx = perturbed(j, 0);
        for (std::size_t r = 1; r <= p; ++r) mx = std::max(mx, perturbed(j, r));
        double sum = 0.0;
        for (std::size_t r = 0; r <= p; ++r) {
          const double e = std::exp(perturbed(j, r) - mx);
          perturbed(j, r) = e;
          sum += e;
        }
        double acc = 0.0;
        for (std::size_t r = 0; r <= p; ++r) {
          const double d = perturbed(j, r) / sum - base_probs(p, r);
          acc += d * d;
        }
        sq[off + j] += acc;
      }
    }
  }
  for (double& v : sq) v = std::sqrt(v);
  return sq;
}

// ---------------------------------------------------------------------------
// Batched importance from a captured trace

inline std::vector<double> imp_ffn_parallel(const TransformerWeights& w, const ForwardTrace& tr,
                                            std::size_t layer) {
  check_layer(w.config, layer);
  return rank_one_scores(tr.layers[layer].h_ffn, w.layers[layer].w_down);
}

inline std::vector<double> imp_v_parallel(const TransformerWeights& w, const ForwardTrace& tr,
                                          std::size_t layer) {
  check_layer(w.config, layer);
  // ctx[:, k] = A_h V[:, k]; zeroing V column k (or W_O row k) removes
  // ctx[:, k] (x) W_O[k, :] from the attention output.
  return rank_one_scores(tr.layers[layer].ctx, w.layers[layer].wo);
}

struct QkScores {
  std::vector<double> q;
  std::vector<double> k;
};

inline QkScores imp_qk_parallel(const TransformerWeights& w, const ForwardTrace& tr,
                                std::size_t layer) {
  check_layer(w.config, layer);
  const auto& t = tr.layers[layer];
  QkScores out;
  out.q = qk_scores(t.q, t.k, w.config.n_heads, w.config.d_head);
  out.k = out.q;
  return out;
}

inline ImportanceMap imp_all(const TransformerWeights& w, const ForwardTrace& tr) {
  ImportanceMap m;
  m.layers.resize(w.config.n_layers);
  for (std::size_t i = 0; i < w.config.n_layers; ++i) {
    auto& L = m.layers[i];
    auto qk = imp_qk_parallel(w, tr, i);
    L[NeuronKind::Q] = std::move(qk.q);
    L[NeuronKind::K] = std::move(qk.k);
    L[NeuronKind::V] = imp_v_parallel(w, tr, i);
    L[NeuronKind::O] = L[NeuronKind::V];
    L[NeuronKind::Up] = imp_ffn_parallel(w, tr, i);
    L[NeuronKind::Gate] = L[NeuronKind::Up];
    L[NeuronKind::Down] = L[NeuronKind::Up];
  }
  return m;
}

// Convenience overloads that run the forward pass themselves.

inline std::vector<double> imp_ffn_parallel(const TransformerWeights& w,
                                            std::span<const TokenId> doc, std::size_t layer) {
  check_layer(w.config, layer);
  return imp_ffn_parallel(w, forward(w, doc), layer);
}

inline std::vector<double> imp_v_parallel(const TransformerWeights& w,
                                          std::span<const TokenId> doc, std::size_t layer) {
  check_layer(w.config, layer);
  return imp_v_parallel(w, forward(w, doc), layer);
}

inline QkScores imp_qk_parallel(const TransformerWeights& w, std::span<const TokenId> doc,
                                std::size_t layer) {
  check_layer(w.config, layer);
  return imp_qk_parallel(w, forward(w, doc), layer);
}

inline ImportanceMap imp_all(const TransformerWeights& w, std::span<const TokenId> doc) {
  return imp_all(w, forward(w, doc));
}

// ---------------------------------------------------------------------------
// Sequential oracles

// Output change of the owning sub-structure (attention for Q/K/V/O, FFN for
// GATE/UP/DOWN) when `n` is zeroed, with the sub-structure's input fixed.
inline double imp_oracle_sub(const TransformerWeights& w, const ForwardTrace& tr,
                             const NeuronId& n) {
  check_neuron(w.config, n);
  const LayerTrace& t = tr.layers[n.layer];
  LayerWeights masked = w.layers[n.layer];
  zero_neuron(masked, n.kind, n.index);
  LayerTrace scratch;
  if (is_attention_kind(n.kind))
    return frobenius_norm(attention_sublayer(masked, w.config, t.attn_in, scratch) - t.attn_out);
  return frobenius_norm(ffn_sublayer(masked, t.ffn_in, scratch) - t.ffn_out);
}

// Change in h_{i+1} when `n` is zeroed, with h_i fixed.
inline double imp_oracle_layer(const TransformerWeights& w, const ForwardTrace& tr,
                               const NeuronId& n) {
  check_neuron(w.config, n);
  LayerWeights masked = w.layers[n.layer];
  zero_neuron(masked, n.kind, n.index);
  LayerTrace scratch;
  const Matrix out = layer_forward(masked, w.config, tr.hidden[n.layer], scratch);
  return frobenius_norm(out - tr.hidden[n.layer + 1]);
}

inline double imp_oracle_sub(const TransformerWeights& w, std::span<const TokenId> doc,
                             const NeuronId& n) {
  check_neuron(w.config, n);
  return imp_oracle_sub(w, forward(w, doc), n);
}

inline double imp_oracle_layer(const TransformerWeights& w, std::span<const TokenId> doc,
                               const NeuronId& n) {
  check_neuron(w.config, n);
  return imp_oracle_layer(w, forward(w, doc), n);
}

// Elementwise mean of importance maps with identical shapes.
inline ImportanceMap mean_importance(std::span<const ImportanceMap> maps) {
  if (maps.empty()) throw InputError("cannot average zero importance maps");
  ImportanceMap out = maps.front();
  for (std::size_t m = 1; m < maps.size(); ++m)
    for (std::size_t i = 0; i < out.layers.size(); ++i)
      for (std::size_t k = 0; k < kAllKinds.size(); ++k)
        for (std::size_t j = 0; j < out.layers[i].scores[k].size(); ++j)
          out.layers[i].scores[k][j] += maps[m].layers[i].scores[k][j];
  const double inv = 1.0 / static_cast<double>(maps.size());
  for (auto& L : out.layers)
    for (auto& v : L.scores)
      for (double& x : v) x *= inv;
  return out;
}

}  // namespace plnd
