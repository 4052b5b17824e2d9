#pragma once

// Exact reverse-mode gradients of the mean next-token cross-entropy, a plain
// gradient-descent trainer, and gradient-masked selective fine-tuning.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plnd/model.hpp"
#include "plnd/parallel.hpp"
#include "plnd/rng.hpp"

namespace plnd {

namespace detail {

inline std::vector<Matrix*> tensors_of(TransformerWeights& w) {
  std::vector<Matrix*> out;
  for_each_tensor(w, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

inline std::vector<const Matrix*> tensors_of(const TransformerWeights& w) {
  std::vector<const Matrix*> out;
  for_each_tensor(w, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

// Accumulates into dx and dgain the gradient of y = x * gain * rstd.
inline void rmsnorm_backward(const Matrix& x, const std::vector<double>& rstd, const Matrix& gain,
                             const Matrix& dy, Matrix& dx, Matrix& dgain) {
  const std::size_t d = x.cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t p = 0; p < x.rows(); ++p) {
    const double r = rstd[p];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += dy(p, j) * gain(0, j) * x(p, j);
    const double c = r * r * r * dot * inv_d;
    for (std::size_t j = 0; j < d; ++j) {
      dgain(0, j) += dy(p, j) * x(p, j) * r;
      dx(p, j) += r * gain(0, j) * dy(p, j) - c * x(p, j);
    }
  }
}

// Backpropagates through one block. `dh` holds dLoss/dh_{i+1} on entry and
// dLoss/dh_i on exit.
inline void layer_backward(const LayerWeights& L, const ModelConfig& c, const Matrix& h_in,
                           const LayerTrace& t, Matrix& dh, LayerWeights& g) {
  const std::size_t l = h_in.rows();

  // FFN branch
  matmul_tn_acc(t.h_ffn, dh, g.w_down);
  const Matrix dh_ffn = matmul_nt(dh, L.w_down);
  Matrix dgate(l, c.d_inter), dup(l, c.d_inter);
  for (std::size_t i = 0; i < dh_ffn.size(); ++i) {
    const double z = t.gate.data()[i];
    const double s = sigmoid(z);
    dup.data()[i] = dh_ffn.data()[i] * z * s;
    dgate.data()[i] = dh_ffn.data()[i] * t.up.data()[i] * (s + z * s * (1.0 - s));
  }
  matmul_tn_acc(t.ffn_in, dgate, g.w_gate);
  matmul_tn_acc(t.ffn_in, dup, g.w_up);
  Matrix db = matmul_nt(dgate, L.w_gate);
  add_inplace(db, matmul_nt(dup, L.w_up));
  Matrix dmid = dh;
  rmsnorm_backward(t.mid, t.ffn_rstd, L.ffn_norm, db, dmid, g.ffn_norm);

  // Attention branch
  matmul_tn_acc(t.ctx, dmid, g.wo);
  const Matrix dctx = matmul_nt(dmid, L.wo);
  Matrix dq(l, c.d_mid()), dk(l, c.d_mid()), dv(l, c.d_mid());
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));
  std::vector<double> da_row(l), ds_row(l);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const std::size_t off = h * c.d_head;
    const Matrix& A = t.probs[h];
    for (std::size_t p = 0; p < l; ++p) {
      double weighted = 0.0;
      for (std::size_t r = 0; r <= p; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c.d_head; ++j) {
          s += dctx(p, off + j) * t.v(r, off + j);
          dv(r, off + j) += A(p, r) * dctx(p, off + j);
        }
        da_row[r] = s;
        weighted += A(p, r) * s;
      }
      for (std::size_t r = 0; r <= p; ++r) ds_row[r] = A(p, r) * (da_row[r] - weighted) * scale;
      for (std::size_t r = 0; r <= p; ++r)
        for (std::size_t j = 0; j < c.d_head; ++j) {
          dq(p, off + j) += ds_row[r] * t.k(r, off + j);
          dk(r, off + j) += ds_row[r] * t.q(p, off + j);
        }
    }
  }
  matmul_tn_acc(t.attn_in, dq, g.wq);
  matmul_tn_acc(t.attn_in, dk, g.wk);
  matmul_tn_acc(t.attn_in, dv, g.wv);
  Matrix da = matmul_nt(dq, L.wq);
  add_inplace(da, matmul_nt(dk, L.wk));
  add_inplace(da, matmul_nt(dv, L.wv));
  dh = std::move(dmid);
  rmsnorm_backward(h_in, t.attn_rstd, L.attn_norm, da, dh, g.attn_norm);
}

}  // namespace detail

struct SequenceGradient {
  double loss = 0.0;
  GradientBundle grad;
};

inline SequenceGradient sequence_grads(const TransformerWeights& w, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw InputError("gradient needs sequences of at least 2 tokens");
  const ModelConfig& c = w.config;
  const ForwardTrace tr = forward_unmasked(w, tokens);
  SequenceGradient out{loss_from_trace(tr), zero_weights(c)};
  GradientBundle& g = out.grad;
  const std::size_t l = tokens.size();

  Matrix dlogits(l, c.vocab_size);
  const double inv = 1.0 / static_cast<double>(l - 1);
  for (std::size_t p = 0; p + 1 < l; ++p) {
    const auto row = tr.logits.row(p);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    for (std::size_t j = 0; j < c.vocab_size; ++j) dlogits(p, j) = std::exp(row[j] - mx) / sum * inv;
    dlogits(p, tokens[p + 1]) -= inv;
  }
  matmul_tn_acc(tr.final_in, dlogits, g.unembed);
  const Matrix dfinal = matmul_nt(dlogits, w.unembed);
  Matrix dh(l, c.d_model);
  detail::rmsnorm_backward(tr.hidden.back(), tr.final_rstd, w.final_norm, dfinal, dh, g.final_norm);
  for (std::size_t i = c.n_layers; i-- > 0;)
    detail::layer_backward(w.layers[i], c, tr.hidden[i], tr.layers[i], dh, g.layers[i]);
  for (std::size_t p = 0; p < l; ++p)
    for (std::size_t j = 0; j < c.d_model; ++j) {
      g.tok_emb(tokens[p], j) += dh(p, j);
      g.pos_emb(p, j) += dh(p, j);
    }
  return out;
}

struct BatchGradient {
  double loss = 0.0;  // mean of per-sequence losses
  GradientBundle grad;
};

// Gradient of the mean per-sequence loss. Sequences may be processed on
// several threads; the reduction always runs in sequence-index order.
inline BatchGradient batch_grads(const TransformerWeights& w, std::span<const Tokens> batch,
                                 std::size_t threads = 1) {
  if (batch.empty()) throw InputError("empty batch");
  for (const auto& s : batch) {
    if (s.size() < 2) throw InputError("gradient needs sequences of at least 2 tokens");
    check_tokens(w.config, s);
  }
  std::vector<SequenceGradient> parts(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) { parts[i] = sequence_grads(w, batch[i]); });
  BatchGradient out{0.0, std::move(parts[0].grad)};
  out.loss = parts[0].loss;
  auto acc = detail::tensors_of(out.grad);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    out.loss += parts[i].loss;
    auto src = detail::tensors_of(std::as_const(parts[i].grad));
    for (std::size_t t = 0; t < acc.size(); ++t) add_inplace(*acc[t], *src[t]);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (Matrix* m : acc)
    for (double& x : m->flat()) x *= inv;
  return out;
}

inline GradientBundle grads(const TransformerWeights& w, std::span<const Tokens> batch,
                            std::size_t threads = 1) {
  return batch_grads(w, batch, threads).grad;
}

inline double batch_loss(const TransformerWeights& w, std::span<const Tokens> batch) {
  double total = 0.0;
  for (const auto& s : batch) total += loss_ce(w, s);
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  // When set, only the rows/columns of these neurons are updated.
  std::optional<DeactivationMask> gradient_mask;
  std::size_t threads = 1;

  void validate() const {
    if (!std::isfinite(learning_rate) || learning_rate < 0.0)
      throw ConfigError("learning rate must be finite and non-negative");
    if (steps == 0) throw ConfigError("steps must be >= 1");
    if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  }
};

struct TrainResult {
  TransformerWeights weights;
  std::vector<double> losses;  // batch loss before each step's update
};

namespace detail {

// Applies w -= lr * g to the row/column of one neuron only.
inline void update_neuron(LayerWeights& w, const LayerWeights& g, NeuronKind kind, std::size_t idx,
                          double lr) {
  auto column = [&](Matrix& m, const Matrix& gm) {
    for (std::size_t r = 0; r < m.rows(); ++r) m(r, idx) -= lr * gm(r, idx);
  };
  auto row = [&](Matrix& m, const Matrix& gm) {
    for (std::size_t c = 0; c < m.cols(); ++c) m(idx, c) -= lr * gm(idx, c);
  };
  switch (kind) {
    case NeuronKind::Q: column(w.wq, g.wq); break;
    case NeuronKind::K: column(w.wk, g.wk); break;
    case NeuronKind::V: column(w.wv, g.wv); break;
    case NeuronKind::O: row(w.wo, g.wo); break;
    case NeuronKind::Gate: column(w.w_gate, g.w_gate); break;
    case NeuronKind::Up: column(w.w_up, g.w_up); break;
    case NeuronKind::Down: row(w.w_down, g.w_down); break;
  }
}

}  // namespace detail

// Batch order: the corpus is reshuffled at the start of every pass with a
// stream derived from cfg.seed, and batches are consecutive slices of that
// order (wrapping into the next pass).
inline TrainResult train(const TransformerWeights& initial, std::span<const Tokens> corpus,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw InputError("training corpus is empty");
  for (const auto& d : corpus) {
    if (d.size() < 2) throw InputError("training documents need at least 2 tokens");
    check_tokens(initial.config, d);
  }
  if (cfg.gradient_mask) cfg.gradient_mask->validate(initial.config);

  TrainResult out{initial, {}};
  out.losses.reserve(cfg.steps);
  Rng order_rng(derive_seed(cfg.seed, "batches"));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  std::vector<Tokens> batch;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    BatchGradient bg = batch_grads(out.weights, batch, cfg.threads);
    if (!std::isfinite(bg.loss))
      throw TrainingError(step, "loss became non-finite at step " + std::to_string(step));
    if (!all_finite(bg.grad))
      throw TrainingError(step, "gradient became non-finite at step " + std::to_string(step));
    out.losses.push_back(bg.loss);

    if (cfg.gradient_mask) {
      for (const auto& n : cfg.gradient_mask->ids())
        detail::update_neuron(out.weights.layers[n.layer], bg.grad.layers[n.layer], n.kind, n.index,
                              cfg.learning_rate);
    } else {
      auto dst = detail::tensors_of(out.weights);
      auto src = detail::tensors_of(std::as_const(bg.grad));
      for (std::size_t t = 0; t < dst.size(); ++t) {
        double* pw = dst[t]->data();
        const double* pg = src[t]->data();
        for (std::size_t i = 0; i < dst[t]->size(); ++i) pw[i] -= cfg.learning_rate * pg[i];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

// Denominator floor of the relative error. Central differences at step 1e-6
// carry absolute noise of roughly eps_machine * loss / h (about 5e-10 on toy
// models), so gradients below the floor are compared on an absolute scale.
inline constexpr double kGradCheckFloor = 1e-3;

struct GradCheckEntry {
  std::string tensor;
  std::size_t offset = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

inline double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

// Compares analytic gradients against central differences on `samples`
// coordinates drawn uniformly over all parameters.
inline GradCheckReport grad_check(const TransformerWeights& w, std::span<const Tokens> batch,
                                  std::size_t samples, double tolerance, std::uint64_t seed = 0,
                                  double step = 1e-6) {
  if (samples == 0) throw InputError("grad_check needs at least one sample");
  const GradientBundle g = grads(w, batch);
  std::vector<std::string> names;
  std::vector<const Matrix*> gt;
  for_each_tensor(g, [&](const std::string& n, const Matrix& m) {
    names.push_back(n);
    gt.push_back(&m);
  });
  std::size_t total = 0;
  for (const Matrix* m : gt) total += m->size();

  Rng rng(derive_seed(seed, "grad-check"));
  TransformerWeights probe = w;
  auto pt = detail::tensors_of(probe);
  GradCheckReport rep;
  rep.tolerance = tolerance;
  double sum = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = static_cast<std::size_t>(rng.below(total));
    std::size_t t = 0;
    while (flat >= gt[t]->size()) flat -= gt[t++]->size();
    double& x = pt[t]->data()[flat];
    const double orig = x;
    x = orig + step;
    const double lp = batch_loss(probe, batch);
    x = orig - step;
    const double lm = batch_loss(probe, batch);
    x = orig;
    GradCheckEntry e{names[t], flat, gt[t]->data()[flat], (lp - lm) / (2.0 * step), 0.0};
    e.rel_error = grad_rel_error(e.analytic, e.numeric);
    rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
    sum += e.rel_error;
    rep.entries.push_back(std::move(e));
  }
  rep.mean_rel_error = sum / static_cast<double>(samples);
  rep.passed = rep.max_rel_error <= tolerance;
  return rep;
}

}  // namespace plnd
