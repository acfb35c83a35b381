#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dipwm/fr_surrogates.hpp"
#include "dipwm/noise_pool.hpp"
#include "dipwm/watermark_codec.hpp"

namespace dipwm::meta {

struct LossWeights {
  double adv = 100.0;
  double inv = 0.05;
  double wm = 0.05;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double l_inv_phi = 0.0;
  double l_adv_tra = 0.0;
  double l_adv_tes = 0.0;
  double l_inv_tes = 0.0;
  double l_inv_total = 0.0;
  double l_adv_total = 0.0;
  double l_wm_phi = 0.0;
  double l_wm_tes = 0.0;
  double l_wm_total = 0.0;
  double l_dip = 0.0;

  /// Field names in declaration order, paired with their values.
  std::vector<std::pair<const char*, double>> fields() const;
  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator/=(double d);
  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Fills the three totals and l_dip from the per-term components:
///   l_inv_total = (l_inv_phi + l_inv_tes) / 2
///   l_adv_total = l_adv_tra + l_adv_tes
///   l_wm_total  = l_wm_phi + l_wm_tes
///   l_dip       = adv * l_adv_total + inv * l_inv_total + wm * l_wm_total
/// Throws TrainingDivergence naming the first non-finite component.
double total_losses(LossBreakdown& parts, const LossWeights& weights);

// ---------------------------------------------------------------------------
// Loss ops

/// Mean squared error over every element.
template <typename Scalar>
ops::Var<Scalar> mse_loss(Tape<Scalar>& tape, ops::Var<Scalar> a, ops::Var<Scalar> b) {
  if (!(tape.shape(a) == tape.shape(b))) throw ConfigError("mse_loss: shape mismatch");
  const auto diff = (tape.value(a).data - tape.value(b).data).eval();
  const Scalar n = Scalar(diff.size());
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data[0] = diff.square().sum() / n;
  return tape.record(std::move(out), tape.any_needs_grad(a, b), [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Scalar k = Scalar(2) * g.data[0] / n;
    if (t.needs_grad(a)) t.grad_ref(a).data += k * diff;
    if (t.needs_grad(b)) t.grad_ref(b).data -= k * diff;
  });
}

/// Mean over the batch of 1 - cos(e_s, e_t) for unit-norm rows.
template <typename Scalar>
ops::Var<Scalar> adversarial_loss(Tape<Scalar>& tape, ops::Var<Scalar> e_s, ops::Var<Scalar> e_t) {
  const Shape s = tape.shape(e_s);
  if (!(s == tape.shape(e_t))) throw ConfigError("adversarial_loss: shape mismatch");
  const auto d = s.per_item();
  const auto& a = tape.value(e_s).data;
  const auto& b = tape.value(e_t).data;
  Scalar total = 0;
  for (int n = 0; n < s.n; ++n) {
    auto ra = a.segment(n * d, d);
    auto rb = b.segment(n * d, d);
    if (ra.matrix().norm() < Scalar(1e-12) || rb.matrix().norm() < Scalar(1e-12)) {
      throw NumericError("adversarial_loss: zero-norm embedding");
    }
    total += Scalar(1) - (ra * rb).sum();
  }
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data[0] = total / Scalar(s.n);
  return tape.record(std::move(out), tape.any_needs_grad(e_s, e_t),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const Scalar k = -g.data[0] / Scalar(s.n);
    if (t.needs_grad(e_s)) t.grad_ref(e_s).data += k * t.value(e_t).data;
    if (t.needs_grad(e_t)) t.grad_ref(e_t).data += k * t.value(e_s).data;
  });
}

inline constexpr double kProbClip = 1e-7;

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets, with
/// probabilities clipped to [1e-7, 1 - 1e-7]. Only the logits receive a
/// gradient; it vanishes where the clip is active.
template <typename Scalar>
ops::Var<Scalar> bce_loss(Tape<Scalar>& tape, ops::Var<Scalar> logits, ops::Var<Scalar> targets) {
  if (tape.shape(logits).size() != tape.shape(targets).size()) throw LengthError("bce_loss: length mismatch");
  const auto& z = tape.value(logits).data;
  const auto& w = tape.value(targets).data;
  const auto p = (Scalar(1) / (Scalar(1) + (-z).exp())).eval();
  const auto pc = p.max(Scalar(kProbClip)).min(Scalar(1 - kProbClip)).eval();
  const Scalar n = Scalar(z.size());
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data[0] = -(w * pc.log() + (Scalar(1) - w) * (Scalar(1) - pc).log()).sum() / n;
  return tape.record(std::move(out), tape.needs_grad(logits), [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto inside = ((p > Scalar(kProbClip)) && (p < Scalar(1 - kProbClip))).template cast<Scalar>();
    const auto dpc = (-(w / pc) + (Scalar(1) - w) / (Scalar(1) - pc)).eval();
    t.grad_ref(logits).data += g.data[0] / n * dpc * inside * p * (Scalar(1) - p);
  });
}

/// Plain-number BCE over probabilities, same clipping.
double bce(const Eigen::ArrayXd& targets, const Eigen::ArrayXd& probs);

// ---------------------------------------------------------------------------
// One optimisation step of the meta-learning objective

/// A face embedder seen by the loss: configuration plus weights.
template <typename Scalar>
struct Surrogate {
  fr::EmbedderConfig config;
  ParamSet<Scalar> params;
};

template <typename Scalar>
std::vector<Surrogate<Scalar>> surrogates_of(const std::vector<fr::EmbedderModel>& models, bool allow_untrained) {
  std::vector<Surrogate<Scalar>> out;
  for (const auto& m : models) {
    if (!m.trained && !allow_untrained) {
      throw ConfigError("surrogate " + m.name() + " is untrained; pass allow_untrained to use it anyway");
    }
    out.push_back({m.config, m.params.template cast<Scalar>()});
  }
  return out;
}

template <typename Scalar>
struct StepModels {
  codec::EncoderConfig encoder;
  codec::DecoderConfig decoder;
  std::vector<Surrogate<Scalar>> meta_train;
  std::vector<Surrogate<Scalar>> meta_test;
};

template <typename Scalar>
struct StepBatch {
  Tensor<Scalar> x_s;   ///< carriers [N, 3, S, S]
  Tensor<Scalar> w;     ///< payload bits [N, L, 1, 1]
  Tensor<Scalar> x_t;   ///< targets [N, 3, S, S]
};

struct StepOptions {
  double inner_lr = 1e-3;
  bool meta = true;
  bool second_order = false;
  /// When false only the loss values are produced.
  bool want_gradients = true;
  noise::NoisePoolConfig noise;
  noise::NoiseChoice noise_choice;
};

template <typename Scalar>
struct StepResult {
  LossBreakdown losses;
  ParamSet<Scalar> grad_encoder;
  ParamSet<Scalar> grad_decoder;
  /// Per meta-train model gradients of its adversarial loss at phi.
  std::vector<ParamSet<Scalar>> inner_grads;
  std::uint64_t phi_checksum_after_inner = 0;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> target_embedding(const Surrogate<Scalar>& m, const Tensor<Scalar>& x_t) {
  Tape<Scalar> tape;
  Bound<Scalar> bound(tape, m.params, false);
  return tape.value(fr::embed(tape, m.config, bound, tape.constant(x_t)));
}

template <typename Scalar>
ops::Var<Scalar> weighted_sum(Tape<Scalar>& tape, const std::vector<std::pair<Scalar, ops::Var<Scalar>>>& terms) {
  ops::Var<Scalar> acc = ops::scale(tape, terms.front().second, terms.front().first);
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ops::add(tape, acc, ops::scale(tape, terms[i].second, terms[i].first));
  return acc;
}

template <typename Scalar>
Scalar scalar(const Tape<Scalar>& tape, ops::Var<Scalar> v) {
  return tape.value(v).data[0];
}

/// Gradient w.r.t. the encoder parameters of one surrogate's adversarial
/// loss at `params`.
template <typename Scalar>
ParamSet<Scalar> adversarial_gradient(const StepModels<Scalar>& models, const Surrogate<Scalar>& m,
                                      const Tensor<Scalar>& e_t, const ParamSet<Scalar>& params,
                                      const StepBatch<Scalar>& batch) {
  Tape<Scalar> tape;
  Bound<Scalar> enc(tape, params, true);
  auto x_hat = codec::encoder_forward(tape, models.encoder, enc, tape.constant(batch.x_s), tape.constant(batch.w)).image;
  Bound<Scalar> fp(tape, m.params, false);
  auto loss = adversarial_loss(tape, fr::embed(tape, m.config, fp, x_hat), tape.constant(e_t));
  tape.backward(loss);
  return enc.gradients(tape);
}

}  // namespace detail

/// Per meta-train model adversarial losses at phi and their gradients.
template <typename Scalar>
struct MetaTrainResult {
  Scalar l_adv_tra = 0;
  std::vector<Scalar> per_model;
  std::vector<ParamSet<Scalar>> grads;
};

template <typename Scalar>
MetaTrainResult<Scalar> meta_train_adv_loss(const StepModels<Scalar>& models, const ParamSet<Scalar>& phi,
                                            const StepBatch<Scalar>& batch) {
  if (models.meta_train.empty()) throw ConfigError("meta-train pool is empty");
  Tape<Scalar> tape;
  Bound<Scalar> enc(tape, phi, true);
  auto x_hat = codec::encoder_forward(tape, models.encoder, enc, tape.constant(batch.x_s), tape.constant(batch.w)).image;
  MetaTrainResult<Scalar> out;
  std::vector<ops::Var<Scalar>> losses;
  for (const auto& m : models.meta_train) {
    Bound<Scalar> fp(tape, m.params, false);
    auto e = fr::embed(tape, m.config, fp, x_hat);
    losses.push_back(adversarial_loss(tape, e, tape.constant(detail::target_embedding(m, batch.x_t))));
    out.per_model.push_back(detail::scalar(tape, losses.back()));
    out.l_adv_tra += out.per_model.back();
  }
  for (auto l : losses) {
    tape.backward(l);
    out.grads.push_back(enc.gradients(tape));
  }
  return out;
}

/// theta = phi - eta * grad; phi is not modified.
template <typename Scalar>
ParamSet<Scalar> inner_adapt(const ParamSet<Scalar>& phi, const ParamSet<Scalar>& grad, Scalar eta) {
  phi.require_same_layout(grad, "inner_adapt");
  return sgd_step(phi, grad, eta);
}

template <typename Scalar>
struct MetaTestResult {
  Scalar l_adv_tes = 0;  ///< summed over the meta-test models
  Scalar l_inv = 0;      ///< MSE(x_s, x_hat_tes)
  Tensor<Scalar> x_hat_tes;
};

template <typename Scalar>
MetaTestResult<Scalar> meta_test_losses(const StepModels<Scalar>& models, const ParamSet<Scalar>& theta,
                                        const StepBatch<Scalar>& batch) {
  if (models.meta_test.empty()) throw ConfigError("meta-test pool is empty");
  Tape<Scalar> tape;
  Bound<Scalar> enc(tape, theta, false);
  auto x_s = tape.constant(batch.x_s);
  auto x_hat = codec::encoder_forward(tape, models.encoder, enc, x_s, tape.constant(batch.w)).image;
  MetaTestResult<Scalar> out;
  for (const auto& m : models.meta_test) {
    Bound<Scalar> fq(tape, m.params, false);
    auto e = fr::embed(tape, m.config, fq, x_hat);
    out.l_adv_tes += detail::scalar(tape, adversarial_loss(tape, e, tape.constant(detail::target_embedding(m, batch.x_t))));
  }
  out.l_inv = detail::scalar(tape, mse_loss(tape, x_hat, x_s));
  out.x_hat_tes = tape.value(x_hat);
  return out;
}

/// Loss values and outer gradients for one batch.
///
/// With `meta`, the encoder gradient is the gradient of the phi-side terms
/// plus, for every meta-train model p, the gradient of the meta-test terms
/// evaluated at theta^p (first order). `second_order` adds the curvature
/// correction -eta * H_p * v with a central finite-difference
/// Hessian-vector product. Without `meta`, the adversarial loss is summed
/// over every surrogate at phi and no inner step is taken.
template <typename Scalar>
StepResult<Scalar> compute_step(const StepModels<Scalar>& models, const ParamSet<Scalar>& phi,
                                const ParamSet<Scalar>& dec, const StepBatch<Scalar>& batch,
                                const LossWeights& weights, const StepOptions& opts) {
  weights.validate();
  if (models.meta_train.empty()) throw ConfigError("meta-train pool is empty");
  if (opts.meta && models.meta_test.empty()) throw ConfigError("meta-test pool is empty");
  const Scalar la = Scalar(weights.adv), li = Scalar(weights.inv), lw = Scalar(weights.wm);
  const std::uint64_t phi_before = phi.checksum();

  std::vector<Tensor<Scalar>> et_train, et_test;
  for (const auto& m : models.meta_train) et_train.push_back(detail::target_embedding(m, batch.x_t));
  for (const auto& m : models.meta_test) et_test.push_back(detail::target_embedding(m, batch.x_t));

  StepResult<Scalar> res;
  LossBreakdown& L = res.losses;

  // Terms evaluated at phi.
  Tape<Scalar> tape;
  Bound<Scalar> enc(tape, phi, opts.want_gradients || opts.meta);
  Bound<Scalar> dcd(tape, dec, opts.want_gradients);
  auto x_s = tape.constant(batch.x_s);
  auto w = tape.constant(batch.w);
  auto x_hat = codec::encoder_forward(tape, models.encoder, enc, x_s, w).image;
  auto inv_phi = mse_loss(tape, x_hat, x_s);
  std::vector<ops::Var<Scalar>> adv_train;
  for (std::size_t p = 0; p < models.meta_train.size(); ++p) {
    const auto& m = models.meta_train[p];
    Bound<Scalar> fp(tape, m.params, false);
    adv_train.push_back(adversarial_loss(tape, fr::embed(tape, m.config, fp, x_hat), tape.constant(et_train[p])));
  }
  std::vector<ops::Var<Scalar>> adv_extra;  // meta-test models, only without meta
  if (!opts.meta) {
    for (std::size_t q = 0; q < models.meta_test.size(); ++q) {
      const auto& m = models.meta_test[q];
      Bound<Scalar> fq(tape, m.params, false);
      adv_extra.push_back(adversarial_loss(tape, fr::embed(tape, m.config, fq, x_hat), tape.constant(et_test[q])));
    }
  }
  auto noisy = noise::apply_noise(tape, x_hat, opts.noise, opts.noise_choice);
  auto wm_phi = bce_loss(tape, codec::decoder_forward(tape, models.decoder, dcd, noisy), w);

  L.l_inv_phi = double(detail::scalar(tape, inv_phi));
  for (auto v : adv_train) L.l_adv_tra += double(detail::scalar(tape, v));
  for (auto v : adv_extra) L.l_adv_tra += double(detail::scalar(tape, v));
  L.l_wm_phi = double(detail::scalar(tape, wm_phi));

  if (!opts.meta) {
    // Single-pass ensemble objective: inv and wm enter once each.
    L.l_inv_tes = L.l_inv_phi;
    L.l_adv_tes = 0.0;
    L.l_wm_tes = 0.0;
    total_losses(L, weights);
    if (opts.want_gradients) {
      std::vector<std::pair<Scalar, ops::Var<Scalar>>> terms{{li, inv_phi}, {lw, wm_phi}};
      for (auto v : adv_train) terms.emplace_back(la, v);
      for (auto v : adv_extra) terms.emplace_back(la, v);
      tape.backward(detail::weighted_sum(tape, terms));
      res.grad_encoder = enc.gradients(tape);
      res.grad_decoder = dcd.gradients(tape);
    }
    res.phi_checksum_after_inner = phi.checksum();
    return res;
  }

  // Per-model inner gradients, needed for theta^p even when no update follows.
  std::vector<ParamSet<Scalar>> inner;
  for (auto v : adv_train) {
    tape.backward(v);
    inner.push_back(enc.gradients(tape));
  }
  if (opts.want_gradients) {
    tape.backward(detail::weighted_sum(tape, std::vector<std::pair<Scalar, ops::Var<Scalar>>>{
                                                 {li / Scalar(2), inv_phi}, {lw, wm_phi}}));
    res.grad_encoder = enc.gradients(tape);
    res.grad_decoder = dcd.gradients(tape);
    for (const auto& g : inner) res.grad_encoder.axpy(la, g);
  }

  // Meta-test terms at each theta^p.
  const std::size_t P = models.meta_train.size();
  const std::size_t Q = models.meta_test.size();
  double inv_tes_sum = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const ParamSet<Scalar> theta = inner_adapt(phi, inner[p], Scalar(opts.inner_lr));
    const bool last = p + 1 == P;
    Tape<Scalar> t;
    Bound<Scalar> th(t, theta, opts.want_gradients);
    Bound<Scalar> dq(t, dec, opts.want_gradients && last);
    auto xs = t.constant(batch.x_s);
    auto wp = t.constant(batch.w);
    auto x_tes = codec::encoder_forward(t, models.encoder, th, xs, wp).image;
    std::vector<std::pair<Scalar, ops::Var<Scalar>>> terms;
    for (std::size_t q = 0; q < Q; ++q) {
      const auto& m = models.meta_test[q];
      Bound<Scalar> fq(t, m.params, false);
      auto adv = adversarial_loss(t, fr::embed(t, m.config, fq, x_tes), t.constant(et_test[q]));
      L.l_adv_tes += double(detail::scalar(t, adv));
      terms.emplace_back(la, adv);
    }
    // (1 / PQ) sum_p sum_q MSE_p = (1 / P) sum_p MSE_p
    auto inv = mse_loss(t, x_tes, xs);
    inv_tes_sum += double(detail::scalar(t, inv));
    terms.emplace_back(li / Scalar(2) / Scalar(P), inv);
    if (last) {
      auto wm = bce_loss(t, codec::decoder_forward(t, models.decoder, dq, noise::apply_noise(t, x_tes, opts.noise, opts.noise_choice)), wp);
      L.l_wm_tes = double(detail::scalar(t, wm));
      terms.emplace_back(lw, wm);
    }
    if (opts.want_gradients) {
      t.backward(detail::weighted_sum(t, terms));
      ParamSet<Scalar> v = th.gradients(t);
      res.grad_encoder.axpy(Scalar(1), v);
      if (last) res.grad_decoder.axpy(Scalar(1), dq.gradients(t));
      if (opts.second_order) {
        double norm2 = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) norm2 += double(v[i].data.square().sum());
        if (norm2 > 0.0) {
          double phi2 = 0.0;
          for (std::size_t i = 0; i < phi.size(); ++i) phi2 += double(phi[i].data.square().sum());
          const double rel = std::sqrt(double(std::numeric_limits<Scalar>::epsilon()));
          const Scalar eps = Scalar(rel * (1.0 + std::sqrt(phi2)) / std::sqrt(norm2));
          ParamSet<Scalar> plus = phi, minus = phi;
          plus.axpy(eps, v);
          minus.axpy(-eps, v);
          const auto& m = models.meta_train[p];
          auto gp = detail::adversarial_gradient(models, m, et_train[p], plus, batch);
          auto gm = detail::adversarial_gradient(models, m, et_train[p], minus, batch);
          // H v ~ (g(phi + eps v) - g(phi - eps v)) / (2 eps)
          res.grad_encoder.axpy(-Scalar(opts.inner_lr) / (Scalar(2) * eps), gp);
          res.grad_encoder.axpy(Scalar(opts.inner_lr) / (Scalar(2) * eps), gm);
        }
      }
    }
  }
  L.l_inv_tes = inv_tes_sum / double(P);
  total_losses(L, weights);
  res.inner_grads = std::move(inner);
  res.phi_checksum_after_inner = phi.checksum();
  if (res.phi_checksum_after_inner != phi_before) throw Error("inner adaptation modified phi");
  return res;
}

// ---------------------------------------------------------------------------
// Training driver

struct TrainConfig {
  int epochs = 2500;
  int batch_size = 32;
  double outer_lr = 5e-5;
  double inner_lr = 1e-3;
  int P = 2;
  int Q = 1;
  bool second_order = false;
  /// False trains the plain-ensemble ablation arm.
  bool meta = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  int validation_size = 16;
  bool allow_untrained = false;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainerSetup {
  codec::EncoderConfig encoder;
  codec::DecoderConfig decoder;
  TrainConfig train;
  LossWeights weights;
  noise::NoisePoolConfig noise;

  void validate() const;
  friend bool operator==(const TrainerSetup&, const TrainerSetup&) = default;
};

/// The settings used for the single-core desk runs.
TrainerSetup desk_preset();

struct EpochRecord {
  int epoch = 0;
  LossBreakdown mean;
  double validation = 0.0;
  /// Hash over every batch's carrier indices, target indices and payloads.
  std::uint64_t batch_hash = 0;
  std::vector<std::uint64_t> batch_hashes;
  double seconds = 0.0;
  std::vector<std::string> noise_ops;
};

struct TrainerState {
  codec::EncoderParams phi;
  codec::DecoderParams dec;
  Adam<float> enc_opt;
  Adam<float> dec_opt;
  int epoch = 0;  ///< completed epochs
  std::string data_rng;
  std::string noise_rng;
  double best_validation = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  std::vector<EpochRecord> history;
};

TrainerState init_state(const TrainerSetup& setup);

/// Fixed source-identity -> target-identity assignment, seeded.
std::map<int, int> assign_targets(const io::IdentityCorpus& corpus, std::uint64_t seed);

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Called after every epoch; returning false stops training early (used
  /// to simulate interruptions).
  std::function<bool(const EpochRecord&)> on_epoch;
  /// Print one progress line per epoch to stderr.
  bool verbose = false;
};

/// Runs (or resumes) the training loop until `setup.train.epochs` epochs are
/// complete. With a checkpoint directory it writes `ckpt_<epoch>/`, `best/`
/// and `train_log.jsonl`; on divergence it writes `last_good/` and rethrows.
TrainerState train(const io::IdentityCorpus& corpus, const fr::SurrogatePool& pool, const TrainerSetup& setup,
                   TrainerState state, const TrainOptions& opts = {});

TrainerState train(const io::IdentityCorpus& corpus, const fr::SurrogatePool& pool, const TrainerSetup& setup,
                   const TrainOptions& opts = {});

/// Checkpoint archive: configs, parameters, optimiser moments, RNG state,
/// and the loss history.
void save_checkpoint(const std::filesystem::path& file, const TrainerSetup& setup, const TrainerState& state);

struct Checkpoint {
  TrainerSetup setup;
  TrainerState state;
};

Checkpoint load_checkpoint(const std::filesystem::path& file);

/// Accepts a checkpoint file or a directory holding `model.dwa`.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path);

/// `ckpt_<epoch>/model.dwa` with the highest epoch under `dir`, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& dir);

/// State of the latest checkpoint under `dir`, or a fresh one. A checkpoint
/// written with different settings is a ConfigError; only `train.epochs` may
/// grow between runs.
TrainerState resume_or_init(const std::filesystem::path& dir, const TrainerSetup& setup);

}  // namespace dipwm::meta
