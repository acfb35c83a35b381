#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dipwm/errors.hpp"
#include "dipwm/fr_surrogates.hpp"
#include "dipwm/meta_trainer.hpp"
#include "dipwm/noise_pool.hpp"

namespace dipwm::eval {

// ---------------------------------------------------------------------------
// Scalar metrics

/// 1 - mean |w - w_hat| over hard-decided bits.
template <typename A, typename B>
double bit_accuracy(const Eigen::DenseBase<A>& w, const Eigen::DenseBase<B>& w_hat) {
  if (w.size() != w_hat.size()) {
    throw LengthError("bit_accuracy: " + std::to_string(w.size()) + " vs " + std::to_string(w_hat.size()) + " bits");
  }
  if (w.size() == 0) throw EmptyInputError("bit_accuracy: empty payload");
  const Eigen::ArrayXd a = w.derived().template cast<double>().array();
  const Eigen::ArrayXd b = w_hat.derived().template cast<double>().array();
  return 1.0 - (a - b).abs().mean();
}

/// Fraction of cosines strictly above `tau`.
template <typename Derived>
double attack_success_rate(const Eigen::DenseBase<Derived>& cosines, double tau) {
  if (cosines.size() == 0) throw EmptyInputError("attack_success_rate: no pairs");
  return (cosines.derived().template cast<double>().array() > tau).template cast<double>().mean();
}

/// ASR of a calibrated model over index-aligned watermarked/target batches.
double attack_success_rate(const fr::EmbedderModel& model, const ImageTensor& x_hat, const ImageTensor& x_t);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// SSIM of each image pair: Gaussian 11x11 window (sigma 1.5) over every
/// fully-contained position, K1 = 0.01, K2 = 0.03, dynamic range 1, averaged
/// over channels and windows.
Eigen::VectorXd ssim_per_image(const ImageTensor& x, const ImageTensor& y);

/// Mean of ssim_per_image.
double ssim(const ImageTensor& x, const ImageTensor& y);

/// Peak signal-to-noise ratio in dB over the whole batch, peak 1. Identical
/// inputs give +inf.
double psnr(const ImageTensor& x, const ImageTensor& y);

// ---------------------------------------------------------------------------
// Perturbation baselines

enum class AttackMethod { pgd, fgsm };

std::string to_string(AttackMethod m);

struct AttackSpec {
  AttackMethod method = AttackMethod::pgd;
  double epsilon = 8.0 / 255.0;
  /// Zero selects 2.5 * epsilon / iterations.
  double step_size = 0.0;
  int iterations = 10;
  double ssim_target = 0.9;
  double ssim_tolerance = 0.03;
  /// Bisection rounds on epsilon; zero keeps `epsilon` as given.
  int max_rounds = 8;

  void validate() const;
};

/// Sign-gradient ascent on the mean ensemble cosine toward the targets,
/// projected to the L-inf ball of radius `epsilon` around `x_s` and to [0, 1].
ImageTensor perturb(const ImageTensor& x_s, const ImageTensor& x_t, const std::vector<fr::EmbedderModel>& ensemble,
                    const AttackSpec& spec);

struct AttackResult {
  ImageTensor images;
  double epsilon = 0.0;
  double mean_ssim = 0.0;
  int rounds = 0;
  bool within_budget = false;
};

/// `perturb` with epsilon bisected until the mean SSIM lands within the
/// budget (or the rounds run out; `within_budget` then reports false).
AttackResult pgd_attack(const ImageTensor& x_s, const ImageTensor& x_t, const std::vector<fr::EmbedderModel>& ensemble,
                        AttackSpec spec);

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string model;
  std::string role;       ///< "white-box" or "black-box"
  std::string condition;  ///< processing spec, e.g. "jpeg:30"
  int images = 0;
  double tau = 0.0;
  double asr = 0.0;
  /// ASR of the unwatermarked carriers against the same targets.
  double baseline_asr = 0.0;
  double acc = 0.0;
  double mean_ssim = 0.0;
  double min_ssim = 0.0;
  double psnr = 0.0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct EvalReport {
  std::string fingerprint;
  std::vector<ReportRow> rows;

  /// Checks the rate ranges and the model x condition grid shape.
  void validate() const;
  const ReportRow& row(const std::string& model, const std::string& condition) const;
  /// Rows tagged with `role` under `condition`.
  std::vector<ReportRow> rows_for(const std::string& role, const std::string& condition = "identity") const;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalOptions {
  std::uint64_t seed = 7;
  /// Upper bound on the number of test-split carriers used.
  int images = 64;
};

/// Runs every model over the same watermarked sample once per processing
/// spec. Watermarked images are quantised to 8 bits before use, as if saved.
/// Rows are ordered by (model, spec); white-box models come first.
EvalReport evaluate(const meta::Checkpoint& ckpt, const fr::SurrogatePool& pool, const io::IdentityCorpus& corpus,
                    const std::vector<noise::EvalProcessingSpec>& specs, const EvalOptions& opts = {});

/// Clean condition only: one row per model.
EvalReport evaluate_transfer(const meta::Checkpoint& ckpt, const fr::SurrogatePool& pool,
                             const io::IdentityCorpus& corpus, const EvalOptions& opts = {});

EvalReport evaluate_robustness(const meta::Checkpoint& ckpt, const fr::SurrogatePool& pool,
                               const io::IdentityCorpus& corpus,
                               const std::vector<noise::EvalProcessingSpec>& specs = noise::default_robustness_specs(),
                               const EvalOptions& opts = {});

/// Concatenates the rows of reports over the same checkpoint.
EvalReport merge(const EvalReport& a, const EvalReport& b);

/// One JSON object per row.
void write_jsonl(const std::filesystem::path& file, const EvalReport& report);
/// Header plus one line per row.
void write_csv(const std::filesystem::path& file, const EvalReport& report);

// ---------------------------------------------------------------------------
// Ablation

struct AblationOptions {
  EvalOptions eval;
  /// Arms checkpoint under `<dir>/meta` and `<dir>/without_meta` and resume
  /// from there when possible.
  std::optional<std::filesystem::path> dir;
  bool verbose = false;
};

struct AblationArm {
  meta::Checkpoint model;
  EvalReport report;
};

struct AblationResult {
  AblationArm meta;
  AblationArm without_meta;
  /// Both arms saw the same carriers, targets and payloads in the same order.
  bool same_data_order = false;
};

/// Trains and evaluates both arms. `without_meta` must equal `with_meta`
/// except for `train.meta` (true vs false).
AblationResult ablation_without_meta(const io::IdentityCorpus& corpus, const fr::SurrogatePool& pool,
                                     const meta::TrainerSetup& with_meta, const meta::TrainerSetup& without_meta,
                                     const AblationOptions& opts = {});

}  // namespace dipwm::eval
