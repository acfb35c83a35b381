#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dipwm/imaging_io.hpp"
#include "dipwm/ops.hpp"

namespace dipwm::fr {

enum class Arch { cnn4, cnn4_wide, depthwise, mini_residual };

std::string to_string(Arch a);
/// Throws ArgumentError for unknown names.
Arch parse_arch(const std::string& name);

/// Every architecture downsamples by 16 in four stride-2 stages, so
/// `image_side` must be a multiple of 16.
struct EmbedderConfig {
  Arch arch = Arch::cnn4;
  int image_side = kImageSize;
  int embed_dim = 128;

  void validate() const;
  friend bool operator==(const EmbedderConfig&, const EmbedderConfig&) = default;
};

/// A face embedder and its verification threshold.
struct EmbedderModel {
  EmbedderConfig config;
  ParamSet<float> params;
  std::optional<double> tau;
  /// False for a random initialisation that was never trained. Losses and
  /// metrics refuse such models unless told otherwise.
  bool trained = false;

  std::string name() const { return to_string(config.arch); }
};

ParamSet<float> init_embedder(const EmbedderConfig& cfg, std::uint64_t seed);
EmbedderModel random_embedder(const EmbedderConfig& cfg, std::uint64_t seed);

namespace detail {

template <typename Scalar>
ops::Var<Scalar> conv_relu(Tape<Scalar>& tape, const Bound<Scalar>& p, const std::string& name,
                           ops::Var<Scalar> x, int stride) {
  const int k = tape.shape(p[name + ".w"]).h;
  return ops::relu(tape, ops::conv2d(tape, x, p[name + ".w"], p[name + ".b"], stride, k / 2));
}

}  // namespace detail

/// Unit-norm embeddings [N, embed_dim, 1, 1].
template <typename Scalar>
ops::Var<Scalar> embed(Tape<Scalar>& tape, const EmbedderConfig& cfg, const Bound<Scalar>& p,
                       ops::Var<Scalar> x) {
  const Shape xs = tape.shape(x);
  if (xs.c != 3 || xs.h != cfg.image_side || xs.w != cfg.image_side) {
    throw ConfigError(to_string(cfg.arch) + " expects [N,3," + std::to_string(cfg.image_side) + "," +
                      std::to_string(cfg.image_side) + "], got " + to_string(xs));
  }
  auto h = x;
  switch (cfg.arch) {
    case Arch::cnn4:
    case Arch::cnn4_wide:
      for (int s = 0; s < 4; ++s) h = detail::conv_relu(tape, p, "conv." + std::to_string(s), h, 2);
      break;
    case Arch::depthwise:
      h = detail::conv_relu(tape, p, "stem", h, 2);
      for (int s = 0; s < 3; ++s) {
        const std::string name = "block." + std::to_string(s);
        h = ops::relu(tape, ops::depthwise_conv2d(tape, h, p[name + ".dw.w"], p[name + ".dw.b"], 2, 1));
        h = detail::conv_relu(tape, p, name + ".pw", h, 1);
      }
      break;
    case Arch::mini_residual:
      for (int s = 0; s < 3; ++s) h = detail::conv_relu(tape, p, "conv." + std::to_string(s), h, 2);
      {
        auto r = detail::conv_relu(tape, p, "res.a", h, 1);
        r = ops::conv2d(tape, r, p["res.b.w"], p["res.b.b"], 1, 1);
        h = ops::relu(tape, ops::add(tape, h, r));
      }
      h = detail::conv_relu(tape, p, "conv.3", h, 2);
      break;
  }
  const Shape hs = tape.shape(h);
  h = ops::reshape(tape, h, Shape{hs.n, int(hs.per_item()), 1, 1});
  h = ops::linear(tape, h, p["embed.w"], p["embed.b"]);
  return ops::l2_normalize(tape, h);
}

/// Inference embeddings as an [N, embed_dim] matrix.
Eigen::MatrixXf embed(const EmbedderModel& model, const ImageTensor& x);

/// Row-wise cosine similarity of aligned unit-norm embedding batches.
Eigen::VectorXf cosine_rows(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b);

struct SurrogateTraining {
  int epochs = 30;
  int batch_size = 32;
  float lr = 2e-3f;
  /// Logit scale applied to the normalised embedding before the softmax head.
  float logit_scale = 16.0f;
};

/// Softmax identity classification on the train and target splits; the
/// classifier head is discarded afterwards. Deterministic in `seed`.
EmbedderModel train_surrogate(const io::IdentityCorpus& corpus, const EmbedderConfig& cfg, std::uint64_t seed,
                              const SurrogateTraining& opts = {});

/// Cosines of cross-identity image pairs in `split`, subsampled (seeded)
/// to at most `cap` pairs.
std::vector<double> impostor_cosines(const EmbedderModel& model, const io::IdentityCorpus& corpus, io::Split split,
                                     std::size_t cap = 10000, std::uint64_t seed = 0);
std::vector<double> genuine_cosines(const EmbedderModel& model, const io::IdentityCorpus& corpus, io::Split split);

/// Smallest tau with at most a fraction `far` of the cosines strictly above it.
double threshold_at_far(std::vector<double> impostor, double far);

/// Threshold at `far` over the impostor pairs of the test split. Needs at
/// least 100 pairs.
double calibrate_threshold(const EmbedderModel& model, const io::IdentityCorpus& corpus, double far,
                           std::uint64_t seed = 0);

/// Balanced same/different pair accuracy on `eval` with the threshold that
/// maximises accuracy on the `fit` split.
double verification_accuracy(const EmbedderModel& model, const io::IdentityCorpus& corpus, io::Split fit,
                             io::Split eval);

struct SurrogatePool {
  std::vector<EmbedderModel> meta_train;
  std::vector<EmbedderModel> meta_test;
  std::vector<EmbedderModel> held_out;

  std::vector<const EmbedderModel*> white_box() const;
  std::vector<const EmbedderModel*> all() const;
};

/// First P models meta-train, next Q meta-test, the remainder is held out.
SurrogatePool partition_pool(std::vector<EmbedderModel> models, int P, int Q);

void save_embedder(const std::filesystem::path& file, const EmbedderModel& model);
EmbedderModel load_embedder(const std::filesystem::path& file);

}  // namespace dipwm::fr
