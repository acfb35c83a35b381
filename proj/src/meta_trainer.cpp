#include "dipwm/meta_trainer.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dipwm/archive.hpp"
#include "dipwm/config.hpp"

namespace dipwm::meta {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kNoiseStream = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kValidationStream = 0xC2B2AE3D27D4EB4Full;
constexpr std::uint64_t kTargetStream = 0x165667B19E3779F9ull;

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 rng_from(const std::string& state, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (!state.empty()) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw IoError("corrupt RNG state in checkpoint");
  }
  return rng;
}

std::uint64_t fnv(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFFu;
    h *= 1099511628211ull;
  }
  return h;
}

/// Draws carriers, targets and payloads for one batch from the data stream.
struct BatchSampler {
  const io::IdentityCorpus& corpus;
  std::map<int, int> targets;
  std::map<int, std::vector<int>> target_images;
  int payload_bits;

  BatchSampler(const io::IdentityCorpus& c, std::map<int, int> t, int bits)
      : corpus(c), targets(std::move(t)), payload_bits(bits) {
    for (const auto& [src, tgt] : targets) {
      if (!target_images.contains(tgt)) {
        std::vector<int> imgs;
        for (int i : corpus.images_of(tgt)) {
          if (corpus.splits[std::size_t(i)] == io::Split::target) imgs.push_back(i);
        }
        if (imgs.empty()) throw DataError("target identity " + std::to_string(tgt) + " has no images");
        target_images.emplace(tgt, std::move(imgs));
      }
    }
  }

  StepBatch<float> draw(const std::vector<int>& carriers, std::mt19937_64& rng, std::uint64_t& hash) const {
    const int n = int(carriers.size());
    std::vector<int> tgt_idx;
    tgt_idx.reserve(carriers.size());
    for (int i : carriers) {
      const auto& imgs = target_images.at(targets.at(corpus.labels[std::size_t(i)]));
      tgt_idx.push_back(imgs[std::size_t(rng() % imgs.size())]);
    }
    Tensor<float> w(Shape{n, payload_bits, 1, 1});
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data[k] = float(rng() >> 63);
    for (int i : carriers) hash = fnv(hash, std::uint64_t(i));
    for (int i : tgt_idx) hash = fnv(hash, std::uint64_t(i));
    for (Eigen::Index k = 0; k < w.size(); ++k) hash = fnv(hash, std::uint64_t(w.data[k]));
    return {corpus.gather(carriers), std::move(w), corpus.gather(tgt_idx)};
  }
};

archive::Json record_json(const EpochRecord& r) {
  archive::Json j;
  j["epoch"] = r.epoch;
  j["losses"] = config::to_json(r.mean);
  j["validation_l_dip"] = r.validation;
  j["batch_hash"] = r.batch_hash;
  j["batch_hashes"] = r.batch_hashes;
  j["noise_ops"] = r.noise_ops;
  j["seconds"] = r.seconds;
  return j;
}

EpochRecord record_from_json(const archive::Json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.mean = config::breakdown_from_json(j.at("losses"));
  r.validation = j.at("validation_l_dip").get<double>();
  r.batch_hash = j.at("batch_hash").get<std::uint64_t>();
  r.batch_hashes = j.at("batch_hashes").get<std::vector<std::uint64_t>>();
  r.noise_ops = j.at("noise_ops").get<std::vector<std::string>>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

void write_log(const fs::path& file, const std::vector<EpochRecord>& history) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  for (const auto& r : history) {
    auto j = record_json(r);
    j.erase("batch_hashes");
    out << j.dump() << '\n';
  }
}

void append_log(const fs::path& file, const EpochRecord& r) {
  std::ofstream out(file, std::ios::app);
  if (!out) throw IoError("cannot write " + file.string());
  auto j = record_json(r);
  j.erase("batch_hashes");
  out << j.dump() << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------

void LossWeights::validate() const {
  if (!(adv > 0.0 && inv > 0.0 && wm > 0.0) || !std::isfinite(adv + inv + wm)) {
    throw ConfigError("loss weights must be positive and finite");
  }
}

std::vector<std::pair<const char*, double>> LossBreakdown::fields() const {
  return {{"l_inv_phi", l_inv_phi},     {"l_adv_tra", l_adv_tra},     {"l_adv_tes", l_adv_tes},
          {"l_inv_tes", l_inv_tes},     {"l_inv_total", l_inv_total}, {"l_adv_total", l_adv_total},
          {"l_wm_phi", l_wm_phi},       {"l_wm_tes", l_wm_tes},       {"l_wm_total", l_wm_total},
          {"l_dip", l_dip}};
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  l_inv_phi += o.l_inv_phi;
  l_adv_tra += o.l_adv_tra;
  l_adv_tes += o.l_adv_tes;
  l_inv_tes += o.l_inv_tes;
  l_inv_total += o.l_inv_total;
  l_adv_total += o.l_adv_total;
  l_wm_phi += o.l_wm_phi;
  l_wm_tes += o.l_wm_tes;
  l_wm_total += o.l_wm_total;
  l_dip += o.l_dip;
  return *this;
}

LossBreakdown& LossBreakdown::operator/=(double d) {
  l_inv_phi /= d;
  l_adv_tra /= d;
  l_adv_tes /= d;
  l_inv_tes /= d;
  l_inv_total /= d;
  l_adv_total /= d;
  l_wm_phi /= d;
  l_wm_tes /= d;
  l_wm_total /= d;
  l_dip /= d;
  return *this;
}

double total_losses(LossBreakdown& parts, const LossWeights& weights) {
  const std::pair<const char*, double> inputs[] = {{"l_inv_phi", parts.l_inv_phi}, {"l_inv_tes", parts.l_inv_tes},
                                                   {"l_adv_tra", parts.l_adv_tra}, {"l_adv_tes", parts.l_adv_tes},
                                                   {"l_wm_phi", parts.l_wm_phi},   {"l_wm_tes", parts.l_wm_tes}};
  for (const auto& [name, v] : inputs) {
    if (!std::isfinite(v)) throw TrainingDivergence(name, std::string("loss component ") + name + " is not finite");
  }
  parts.l_inv_total = (parts.l_inv_phi + parts.l_inv_tes) / 2.0;
  parts.l_adv_total = parts.l_adv_tra + parts.l_adv_tes;
  parts.l_wm_total = parts.l_wm_phi + parts.l_wm_tes;
  parts.l_dip = weights.adv * parts.l_adv_total + weights.inv * parts.l_inv_total + weights.wm * parts.l_wm_total;
  if (!std::isfinite(parts.l_dip)) throw TrainingDivergence("l_dip", "total loss is not finite");
  return parts.l_dip;
}

double bce(const Eigen::ArrayXd& targets, const Eigen::ArrayXd& probs) {
  if (targets.size() != probs.size() || targets.size() == 0) throw LengthError("bce: length mismatch");
  const Eigen::ArrayXd p = probs.max(kProbClip).min(1.0 - kProbClip);
  return -(targets * p.log() + (1.0 - targets) * (1.0 - p).log()).mean();
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(outer_lr > 0.0) || !(inner_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (P < 1 || Q < 1) throw ConfigError("P and Q must be at least 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
  if (validation_size < 1) throw ConfigError("validation_size must be at least 1");
}

void TrainerSetup::validate() const {
  encoder.validate();
  decoder.validate();
  train.validate();
  weights.validate();
  noise.validate();
  if (encoder.payload_bits != decoder.payload_bits) throw ConfigError("encoder and decoder payload_bits differ");
  if (encoder.image_side != decoder.image_side) throw ConfigError("encoder and decoder image_side differ");
}

TrainerSetup desk_preset() {
  TrainerSetup s;
  s.encoder.carrier_channels = 16;
  s.encoder.carrier_blocks = 3;
  s.encoder.payload_channels = 16;
  s.encoder.seed_channels = 64;
  s.encoder.residual_scale = 0.02f;
  s.decoder.channels = {16, 32, 32, 64};
  s.train.epochs = 100;
  s.train.batch_size = 8;
  s.train.outer_lr = 1e-3;
  s.train.inner_lr = 1e-3;
  s.train.checkpoint_every = 25;
  s.train.validation_size = 8;
  return s;
}

TrainerState init_state(const TrainerSetup& setup) {
  setup.validate();
  TrainerState s;
  s.phi = codec::init_encoder(setup.encoder, setup.train.seed * 2 + 1);
  s.dec = codec::init_decoder(setup.decoder, setup.train.seed * 2 + 2);
  s.enc_opt = Adam<float>(s.phi, float(setup.train.outer_lr));
  s.dec_opt = Adam<float>(s.dec, float(setup.train.outer_lr));
  return s;
}

std::map<int, int> assign_targets(const io::IdentityCorpus& corpus, std::uint64_t seed) {
  const auto sources = corpus.identities(io::Split::train);
  const auto targets = corpus.identities(io::Split::target);
  if (targets.empty()) throw DataError("corpus has no target identities");
  std::mt19937_64 rng(seed ^ kTargetStream);
  std::map<int, int> out;
  for (int s : sources) out[s] = targets[std::size_t(rng() % targets.size())];
  return out;
}

TrainerState train(const io::IdentityCorpus& corpus, const fr::SurrogatePool& pool, const TrainerSetup& setup,
                   const TrainOptions& opts) {
  return train(corpus, pool, setup, init_state(setup), opts);
}

TrainerState train(const io::IdentityCorpus& corpus, const fr::SurrogatePool& pool, const TrainerSetup& setup,
                   TrainerState state, const TrainOptions& opts) {
  setup.validate();
  corpus.validate();
  const auto& tc = setup.train;
  if (pool.meta_train.size() != std::size_t(tc.P) || pool.meta_test.size() != std::size_t(tc.Q)) {
    throw ConfigError("pool partition does not match P=" + std::to_string(tc.P) + ", Q=" + std::to_string(tc.Q));
  }
  StepModels<float> models{setup.encoder, setup.decoder, surrogates_of<float>(pool.meta_train, tc.allow_untrained),
                           surrogates_of<float>(pool.meta_test, tc.allow_untrained)};
  const BatchSampler sampler(corpus, assign_targets(corpus, tc.seed), setup.encoder.payload_bits);

  const std::vector<int> train_idx = corpus.indices(io::Split::train);
  if (train_idx.empty()) throw DataError("corpus has no training images");

  // Fixed validation batch from the test split.
  StepBatch<float> val_batch;
  {
    std::vector<int> test_idx = corpus.indices(io::Split::test);
    if (test_idx.empty()) throw DataError("corpus has no test images for validation");
    std::mt19937_64 vrng(tc.seed ^ kValidationStream);
    std::shuffle(test_idx.begin(), test_idx.end(), vrng);
    test_idx.resize(std::min<std::size_t>(test_idx.size(), std::size_t(tc.validation_size)));
    std::sort(test_idx.begin(), test_idx.end());
    std::uint64_t unused = 0;
    val_batch = sampler.draw(test_idx, vrng, unused);
  }

  std::mt19937_64 data_rng = rng_from(state.data_rng, tc.seed);
  std::mt19937_64 noise_rng = rng_from(state.noise_rng, tc.seed ^ kNoiseStream);

  StepOptions step_opts;
  step_opts.inner_lr = tc.inner_lr;
  step_opts.meta = tc.meta;
  step_opts.second_order = tc.second_order;
  step_opts.noise = setup.noise;

  std::optional<fs::path> log_file;
  if (opts.checkpoint_dir) {
    fs::create_directories(*opts.checkpoint_dir);
    log_file = *opts.checkpoint_dir / "train_log.jsonl";
    write_log(*log_file, state.history);
  }

  auto save_to = [&](const std::string& sub) {
    if (opts.checkpoint_dir) save_checkpoint(*opts.checkpoint_dir / sub / "model.dwa", setup, state);
  };

  while (state.epoch < tc.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = state.epoch + 1;
    std::vector<int> order = train_idx;
    std::shuffle(order.begin(), order.end(), data_rng);
    int batches = 0;
    rec.batch_hash = 1469598103934665603ull;
    for (std::size_t first = 0; first < order.size(); first += std::size_t(tc.batch_size)) {
      const std::vector<int> carriers(order.begin() + std::ptrdiff_t(first),
                                      order.begin() + std::ptrdiff_t(std::min(order.size(), first + tc.batch_size)));
      std::uint64_t h = 1469598103934665603ull;
      const auto batch = sampler.draw(carriers, data_rng, h);
      rec.batch_hashes.push_back(h);
      rec.batch_hash = fnv(rec.batch_hash, h);
      step_opts.noise_choice = noise::draw_noise(setup.noise, noise_rng);
      rec.noise_ops.push_back(noise::to_string(step_opts.noise_choice.op));

      StepResult<float> step;
      try {
        step = compute_step(models, state.phi, state.dec, batch, setup.weights, step_opts);
        if (!step.grad_encoder.all_finite()) throw TrainingDivergence("grad_encoder", "encoder gradient is not finite");
        if (!step.grad_decoder.all_finite()) throw TrainingDivergence("grad_decoder", "decoder gradient is not finite");
      } catch (const TrainingDivergence&) {
        // Parameters are untouched by the failed step, so they are the last good ones.
        save_to("last_good");
        throw;
      }
      state.enc_opt.step(state.phi, step.grad_encoder);
      state.dec_opt.step(state.dec, step.grad_decoder);
      rec.mean += step.losses;
      ++batches;
    }
    rec.mean /= double(batches);

    StepOptions val_opts = step_opts;
    val_opts.want_gradients = false;
    val_opts.noise_choice = {};
    rec.validation = compute_step(models, state.phi, state.dec, val_batch, setup.weights, val_opts).losses.l_dip;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    state.epoch = rec.epoch;
    state.data_rng = rng_state(data_rng);
    state.noise_rng = rng_state(noise_rng);
    state.history.push_back(rec);
    const bool improved = rec.validation < state.best_validation;
    if (improved) {
      state.best_validation = rec.validation;
      state.best_epoch = rec.epoch;
    }
    if (log_file) append_log(*log_file, rec);
    if (improved) save_to("best");
    if (rec.epoch % tc.checkpoint_every == 0 || rec.epoch == tc.epochs) save_to("ckpt_" + std::to_string(rec.epoch));
    if (opts.verbose) {
      std::cerr << "epoch " << rec.epoch << "/" << tc.epochs << "  l_dip " << rec.mean.l_dip << "  adv "
                << rec.mean.l_adv_total << "  inv " << rec.mean.l_inv_total << "  wm " << rec.mean.l_wm_total
                << "  val " << rec.validation << "  (" << rec.seconds << " s)\n";
    }
    if (opts.on_epoch && !opts.on_epoch(rec)) break;
  }
  return state;
}

void save_checkpoint(const fs::path& file, const TrainerSetup& setup, const TrainerState& state) {
  archive::Archive a;
  a.manifest["kind"] = "dip_watermark";
  a.manifest["setup"] = config::to_json(setup);
  a.manifest["epoch"] = state.epoch;
  a.manifest["data_rng"] = state.data_rng;
  a.manifest["noise_rng"] = state.noise_rng;
  a.manifest["best_validation"] =
      std::isfinite(state.best_validation) ? archive::Json(state.best_validation) : archive::Json(nullptr);
  a.manifest["best_epoch"] = state.best_epoch;
  a.manifest["enc_opt_t"] = state.enc_opt.t;
  a.manifest["dec_opt_t"] = state.dec_opt.t;
  archive::Json hist = archive::Json::array();
  for (const auto& r : state.history) hist.push_back(record_json(r));
  a.manifest["history"] = std::move(hist);
  a.add("encoder", state.phi);
  a.add("decoder", state.dec);
  a.add("enc_opt.m", state.enc_opt.m);
  a.add("enc_opt.v", state.enc_opt.v);
  a.add("dec_opt.m", state.dec_opt.m);
  a.add("dec_opt.v", state.dec_opt.v);
  archive::save(file, a);
}

Checkpoint load_checkpoint(const fs::path& file) {
  const auto a = archive::load(file);
  const auto& m = a.manifest;
  if (m.value("kind", "") != "dip_watermark") throw IoError(file.string() + " is not a watermark checkpoint");
  Checkpoint c;
  try {
    c.setup = config::setup_from_json(m.at("setup"));
    auto& s = c.state;
    s.epoch = m.at("epoch").get<int>();
    s.data_rng = m.at("data_rng").get<std::string>();
    s.noise_rng = m.at("noise_rng").get<std::string>();
    s.best_validation = m.at("best_validation").is_null() ? std::numeric_limits<double>::infinity()
                                                          : m.at("best_validation").get<double>();
    s.best_epoch = m.at("best_epoch").get<int>();
    for (const auto& r : m.at("history")) s.history.push_back(record_from_json(r));
    s.phi = a.group("encoder");
    s.dec = a.group("decoder");
    s.enc_opt = Adam<float>(s.phi, float(c.setup.train.outer_lr));
    s.dec_opt = Adam<float>(s.dec, float(c.setup.train.outer_lr));
    s.enc_opt.m = a.group("enc_opt.m");
    s.enc_opt.v = a.group("enc_opt.v");
    s.dec_opt.m = a.group("dec_opt.m");
    s.dec_opt.v = a.group("dec_opt.v");
    s.enc_opt.t = m.at("enc_opt_t").get<std::int64_t>();
    s.dec_opt.t = m.at("dec_opt_t").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(file.string() + ": malformed checkpoint manifest: " + e.what());
  }
  codec::init_encoder(c.setup.encoder, 0).require_same_layout(c.state.phi, "checkpoint encoder");
  codec::init_decoder(c.setup.decoder, 0).require_same_layout(c.state.dec, "checkpoint decoder");
  return c;
}

fs::path resolve_checkpoint(const fs::path& path) {
  if (fs::is_directory(path)) {
    if (fs::exists(path / "model.dwa")) return path / "model.dwa";
    if (fs::exists(path / "best" / "model.dwa")) return path / "best" / "model.dwa";
    throw IoError("no model.dwa under " + path.string());
  }
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return path;
}

std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  long best_epoch = -1;
  if (!fs::is_directory(dir)) return best;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || !name.starts_with("ckpt_")) continue;
    char* end = nullptr;
    const long epoch = std::strtol(name.c_str() + 5, &end, 10);
    if (*end != '\0' || !fs::exists(entry.path() / "model.dwa")) continue;
    if (epoch > best_epoch) {
      best_epoch = epoch;
      best = entry.path() / "model.dwa";
    }
  }
  return best;
}

TrainerState resume_or_init(const fs::path& dir, const TrainerSetup& setup) {
  const auto latest = latest_checkpoint(dir);
  if (!latest) return init_state(setup);
  auto c = load_checkpoint(*latest);
  TrainerSetup saved = c.setup;
  saved.train.epochs = setup.train.epochs;
  if (!(saved == setup)) {
    throw ConfigError("checkpoint " + latest->string() + " was written with different settings");
  }
  if (c.state.epoch > setup.train.epochs) {
    throw ConfigError("checkpoint " + latest->string() + " is past the configured epoch count");
  }
  return std::move(c.state);
}

}  // namespace dipwm::meta
