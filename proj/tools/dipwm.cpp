// Command-line front end: train, embed, extract, verify, evaluate, calibrate
// and register.
//
// Exit codes: 0 success or match, 1 no-match, 2 usage or configuration
// error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <random>

#include "dipwm/config.hpp"
#include "dipwm/imaging_io.hpp"
#include "dipwm/meta_trainer.hpp"
#include "dipwm/metrics_eval.hpp"
#include "dipwm/pipeline.hpp"
#include "dipwm/watermark_codec.hpp"

using namespace dipwm;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kNoMatch = 1, kUsage = 2, kRuntime = 3 };

struct Common {
  std::uint64_t seed = 0;
  bool seed_given = false;
};

meta::Checkpoint open_checkpoint(const fs::path& path) { return meta::load_checkpoint(meta::resolve_checkpoint(path)); }

ImageTensor open_image(const fs::path& file, const codec::EncoderConfig& enc) {
  auto x = io::load_image(file);
  if (x.shape.h != enc.image_side) x = io::resize_bilinear(x, enc.image_side, enc.image_side);
  return x;
}

// --- train -----------------------------------------------------------------

int cmd_train(const fs::path& config_file, const Common& common, bool quiet) {
  auto cfg = config::load_run_config(config_file);
  if (common.seed_given) cfg.setup.train.seed = common.seed;
  const auto corpus = pipeline::load_corpus(cfg.corpus);
  const auto pool = pipeline::prepare_pool(corpus, cfg, !quiet);
  meta::TrainOptions opts;
  opts.checkpoint_dir = cfg.checkpoint_dir();
  opts.verbose = !quiet;
  auto state = meta::resume_or_init(cfg.checkpoint_dir(), cfg.setup);
  if (state.epoch > 0 && !quiet) std::cerr << "resuming after epoch " << state.epoch << "\n";
  state = meta::train(corpus, pool, cfg.setup, std::move(state), opts);
  std::cout << "epochs " << state.epoch << "\n";
  if (!state.history.empty()) std::cout << "l_dip " << state.history.back().mean.l_dip << "\n";
  std::cout << "checkpoints " << cfg.checkpoint_dir().string() << "\n";
  return kOk;
}

// --- embed / extract / verify ------------------------------------------------

int cmd_embed(const fs::path& ckpt_path, const fs::path& image, const std::string& hex, const fs::path& out) {
  const auto ckpt = open_checkpoint(ckpt_path);
  const auto& enc = ckpt.setup.encoder;
  const codec::Payload w = io::payload_from_hex(hex, enc.payload_bits);
  const auto x = open_image(image, enc);
  const auto x_hat = io::quantize_8bit(codec::encode(x, w, enc, ckpt.state.phi));
  io::save_png(out, x_hat);
  std::cout << "wrote " << out.string() << "\n";
  std::cout << "ssim " << std::fixed << std::setprecision(4) << eval::ssim(x, x_hat) << "\n";
  return kOk;
}

struct Extracted {
  codec::Payload bits;
  codec::Payload probs;
};

Extracted extract(const meta::Checkpoint& ckpt, const fs::path& image) {
  const auto x = open_image(image, ckpt.setup.encoder);
  const auto logits = codec::decode(x, ckpt.setup.decoder, ckpt.state.dec);
  return {codec::hard_bits(logits, 0), codec::bit_probabilities(logits, 0)};
}

int cmd_extract(const fs::path& ckpt_path, const fs::path& image) {
  const auto ckpt = open_checkpoint(ckpt_path);
  const auto e = extract(ckpt, image);
  const Eigen::ArrayXf confidence = e.probs.max(1.0f - e.probs);
  std::cout << "payload " << io::payload_to_hex(e.bits) << "\n";
  std::cout << "p(bit=1)";
  for (Eigen::Index i = 0; i < e.probs.size(); ++i) std::cout << ' ' << std::fixed << std::setprecision(3) << e.probs[i];
  std::cout << "\nmean confidence " << std::setprecision(4) << confidence.mean() << "\n";
  return kOk;
}

int cmd_verify(const fs::path& ckpt_path, const fs::path& image, const std::string& user, const fs::path& registry,
               double min_acc) {
  const auto ckpt = open_checkpoint(ckpt_path);
  const auto reg = io::PayloadRegistry::load(registry, ckpt.setup.encoder.payload_bits);
  const codec::Payload expected = reg.lookup(user);
  const auto e = extract(ckpt, image);
  const double acc = eval::bit_accuracy(expected, e.bits);
  const bool match = acc >= min_acc;
  std::cout << (match ? "match" : "no-match") << " user " << user << " acc " << std::fixed << std::setprecision(4) << acc
            << "\n";
  return match ? kOk : kNoMatch;
}

// --- register ----------------------------------------------------------------

int cmd_register(const fs::path& registry, const std::string& user, const std::string& hex, int bits,
                 const Common& common) {
  auto reg = fs::exists(registry) ? io::PayloadRegistry::load(registry, bits) : io::PayloadRegistry(bits);
  codec::Payload w;
  if (!hex.empty()) {
    w = io::payload_from_hex(hex, bits);
  } else {
    // Seeded by user id as well, so one seed can enrol many users.
    std::vector<std::uint32_t> key{std::uint32_t(common.seed), std::uint32_t(common.seed >> 32)};
    for (unsigned char c : user) key.push_back(c);
    std::seed_seq seq(key.begin(), key.end());
    std::mt19937_64 rng(seq);
    w = codec::Payload(bits);
    for (int i = 0; i < bits; ++i) w[i] = float(rng() >> 63);
  }
  reg.add(user, w);
  reg.save(registry);
  std::cout << user << '\t' << io::payload_to_hex(w) << "\n";
  return kOk;
}

// --- evaluate / calibrate ------------------------------------------------------

int cmd_evaluate(const fs::path& config_file, fs::path ckpt_path, const std::vector<std::string>& processing,
                 fs::path out, int images, const Common& common) {
  const auto cfg = config::load_run_config(config_file);
  if (ckpt_path.empty()) ckpt_path = cfg.checkpoint_dir() / "best";
  if (out.empty()) out = cfg.report_dir();
  std::vector<noise::EvalProcessingSpec> specs;
  for (const auto& p : processing) specs.push_back(noise::parse_processing(p));
  if (specs.empty()) specs = noise::default_robustness_specs();

  const auto ckpt = open_checkpoint(ckpt_path);
  const auto corpus = pipeline::load_corpus(cfg.corpus);
  const auto pool = pipeline::prepare_pool(corpus, cfg);
  eval::EvalOptions opts;
  opts.seed = common.seed_given ? common.seed : cfg.eval_seed;
  opts.images = images > 0 ? images : cfg.eval_images;
  const auto report = eval::merge(eval::evaluate_transfer(ckpt, pool, corpus, opts),
                                  eval::evaluate_robustness(ckpt, pool, corpus, specs, opts));
  eval::write_jsonl(out / "report.jsonl", report);
  eval::write_csv(out / "report.csv", report);

  std::printf("%-14s %-10s %-22s %6s %6s %6s %6s\n", "model", "role", "condition", "asr", "base", "acc", "ssim");
  for (const auto& r : report.rows) {
    std::printf("%-14s %-10s %-22s %6.3f %6.3f %6.3f %6.3f\n", r.model.c_str(), r.role.c_str(), r.condition.c_str(),
                r.asr, r.baseline_asr, r.acc, r.mean_ssim);
  }
  std::cout << "reports " << (out / "report.jsonl").string() << " " << (out / "report.csv").string() << "\n";
  return kOk;
}

int cmd_calibrate(const fs::path& config_file, double far) {
  auto cfg = config::load_run_config(config_file);
  if (far > 0.0) cfg.surrogates.far = far;
  const auto corpus = pipeline::load_corpus(cfg.corpus);
  const auto models = pipeline::prepare_surrogates(corpus, cfg, true);
  for (const auto& m : models) {
    const double tau = fr::calibrate_threshold(m, corpus, cfg.surrogates.far);
    std::printf("%-14s tau %.4f  verification accuracy %.4f\n", m.name().c_str(), tau,
                fr::verification_accuracy(m, corpus, io::Split::train, io::Split::test));
  }
  return kOk;
}

int exit_code_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const ArgumentError& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const ParseError& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const LengthError& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const std::exception& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::tune_allocator();
  CLI::App app{"Identity watermarking with adversarial face-recognition steering"};
  app.require_subcommand(1);

  Common common;
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed",
        [&](std::uint64_t s) {
          common.seed = s;
          common.seed_given = true;
        },
        "Random seed");
  };

  fs::path config_file, ckpt, image, out, registry;
  std::string payload, user;
  double min_acc = 0.9, far = 0.0;
  int bits = 50, images = 0;
  bool quiet = false;
  std::vector<std::string> processing;

  auto* train = app.add_subcommand("train", "Train surrogates if needed, then the encoder and decoder");
  train->add_option("config", config_file, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  train->add_flag("-q,--quiet", quiet, "No per-epoch progress");
  add_seed(train);

  auto* embed = app.add_subcommand("embed", "Write a watermarked copy of an image");
  embed->add_option("--ckpt", ckpt, "Checkpoint file or directory")->required()->check(CLI::ExistingPath);
  embed->add_option("--image", image, "Input image")->required()->check(CLI::ExistingFile);
  embed->add_option("--payload", payload, "Payload as hex")->required();
  embed->add_option("--out", out, "Output PNG")->required();
  add_seed(embed);

  auto* extract = app.add_subcommand("extract", "Decode the payload of an image");
  extract->add_option("--ckpt", ckpt, "Checkpoint file or directory")->required()->check(CLI::ExistingPath);
  extract->add_option("--image", image, "Input image")->required()->check(CLI::ExistingFile);
  add_seed(extract);

  auto* verify = app.add_subcommand("verify", "Check an image against a registered user");
  verify->add_option("--ckpt", ckpt, "Checkpoint file or directory")->required()->check(CLI::ExistingPath);
  verify->add_option("--image", image, "Input image")->required()->check(CLI::ExistingFile);
  verify->add_option("--user", user, "User id")->required();
  verify->add_option("--registry", registry, "Registry file")->required()->check(CLI::ExistingFile);
  verify->add_option("--min-acc", min_acc, "Bit accuracy needed for a match")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  add_seed(verify);

  auto* evaluate = app.add_subcommand("evaluate", "Transfer and robustness reports for a checkpoint");
  evaluate->add_option("config", config_file, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--ckpt", ckpt, "Checkpoint (default: the run's best)")->check(CLI::ExistingPath);
  evaluate->add_option("--processing", processing, "Processing spec, repeatable (e.g. jpeg:30)");
  evaluate->add_option("--out", out, "Report directory (default: the run's report directory)");
  evaluate->add_option("--images", images, "Test images to use (default: from the configuration)");
  add_seed(evaluate);

  auto* calibrate = app.add_subcommand("calibrate", "Train or load surrogates and print their thresholds");
  calibrate->add_option("config", config_file, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  calibrate->add_option("--far", far, "False accept rate (default: from the configuration)")->check(CLI::Range(0.0, 1.0));
  add_seed(calibrate);

  auto* reg = app.add_subcommand("register", "Add a user payload to a registry");
  reg->add_option("--registry", registry, "Registry file (created if absent)")->required();
  reg->add_option("--user", user, "User id")->required();
  reg->add_option("--payload", payload, "Payload as hex (default: random)");
  reg->add_option("--bits", bits, "Payload length")->capture_default_str()->check(CLI::PositiveNumber);
  add_seed(reg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(config_file, common, quiet);
    if (*embed) return cmd_embed(ckpt, image, payload, out);
    if (*extract) return cmd_extract(ckpt, image);
    if (*verify) return cmd_verify(ckpt, image, user, registry, min_acc);
    if (*evaluate) return cmd_evaluate(config_file, ckpt, processing, out, images, common);
    if (*calibrate) return cmd_calibrate(config_file, far);
    if (*reg) return cmd_register(registry, user, payload, bits, common);
  } catch (...) {
    return exit_code_of(std::current_exception());
  }
  return kUsage;
}
