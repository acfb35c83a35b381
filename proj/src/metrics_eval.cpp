#include "dipwm/metrics_eval.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "dipwm/archive.hpp"
#include "dipwm/config.hpp"
#include "dipwm/imaging_io.hpp"
#include "dipwm/watermark_codec.hpp"

namespace dipwm::eval {

namespace fs = std::filesystem;

double attack_success_rate(const fr::EmbedderModel& model, const ImageTensor& x_hat, const ImageTensor& x_t) {
  if (!model.tau) throw CalibrationError("model " + model.name() + " has no calibrated threshold");
  if (!(x_hat.shape == x_t.shape)) throw ArgumentError("attack_success_rate: batches are not aligned");
  return attack_success_rate(fr::cosine_rows(fr::embed(model, x_t), fr::embed(model, x_hat)), *model.tau);
}

namespace {

Eigen::VectorXd gaussian_window() {
  Eigen::VectorXd g(kSsimWindow);
  const int half = kSsimWindow / 2;
  for (int i = 0; i < kSsimWindow; ++i) g[i] = std::exp(-double((i - half) * (i - half)) / (2 * kSsimSigma * kSsimSigma));
  return g / g.sum();
}

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Separable valid-mode filtering with the SSIM window.
Plane filter_valid(const Plane& in, const Eigen::VectorXd& g) {
  const Eigen::Index k = g.size();
  const Eigen::Index oh = in.rows() - k + 1, ow = in.cols() - k + 1;
  Plane tmp = Plane::Zero(in.rows(), ow);
  for (Eigen::Index i = 0; i < k; ++i) tmp += g[i] * in.middleCols(i, ow);
  Plane out = Plane::Zero(oh, ow);
  for (Eigen::Index i = 0; i < k; ++i) out += g[i] * tmp.middleRows(i, oh);
  return out;
}

}  // namespace

Eigen::VectorXd ssim_per_image(const ImageTensor& x, const ImageTensor& y) {
  if (!(x.shape == y.shape)) throw ArgumentError("ssim: shapes " + to_string(x.shape) + " and " + to_string(y.shape));
  if (x.shape.h < kSsimWindow || x.shape.w < kSsimWindow) throw ArgumentError("ssim: image smaller than the window");
  const Eigen::VectorXd g = gaussian_window();
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
  const Shape s = x.shape;
  Eigen::VectorXd out(s.n);
  for (int n = 0; n < s.n; ++n) {
    double total = 0.0;
    for (int c = 0; c < s.c; ++c) {
      const auto plane = [&](const ImageTensor& t) {
        return Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                   t.item(n) + std::ptrdiff_t(c) * s.h * s.w, s.h, s.w)
            .cast<double>()
            .eval();
      };
      const Plane a = plane(x), b = plane(y);
      const Plane mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
      const Plane var_a = filter_valid(a * a, g) - mu_a * mu_a;
      const Plane var_b = filter_valid(b * b, g) - mu_b * mu_b;
      const Plane cov = filter_valid(a * b, g) - mu_a * mu_b;
      const Plane map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      total += map.mean();
    }
    out[n] = total / s.c;
  }
  return out;
}

double ssim(const ImageTensor& x, const ImageTensor& y) {
  if (x.shape.n == 0) throw EmptyInputError("ssim: empty batch");
  return ssim_per_image(x, y).mean();
}

double psnr(const ImageTensor& x, const ImageTensor& y) {
  if (!(x.shape == y.shape)) throw ArgumentError("psnr: shapes " + to_string(x.shape) + " and " + to_string(y.shape));
  if (x.size() == 0) throw EmptyInputError("psnr: empty batch");
  const double mse = (x.data.cast<double>() - y.data.cast<double>()).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// ---------------------------------------------------------------------------

std::string to_string(AttackMethod m) { return m == AttackMethod::pgd ? "pgd" : "fgsm"; }

void AttackSpec::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be positive");
  if (step_size < 0.0) throw ConfigError("attack step_size must be non-negative");
  if (iterations < 0) throw ConfigError("attack iterations must be non-negative");
  if (method == AttackMethod::fgsm && iterations > 1) throw ConfigError("fgsm takes a single iteration");
  if (!(ssim_tolerance > 0.0) || ssim_target > 1.0) throw ConfigError("attack SSIM budget is invalid");
  if (max_rounds < 0) throw ConfigError("attack max_rounds must be non-negative");
}

ImageTensor perturb(const ImageTensor& x_s, const ImageTensor& x_t, const std::vector<fr::EmbedderModel>& ensemble,
                    const AttackSpec& spec) {
  spec.validate();
  if (!(x_s.shape == x_t.shape)) throw ArgumentError("perturb: carrier and target batches differ in shape");
  if (ensemble.empty()) throw ArgumentError("perturb: empty ensemble");
  if (spec.iterations == 0) return x_s;
  const auto models = meta::surrogates_of<float>(ensemble, true);
  std::vector<Tensor<float>> e_t;
  for (const auto& m : models) e_t.push_back(meta::detail::target_embedding(m, x_t));
  const float eps = float(spec.epsilon);
  const float alpha = float(spec.step_size > 0.0            ? spec.step_size
                            : spec.method == AttackMethod::fgsm ? spec.epsilon
                                                                : 2.5 * spec.epsilon / spec.iterations);
  const auto lo = (x_s.data - eps).max(0.0f).eval();
  const auto hi = (x_s.data + eps).min(1.0f).eval();
  ImageTensor x = x_s;
  for (int it = 0; it < spec.iterations; ++it) {
    Tape<float> tape;
    auto xv = tape.variable(x);
    std::vector<std::pair<float, ops::Var<float>>> terms;
    for (std::size_t i = 0; i < models.size(); ++i) {
      Bound<float> p(tape, models[i].params, false);
      auto e = fr::embed(tape, models[i].config, p, xv);
      terms.emplace_back(1.0f / float(models.size()), meta::adversarial_loss(tape, e, tape.constant(e_t[i])));
    }
    tape.backward(meta::detail::weighted_sum(tape, terms));
    // Descending 1 - cos is ascending cos.
    x.data = (x.data - alpha * tape.grad(xv).data.sign()).max(lo).min(hi);
  }
  return x;
}

AttackResult pgd_attack(const ImageTensor& x_s, const ImageTensor& x_t, const std::vector<fr::EmbedderModel>& ensemble,
                        AttackSpec spec) {
  spec.validate();
  if (spec.method == AttackMethod::fgsm) spec.iterations = 1;
  AttackResult best;
  double best_gap = std::numeric_limits<double>::infinity();
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  double eps = spec.epsilon;
  const int rounds = std::max(1, spec.max_rounds);
  for (int r = 1; r <= rounds; ++r) {
    AttackSpec s = spec;
    s.epsilon = eps;
    ImageTensor images = perturb(x_s, x_t, ensemble, s);
    const double q = ssim(x_s, images);
    const double gap = std::abs(q - spec.ssim_target);
    if (gap < best_gap) {
      best_gap = gap;
      best = {std::move(images), eps, q, r, gap <= spec.ssim_tolerance};
    }
    best.rounds = r;
    if (gap <= spec.ssim_tolerance || spec.max_rounds == 0) break;
    if (q > spec.ssim_target) {
      lo = eps;
      eps = std::isinf(hi) ? eps * 2.0 : (lo + hi) / 2.0;
    } else {
      hi = eps;
      eps = (lo + hi) / 2.0;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

void EvalReport::validate() const {
  std::set<std::string> models, conditions;
  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& r : rows) {
    for (double v : {r.asr, r.baseline_asr, r.acc}) {
      if (!(v >= 0.0 && v <= 1.0)) throw NumericError("report rate out of [0, 1] for " + r.model + "/" + r.condition);
    }
    if (!(r.mean_ssim >= -1.0 && r.mean_ssim <= 1.0)) throw NumericError("report SSIM out of range for " + r.model);
    models.insert(r.model);
    conditions.insert(r.condition);
    if (!cells.emplace(r.model, r.condition).second) throw DataError("duplicate report row " + r.model + "/" + r.condition);
  }
  if (rows.size() != models.size() * conditions.size()) throw DataError("report rows do not form a model x condition grid");
}

const ReportRow& EvalReport::row(const std::string& model, const std::string& condition) const {
  for (const auto& r : rows) {
    if (r.model == model && r.condition == condition) return r;
  }
  throw ArgumentError("no report row for " + model + "/" + condition);
}

std::vector<ReportRow> EvalReport::rows_for(const std::string& role, const std::string& condition) const {
  std::vector<ReportRow> out;
  for (const auto& r : rows) {
    if (r.role == role && r.condition == condition) out.push_back(r);
  }
  return out;
}

namespace {

struct Sample {
  ImageTensor x_s;
  ImageTensor x_t;
  Tensor<float> payloads;
  ImageTensor x_hat;
};

Sample draw_sample(const meta::Checkpoint& ckpt, const io::IdentityCorpus& corpus, const EvalOptions& opts) {
  if (opts.images < 1) throw ArgumentError("evaluation needs at least one image");
  const auto targets = meta::assign_targets(corpus, ckpt.setup.train.seed);
  std::vector<int> carriers = corpus.indices(io::Split::test);
  if (carriers.empty()) throw DataError("corpus has no test images to evaluate");
  std::mt19937_64 rng(opts.seed);
  std::shuffle(carriers.begin(), carriers.end(), rng);
  carriers.resize(std::min<std::size_t>(carriers.size(), std::size_t(opts.images)));
  std::sort(carriers.begin(), carriers.end());

  std::vector<int> target_idx;
  for (int i : carriers) {
    std::vector<int> pool;
    for (int j : corpus.images_of(targets.at(corpus.labels[std::size_t(i)]))) {
      if (corpus.splits[std::size_t(j)] == io::Split::target) pool.push_back(j);
    }
    target_idx.push_back(pool[std::size_t(rng() % pool.size())]);
  }
  Sample s;
  s.x_s = corpus.gather(carriers);
  s.x_t = corpus.gather(target_idx);
  const int n = int(carriers.size());
  s.payloads = Tensor<float>(Shape{n, ckpt.setup.encoder.payload_bits, 1, 1});
  for (Eigen::Index k = 0; k < s.payloads.size(); ++k) s.payloads.data[k] = float(rng() >> 63);
  s.x_hat = io::quantize_8bit(codec::encode(s.x_s, s.payloads, ckpt.setup.encoder, ckpt.state.phi));
  return s;
}

struct Fnv {
  std::uint64_t h = 1469598103934665603ull;
  void mix(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 1099511628211ull;
    }
  }
  void mix(const std::string& s) {
    for (char c : s) mix(std::uint64_t(static_cast<unsigned char>(c)));
  }
};

/// Noise seed of one condition. It depends on the condition itself rather
/// than its position, so reports over different spec lists can be merged.
std::uint64_t condition_seed(std::uint64_t seed, const noise::EvalProcessingSpec& spec) {
  Fnv f;
  f.mix(seed);
  f.mix(noise::to_string(spec));
  return f.h;
}

std::string fingerprint(const meta::Checkpoint& ckpt, const EvalOptions& opts) {
  Fnv f;
  auto mix = [&](auto v) { f.mix(v); };
  mix(config::to_json(ckpt.setup).dump());
  mix(ckpt.state.phi.checksum());
  mix(ckpt.state.dec.checksum());
  mix(opts.seed);
  mix(std::uint64_t(opts.images));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(f.h));
  return buf;
}

}  // namespace

EvalReport evaluate(const meta::Checkpoint& ckpt, const fr::SurrogatePool& pool, const io::IdentityCorpus& corpus,
                    const std::vector<noise::EvalProcessingSpec>& specs, const EvalOptions& opts) {
  ckpt.setup.validate();
  corpus.validate();
  if (specs.empty()) throw ArgumentError("evaluate: no processing specs");
  std::vector<std::pair<const fr::EmbedderModel*, std::string>> models;
  for (const auto* m : pool.white_box()) models.emplace_back(m, "white-box");
  for (const auto& m : pool.held_out) models.emplace_back(&m, "black-box");
  for (const auto& [m, role] : models) {
    if (!m->tau) throw CalibrationError("model " + m->name() + " has no calibrated threshold");
  }

  const Sample s = draw_sample(ckpt, corpus, opts);
  const Eigen::VectorXd q = ssim_per_image(s.x_s, s.x_hat);
  const double quality_psnr = psnr(s.x_s, s.x_hat);
  const int n = s.x_s.shape.n;

  std::vector<ImageTensor> processed;
  std::vector<double> acc;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    processed.push_back(noise::eval_process(s.x_hat, specs[k], condition_seed(opts.seed, specs[k])));
    const auto logits = codec::decode(processed.back(), ckpt.setup.decoder, ckpt.state.dec);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      total += bit_accuracy(s.payloads.data.segment(Eigen::Index(i) * s.payloads.shape.per_item(), s.payloads.shape.per_item()),
                            codec::hard_bits(logits, i));
    }
    acc.push_back(total / n);
  }

  EvalReport report;
  report.fingerprint = fingerprint(ckpt, opts);
  for (const auto& [m, role] : models) {
    const Eigen::MatrixXf e_t = fr::embed(*m, s.x_t);
    const double baseline = attack_success_rate(fr::cosine_rows(e_t, fr::embed(*m, s.x_s)), *m->tau);
    for (std::size_t k = 0; k < specs.size(); ++k) {
      ReportRow r;
      r.model = m->name();
      r.role = role;
      r.condition = noise::to_string(specs[k]);
      r.images = n;
      r.tau = *m->tau;
      r.asr = attack_success_rate(fr::cosine_rows(e_t, fr::embed(*m, processed[k])), *m->tau);
      r.baseline_asr = baseline;
      r.acc = acc[k];
      r.mean_ssim = q.mean();
      r.min_ssim = q.minCoeff();
      r.psnr = quality_psnr;
      report.rows.push_back(std::move(r));
    }
  }
  report.validate();
  return report;
}

EvalReport evaluate_transfer(const meta::Checkpoint& ckpt, const fr::SurrogatePool& pool,
                             const io::IdentityCorpus& corpus, const EvalOptions& opts) {
  return evaluate(ckpt, pool, corpus, {noise::EvalProcessingSpec::identity()}, opts);
}

EvalReport evaluate_robustness(const meta::Checkpoint& ckpt, const fr::SurrogatePool& pool,
                               const io::IdentityCorpus& corpus, const std::vector<noise::EvalProcessingSpec>& specs,
                               const EvalOptions& opts) {
  return evaluate(ckpt, pool, corpus, specs, opts);
}

EvalReport merge(const EvalReport& a, const EvalReport& b) {
  if (a.fingerprint != b.fingerprint) throw ArgumentError("cannot merge reports of different runs");
  EvalReport out = a;
  out.rows.insert(out.rows.end(), b.rows.begin(), b.rows.end());
  std::stable_sort(out.rows.begin(), out.rows.end(), [&](const ReportRow& x, const ReportRow& y) {
    // Keep the model order of `a`; conditions follow in arrival order.
    auto rank = [&](const ReportRow& r) {
      for (std::size_t i = 0; i < a.rows.size(); ++i) {
        if (a.rows[i].model == r.model) return i;
      }
      return a.rows.size();
    };
    return rank(x) < rank(y);
  });
  out.validate();
  return out;
}

namespace {

std::ofstream open_out(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  return out;
}

archive::Json number(double v) { return std::isfinite(v) ? archive::Json(v) : archive::Json(nullptr); }

}  // namespace

void write_jsonl(const fs::path& file, const EvalReport& report) {
  auto out = open_out(file);
  for (const auto& r : report.rows) {
    archive::Json j;
    j["fingerprint"] = report.fingerprint;
    j["model"] = r.model;
    j["role"] = r.role;
    j["condition"] = r.condition;
    j["images"] = r.images;
    j["tau"] = r.tau;
    j["asr"] = r.asr;
    j["baseline_asr"] = r.baseline_asr;
    j["acc"] = r.acc;
    j["mean_ssim"] = r.mean_ssim;
    j["min_ssim"] = r.min_ssim;
    j["psnr"] = number(r.psnr);
    out << j.dump() << '\n';
  }
}

void write_csv(const fs::path& file, const EvalReport& report) {
  auto out = open_out(file);
  out << "model,role,condition,images,tau,asr,baseline_asr,acc,mean_ssim,min_ssim,psnr\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.4f", r.images, r.tau, r.asr, r.baseline_asr,
                  r.acc, r.mean_ssim, r.min_ssim, r.psnr);
    out << r.model << ',' << r.role << ',' << r.condition << ',' << buf << '\n';
  }
}

// ---------------------------------------------------------------------------

AblationResult ablation_without_meta(const io::IdentityCorpus& corpus, const fr::SurrogatePool& pool,
                                     const meta::TrainerSetup& with_meta, const meta::TrainerSetup& without_meta,
                                     const AblationOptions& opts) {
  if (!with_meta.train.meta || without_meta.train.meta) {
    throw ArgumentError("ablation arms must be meta on versus meta off");
  }
  meta::TrainerSetup aligned = without_meta;
  aligned.train.meta = true;
  if (!(aligned == with_meta)) throw ArgumentError("ablation arms differ in more than the meta switch");

  auto run = [&](const meta::TrainerSetup& setup, const std::string& name) {
    meta::TrainOptions t;
    t.verbose = opts.verbose;
    meta::TrainerState state;
    if (opts.dir) {
      t.checkpoint_dir = *opts.dir / name;
      state = meta::resume_or_init(*t.checkpoint_dir, setup);
    } else {
      state = meta::init_state(setup);
    }
    AblationArm arm;
    arm.model = {setup, meta::train(corpus, pool, setup, std::move(state), t)};
    std::vector<noise::EvalProcessingSpec> specs{noise::EvalProcessingSpec::identity()};
    for (const auto& s : noise::default_robustness_specs()) specs.push_back(s);
    arm.report = evaluate(arm.model, pool, corpus, specs, opts.eval);
    return arm;
  };

  AblationResult out;
  out.meta = run(with_meta, "meta");
  out.without_meta = run(without_meta, "without_meta");
  const auto& ha = out.meta.model.state.history;
  const auto& hb = out.without_meta.model.state.history;
  out.same_data_order = ha.size() == hb.size() && std::equal(ha.begin(), ha.end(), hb.begin(), [](const auto& a, const auto& b) {
                          return a.batch_hashes == b.batch_hashes;
                        });
  return out;
}

}  // namespace dipwm::eval
