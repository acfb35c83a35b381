#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "dipwm/config.hpp"
#include "dipwm/imaging_io.hpp"
#include "dipwm/meta_trainer.hpp"
#include "gradcheck.hpp"

using namespace dipwm;
using namespace dipwm::meta;
using namespace dipwm::testing;
namespace fs = std::filesystem;

namespace {

constexpr int kSide = 16;
constexpr int kBits = 8;

codec::EncoderConfig tiny_encoder() {
  codec::EncoderConfig c;
  c.payload_bits = kBits;
  c.image_side = kSide;
  c.carrier_channels = 4;
  c.carrier_blocks = 1;
  c.payload_channels = 4;
  c.seed_channels = 16;
  c.seed_side = 2;
  c.expand_stages = 3;
  c.cbam_reduction = 2;
  c.spatial_kernel = 3;
  return c;
}

codec::DecoderConfig tiny_decoder() {
  codec::DecoderConfig c;
  c.payload_bits = kBits;
  c.image_side = kSide;
  c.channels = {8, 16};
  return c;
}

TrainerSetup tiny_setup() {
  TrainerSetup s;
  s.encoder = tiny_encoder();
  s.decoder = tiny_decoder();
  s.encoder.residual_scale = 0.1f;
  s.train.epochs = 4;
  s.train.batch_size = 8;
  s.train.outer_lr = 1e-3;
  s.train.checkpoint_every = 1;
  s.train.validation_size = 4;
  s.train.seed = 5;
  return s;
}

/// Eight identities at 16x16: six sources, two targets.
const io::IdentityCorpus& tiny_corpus() {
  static const io::IdentityCorpus c = [] {
    auto full = io::generate_synthetic_corpus(8, 4, 3);
    full.images = io::resize_bilinear(full.images, kSide, kSide);
    return full;
  }();
  return c;
}

std::vector<fr::EmbedderModel> tiny_models() {
  std::vector<fr::EmbedderModel> out;
  std::uint64_t seed = 40;
  for (auto a : {fr::Arch::cnn4, fr::Arch::depthwise, fr::Arch::mini_residual, fr::Arch::cnn4_wide}) {
    auto m = fr::random_embedder(fr::EmbedderConfig{a, kSide, 8}, seed++);
    m.trained = true;
    out.push_back(std::move(m));
  }
  return out;
}

const fr::SurrogatePool& tiny_pool() {
  static const auto pool = fr::partition_pool(tiny_models(), 2, 1);
  return pool;
}

template <typename S>
StepModels<S> step_models(const fr::SurrogatePool& pool = tiny_pool()) {
  return {tiny_encoder(), tiny_decoder(), surrogates_of<S>(pool.meta_train, false), surrogates_of<S>(pool.meta_test, false)};
}

template <typename S>
StepBatch<S> random_batch(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  StepBatch<S> b;
  b.x_s = random_tensor(Shape{n, 3, kSide, kSide}, rng, 0.05, 0.95).cast<S>();
  b.x_t = random_tensor(Shape{n, 3, kSide, kSide}, rng, 0.05, 0.95).cast<S>();
  b.w = Tensor<S>(Shape{n, kBits, 1, 1});
  for (Eigen::Index i = 0; i < b.w.size(); ++i) b.w.data[i] = S(rng() >> 63);
  return b;
}

StepOptions identity_noise() {
  StepOptions o;
  o.noise.weights = {1.0, 0.0, 0.0};
  o.noise_choice = {noise::NoiseOp::identity, 0};
  return o;
}

/// Inference-path recomputation of the summed adversarial loss: encode,
/// embed, and take 1 - cos per row in double precision.
double adversarial_oracle(const std::vector<fr::EmbedderModel>& models, const ImageTensor& x_hat, const ImageTensor& x_t) {
  double total = 0.0;
  for (const auto& m : models) {
    const Eigen::MatrixXd a = fr::embed(m, x_hat).cast<double>();
    const Eigen::MatrixXd b = fr::embed(m, x_t).cast<double>();
    double sum = 0.0;
    for (Eigen::Index r = 0; r < a.rows(); ++r) sum += 1.0 - a.row(r).dot(b.row(r));
    total += sum / double(a.rows());
  }
  return total;
}

double bce_oracle(const std::vector<double>& w, const std::vector<double>& logits) {
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double p = 1.0 / (1.0 + std::exp(-logits[i]));
    p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
    sum += w[i] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
  }
  return sum / double(w.size());
}

double scalar_of(DTape& t, DVar v) { return t.value(v).data[0]; }

}  // namespace

TEST_CASE("reconstruction and adversarial losses") {
  DTape t;
  DTensor zero(Shape{2, 3, 4, 4}), one(Shape{2, 3, 4, 4});
  one.data.setOnes();
  DTensor half = zero;
  half.data.head(half.size() / 2).setConstant(0.5);
  CHECK(scalar_of(t, mse_loss(t, t.constant(one), t.constant(one))) == 0.0);
  CHECK(scalar_of(t, mse_loss(t, t.constant(zero), t.constant(one))) == 1.0);
  CHECK(scalar_of(t, mse_loss(t, t.constant(zero), t.constant(half))) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK_THROWS_AS(mse_loss(t, t.constant(zero), t.constant(DTensor(Shape{1, 3, 4, 4}))), ConfigError);

  DTensor e1(Shape{1, 4, 1, 1}), e2(Shape{1, 4, 1, 1});
  e1.data << 1, 0, 0, 0;
  e2.data << 0, 1, 0, 0;
  DTensor anti = e1;
  anti.data *= -1.0;
  CHECK(scalar_of(t, adversarial_loss(t, t.constant(e1), t.constant(e1))) == 0.0);
  CHECK(scalar_of(t, adversarial_loss(t, t.constant(e1), t.constant(e2))) == 1.0);
  CHECK(scalar_of(t, adversarial_loss(t, t.constant(e1), t.constant(anti))) == 2.0);
  CHECK_THROWS_AS(adversarial_loss(t, t.constant(DTensor(Shape{1, 4, 1, 1})), t.constant(e1)), NumericError);

  std::mt19937_64 rng(1);
  auto r = gradcheck(
      [](DTape& tp, const std::vector<DVar>& v) { return ops::add(tp, mse_loss(tp, v[0], v[1]), adversarial_loss(tp, v[2], v[3])); },
      {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 5, 1, 1}, rng),
       random_tensor({3, 5, 1, 1}, rng)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("binary cross-entropy") {
  DTape t;
  DTensor w(Shape{1, 2, 1, 1}), z(Shape{1, 2, 1, 1});
  w.data << 1, 0;
  CHECK(scalar_of(t, bce_loss(t, t.constant(z), t.constant(w))) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  z.data << 40, -40;
  CHECK(scalar_of(t, bce_loss(t, t.constant(z), t.constant(w))) <= 1e-6);
  CHECK(bce(Eigen::ArrayXd::Ones(3), Eigen::ArrayXd::Ones(3)) <= 1e-6);
  CHECK(bce((Eigen::ArrayXd(2) << 1, 0).finished(), Eigen::ArrayXd::Constant(2, 0.5)) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(bce_loss(t, t.constant(z), t.constant(DTensor(Shape{1, 3, 1, 1}))), LengthError);

  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + int(rng() % 40);
    DTensor logits = random_tensor(Shape{1, n, 1, 1}, rng, -20.0, 20.0);
    DTensor bits(Shape{1, n, 1, 1});
    for (int i = 0; i < n; ++i) bits.data[i] = double(rng() >> 63);
    const std::vector<double> wv(bits.data.begin(), bits.data.end()), zv(logits.data.begin(), logits.data.end());
    worst = std::max(worst, std::abs(scalar_of(t, bce_loss(t, t.constant(logits), t.constant(bits))) - bce_oracle(wv, zv)));
  }
  CHECK(worst < 1e-6);

  std::mt19937_64 rng2(3);
  DTensor bits(Shape{2, 5, 1, 1});
  for (Eigen::Index i = 0; i < bits.size(); ++i) bits.data[i] = double(rng2() >> 63);
  auto r = gradcheck([&](DTape& tp, const std::vector<DVar>& v) { return bce_loss(tp, v[0], tp.constant(bits)); },
                     {random_tensor({2, 5, 1, 1}, rng2, -3.0, 3.0)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("loss composition") {
  LossBreakdown zero;
  CHECK(total_losses(zero, LossWeights{}) == 0.0);

  LossBreakdown b;
  b.l_adv_tra = 0.01;
  b.l_inv_phi = 2.0;
  b.l_inv_tes = 2.0;
  b.l_wm_phi = 0.7;
  CHECK(total_losses(b, LossWeights{}) == doctest::Approx(1.135).epsilon(1e-14));
  CHECK(b.l_adv_total == 0.01);
  CHECK(b.l_inv_total == 2.0);
  CHECK(b.l_wm_total == 0.7);

  const LossWeights defaults;
  CHECK(defaults.adv == 100.0);
  CHECK(defaults.inv == 0.05);
  CHECK(defaults.wm == 0.05);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 1000; ++trial) {
    LossBreakdown p;
    p.l_inv_phi = u(rng);
    p.l_inv_tes = u(rng);
    p.l_adv_tra = u(rng);
    p.l_adv_tes = u(rng);
    p.l_wm_phi = u(rng);
    p.l_wm_tes = u(rng);
    const LossWeights w{u(rng) + 0.01, u(rng) + 0.01, u(rng) + 0.01};
    const double l = total_losses(p, w);
    CHECK(p.l_inv_total == (p.l_inv_phi + p.l_inv_tes) / 2.0);
    CHECK(p.l_adv_total == p.l_adv_tra + p.l_adv_tes);
    CHECK(p.l_wm_total == p.l_wm_phi + p.l_wm_tes);
    CHECK(l == w.adv * p.l_adv_total + w.inv * p.l_inv_total + w.wm * p.l_wm_total);
    CHECK(l == p.l_dip);
  }

  LossBreakdown bad;
  bad.l_wm_tes = std::nan("");
  try {
    total_losses(bad, LossWeights{});
    FAIL("expected TrainingDivergence");
  } catch (const TrainingDivergence& e) {
    CHECK(e.component() == "l_wm_tes");
  }
  CHECK_THROWS_AS(LossWeights({0.0, 1.0, 1.0}).validate(), ConfigError);
}

TEST_CASE("inner adaptation") {
  ParamSet<double> phi;
  DTensor v(Shape{1, 1, 1, 1});
  v.data[0] = 1.0;
  phi.add("phi", v);
  ParamSet<double> grad = phi;
  grad[0].data *= 2.0;  // d(phi^2)/d phi
  CHECK(inner_adapt(phi, grad, 0.1)[0].data[0] == doctest::Approx(0.8).epsilon(1e-15));

  const auto p = codec::init_encoder(tiny_encoder(), 3);
  CHECK(inner_adapt(p, p.zeros_like(), 0.5f) == p);

  std::mt19937_64 rng(4);
  ParamSet<float> g = p.zeros_like();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = random_tensor(g[i].shape, rng).cast<float>();
  const auto theta = inner_adapt(p, g, 1e-3f);
  float worst = 0.0f;
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (Eigen::Index k = 0; k < p[i].size(); ++k) {
      const float expect = p[i].data[k] - 1e-3f * g[i].data[k];
      worst = std::max(worst, std::abs(theta[i].data[k] - expect));
    }
  }
  CHECK(worst <= 1e-7f);
  CHECK(p.checksum() == codec::init_encoder(tiny_encoder(), 3).checksum());
}

TEST_CASE("meta-train and meta-test losses match an inference-path recomputation") {
  const auto models = step_models<float>();
  const auto phi = codec::init_encoder(tiny_encoder(), 8);
  const auto batch = random_batch<float>(3, 9);
  const ImageTensor x_hat = codec::encode(batch.x_s, batch.w, tiny_encoder(), phi);

  const auto tra = meta_train_adv_loss(models, phi, batch);
  REQUIRE(tra.per_model.size() == 2);
  CHECK(tra.l_adv_tra == doctest::Approx(adversarial_oracle(tiny_pool().meta_train, x_hat, batch.x_t)).epsilon(1e-5));
  CHECK(tra.l_adv_tra == doctest::Approx(tra.per_model[0] + tra.per_model[1]).epsilon(1e-6));
  for (std::size_t p = 0; p < 2; ++p) {
    CHECK(tra.per_model[p] == doctest::Approx(adversarial_oracle({tiny_pool().meta_train[p]}, x_hat, batch.x_t)).epsilon(1e-5));
  }
  auto single = models;
  single.meta_train.resize(1);
  CHECK(meta_train_adv_loss(single, phi, batch).l_adv_tra == tra.per_model[0]);

  const auto theta = inner_adapt(phi, tra.grads[0], 1e-2f);
  const ImageTensor x_tes = codec::encode(batch.x_s, batch.w, tiny_encoder(), theta);
  const auto tes = meta_test_losses(models, theta, batch);
  CHECK(tes.l_adv_tes == doctest::Approx(adversarial_oracle(tiny_pool().meta_test, x_tes, batch.x_t)).epsilon(1e-5));
  double mse = 0.0;
  for (Eigen::Index i = 0; i < x_tes.size(); ++i) {
    const double d = double(x_tes.data[i]) - double(batch.x_s.data[i]);
    mse += d * d;
  }
  CHECK(tes.l_inv == doctest::Approx(mse / double(x_tes.size())).epsilon(1e-5));
  CHECK((tes.x_hat_tes.data == x_tes.data).all());
}

TEST_CASE("zero inner step leaves theta equal to phi") {
  const auto models = step_models<float>();
  const auto phi = codec::init_encoder(tiny_encoder(), 8);
  const auto dec = codec::init_decoder(tiny_decoder(), 9);
  const auto batch = random_batch<float>(3, 10);

  const auto theta = inner_adapt(phi, phi.zeros_like(), 1e-3f);
  CHECK(theta == phi);
  const auto tes = meta_test_losses(models, theta, batch);
  CHECK((tes.x_hat_tes.data == codec::encode(batch.x_s, batch.w, tiny_encoder(), phi).data).all());

  for (auto op : {noise::NoiseOp::identity, noise::NoiseOp::jpeg, noise::NoiseOp::gaussian}) {
    CAPTURE(noise::to_string(op));
    StepOptions o;
    o.inner_lr = 0.0;
    o.noise_choice = {op, 77};
    const std::uint64_t before = phi.checksum();
    const auto res = compute_step(models, phi, dec, batch, LossWeights{}, o);
    CHECK(res.losses.l_inv_tes == res.losses.l_inv_phi);
    CHECK(res.losses.l_wm_tes == res.losses.l_wm_phi);
    CHECK(res.phi_checksum_after_inner == before);
    CHECK(phi.checksum() == before);
  }

  StepOptions o;
  o.inner_lr = 0.5;
  const auto res = compute_step(models, phi, dec, batch, LossWeights{}, o);
  CHECK(res.phi_checksum_after_inner == phi.checksum());
  CHECK(res.losses.l_inv_tes != res.losses.l_inv_phi);
}

TEST_CASE("outer gradients match finite differences of the meta objective") {
  auto pool = tiny_pool();
  const auto models = step_models<double>(pool);
  auto phi = codec::init_encoder(tiny_encoder(), 12).cast<double>();
  auto dec = codec::init_decoder(tiny_decoder(), 13).cast<double>();
  // Zero biases put many pre-activations exactly on a ReLU kink, where the
  // central difference straddles two linear pieces.
  std::mt19937_64 bias_rng(15);
  for (auto* set : {&phi, &dec}) {
    for (std::size_t i = 0; i < set->size(); ++i) {
      if (set->name(i).ends_with(".b")) (*set)[i] = random_tensor((*set)[i].shape, bias_rng, -0.1, 0.1);
    }
  }
  const auto batch = random_batch<double>(2, 14);
  const LossWeights weights{1.0, 0.5, 0.5};

  auto objective = [&](const ParamSet<double>& p, const ParamSet<double>& d, const StepOptions& o) {
    StepOptions v = o;
    v.want_gradients = false;
    return compute_step(models, p, d, batch, weights, v).losses.l_dip;
  };
  auto directional = [&](const ParamSet<double>& grad, const ParamSet<double>& at, bool encoder_side, const StepOptions& o,
                         std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet<double> dir = at.zeros_like();
    for (std::size_t i = 0; i < dir.size(); ++i) dir[i] = random_tensor(dir[i].shape, rng);
    double analytic = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) analytic += (grad[i].data * dir[i].data).sum();
    const double h = 1e-6;
    ParamSet<double> up = at, down = at;
    up.axpy(h, dir);
    down.axpy(-h, dir);
    const double numeric = encoder_side ? (objective(up, dec, o) - objective(down, dec, o)) / (2 * h)
                                        : (objective(phi, up, o) - objective(phi, down, o)) / (2 * h);
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  };

  SUBCASE("meta with the curvature term") {
    auto o = identity_noise();
    o.inner_lr = 0.05;
    o.second_order = true;
    const auto res = compute_step(models, phi, dec, batch, weights, o);
    for (std::uint64_t s = 1; s <= 3; ++s) {
      CHECK(directional(res.grad_encoder, phi, true, o, s) < 1e-3);
      CHECK(directional(res.grad_decoder, dec, false, o, s) < 1e-3);
    }
  }
  SUBCASE("first-order meta step is exact as the inner step vanishes") {
    auto o = identity_noise();
    o.inner_lr = 1e-7;
    const auto res = compute_step(models, phi, dec, batch, weights, o);
    CHECK(directional(res.grad_encoder, phi, true, o, 4) < 1e-3);
    CHECK(directional(res.grad_decoder, dec, false, o, 4) < 1e-3);
  }
  SUBCASE("differentiable JPEG in the watermark path") {
    StepOptions o;
    o.inner_lr = 0.05;
    o.second_order = true;
    o.noise_choice = {noise::NoiseOp::jpeg, 1};
    const auto res = compute_step(models, phi, dec, batch, weights, o);
    CHECK(directional(res.grad_encoder, phi, true, o, 5) < 1e-3);
    CHECK(directional(res.grad_decoder, dec, false, o, 5) < 1e-3);
  }
  SUBCASE("ensemble objective without meta") {
    auto o = identity_noise();
    o.meta = false;
    const auto res = compute_step(models, phi, dec, batch, weights, o);
    CHECK(res.losses.l_adv_tes == 0.0);
    CHECK(res.losses.l_wm_tes == 0.0);
    CHECK(res.losses.l_inv_tes == res.losses.l_inv_phi);
    for (std::uint64_t s = 1; s <= 2; ++s) {
      CHECK(directional(res.grad_encoder, phi, true, o, s) < 1e-3);
      CHECK(directional(res.grad_decoder, dec, false, o, s) < 1e-3);
    }
    std::vector<fr::EmbedderModel> all(pool.meta_train.begin(), pool.meta_train.end());
    all.push_back(pool.meta_test[0]);
    const ImageTensor x_hat = codec::encode(batch.x_s.cast<float>(), batch.w.cast<float>(), tiny_encoder(),
                                            phi.cast<float>());
    CHECK(res.losses.l_adv_tra == doctest::Approx(adversarial_oracle(all, x_hat, batch.x_t.cast<float>())).epsilon(1e-4));
  }
}

TEST_CASE("encoder and decoder losses fall at every step with the adversarial term switched down") {
  const auto models = step_models<float>();
  auto phi = codec::init_encoder(tiny_encoder(), 20);
  auto dec = codec::init_decoder(tiny_decoder(), 21);
  Adam<float> eo(phi, 1e-3f), dopt(dec, 1e-3f);
  const LossWeights weights{1e-9, 1.0, 1.0};
  const auto o = identity_noise();

  // One fixed batch of corpus faces, so the only change between steps is
  // the parameter update.
  StepBatch<float> batch;
  batch.x_s = tiny_corpus().gather({0, 3, 6, 9});
  batch.x_t = tiny_corpus().gather({31, 30, 29, 28});
  std::mt19937_64 rng(7);
  batch.w = Tensor<float>(Shape{4, kBits, 1, 1});
  for (Eigen::Index i = 0; i < batch.w.size(); ++i) batch.w.data[i] = float(rng() >> 63);

  std::vector<double> enc, wm;
  for (int step = 0; step < 50; ++step) {
    const auto res = compute_step(models, phi, dec, batch, weights, o);
    enc.push_back(res.losses.l_inv_phi + res.losses.l_wm_phi);
    wm.push_back(res.losses.l_wm_phi);
    eo.step(phi, res.grad_encoder);
    dopt.step(dec, res.grad_decoder);
  }
  for (std::size_t i = 1; i < enc.size(); ++i) {
    CAPTURE(i);
    CHECK(enc[i] < enc[i - 1]);
    CHECK(wm[i] < wm[i - 1]);
  }
  MESSAGE("watermark BCE " << wm.front() << " -> " << wm.back());
  CHECK(wm.back() < 0.85 * wm.front());
}

TEST_CASE("training is deterministic and resumable") {
  const auto setup = tiny_setup();
  const fs::path dir = fs::temp_directory_path() / "dipwm_meta_trainer";
  fs::remove_all(dir);

  TrainOptions full;
  full.checkpoint_dir = dir / "full";
  const auto a = train(tiny_corpus(), tiny_pool(), setup, full);
  const auto b = train(tiny_corpus(), tiny_pool(), setup);
  REQUIRE(a.history.size() == 4);
  CHECK(a.phi == b.phi);
  CHECK(a.dec == b.dec);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(a.history[e].mean == b.history[e].mean);
    CHECK(a.history[e].batch_hashes == b.history[e].batch_hashes);
    CHECK(a.history[e].validation == b.history[e].validation);
  }
  CHECK(fs::exists(dir / "full" / "ckpt_4" / "model.dwa"));
  CHECK(fs::exists(dir / "full" / "best" / "model.dwa"));

  std::ifstream log(dir / "full" / "train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = config::Json::parse(line);
    CHECK(j.at("epoch").get<int>() == ++lines);
    CHECK(j.at("losses").contains("l_dip"));
  }
  CHECK(lines == 4);

  // Interrupted after two epochs, then resumed from disk.
  TrainOptions part;
  part.checkpoint_dir = dir / "part";
  part.on_epoch = [](const EpochRecord& r) { return r.epoch < 2; };
  const auto half = train(tiny_corpus(), tiny_pool(), setup, part);
  CHECK(half.epoch == 2);
  REQUIRE(latest_checkpoint(dir / "part"));
  CHECK(latest_checkpoint(dir / "part")->parent_path().filename() == "ckpt_2");
  part.on_epoch = nullptr;
  const auto resumed = train(tiny_corpus(), tiny_pool(), setup, resume_or_init(dir / "part", setup), part);
  CHECK(resumed.phi == a.phi);
  CHECK(resumed.dec == a.dec);
  CHECK(resumed.enc_opt.t == a.enc_opt.t);
  REQUIRE(resumed.history.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) CHECK(resumed.history[e].mean == a.history[e].mean);

  auto other = setup;
  other.weights.adv = 1.0;
  CHECK_THROWS_AS(resume_or_init(dir / "part", other), ConfigError);
  auto longer = setup;
  longer.train.epochs = 6;
  CHECK(resume_or_init(dir / "part", longer).epoch == 4);

  const auto ck = load_checkpoint(resolve_checkpoint(dir / "full" / "ckpt_4"));
  CHECK(ck.setup == setup);
  CHECK(ck.state.phi == a.phi);
  CHECK(ck.state.history.size() == 4);
  CHECK(ck.state.history[3].batch_hash == a.history[3].batch_hash);
  CHECK_THROWS_AS(resolve_checkpoint(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("meta and ensemble arms share the data order") {
  auto setup = tiny_setup();
  setup.train.epochs = 2;
  auto plain = setup;
  plain.train.meta = false;
  const auto a = train(tiny_corpus(), tiny_pool(), setup);
  const auto b = train(tiny_corpus(), tiny_pool(), plain);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(a.history[e].batch_hashes == b.history[e].batch_hashes);
    CHECK(a.history[e].noise_ops == b.history[e].noise_ops);
  }
  CHECK_FALSE(a.phi == b.phi);
}

TEST_CASE("divergence writes the last good state") {
  const fs::path dir = fs::temp_directory_path() / "dipwm_diverge";
  fs::remove_all(dir);
  auto setup = tiny_setup();
  auto state = init_state(setup);
  state.phi[0].data[0] = std::numeric_limits<float>::quiet_NaN();
  TrainOptions o;
  o.checkpoint_dir = dir;
  CHECK_THROWS_AS(train(tiny_corpus(), tiny_pool(), setup, state, o), TrainingDivergence);
  CHECK(fs::exists(dir / "last_good" / "model.dwa"));
  fs::remove_all(dir);
}

TEST_CASE("training preconditions") {
  auto setup = tiny_setup();
  auto models = tiny_models();
  models[0].trained = false;
  CHECK_THROWS_AS(train(tiny_corpus(), fr::partition_pool(models, 2, 1), setup), ConfigError);
  setup.train.allow_untrained = true;
  setup.train.epochs = 1;
  CHECK_NOTHROW(train(tiny_corpus(), fr::partition_pool(models, 2, 1), setup));

  auto bad = tiny_setup();
  bad.train.P = 1;
  CHECK_THROWS_AS(train(tiny_corpus(), tiny_pool(), bad), ConfigError);
  bad = tiny_setup();
  bad.decoder.payload_bits = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const TrainConfig defaults;
  CHECK(defaults.epochs == 2500);
  CHECK(defaults.batch_size == 32);
  CHECK(defaults.outer_lr == 5e-5);
  CHECK(defaults.P == 2);
  CHECK(defaults.Q == 1);

  const auto targets = assign_targets(tiny_corpus(), 5);
  const auto sources = tiny_corpus().identities(io::Split::train);
  CHECK(targets.size() == sources.size());
  const auto tgt_ids = tiny_corpus().identities(io::Split::target);
  for (const auto& [s, t] : targets) CHECK(std::binary_search(tgt_ids.begin(), tgt_ids.end(), t));
  CHECK(assign_targets(tiny_corpus(), 5) == targets);
}

TEST_CASE("configuration files are strict") {
  using config::Json;
  const auto preset = desk_preset();
  CHECK(config::setup_from_json(config::to_json(preset)) == preset);
  CHECK(config::setup_from_json(Json::object(), preset) == preset);

  auto partial = config::setup_from_json(Json::parse(R"({"train": {"epochs": 7}})"), preset);
  CHECK(partial.train.epochs == 7);
  CHECK(partial.train.batch_size == preset.train.batch_size);
  CHECK(partial.encoder == preset.encoder);

  auto message = [](const Json& j) {
    try {
      config::setup_from_json(j);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(Json::parse(R"({"train": {"epochz": 3}})")).find("train.epochz") != std::string::npos);
  CHECK(message(Json::parse(R"({"weights": {"adv": "high"}})")).find("weights.adv") != std::string::npos);
  CHECK(message(Json::parse(R"({"extra": {}})")).find("extra") != std::string::npos);
  CHECK(message(Json::parse(R"({"train": {"batch_size": 0}})")).find("train") != std::string::npos);

  auto run = config::run_from_json(Json::parse(R"({"corpus": {"synthetic": {"identities": 16}},
                                                    "weights": {"adv": 1, "inv": 1, "wm": 1}})"));
  CHECK(run.setup.weights == LossWeights{1.0, 1.0, 1.0});
  CHECK(run.setup.train.epochs == preset.train.epochs);
  CHECK(config::run_from_json(config::to_json(run)).setup == run.setup);
  CHECK_THROWS_WITH_AS(config::run_from_json(Json::parse(R"({"weights": {}})")), doctest::Contains("corpus"), ConfigError);
  CHECK_THROWS_WITH_AS(config::run_from_json(Json::parse(R"({"corpus": {"synthetic": {}}, "surrogates": {"archs": ["cnn4"]}})")),
                       doctest::Contains("surrogates.archs"), ConfigError);

  const fs::path dir = fs::temp_directory_path() / "dipwm_config";
  fs::create_directories(dir);
  std::ofstream(dir / "broken.json") << "{\n  \"corpus\": {\n    \"dir\": \"x\",\n  }\n";
  CHECK_THROWS_WITH_AS(config::load_run_config(dir / "broken.json"), doctest::Contains("line"), ConfigError);
  std::ofstream(dir / "nodir.json") << R"({"corpus": {"dir": "no_such_corpus"}})";
  CHECK_THROWS_WITH_AS(config::load_run_config(dir / "nodir.json"), doctest::Contains("corpus.dir"), ConfigError);
  fs::remove_all(dir);
}
