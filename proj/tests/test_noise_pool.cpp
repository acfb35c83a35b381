#include <doctest.h>

#include <cmath>

#include "dipwm/imaging_io.hpp"
#include "dipwm/noise_pool.hpp"
#include "gradcheck.hpp"

using namespace dipwm;
using namespace dipwm::noise;
using namespace dipwm::testing;

namespace {

double psnr(const ImageTensor& a, const ImageTensor& b) {
  const double mse = (a.data - b.data).cast<double>().square().mean();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace

TEST_CASE("quantisation tables follow the libjpeg scaling rule") {
  CHECK(luma_quant_table(50)[0] == 16);
  CHECK(luma_quant_table(50)[63] == 99);
  CHECK(chroma_quant_table(50)[0] == 17);
  // qf 75 -> scale 50: (16 * 50 + 50) / 100 = 8
  CHECK(luma_quant_table(75)[0] == 8);
  // qf 10 -> scale 500: 16 * 5 = 80
  CHECK(luma_quant_table(10)[0] == 80);
  CHECK(luma_quant_table(100)[0] == 1);
  CHECK(luma_quant_table(1)[63] == 255);
  CHECK_THROWS_AS(luma_quant_table(0), ArgumentError);
}

TEST_CASE("block DCT is orthonormal and inverts") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 1, 16, 8}, rng);
  DTape tape;
  auto f = block_dct(tape, tape.constant(x), false);
  auto back = block_dct(tape, f, true);
  CHECK(((tape.value(back).data - x.data).abs() < 1e-12).all());
  CHECK(tape.value(f).data.square().sum() == doctest::Approx(x.data.square().sum()));

  // A constant block has only a DC coefficient of 8 * value.
  auto c = DTensor::constant(Shape{1, 1, 8, 8}, 0.5);
  auto dc = tape.value(block_dct(tape, tape.constant(c), false));
  CHECK(dc.data[0] == doctest::Approx(4.0));
  CHECK(dc.data.tail(63).abs().maxCoeff() < 1e-12);
}

TEST_CASE("smooth rounding value and slope") {
  DTensor x(Shape{1, 1, 1, 4});
  x.data << 0.0, 0.25, 1.4, -2.2;
  DTape tape;
  auto v = tape.variable(x);
  auto r = smooth_round(tape, v);
  CHECK(tape.value(r).data[1] == doctest::Approx(0.015625));
  CHECK(tape.value(r).data[2] == doctest::Approx(1.0 + 0.064));
  CHECK(tape.value(r).data[3] == doctest::Approx(-2.0 - 0.008));
  tape.backward(r, DTensor::constant(x.shape, 1.0));
  CHECK(tape.grad(v).data[0] == doctest::Approx(0.0));
  CHECK(tape.grad(v).data[1] == doctest::Approx(3 * 0.0625));
}

TEST_CASE("flat gray survives the differentiable JPEG") {
  for (float g : {0.2f, 0.5f, 0.8f}) {
    auto x = ImageTensor::constant(Shape{1, 3, 112, 112}, g);
    auto y = diff_jpeg(x, 50);
    CHECK((y.data - g).abs().maxCoeff() <= 2.0f / 255.0f);
  }
}

TEST_CASE("differentiable JPEG tracks the real codec") {
  auto corpus = io::generate_synthetic_corpus(4, 2, 5);
  auto x = corpus.images.slice(0, 4);
  for (int qf : {30, 50, 80}) {
    auto approx = diff_jpeg(x, qf);
    auto real = io::jpeg_roundtrip(x, qf);
    CHECK(psnr(approx, real) >= 25.0);
  }
  auto x30 = diff_jpeg(x, 30);
  auto x80 = diff_jpeg(x, 80);
  CHECK(psnr(x80, x) > psnr(x30, x));
}

TEST_CASE("differentiable JPEG gradient matches finite differences") {
  std::mt19937_64 rng(12);
  auto x = random_tensor({1, 3, 8, 8}, rng, 0.3, 0.7);
  auto r = gradcheck([](DTape& t, const std::vector<DVar>& v) { return diff_jpeg(t, v[0], 50); }, {x}, 4, 1e-6,
                     1e-4);
  CHECK(r.max_abs_analytic > 0.0);
  CHECK(r.max_rel_error < 1e-2);
}

TEST_CASE("Gaussian noise has the configured variance") {
  auto mid = ImageTensor::constant(Shape{1, 1, 1000, 1000}, 0.5f);
  auto field = gaussian_field<double>(mid.shape, 0.003, 77);
  const double mean = field.data.mean();
  const double var = (field.data - mean).square().mean();
  CHECK(var >= 0.0027);
  CHECK(var <= 0.0033);
  CHECK(std::abs(mean) < 1e-3);

  auto a = add_gaussian_noise(mid, 0.003, 5);
  auto b = add_gaussian_noise(mid, 0.003, 5);
  CHECK((a.data == b.data).all());
  CHECK((a.data >= 0.0f).all());
  CHECK((a.data <= 1.0f).all());
  CHECK((add_gaussian_noise(mid, 0.0, 5).data == mid.data).all());
  CHECK_THROWS_AS(add_gaussian_noise(mid, -0.1, 5), ArgumentError);
}

TEST_CASE("noise policy draws each operation about a third of the time") {
  NoisePoolConfig cfg;
  std::mt19937_64 rng(2024);
  std::array<int, 3> counts{};
  const int batches = 3000;
  Tape<float> tape;
  auto x = tape.constant(ImageTensor::constant(Shape{1, 3, 16, 16}, 0.5f));
  for (int i = 0; i < batches; ++i) {
    auto draw = sample_and_apply(tape, x, cfg, rng);
    ++counts[std::size_t(draw.op)];
    if (draw.op == NoiseOp::identity) CHECK(draw.output.id == x.id);
  }
  for (int c : counts) {
    CHECK(double(c) / batches >= 0.30);
    CHECK(double(c) / batches <= 0.37);
  }

  NoisePoolConfig only_identity;
  only_identity.weights = {1, 0, 0};
  for (int i = 0; i < 50; ++i) CHECK(sample_and_apply(tape, x, only_identity, rng).op == NoiseOp::identity);

  NoisePoolConfig only_jpeg;
  only_jpeg.weights = {0, 1, 0};
  auto draw = sample_and_apply(tape, x, only_jpeg, rng);
  CHECK(draw.op == NoiseOp::jpeg);
  CHECK((tape.value(draw.output).data == diff_jpeg(tape.value(x), 50).data).all());

  NoisePoolConfig bad;
  bad.weights = {0, 0, 0};
  CHECK_THROWS_AS(sample_and_apply(tape, x, bad, rng), ConfigError);
}

TEST_CASE("processing spec parsing") {
  CHECK(parse_processing("identity") == EvalProcessingSpec::identity());
  CHECK(parse_processing("jpeg:30") == EvalProcessingSpec::jpeg(30));
  CHECK(parse_processing("gaussian_noise:0.003") == EvalProcessingSpec::gaussian_noise(0.003));
  CHECK(parse_processing("resize:0.5") == EvalProcessingSpec::resize(0.5));
  CHECK(parse_processing("gaussian_blur:3:30") == EvalProcessingSpec::gaussian_blur(3, 30));
  for (const auto& s : default_robustness_specs()) CHECK(parse_processing(to_string(s)) == s);
  CHECK_THROWS_AS(parse_processing("jpeg"), ParseError);
  CHECK_THROWS_AS(parse_processing("jpeg:abc"), ParseError);
  CHECK_THROWS_AS(parse_processing("jpeg:101"), ParseError);
  CHECK_THROWS_AS(parse_processing("gaussian_blur:4:1"), ParseError);
  CHECK_THROWS_AS(parse_processing("sharpen:1"), ParseError);
}

TEST_CASE("evaluation processing") {
  auto corpus = io::generate_synthetic_corpus(4, 2, 9);
  auto x = io::quantize_8bit(corpus.images.slice(0, 2));

  CHECK((eval_process(x, EvalProcessingSpec::identity(), 0).data == x.data).all());

  auto gray = ImageTensor::constant(Shape{1, 3, 112, 112}, 100.0f / 255.0f);
  CHECK((eval_process(gray, EvalProcessingSpec::resize(0.5), 0).data - gray.data).abs().maxCoeff() < 1e-6f);

  ImageTensor impulse(Shape{1, 1, 9, 9});
  impulse(0, 0, 4, 4) = 1.0f;
  auto blurred = gaussian_blur(impulse, 3, 30.0);
  CHECK(blurred.data.sum() == doctest::Approx(1.0).epsilon(1e-6));
  // With SD 30 a 3x3 kernel is very nearly a box filter.
  CHECK(blurred(0, 0, 3, 3) == doctest::Approx(1.0 / 9.0).epsilon(1e-3));
  CHECK(gaussian_kernel(5, 1.0).sum() == doctest::Approx(1.0));

  for (const auto& spec : default_robustness_specs()) {
    auto y = eval_process(x, spec, 1);
    CHECK(y.shape == x.shape);
    CHECK((y.data >= 0.0f).all());
    CHECK((y.data <= 1.0f).all());
    CHECK(psnr(y, x) > 20.0);
    // Output stays on the 8-bit grid.
    CHECK(((y.data * 255.0f).round() - y.data * 255.0f).abs().maxCoeff() < 1e-3f);
  }
}
