#pragma once

#include <array>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dipwm/ops.hpp"

namespace dipwm::noise {

enum class NoiseOp { identity, jpeg, gaussian };

std::string to_string(NoiseOp op);

/// Training-time degradations. `weights` are the sampling weights of
/// (identity, jpeg, gaussian).
struct NoisePoolConfig {
  int jpeg_qf = 50;
  double gaussian_var = 0.003;
  std::array<double, 3> weights{1.0, 1.0, 1.0};

  void validate() const;
  friend bool operator==(const NoisePoolConfig&, const NoisePoolConfig&) = default;
};

/// Standard luminance/chrominance tables scaled to a quality factor the
/// way libjpeg does (baseline-clamped to [1, 255]).
std::array<int, 64> luma_quant_table(int qf);
std::array<int, 64> chroma_quant_table(int qf);

namespace detail {

/// Orthonormal 8-point DCT-II basis, row u = frequency.
template <typename Scalar>
Eigen::Matrix<Scalar, 8, 8> dct_basis() {
  Eigen::Matrix<Scalar, 8, 8> c;
  for (int u = 0; u < 8; ++u) {
    const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
    for (int x = 0; x < 8; ++x) c(u, x) = Scalar(a * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0));
  }
  return c;
}

/// Applies L * block * R to every 8x8 block of every plane.
template <typename Scalar>
void blockwise(const Tensor<Scalar>& in, Tensor<Scalar>& out, const Eigen::Matrix<Scalar, 8, 8>& l,
               const Eigen::Matrix<Scalar, 8, 8>& r) {
  const Shape s = in.shape;
  Eigen::Matrix<Scalar, 8, 8> b;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int by = 0; by < s.h; by += 8)
        for (int bx = 0; bx < s.w; bx += 8) {
          for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) b(y, x) = in(n, c, by + y, bx + x);
          const Eigen::Matrix<Scalar, 8, 8> t = l * b * r;
          for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) out(n, c, by + y, bx + x) = t(y, x);
        }
}

}  // namespace detail

/// 8x8 block DCT (inverse when `inverse`); H and W must be multiples of 8.
template <typename Scalar>
ops::Var<Scalar> block_dct(Tape<Scalar>& tape, ops::Var<Scalar> x, bool inverse) {
  const Shape xs = tape.shape(x);
  if (xs.h % 8 != 0 || xs.w % 8 != 0) throw ConfigError("block_dct needs multiples of 8");
  const auto c = detail::dct_basis<Scalar>();
  const Eigen::Matrix<Scalar, 8, 8> ct = c.transpose();
  Tensor<Scalar> out(xs);
  if (inverse) detail::blockwise(tape.value(x), out, ct, c);
  else detail::blockwise(tape.value(x), out, c, ct);
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    // The transform is orthonormal, so its adjoint is the opposite transform.
    Tensor<Scalar> gx(xs);
    if (inverse) detail::blockwise(g, gx, c, ct);
    else detail::blockwise(g, gx, ct, c);
    t.grad_ref(x).data += gx.data;
  });
}

/// r(v) = round(v) + (v - round(v))^3 with its exact derivative 3 (v - round(v))^2.
template <typename Scalar>
ops::Var<Scalar> smooth_round(Tape<Scalar>& tape, ops::Var<Scalar> x) {
  Tensor<Scalar> out = tape.value(x);
  const auto r = out.data.round();
  out.data = r + (out.data - r).cube();
  return tape.record(std::move(out), tape.needs_grad(x),
                     [=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    const auto& v = t.value(x).data;
    t.grad_ref(x).data += g.data * Scalar(3) * (v - v.round()).square();
  });
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> tiled_reciprocal(const std::array<int, 64>& table, Shape s, bool reciprocal) {
  Tensor<Scalar> t(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const Scalar q = Scalar(table[std::size_t((y % 8) * 8 + x % 8)]);
          t(n, c, y, x) = reciprocal ? Scalar(1) / q : q;
        }
  return t;
}

template <typename Scalar>
ops::Var<Scalar> quantize_plane(Tape<Scalar>& tape, ops::Var<Scalar> coeffs, const std::array<int, 64>& table) {
  const Shape s = tape.shape(coeffs);
  auto scaled = ops::mul(tape, coeffs, tape.constant(tiled_reciprocal<Scalar>(table, s, true)));
  auto rounded = smooth_round(tape, scaled);
  return ops::mul(tape, rounded, tape.constant(tiled_reciprocal<Scalar>(table, s, false)));
}

template <typename Scalar>
ops::Var<Scalar> pixel_linear(Tape<Scalar>& tape, ops::Var<Scalar> x, const Eigen::Matrix3d& m,
                              const Eigen::Vector3d& offset) {
  Tensor<Scalar> w(Shape{3, 3, 1, 1});
  Tensor<Scalar> b(Shape{3, 1, 1, 1});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) w.data[r * 3 + c] = Scalar(m(r, c));
    b.data[r] = Scalar(offset[r]);
  }
  return ops::conv2d(tape, x, tape.constant(w), tape.constant(b), 1, 0);
}

}  // namespace detail

/// Differentiable baseline-JPEG approximation: YCbCr, 4:2:0 chroma
/// subsampling, 8x8 DCT, table quantisation with smooth rounding, and the
/// inverse path. Sizes that are not multiples of 16 are mirror-padded and
/// cropped back.
template <typename Scalar>
ops::Var<Scalar> diff_jpeg(Tape<Scalar>& tape, ops::Var<Scalar> x, int qf) {
  if (qf < 1 || qf > 100) throw ArgumentError("JPEG quality factor must be in [1,100]");
  const Shape xs = tape.shape(x);
  if (xs.c != 3) throw ConfigError("diff_jpeg expects RGB input");
  const int ph = (xs.h + 15) / 16 * 16;
  const int pw = (xs.w + 15) / 16 * 16;

  Eigen::Matrix3d to_ycc;
  to_ycc << 0.299, 0.587, 0.114, -0.168736, -0.331264, 0.5, 0.5, -0.418688, -0.081312;
  Eigen::Matrix3d to_rgb;
  to_rgb << 1.0, 0.0, 1.402, 1.0, -0.344136, -0.714136, 1.0, 1.772, 0.0;

  auto padded = ops::pad_reflect(tape, x, ph, pw);
  // Level-shifted YCbCr on the 0..255 scale.
  auto ycc = detail::pixel_linear(tape, padded, 255.0 * to_ycc, Eigen::Vector3d(-128.0, 0.0, 0.0));

  const auto luma_table = luma_quant_table(qf);
  const auto chroma_table = chroma_quant_table(qf);

  auto y = ops::slice_channels(tape, ycc, 0, 1);
  y = block_dct(tape, detail::quantize_plane(tape, block_dct(tape, y, false), luma_table), true);

  auto chroma = ops::slice_channels(tape, ycc, 1, 2);
  auto down = ops::depthwise_conv2d(tape, chroma, tape.constant(Tensor<Scalar>::constant(Shape{2, 1, 2, 2}, Scalar(0.25))),
                                    tape.constant(Tensor<Scalar>(Shape{2, 1, 1, 1})), 2, 0);
  down = block_dct(tape, detail::quantize_plane(tape, block_dct(tape, down, false), chroma_table), true);
  Tensor<Scalar> up_w(Shape{2, 2, 2, 2});
  for (int c = 0; c < 2; ++c)
    for (int k = 0; k < 4; ++k) up_w.data[(c * 2 + c) * 4 + k] = Scalar(1);
  auto up = ops::conv_transpose2d(tape, down, tape.constant(up_w), tape.constant(Tensor<Scalar>(Shape{2, 1, 1, 1})), 2, 0);

  auto merged = ops::concat_channels(tape, y, up);
  auto rgb = detail::pixel_linear(tape, merged, to_rgb / 255.0, Eigen::Vector3d::Constant(128.0 / 255.0));
  return ops::clamp(tape, ops::crop(tape, rgb, xs.h, xs.w), Scalar(0), Scalar(1));
}

template <typename Scalar>
Tensor<Scalar> diff_jpeg(const Tensor<Scalar>& x, int qf) {
  Tape<Scalar> tape;
  return tape.value(diff_jpeg(tape, tape.constant(x), qf));
}

/// Zero-mean Gaussian field with the given variance, deterministic in seed.
template <typename Scalar>
Tensor<Scalar> gaussian_field(Shape s, double var, std::uint64_t seed) {
  if (!(var >= 0.0)) throw ArgumentError("Gaussian noise variance must be non-negative");
  Tensor<Scalar> t(s);
  if (var == 0.0) return t;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, std::sqrt(var));
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = Scalar(d(rng));
  return t;
}

/// clamp(x + N(0, var)); the noise is a constant on the tape.
template <typename Scalar>
ops::Var<Scalar> add_gaussian_noise(Tape<Scalar>& tape, ops::Var<Scalar> x, double var, std::uint64_t seed) {
  if (!(var >= 0.0)) throw ArgumentError("Gaussian noise variance must be non-negative");
  if (var == 0.0) return x;
  auto n = tape.constant(gaussian_field<Scalar>(tape.shape(x), var, seed));
  return ops::clamp(tape, ops::add(tape, x, n), Scalar(0), Scalar(1));
}

template <typename Scalar>
Tensor<Scalar> add_gaussian_noise(const Tensor<Scalar>& x, double var, std::uint64_t seed) {
  Tape<Scalar> tape;
  return tape.value(add_gaussian_noise(tape, tape.constant(x), var, seed));
}

/// One batch-level draw from the pool: the operation and the seed of its
/// noise field.
struct NoiseChoice {
  NoiseOp op = NoiseOp::identity;
  std::uint64_t seed = 0;
};

inline NoiseChoice draw_noise(const NoisePoolConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::discrete_distribution<int> pick(cfg.weights.begin(), cfg.weights.end());
  const auto op = static_cast<NoiseOp>(pick(rng));
  return {op, rng()};
}

template <typename Scalar>
ops::Var<Scalar> apply_noise(Tape<Scalar>& tape, ops::Var<Scalar> x, const NoisePoolConfig& cfg, NoiseChoice choice) {
  switch (choice.op) {
    case NoiseOp::identity: return x;
    case NoiseOp::jpeg: return diff_jpeg(tape, x, cfg.jpeg_qf);
    case NoiseOp::gaussian: return add_gaussian_noise(tape, x, cfg.gaussian_var, choice.seed);
  }
  return x;
}

template <typename Scalar>
struct NoiseDraw {
  ops::Var<Scalar> output;
  NoiseOp op;
};

/// Draws one degradation for the whole batch and applies it.
template <typename Scalar>
NoiseDraw<Scalar> sample_and_apply(Tape<Scalar>& tape, ops::Var<Scalar> x, const NoisePoolConfig& cfg,
                                   std::mt19937_64& rng) {
  const auto choice = draw_noise(cfg, rng);
  return {apply_noise(tape, x, cfg, choice), choice.op};
}

// ---------------------------------------------------------------------------
// Evaluation-time processing (non-differentiable, real codecs)

enum class EvalOp { identity, gaussian_noise, jpeg, resize, gaussian_blur };

struct EvalProcessingSpec {
  EvalOp op = EvalOp::identity;
  double value = 0.0;  ///< variance, quality factor, scale or sigma
  int kernel = 3;      ///< blur kernel size

  static EvalProcessingSpec identity() { return {}; }
  static EvalProcessingSpec gaussian_noise(double var) { return {EvalOp::gaussian_noise, var, 3}; }
  static EvalProcessingSpec jpeg(int qf) { return {EvalOp::jpeg, double(qf), 3}; }
  static EvalProcessingSpec resize(double scale) { return {EvalOp::resize, scale, 3}; }
  static EvalProcessingSpec gaussian_blur(int kernel, double sigma) { return {EvalOp::gaussian_blur, sigma, kernel}; }

  void validate() const;
  friend bool operator==(const EvalProcessingSpec&, const EvalProcessingSpec&) = default;
};

/// `identity`, `gaussian_noise:<var>`, `jpeg:<qf>`, `resize:<scale>`,
/// `gaussian_blur:<kernel>:<sigma>`.
EvalProcessingSpec parse_processing(const std::string& text);
std::string to_string(const EvalProcessingSpec& spec);

/// Gaussian noise Var=0.003, JPEG QF=30, resize 1/2, blur kernel 3 / SD 30.
std::vector<EvalProcessingSpec> default_robustness_specs();

/// Normalised k x k Gaussian kernel, row-major.
Eigen::MatrixXd gaussian_kernel(int k, double sigma);

ImageTensor gaussian_blur(const ImageTensor& x, int kernel, double sigma);

ImageTensor eval_process(const ImageTensor& x, const EvalProcessingSpec& spec, std::uint64_t seed);

}  // namespace dipwm::noise
