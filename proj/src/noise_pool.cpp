#include "dipwm/noise_pool.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "dipwm/imaging_io.hpp"

namespace dipwm::noise {

namespace {

constexpr std::array<int, 64> kLumaBase{
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

constexpr std::array<int, 64> kChromaBase{
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

std::array<int, 64> scaled(const std::array<int, 64>& base, int qf) {
  if (qf < 1 || qf > 100) throw ArgumentError("JPEG quality factor must be in [1,100]");
  const int scale = qf < 50 ? 5000 / qf : 200 - 2 * qf;
  std::array<int, 64> out{};
  for (std::size_t i = 0; i < 64; ++i) out[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
  return out;
}

double parse_number(const std::string& text, const std::string& whole) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ParseError("invalid number '" + text + "' in processing spec '" + whole + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) parts.push_back(part);
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::string to_string(NoiseOp op) {
  switch (op) {
    case NoiseOp::identity: return "identity";
    case NoiseOp::jpeg: return "jpeg";
    case NoiseOp::gaussian: return "gaussian";
  }
  return "?";
}

void NoisePoolConfig::validate() const {
  if (jpeg_qf < 1 || jpeg_qf > 100) throw ConfigError("noise.jpeg_qf must be in [1,100]");
  if (!(gaussian_var >= 0.0)) throw ConfigError("noise.gaussian_var must be non-negative");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("noise.weights must be finite and non-negative");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("noise.weights must not all be zero");
}

std::array<int, 64> luma_quant_table(int qf) { return scaled(kLumaBase, qf); }
std::array<int, 64> chroma_quant_table(int qf) { return scaled(kChromaBase, qf); }

void EvalProcessingSpec::validate() const {
  switch (op) {
    case EvalOp::identity: return;
    case EvalOp::gaussian_noise:
      if (!(value >= 0.0)) throw ArgumentError("gaussian_noise variance must be non-negative");
      return;
    case EvalOp::jpeg:
      if (value < 1 || value > 100 || value != std::floor(value)) {
        throw ArgumentError("jpeg quality must be an integer in [1,100]");
      }
      return;
    case EvalOp::resize:
      if (!(value > 0.0 && value <= 1.0)) throw ArgumentError("resize scale must be in (0,1]");
      return;
    case EvalOp::gaussian_blur:
      if (kernel < 1 || kernel % 2 == 0) throw ArgumentError("blur kernel must be a positive odd size");
      if (!(value > 0.0)) throw ArgumentError("blur sigma must be positive");
      return;
  }
}

EvalProcessingSpec parse_processing(const std::string& text) {
  const auto parts = split(text, ':');
  if (parts.empty()) throw ParseError("empty processing spec");
  const auto& name = parts[0];
  auto need = [&](std::size_t n) {
    if (parts.size() != n) {
      throw ParseError("processing spec '" + text + "' expects " + std::to_string(n - 1) + " argument(s)");
    }
  };
  EvalProcessingSpec spec;
  if (name == "identity") {
    need(1);
  } else if (name == "gaussian_noise") {
    need(2);
    spec = EvalProcessingSpec::gaussian_noise(parse_number(parts[1], text));
  } else if (name == "jpeg") {
    need(2);
    spec = {EvalOp::jpeg, parse_number(parts[1], text), 3};
  } else if (name == "resize") {
    need(2);
    spec = EvalProcessingSpec::resize(parse_number(parts[1], text));
  } else if (name == "gaussian_blur") {
    need(3);
    const double k = parse_number(parts[1], text);
    if (k != std::floor(k)) throw ParseError("blur kernel must be an integer in '" + text + "'");
    spec = EvalProcessingSpec::gaussian_blur(int(k), parse_number(parts[2], text));
  } else {
    throw ParseError("unknown processing '" + name + "'");
  }
  try {
    spec.validate();
  } catch (const ArgumentError& e) {
    throw ParseError(std::string(e.what()) + " in '" + text + "'");
  }
  return spec;
}

std::string to_string(const EvalProcessingSpec& spec) {
  switch (spec.op) {
    case EvalOp::identity: return "identity";
    case EvalOp::gaussian_noise: return "gaussian_noise:" + format_number(spec.value);
    case EvalOp::jpeg: return "jpeg:" + format_number(spec.value);
    case EvalOp::resize: return "resize:" + format_number(spec.value);
    case EvalOp::gaussian_blur:
      return "gaussian_blur:" + std::to_string(spec.kernel) + ":" + format_number(spec.value);
  }
  return "?";
}

std::vector<EvalProcessingSpec> default_robustness_specs() {
  return {EvalProcessingSpec::gaussian_noise(0.003), EvalProcessingSpec::jpeg(30),
          EvalProcessingSpec::resize(0.5), EvalProcessingSpec::gaussian_blur(3, 30.0)};
}

Eigen::MatrixXd gaussian_kernel(int k, double sigma) {
  if (k < 1 || k % 2 == 0) throw ArgumentError("blur kernel must be a positive odd size");
  if (!(sigma > 0.0)) throw ArgumentError("blur sigma must be positive");
  const int r = k / 2;
  Eigen::MatrixXd g(k, k);
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double dy = y - r, dx = x - r;
      g(y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  return g / g.sum();
}

ImageTensor gaussian_blur(const ImageTensor& x, int kernel, double sigma) {
  const Eigen::MatrixXd g = gaussian_kernel(kernel, sigma);
  const int r = kernel / 2;
  const Shape s = x.shape;
  ImageTensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          double acc = 0.0;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = ops::detail::reflect_index(y + ky - r, s.h);
            for (int kx = 0; kx < kernel; ++kx) {
              acc += g(ky, kx) * x(n, c, iy, ops::detail::reflect_index(xx + kx - r, s.w));
            }
          }
          out(n, c, y, xx) = float(acc);
        }
  return out;
}

ImageTensor eval_process(const ImageTensor& x, const EvalProcessingSpec& spec, std::uint64_t seed) {
  spec.validate();
  switch (spec.op) {
    case EvalOp::identity: return x;
    case EvalOp::gaussian_noise: return io::quantize_8bit(add_gaussian_noise(x, spec.value, seed));
    case EvalOp::jpeg: return io::jpeg_roundtrip(x, int(spec.value));
    case EvalOp::resize: {
      const int h = std::max(1, int(std::lround(x.shape.h * spec.value)));
      const int w = std::max(1, int(std::lround(x.shape.w * spec.value)));
      return io::quantize_8bit(io::resize_bilinear(io::resize_bilinear(x, h, w), x.shape.h, x.shape.w));
    }
    case EvalOp::gaussian_blur: return io::quantize_8bit(gaussian_blur(x, spec.kernel, spec.value));
  }
  return x;
}

}  // namespace dipwm::noise
