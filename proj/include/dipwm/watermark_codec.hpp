#pragma once

#include <cstdint>
#include <vector>

#include "dipwm/ops.hpp"

namespace dipwm::codec {

/// Bits stored as 0/1 reals; decoders emit logits of the same length.
using Payload = Eigen::ArrayXf;

struct EncoderConfig {
  int payload_bits = 50;
  int image_side = kImageSize;
  int carrier_channels = 64;
  int carrier_blocks = 4;
  /// Channels of the expanded payload map fed to the fusion layer.
  int payload_channels = 16;
  /// Channels of the seed grid and of every expansion stage but the last.
  int seed_channels = 64;
  int seed_side = 7;
  int expand_stages = 4;
  int cbam_reduction = 4;
  int spatial_kernel = 7;
  /// When positive the residual is bounded as scale * tanh(r).
  float residual_scale = 0.0f;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct DecoderConfig {
  int payload_bits = 50;
  int image_side = kImageSize;
  /// One stride-2 Conv-ReLU stage per entry.
  std::vector<int> channels{32, 32, 64, 64};

  void validate() const;
  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

using EncoderParams = ParamSet<float>;
using DecoderParams = ParamSet<float>;

EncoderParams init_encoder(const EncoderConfig& cfg, std::uint64_t seed);
DecoderParams init_decoder(const DecoderConfig& cfg, std::uint64_t seed);

/// Parameters of a CBAM block for `channels` inputs, prefixed with `prefix`.
void add_cbam_params(ParamSet<float>& params, const std::string& prefix, int channels,
                     int reduction, int spatial_kernel, std::mt19937_64& rng);

template <typename Scalar>
struct CbamResult {
  ops::Var<Scalar> output;
  ops::Var<Scalar> channel_gate;  ///< [N, C, 1, 1]
  ops::Var<Scalar> spatial_gate;  ///< [N, 1, H, W]
};

/// Channel then spatial attention: the channel gate comes from a shared MLP
/// over average- and max-pooled descriptors, the spatial gate from a conv
/// over the channel-wise mean/max maps of the channel-refined features.
template <typename Scalar>
CbamResult<Scalar> cbam_attention(Tape<Scalar>& tape, const Bound<Scalar>& p,
                                  const std::string& prefix, ops::Var<Scalar> f) {
  const Shape fs = tape.shape(f);
  if (fs.c < 2) throw ConfigError("cbam_attention needs at least 2 channels");
  auto mlp = [&](ops::Var<Scalar> v) {
    auto h = ops::linear(tape, v, p[prefix + ".fc1.w"], p[prefix + ".fc1.b"]);
    h = ops::relu(tape, h);
    h = ops::linear(tape, h, p[prefix + ".fc2.w"], p[prefix + ".fc2.b"]);
    return ops::reshape(tape, h, Shape{fs.n, fs.c, 1, 1});
  };
  auto avg = mlp(ops::global_avg_pool(tape, f));
  auto mx = mlp(ops::global_max_pool(tape, f));
  auto cgate = ops::sigmoid(tape, ops::add(tape, avg, mx));
  auto refined = ops::mul_channel(tape, f, cgate);

  auto desc = ops::concat_channels(tape, ops::channel_mean(tape, refined),
                                   ops::channel_max(tape, refined));
  const int k = tape.shape(p[prefix + ".spatial.w"]).h;
  auto sgate = ops::sigmoid(
      tape, ops::conv2d(tape, desc, p[prefix + ".spatial.w"], p[prefix + ".spatial.b"], 1, k / 2));
  return {ops::mul_spatial(tape, refined, sgate), cgate, sgate};
}

/// Payload [N, L, 1, 1] -> redundant map [N, C_w, side, side]: linear
/// projection to a seed grid, stride-2 transposed Conv-ReLU stages, CBAM.
/// The last stage narrows seed_channels to payload_channels.
template <typename Scalar>
ops::Var<Scalar> expand_payload(Tape<Scalar>& tape, const EncoderConfig& cfg,
                                const Bound<Scalar>& p, ops::Var<Scalar> w) {
  const Shape ws = tape.shape(w);
  if (ws.per_item() != cfg.payload_bits) {
    throw LengthError("payload has " + std::to_string(ws.per_item()) + " bits, expected " +
                      std::to_string(cfg.payload_bits));
  }
  auto h = ops::relu(tape, ops::linear(tape, w, p["payload.fc.w"], p["payload.fc.b"]));
  h = ops::reshape(tape, h, Shape{ws.n, cfg.seed_channels, cfg.seed_side, cfg.seed_side});
  for (int s = 0; s < cfg.expand_stages; ++s) {
    const std::string name = "payload.up." + std::to_string(s);
    h = ops::relu(tape, ops::conv_transpose2d(tape, h, p[name + ".w"], p[name + ".b"], 2, 0));
  }
  return cbam_attention(tape, p, "payload.cbam", h).output;
}

template <typename Scalar>
struct EncoderOutput {
  ops::Var<Scalar> image;     ///< clamp(x + residual, 0, 1)
  ops::Var<Scalar> residual;
  ops::Var<Scalar> payload_map;
};

/// Watermark encoder over an image batch [N, 3, side, side] and payload
/// batch [N, L, 1, 1].
template <typename Scalar>
EncoderOutput<Scalar> encoder_forward(Tape<Scalar>& tape, const EncoderConfig& cfg,
                                      const Bound<Scalar>& p, ops::Var<Scalar> x,
                                      ops::Var<Scalar> w) {
  const Shape xs = tape.shape(x);
  if (xs.c != 3 || xs.h != cfg.image_side || xs.w != cfg.image_side) {
    throw ConfigError("encoder expects [N,3," + std::to_string(cfg.image_side) + "," +
                      std::to_string(cfg.image_side) + "], got " + to_string(xs));
  }
  if (tape.shape(w).n != xs.n) throw ConfigError("payload batch does not match image batch");

  auto h = x;
  for (int b = 0; b < cfg.carrier_blocks; ++b) {
    const std::string name = "carrier." + std::to_string(b);
    h = ops::relu(tape, ops::conv2d(tape, h, p[name + ".w"], p[name + ".b"], 1, 1));
  }
  h = cbam_attention(tape, p, "carrier.cbam", h).output;

  auto pm = expand_payload(tape, cfg, p, w);
  auto fused = ops::concat_channels(tape, h, pm);
  fused = ops::relu(tape, ops::conv2d(tape, fused, p["fuse.w"], p["fuse.b"], 1, 0));
  auto r = ops::conv2d(tape, fused, p["out.w"], p["out.b"], 1, 1);
  if (cfg.residual_scale > 0.0f) r = ops::scale(tape, ops::tanh(tape, r), Scalar(cfg.residual_scale));
  auto img = ops::clamp(tape, ops::add(tape, x, r), Scalar(0), Scalar(1));
  return {img, r, pm};
}

/// Decoder: stride-2 Conv-ReLU stack, global average pool, linear to L logits.
template <typename Scalar>
ops::Var<Scalar> decoder_forward(Tape<Scalar>& tape, const DecoderConfig& cfg,
                                 const Bound<Scalar>& p, ops::Var<Scalar> x) {
  const Shape xs = tape.shape(x);
  if (xs.c != 3 || xs.h != cfg.image_side || xs.w != cfg.image_side) {
    throw ConfigError("decoder expects [N,3," + std::to_string(cfg.image_side) + "," +
                      std::to_string(cfg.image_side) + "], got " + to_string(xs));
  }
  auto h = x;
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::string name = "stage." + std::to_string(s);
    h = ops::relu(tape, ops::conv2d(tape, h, p[name + ".w"], p[name + ".b"], 2, 1));
  }
  h = ops::global_avg_pool(tape, h);
  return ops::linear(tape, h, p["head.w"], p["head.b"]);
}

/// Payload bits as a [N, L, 1, 1] tensor, the same payload repeated N times.
template <typename Scalar = float>
Tensor<Scalar> payload_batch(const Payload& bits, int n) {
  Tensor<Scalar> t(Shape{n, int(bits.size()), 1, 1});
  for (int i = 0; i < n; ++i) t.data.segment(i * bits.size(), bits.size()) = bits.cast<Scalar>();
  return t;
}

/// Inference-only encoder pass.
ImageTensor encode(const ImageTensor& x, const Tensor<float>& payloads, const EncoderConfig& cfg,
                   const EncoderParams& params);
ImageTensor encode(const ImageTensor& x, const Payload& w, const EncoderConfig& cfg,
                   const EncoderParams& params);

/// Inference-only decoder pass; returns [N, L, 1, 1] logits.
Tensor<float> decode(const ImageTensor& x, const DecoderConfig& cfg, const DecoderParams& params);

/// Hard decision sigmoid(logit) > 0.5, i.e. logit > 0.
Payload hard_bits(const Tensor<float>& logits, int item);

/// Per-bit probability sigmoid(logit) of one item.
Payload bit_probabilities(const Tensor<float>& logits, int item);

}  // namespace dipwm::codec
