#include "dipwm/watermark_codec.hpp"

namespace dipwm::codec {

void EncoderConfig::validate() const {
  if (payload_bits < 1) throw ConfigError("encoder payload_bits must be positive");
  if (carrier_channels < 2 || payload_channels < 2 || seed_channels < 1) {
    throw ConfigError("encoder channel widths must be at least 2");
  }
  if (carrier_blocks < 1) throw ConfigError("encoder needs at least one carrier block");
  if (seed_side < 1 || expand_stages < 1 || (seed_side << expand_stages) != image_side) {
    throw ConfigError("seed_side * 2^expand_stages must equal image_side (" +
                      std::to_string(seed_side) + " * 2^" + std::to_string(expand_stages) +
                      " != " + std::to_string(image_side) + ")");
  }
  if (cbam_reduction < 1 || spatial_kernel < 1 || spatial_kernel % 2 == 0) {
    throw ConfigError("invalid CBAM configuration");
  }
  if (residual_scale < 0.0f) throw ConfigError("residual_scale must be non-negative");
}

void DecoderConfig::validate() const {
  if (payload_bits < 1) throw ConfigError("decoder payload_bits must be positive");
  if (channels.empty()) throw ConfigError("decoder needs at least one stage");
  if (image_side % (1 << channels.size()) != 0) {
    throw ConfigError("decoder stride schedule does not divide image_side");
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("decoder channel widths must be positive");
  }
}

void add_cbam_params(ParamSet<float>& params, const std::string& prefix, int channels,
                     int reduction, int spatial_kernel, std::mt19937_64& rng) {
  const int hidden = std::max(1, channels / reduction);
  params.add(prefix + ".fc1.w", kaiming_uniform<float>(Shape{hidden, channels, 1, 1}, channels, rng));
  params.add(prefix + ".fc1.b", Tensor<float>(Shape{hidden, 1, 1, 1}));
  params.add(prefix + ".fc2.w", kaiming_uniform<float>(Shape{channels, hidden, 1, 1}, hidden, rng));
  params.add(prefix + ".fc2.b", Tensor<float>(Shape{channels, 1, 1, 1}));
  params.add(prefix + ".spatial.w",
             kaiming_uniform<float>(Shape{1, 2, spatial_kernel, spatial_kernel},
                                    2 * spatial_kernel * spatial_kernel, rng));
  params.add(prefix + ".spatial.b", Tensor<float>(Shape{1, 1, 1, 1}));
}

EncoderParams init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  EncoderParams p;
  int in = 3;
  for (int b = 0; b < cfg.carrier_blocks; ++b) {
    const std::string name = "carrier." + std::to_string(b);
    p.add(name + ".w", kaiming_uniform<float>(Shape{cfg.carrier_channels, in, 3, 3}, in * 9, rng));
    p.add(name + ".b", Tensor<float>(Shape{cfg.carrier_channels, 1, 1, 1}));
    in = cfg.carrier_channels;
  }
  add_cbam_params(p, "carrier.cbam", cfg.carrier_channels, cfg.cbam_reduction, cfg.spatial_kernel, rng);

  const int seed_units = cfg.seed_channels * cfg.seed_side * cfg.seed_side;
  // Every seed cell starts with the same projection, so the expanded map is
  // periodic at the decoder's total stride and survives its global pooling.
  const int cells = cfg.seed_side * cfg.seed_side;
  auto cell = kaiming_uniform<float>(Shape{cfg.seed_channels, cfg.payload_bits, 1, 1}, cfg.payload_bits, rng);
  Tensor<float> fc(Shape{seed_units, cfg.payload_bits, 1, 1});
  for (int c = 0; c < cfg.seed_channels; ++c) {
    for (int q = 0; q < cells; ++q) {
      fc.data.segment(Eigen::Index(c * cells + q) * cfg.payload_bits, cfg.payload_bits) =
          cell.data.segment(Eigen::Index(c) * cfg.payload_bits, cfg.payload_bits);
    }
  }
  p.add("payload.fc.w", std::move(fc));
  p.add("payload.fc.b", Tensor<float>(Shape{seed_units, 1, 1, 1}));
  for (int s = 0; s < cfg.expand_stages; ++s) {
    const std::string name = "payload.up." + std::to_string(s);
    const int out = s + 1 == cfg.expand_stages ? cfg.payload_channels : cfg.seed_channels;
    // Stride-2, kernel-2 transposed convs: each input cell feeds one output tap.
    p.add(name + ".w", kaiming_uniform<float>(Shape{cfg.seed_channels, out, 2, 2}, cfg.seed_channels, rng));
    p.add(name + ".b", Tensor<float>(Shape{out, 1, 1, 1}));
  }
  add_cbam_params(p, "payload.cbam", cfg.payload_channels, cfg.cbam_reduction, cfg.spatial_kernel, rng);

  const int fused = cfg.carrier_channels + cfg.payload_channels;
  p.add("fuse.w", kaiming_uniform<float>(Shape{cfg.carrier_channels, fused, 1, 1}, fused, rng));
  p.add("fuse.b", Tensor<float>(Shape{cfg.carrier_channels, 1, 1, 1}));
  p.add("out.w", kaiming_uniform<float>(Shape{3, cfg.carrier_channels, 3, 3}, cfg.carrier_channels * 9, rng));
  p.add("out.b", Tensor<float>(Shape{3, 1, 1, 1}));
  return p;
}

DecoderParams init_decoder(const DecoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  DecoderParams p;
  int in = 3;
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::string name = "stage." + std::to_string(s);
    p.add(name + ".w", kaiming_uniform<float>(Shape{cfg.channels[s], in, 3, 3}, in * 9, rng));
    p.add(name + ".b", Tensor<float>(Shape{cfg.channels[s], 1, 1, 1}));
    in = cfg.channels[s];
  }
  p.add("head.w", kaiming_uniform<float>(Shape{cfg.payload_bits, in, 1, 1}, in, rng));
  p.add("head.b", Tensor<float>(Shape{cfg.payload_bits, 1, 1, 1}));
  return p;
}

ImageTensor encode(const ImageTensor& x, const Tensor<float>& payloads, const EncoderConfig& cfg,
                   const EncoderParams& params) {
  Tape<float> tape;
  Bound<float> bound(tape, params, false);
  auto out = encoder_forward(tape, cfg, bound, tape.constant(x), tape.constant(payloads));
  return tape.value(out.image);
}

ImageTensor encode(const ImageTensor& x, const Payload& w, const EncoderConfig& cfg,
                   const EncoderParams& params) {
  if (w.size() != cfg.payload_bits) {
    throw LengthError("payload has " + std::to_string(w.size()) + " bits, expected " +
                      std::to_string(cfg.payload_bits));
  }
  return encode(x, payload_batch(w, x.shape.n), cfg, params);
}

Tensor<float> decode(const ImageTensor& x, const DecoderConfig& cfg, const DecoderParams& params) {
  Tape<float> tape;
  Bound<float> bound(tape, params, false);
  return tape.value(decoder_forward(tape, cfg, bound, tape.constant(x)));
}

Payload hard_bits(const Tensor<float>& logits, int item) {
  const Eigen::Index l = logits.shape.per_item();
  return (logits.data.segment(item * l, l) > 0.0f).cast<float>();
}

Payload bit_probabilities(const Tensor<float>& logits, int item) {
  const Eigen::Index l = logits.shape.per_item();
  return 1.0f / (1.0f + (-logits.data.segment(item * l, l)).exp());
}

}  // namespace dipwm::codec
