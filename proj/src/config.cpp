#include "dipwm/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace dipwm::config {

namespace fs = std::filesystem;

namespace {

/// Strict object reader: every key must be consumed.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  /// Rejects any key that was never asked for.
  void done() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  const Json* sub(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void checked(const std::string& path, F&& validate) {
  try {
    validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// The shortest decimal that reads back as the same float.
double shortest(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
}

}  // namespace

Json to_json(const codec::EncoderConfig& c) {
  return {{"payload_bits", c.payload_bits},       {"image_side", c.image_side},
          {"carrier_channels", c.carrier_channels}, {"carrier_blocks", c.carrier_blocks},
          {"payload_channels", c.payload_channels}, {"seed_channels", c.seed_channels},
          {"seed_side", c.seed_side},
          {"expand_stages", c.expand_stages},       {"cbam_reduction", c.cbam_reduction},
          {"spatial_kernel", c.spatial_kernel},     {"residual_scale", shortest(c.residual_scale)}};
}

Json to_json(const codec::DecoderConfig& c) {
  return {{"payload_bits", c.payload_bits}, {"image_side", c.image_side}, {"channels", c.channels}};
}

Json to_json(const meta::TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"outer_lr", c.outer_lr},
          {"inner_lr", c.inner_lr},
          {"P", c.P},
          {"Q", c.Q},
          {"second_order", c.second_order},
          {"meta", c.meta},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"validation_size", c.validation_size},
          {"allow_untrained", c.allow_untrained}};
}

Json to_json(const meta::LossWeights& c) { return {{"adv", c.adv}, {"inv", c.inv}, {"wm", c.wm}}; }

Json to_json(const noise::NoisePoolConfig& c) {
  return {{"jpeg_qf", c.jpeg_qf}, {"gaussian_var", c.gaussian_var}, {"weights", c.weights}};
}

Json to_json(const meta::TrainerSetup& s) {
  return {{"encoder", to_json(s.encoder)},
          {"decoder", to_json(s.decoder)},
          {"train", to_json(s.train)},
          {"weights", to_json(s.weights)},
          {"noise", to_json(s.noise)}};
}

Json to_json(const meta::LossBreakdown& b) {
  Json j = Json::object();
  for (const auto& [name, v] : b.fields()) j[name] = v;
  return j;
}

codec::EncoderConfig encoder_from_json(const Json& j, codec::EncoderConfig base, const std::string& path) {
  codec::EncoderConfig c = std::move(base);
  {
    Reader r(j, path);
    r.get("payload_bits", c.payload_bits);
    r.get("image_side", c.image_side);
    r.get("carrier_channels", c.carrier_channels);
    r.get("carrier_blocks", c.carrier_blocks);
    r.get("payload_channels", c.payload_channels);
    r.get("seed_channels", c.seed_channels);
    r.get("seed_side", c.seed_side);
    r.get("expand_stages", c.expand_stages);
    r.get("cbam_reduction", c.cbam_reduction);
    r.get("spatial_kernel", c.spatial_kernel);
    r.get("residual_scale", c.residual_scale);
    r.done();
  }
  checked(path, [&] { c.validate(); });
  return c;
}

codec::DecoderConfig decoder_from_json(const Json& j, codec::DecoderConfig base, const std::string& path) {
  codec::DecoderConfig c = std::move(base);
  {
    Reader r(j, path);
    r.get("payload_bits", c.payload_bits);
    r.get("image_side", c.image_side);
    r.get("channels", c.channels);
    r.done();
  }
  checked(path, [&] { c.validate(); });
  return c;
}

meta::TrainConfig train_from_json(const Json& j, meta::TrainConfig base, const std::string& path) {
  meta::TrainConfig c = std::move(base);
  {
    Reader r(j, path);
    r.get("epochs", c.epochs);
    r.get("batch_size", c.batch_size);
    r.get("outer_lr", c.outer_lr);
    r.get("inner_lr", c.inner_lr);
    r.get("P", c.P);
    r.get("Q", c.Q);
    r.get("second_order", c.second_order);
    r.get("meta", c.meta);
    r.get("seed", c.seed);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("validation_size", c.validation_size);
    r.get("allow_untrained", c.allow_untrained);
    r.done();
  }
  checked(path, [&] { c.validate(); });
  return c;
}

meta::LossWeights weights_from_json(const Json& j, meta::LossWeights base, const std::string& path) {
  meta::LossWeights c = std::move(base);
  {
    Reader r(j, path);
    r.get("adv", c.adv);
    r.get("inv", c.inv);
    r.get("wm", c.wm);
    r.done();
  }
  checked(path, [&] { c.validate(); });
  return c;
}

noise::NoisePoolConfig noise_from_json(const Json& j, noise::NoisePoolConfig base, const std::string& path) {
  noise::NoisePoolConfig c = std::move(base);
  {
    Reader r(j, path);
    r.get("jpeg_qf", c.jpeg_qf);
    r.get("gaussian_var", c.gaussian_var);
    r.get("weights", c.weights);
    r.done();
  }
  checked(path, [&] { c.validate(); });
  return c;
}

meta::TrainerSetup setup_from_json(const Json& j, const meta::TrainerSetup& base) {
  meta::TrainerSetup s = base;
  Reader r(j, "");
  if (const auto* v = r.sub("encoder")) s.encoder = encoder_from_json(*v, s.encoder);
  if (const auto* v = r.sub("decoder")) s.decoder = decoder_from_json(*v, s.decoder);
  if (const auto* v = r.sub("train")) s.train = train_from_json(*v, s.train);
  if (const auto* v = r.sub("weights")) s.weights = weights_from_json(*v, s.weights);
  if (const auto* v = r.sub("noise")) s.noise = noise_from_json(*v, s.noise);
  r.done();
  return s;
}

meta::LossBreakdown breakdown_from_json(const Json& j) {
  meta::LossBreakdown b;
  Reader r(j, "losses");
  r.get("l_inv_phi", b.l_inv_phi);
  r.get("l_adv_tra", b.l_adv_tra);
  r.get("l_adv_tes", b.l_adv_tes);
  r.get("l_inv_tes", b.l_inv_tes);
  r.get("l_inv_total", b.l_inv_total);
  r.get("l_adv_total", b.l_adv_total);
  r.get("l_wm_phi", b.l_wm_phi);
  r.get("l_wm_tes", b.l_wm_tes);
  r.get("l_wm_total", b.l_wm_total);
  r.get("l_dip", b.l_dip);
  r.done();
  return b;
}

Json to_json(const RunConfig& c) {
  Json j = Json::object();
  if (c.corpus.dir.empty()) {
    j["corpus"] = {{"synthetic",
                    {{"identities", c.corpus.identities},
                     {"images_per_identity", c.corpus.images_per_identity},
                     {"seed", c.corpus.seed}}}};
  } else {
    j["corpus"] = {{"dir", c.corpus.dir.string()}};
  }
  Json archs = Json::array();
  for (auto a : c.surrogates.archs) archs.push_back(fr::to_string(a));
  j["surrogates"] = {{"archs", archs}, {"epochs", c.surrogates.epochs}, {"far", c.surrogates.far}, {"seed", c.surrogates.seed}};
  const Json setup = to_json(c.setup);
  for (const auto& [k, v] : setup.items()) j[k] = v;
  j["run_dir"] = c.run_dir.string();
  j["eval"] = {{"seed", c.eval_seed}, {"images", c.eval_images}};
  return j;
}

RunConfig run_from_json(const Json& j) {
  RunConfig c;
  Reader r(j, "");
  const Json* corpus = r.sub("corpus");
  if (!corpus) throw ConfigError("corpus: required field missing");
  {
    Reader cr(*corpus, "corpus");
    std::string dir;
    cr.get("dir", dir);
    c.corpus.dir = dir;
    if (const auto* syn = cr.sub("synthetic")) {
      if (!dir.empty()) throw ConfigError("corpus: give either dir or synthetic, not both");
      Reader sr(*syn, "corpus.synthetic");
      sr.get("identities", c.corpus.identities);
      sr.get("images_per_identity", c.corpus.images_per_identity);
      sr.get("seed", c.corpus.seed);
      if (c.corpus.identities < 4 || c.corpus.images_per_identity < 2) {
        throw ConfigError("corpus.synthetic: needs at least 4 identities with 2 images each");
      }
      sr.done();
    } else if (dir.empty()) {
      throw ConfigError("corpus.dir: required field missing (or give corpus.synthetic)");
    }
    cr.done();
  }
  if (const auto* s = r.sub("surrogates")) {
    Reader sr(*s, "surrogates");
    std::vector<std::string> names;
    sr.get("archs", names);
    if (sr.has("archs")) {
      c.surrogates.archs.clear();
      for (const auto& n : names) {
        try {
          c.surrogates.archs.push_back(fr::parse_arch(n));
        } catch (const ArgumentError& e) {
          throw ConfigError(std::string("surrogates.archs: ") + e.what());
        }
      }
    }
    sr.get("epochs", c.surrogates.epochs);
    sr.get("far", c.surrogates.far);
    sr.get("seed", c.surrogates.seed);
    if (c.surrogates.epochs < 1) throw ConfigError("surrogates.epochs: must be positive");
    if (!(c.surrogates.far > 0.0 && c.surrogates.far < 1.0)) throw ConfigError("surrogates.far: must be in (0,1)");
    sr.done();
  }
  Json setup = Json::object();
  for (const char* key : {"encoder", "decoder", "train", "weights", "noise"}) {
    if (const auto* v = r.sub(key)) setup[key] = *v;
  }
  c.setup = setup_from_json(setup, meta::desk_preset());
  checked("setup", [&] { c.setup.validate(); });
  const std::size_t needed = std::size_t(c.setup.train.P + c.setup.train.Q + 1);
  if (c.surrogates.archs.size() < needed) {
    throw ConfigError("surrogates.archs: P + Q + 1 = " + std::to_string(needed) + " models needed, " +
                      std::to_string(c.surrogates.archs.size()) + " given");
  }
  std::string run_dir = c.run_dir.string();
  r.get("run_dir", run_dir);
  c.run_dir = run_dir;
  if (const auto* e = r.sub("eval")) {
    Reader er(*e, "eval");
    er.get("seed", c.eval_seed);
    er.get("images", c.eval_images);
    if (c.eval_images < 1) throw ConfigError("eval.images: must be positive");
    er.done();
  }
  r.done();
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  Json j;
  try {
    j = Json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  RunConfig c = run_from_json(j);
  const fs::path base = file.parent_path();
  if (!c.corpus.dir.empty()) {
    if (c.corpus.dir.is_relative()) c.corpus.dir = base / c.corpus.dir;
    if (!fs::is_directory(c.corpus.dir)) throw ConfigError("corpus.dir: no such directory " + c.corpus.dir.string());
  }
  if (c.run_dir.is_relative()) c.run_dir = base / c.run_dir;
  return c;
}

}  // namespace dipwm::config
