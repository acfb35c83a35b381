#include "dipwm/pipeline.hpp"

#include <fstream>
#include <iostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dipwm::pipeline {

namespace fs = std::filesystem;

io::IdentityCorpus load_corpus(const config::CorpusSpec& spec) {
  if (!spec.dir.empty()) return io::load_corpus_dir(spec.dir);
  return io::generate_synthetic_corpus(spec.identities, spec.images_per_identity, spec.seed);
}

namespace {

/// What a cached surrogate was built from.
config::Json provenance(const config::RunConfig& cfg, fr::Arch arch, std::size_t index) {
  const auto& s = cfg.surrogates;
  config::Json j;
  j["arch"] = fr::to_string(arch);
  j["seed"] = s.seed + index;
  j["epochs"] = s.epochs;
  j["far"] = s.far;
  j["corpus"] = config::to_json(cfg)["corpus"];
  j["image_side"] = cfg.setup.encoder.image_side;
  return j;
}

}  // namespace

std::vector<fr::EmbedderModel> prepare_surrogates(const io::IdentityCorpus& corpus, const config::RunConfig& cfg,
                                                  bool verbose) {
  const fs::path dir = cfg.surrogate_dir();
  fs::create_directories(dir);
  std::vector<fr::EmbedderModel> models;
  for (std::size_t i = 0; i < cfg.surrogates.archs.size(); ++i) {
    const fr::Arch arch = cfg.surrogates.archs[i];
    const std::string stem = std::to_string(i) + "_" + fr::to_string(arch);
    const fs::path model_file = dir / (stem + ".dwa");
    const fs::path info_file = dir / (stem + ".json");
    const config::Json want = provenance(cfg, arch, i);

    if (fs::exists(model_file) && fs::exists(info_file)) {
      std::ifstream in(info_file);
      const auto have = config::Json::parse(in, nullptr, false);
      if (have == want) {
        auto m = fr::load_embedder(model_file);
        if (m.tau && m.trained) {
          models.push_back(std::move(m));
          continue;
        }
      }
    }

    fr::SurrogateTraining opts;
    opts.epochs = cfg.surrogates.epochs;
    fr::EmbedderConfig ec{arch, cfg.setup.encoder.image_side};
    auto m = fr::train_surrogate(corpus, ec, cfg.surrogates.seed + i, opts);
    m.tau = fr::calibrate_threshold(m, corpus, cfg.surrogates.far);
    if (verbose) {
      std::cerr << "surrogate " << stem << "  tau " << *m.tau << "  verification accuracy "
                << fr::verification_accuracy(m, corpus, io::Split::train, io::Split::test) << "\n";
    }
    fr::save_embedder(model_file, m);
    std::ofstream(info_file) << want.dump(2) << "\n";
    models.push_back(std::move(m));
  }
  return models;
}

fr::SurrogatePool prepare_pool(const io::IdentityCorpus& corpus, const config::RunConfig& cfg, bool verbose) {
  return fr::partition_pool(prepare_surrogates(corpus, cfg, verbose), cfg.setup.train.P, cfg.setup.train.Q);
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace dipwm::pipeline
