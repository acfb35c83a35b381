#pragma once

#include <filesystem>

#include "dipwm/config.hpp"
#include "dipwm/fr_surrogates.hpp"
#include "dipwm/imaging_io.hpp"

namespace dipwm::pipeline {

/// Loads the corpus directory, or generates the synthetic corpus when no
/// directory is given.
io::IdentityCorpus load_corpus(const config::CorpusSpec& spec);

/// Calibrated surrogates in declared order. Models cached under
/// `cfg.surrogate_dir()` are reused when they were built from the same corpus
/// and surrogate settings; the rest are trained, calibrated and cached.
std::vector<fr::EmbedderModel> prepare_surrogates(const io::IdentityCorpus& corpus, const config::RunConfig& cfg,
                                                  bool verbose = false);

/// `prepare_surrogates` partitioned by the setup's P and Q.
fr::SurrogatePool prepare_pool(const io::IdentityCorpus& corpus, const config::RunConfig& cfg, bool verbose = false);

/// Keeps large training buffers on the heap instead of fresh mappings. Without
/// it glibc maps and unmaps every multi-megabyte tensor, and a training step
/// spends about a third of its time in the kernel. No-op off glibc.
void tune_allocator();

}  // namespace dipwm::pipeline
