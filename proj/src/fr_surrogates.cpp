#include "dipwm/fr_surrogates.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "dipwm/archive.hpp"

namespace dipwm::fr {

namespace {

constexpr std::array<Arch, 4> kArchs{Arch::cnn4, Arch::cnn4_wide, Arch::depthwise, Arch::mini_residual};

void add_conv(ParamSet<float>& p, const std::string& name, int out, int in, int k, std::mt19937_64& rng,
              float gain = 1.0f) {
  p.add(name + ".w", kaiming_uniform<float>(Shape{out, in, k, k}, in * k * k, rng, gain));
  p.add(name + ".b", Tensor<float>(Shape{out, 1, 1, 1}));
}

/// Mean softmax cross-entropy of logits [N, K, 1, 1] against class indices.
ops::Var<float> softmax_xent(Tape<float>& tape, ops::Var<float> logits, const std::vector<int>& labels) {
  const Shape s = tape.shape(logits);
  const int k = s.c;
  const auto& z = tape.value(logits).data;
  Eigen::ArrayXf probs(z.size());
  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    auto row = z.segment(n * k, k);
    const float m = row.maxCoeff();
    Eigen::ArrayXf e = (row - m).exp();
    const float sum = e.sum();
    probs.segment(n * k, k) = e / sum;
    loss += std::log(sum) + m - row[labels[std::size_t(n)]];
  }
  Tensor<float> out(Shape{1, 1, 1, 1});
  out.data[0] = float(loss / s.n);
  return tape.record(std::move(out), tape.needs_grad(logits),
                     [=](Tape<float>& t, const Tensor<float>& g) {
    Eigen::ArrayXf d = probs;
    for (int n = 0; n < s.n; ++n) d[n * k + labels[std::size_t(n)]] -= 1.0f;
    t.grad_ref(logits).data += d * (g.data[0] / float(s.n));
  });
}

std::vector<std::pair<int, int>> pairs_in(const io::IdentityCorpus& corpus, io::Split split, bool same) {
  const auto idx = corpus.indices(split);
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      const bool s = corpus.labels[std::size_t(idx[i])] == corpus.labels[std::size_t(idx[j])];
      if (s == same) out.emplace_back(idx[i], idx[j]);
    }
  return out;
}

std::vector<double> pair_cosines(const Eigen::MatrixXf& emb, const std::vector<std::pair<int, int>>& pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  for (auto [a, b] : pairs) out.push_back(double(emb.row(a).dot(emb.row(b))));
  return out;
}

std::vector<std::pair<int, int>> subsample(std::vector<std::pair<int, int>> pairs, std::size_t cap,
                                           std::uint64_t seed) {
  if (pairs.size() <= cap) return pairs;
  std::mt19937_64 rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  pairs.resize(cap);
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

/// Embeddings of every corpus image, one row per image index.
Eigen::MatrixXf embed_corpus(const EmbedderModel& model, const io::IdentityCorpus& corpus) {
  return embed(model, corpus.images);
}

}  // namespace

std::string to_string(Arch a) {
  switch (a) {
    case Arch::cnn4: return "cnn4";
    case Arch::cnn4_wide: return "cnn4_wide";
    case Arch::depthwise: return "depthwise";
    case Arch::mini_residual: return "mini_residual";
  }
  return "?";
}

Arch parse_arch(const std::string& name) {
  for (Arch a : kArchs) {
    if (to_string(a) == name) return a;
  }
  throw ArgumentError("unknown embedder architecture '" + name + "'");
}

void EmbedderConfig::validate() const {
  if (image_side < 16 || image_side % 16 != 0) throw ConfigError("embedder image_side must be a multiple of 16");
  if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
}

ParamSet<float> init_embedder(const EmbedderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet<float> p;
  int last = 0;
  switch (cfg.arch) {
    case Arch::cnn4:
      add_conv(p, "conv.0", 8, 3, 3, rng);
      add_conv(p, "conv.1", 16, 8, 3, rng);
      add_conv(p, "conv.2", 32, 16, 3, rng);
      add_conv(p, "conv.3", 32, 32, 3, rng);
      last = 32;
      break;
    case Arch::cnn4_wide:
      add_conv(p, "conv.0", 16, 3, 5, rng);
      add_conv(p, "conv.1", 24, 16, 3, rng);
      add_conv(p, "conv.2", 32, 24, 3, rng);
      add_conv(p, "conv.3", 48, 32, 3, rng);
      last = 48;
      break;
    case Arch::depthwise: {
      add_conv(p, "stem", 16, 3, 3, rng);
      const std::array<int, 4> widths{16, 24, 32, 48};
      for (int s = 0; s < 3; ++s) {
        const std::string name = "block." + std::to_string(s);
        p.add(name + ".dw.w", kaiming_uniform<float>(Shape{widths[s], 1, 3, 3}, 9, rng));
        p.add(name + ".dw.b", Tensor<float>(Shape{widths[s], 1, 1, 1}));
        add_conv(p, name + ".pw", widths[s + 1], widths[s], 1, rng);
      }
      last = 48;
      break;
    }
    case Arch::mini_residual:
      add_conv(p, "conv.0", 12, 3, 3, rng);
      add_conv(p, "conv.1", 24, 12, 3, rng);
      add_conv(p, "conv.2", 32, 24, 3, rng);
      add_conv(p, "res.a", 32, 32, 3, rng);
      add_conv(p, "res.b", 32, 32, 3, rng, 0.5f);
      add_conv(p, "conv.3", 32, 32, 3, rng);
      last = 32;
      break;
  }
  const int cells = (cfg.image_side / 16) * (cfg.image_side / 16);
  p.add("embed.w", kaiming_uniform<float>(Shape{cfg.embed_dim, last * cells, 1, 1}, last * cells, rng));
  p.add("embed.b", Tensor<float>(Shape{cfg.embed_dim, 1, 1, 1}));
  return p;
}

EmbedderModel random_embedder(const EmbedderConfig& cfg, std::uint64_t seed) {
  return EmbedderModel{cfg, init_embedder(cfg, seed), std::nullopt, false};
}

Eigen::MatrixXf embed(const EmbedderModel& model, const ImageTensor& x) {
  const int d = model.config.embed_dim;
  Eigen::MatrixXf out(x.shape.n, d);
  constexpr int kChunk = 64;
  for (int first = 0; first < x.shape.n; first += kChunk) {
    const int count = std::min(kChunk, x.shape.n - first);
    Tape<float> tape;
    Bound<float> bound(tape, model.params, false);
    auto e = embed(tape, model.config, bound, tape.constant(x.slice(first, count)));
    const auto& v = tape.value(e).data;
    for (int n = 0; n < count; ++n) out.row(first + n) = v.segment(Eigen::Index(n) * d, d).matrix().transpose();
  }
  return out;
}

Eigen::VectorXf cosine_rows(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("cosine_rows: shape mismatch");
  return (a.array() * b.array()).rowwise().sum();
}

EmbedderModel train_surrogate(const io::IdentityCorpus& corpus, const EmbedderConfig& cfg, std::uint64_t seed,
                              const SurrogateTraining& opts) {
  if (corpus.identity_count() < 4) throw ArgumentError("surrogate training needs at least 4 identities");
  if (opts.epochs < 1 || opts.batch_size < 1 || !(opts.lr > 0.0f)) {
    throw ArgumentError("invalid surrogate training options");
  }
  std::vector<int> idx = corpus.indices(io::Split::train);
  const auto target = corpus.indices(io::Split::target);
  idx.insert(idx.end(), target.begin(), target.end());
  std::sort(idx.begin(), idx.end());

  std::map<int, int> classes;
  for (int i : idx) classes.emplace(corpus.labels[std::size_t(i)], 0);
  int next = 0;
  for (auto& [label, cls] : classes) cls = next++;

  EmbedderModel model = random_embedder(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x5EEDF00Dull);
  model.params.add("cls.w", kaiming_uniform<float>(Shape{next, cfg.embed_dim, 1, 1}, cfg.embed_dim, rng));
  model.params.add("cls.b", Tensor<float>(Shape{next, 1, 1, 1}));
  Adam<float> adam(model.params, opts.lr);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t first = 0; first < idx.size(); first += std::size_t(opts.batch_size)) {
      const std::vector<int> batch(idx.begin() + std::ptrdiff_t(first),
                                   idx.begin() + std::ptrdiff_t(std::min(idx.size(), first + opts.batch_size)));
      std::vector<int> labels;
      for (int i : batch) labels.push_back(classes.at(corpus.labels[std::size_t(i)]));
      Tape<float> tape;
      Bound<float> bound(tape, model.params, true);
      auto e = embed(tape, cfg, bound, tape.constant(corpus.gather(batch)));
      auto logits = ops::linear(tape, ops::scale(tape, e, opts.logit_scale), bound["cls.w"], bound["cls.b"]);
      auto loss = softmax_xent(tape, logits, labels);
      tape.backward(loss);
      adam.step(model.params, bound.gradients(tape));
    }
  }

  ParamSet<float> kept;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (!model.params.name(i).starts_with("cls.")) kept.add(model.params.name(i), model.params[i]);
  }
  model.params = std::move(kept);
  model.trained = true;
  return model;
}

std::vector<double> impostor_cosines(const EmbedderModel& model, const io::IdentityCorpus& corpus, io::Split split,
                                     std::size_t cap, std::uint64_t seed) {
  auto pairs = subsample(pairs_in(corpus, split, false), cap, seed);
  return pair_cosines(embed_corpus(model, corpus), pairs);
}

std::vector<double> genuine_cosines(const EmbedderModel& model, const io::IdentityCorpus& corpus, io::Split split) {
  return pair_cosines(embed_corpus(model, corpus), pairs_in(corpus, split, true));
}

double threshold_at_far(std::vector<double> impostor, double far) {
  if (!(far > 0.0 && far < 1.0)) throw ArgumentError("FAR must be in (0,1)");
  if (impostor.empty()) throw DataError("no impostor pairs");
  std::sort(impostor.begin(), impostor.end(), std::greater<>());
  const auto allowed = std::size_t(std::floor(far * double(impostor.size()) + 1e-9));
  return impostor[std::min(allowed, impostor.size() - 1)];
}

double calibrate_threshold(const EmbedderModel& model, const io::IdentityCorpus& corpus, double far,
                           std::uint64_t seed) {
  if (!(far > 0.0 && far < 1.0)) throw ArgumentError("FAR must be in (0,1)");
  auto cos = impostor_cosines(model, corpus, io::Split::test, 10000, seed);
  if (cos.size() < 100) {
    throw DataError("calibration needs at least 100 impostor pairs, the test split has " +
                    std::to_string(cos.size()));
  }
  return threshold_at_far(std::move(cos), far);
}

double verification_accuracy(const EmbedderModel& model, const io::IdentityCorpus& corpus, io::Split fit,
                             io::Split eval) {
  const Eigen::MatrixXf emb = embed_corpus(model, corpus);
  auto balanced = [&](io::Split split, double tau) {
    const auto gen = pair_cosines(emb, pairs_in(corpus, split, true));
    const auto imp = pair_cosines(emb, pairs_in(corpus, split, false));
    if (gen.empty() || imp.empty()) throw DataError("split lacks genuine or impostor pairs");
    const double tpr = double(std::count_if(gen.begin(), gen.end(), [&](double c) { return c > tau; })) / gen.size();
    const double tnr = double(std::count_if(imp.begin(), imp.end(), [&](double c) { return c <= tau; })) / imp.size();
    return 0.5 * (tpr + tnr);
  };
  auto candidates = pair_cosines(emb, pairs_in(corpus, fit, true));
  const auto imp = pair_cosines(emb, pairs_in(corpus, fit, false));
  candidates.insert(candidates.end(), imp.begin(), imp.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  // Thin the sweep; a few hundred candidate thresholds are plenty.
  const std::size_t stride = std::max<std::size_t>(1, candidates.size() / 400);
  double best_tau = 0.0, best = -1.0;
  for (std::size_t i = 0; i < candidates.size(); i += stride) {
    const double acc = balanced(fit, candidates[i]);
    if (acc > best) {
      best = acc;
      best_tau = candidates[i];
    }
  }
  return balanced(eval, best_tau);
}

std::vector<const EmbedderModel*> SurrogatePool::white_box() const {
  std::vector<const EmbedderModel*> out;
  for (const auto& m : meta_train) out.push_back(&m);
  for (const auto& m : meta_test) out.push_back(&m);
  return out;
}

std::vector<const EmbedderModel*> SurrogatePool::all() const {
  auto out = white_box();
  for (const auto& m : held_out) out.push_back(&m);
  return out;
}

SurrogatePool partition_pool(std::vector<EmbedderModel> models, int P, int Q) {
  if (P < 1 || Q < 1) throw ConfigError("pool needs P >= 1 and Q >= 1");
  if (models.size() < std::size_t(P + Q + 1)) {
    throw ConfigError("pool of " + std::to_string(models.size()) + " models cannot hold P=" + std::to_string(P) +
                      ", Q=" + std::to_string(Q) + " and a held-out model");
  }
  SurrogatePool pool;
  for (std::size_t i = 0; i < models.size(); ++i) {
    auto& group = i < std::size_t(P) ? pool.meta_train : i < std::size_t(P + Q) ? pool.meta_test : pool.held_out;
    group.push_back(std::move(models[i]));
  }
  return pool;
}

void save_embedder(const std::filesystem::path& file, const EmbedderModel& model) {
  archive::Archive a;
  a.manifest["kind"] = "embedder";
  a.manifest["arch"] = to_string(model.config.arch);
  a.manifest["image_side"] = model.config.image_side;
  a.manifest["embed_dim"] = model.config.embed_dim;
  a.manifest["trained"] = model.trained;
  if (model.tau) a.manifest["tau"] = *model.tau;
  else a.manifest["tau"] = nullptr;
  a.add("embedder", model.params);
  archive::save(file, a);
}

EmbedderModel load_embedder(const std::filesystem::path& file) {
  auto a = archive::load(file);
  const auto& m = a.manifest;
  if (m.value("kind", "") != "embedder") throw IoError(file.string() + " is not an embedder archive");
  EmbedderModel model;
  model.config.arch = parse_arch(m.at("arch").get<std::string>());
  model.config.image_side = m.at("image_side").get<int>();
  model.config.embed_dim = m.at("embed_dim").get<int>();
  model.trained = m.at("trained").get<bool>();
  if (!m.at("tau").is_null()) model.tau = m.at("tau").get<double>();
  model.params = a.group("embedder");
  init_embedder(model.config, 0).require_same_layout(model.params, file.string().c_str());
  return model;
}

}  // namespace dipwm::fr
