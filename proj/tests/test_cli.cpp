#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dipwm/imaging_io.hpp"
#include "dipwm/meta_trainer.hpp"

using namespace dipwm;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& file) {
  std::ifstream in(file);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Runs the CLI from `dir`, capturing both streams.
Run cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" DIPWM_CLI "' " + args + " > out.txt 2> err.txt";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(dir / "out.txt");
  r.err = slurp(dir / "err.txt");
  return r;
}

std::string field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.starts_with(key + " ")) return line.substr(key.size() + 1);
  }
  return {};
}

struct Workspace {
  fs::path dir = fs::temp_directory_path() / "dipwm_cli";
  Workspace() {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
};

/// An untrained desk checkpoint and one face image.
void seed_files(const fs::path& dir) {
  const auto setup = meta::desk_preset();
  meta::save_checkpoint(dir / "ckpt.dwa", setup, meta::init_state(setup));
  const auto corpus = io::generate_synthetic_corpus(16, 2, 4);
  io::save_png(dir / "face.png", corpus.images.slice(0, 1));
}

}  // namespace

TEST_CASE("registry, embed, extract and verify keep their exit codes") {
  Workspace ws;
  seed_files(ws.dir);
  const std::string ck = "--ckpt ckpt.dwa";

  auto a = cli(ws.dir, "register --registry reg.tsv --user alice --seed 4");
  REQUIRE(a.code == 0);
  CHECK(cli(ws.dir, "register --registry again.tsv --user alice --seed 4").out == a.out);
  CHECK(cli(ws.dir, "register --registry reg.tsv --user bob --seed 4").out != a.out);
  const std::string hex = a.out.substr(a.out.find('\t') + 1, 13);

  auto e = cli(ws.dir, "embed " + ck + " --image face.png --payload " + hex + " --out wm.png");
  REQUIRE(e.code == 0);
  const auto img = io::load_image(ws.dir / "wm.png");
  CHECK(img.shape == Shape{1, 3, kImageSize, kImageSize});
  CHECK(!field(e.out, "ssim").empty());

  auto x = cli(ws.dir, "extract " + ck + " --image wm.png");
  REQUIRE(x.code == 0);
  const std::string read = field(x.out, "payload");
  REQUIRE(read.size() == 13);
  CHECK(cli(ws.dir, "extract " + ck + " --image wm.png").out == x.out);

  // Enrol exactly what the decoder reads, then its complement.
  codec::Payload bits = io::payload_from_hex(read, 50);
  REQUIRE(cli(ws.dir, "register --registry reg.tsv --user carol --payload " + read).code == 0);
  REQUIRE(cli(ws.dir, "register --registry reg.tsv --user dave --payload " + io::payload_to_hex(1.0f - bits)).code == 0);
  auto match = cli(ws.dir, "verify " + ck + " --image wm.png --user carol --registry reg.tsv");
  CHECK(match.code == 0);
  CHECK(match.out.starts_with("match"));
  auto miss = cli(ws.dir, "verify " + ck + " --image wm.png --user dave --registry reg.tsv");
  CHECK(miss.code == 1);
  CHECK(miss.out.starts_with("no-match"));
  CHECK(cli(ws.dir, "verify " + ck + " --image wm.png --user dave --registry reg.tsv --min-acc 0").code == 0);

  CHECK(cli(ws.dir, "verify " + ck + " --image wm.png --user nobody --registry reg.tsv").code == 2);
  CHECK(cli(ws.dir, "embed " + ck + " --image face.png --payload abc --out bad.png").code == 2);
  CHECK(cli(ws.dir, "embed --ckpt missing --image face.png --payload " + hex + " --out bad.png").code == 2);
  CHECK(cli(ws.dir, "extract " + ck + " --image missing.png").code == 2);
  CHECK(cli(ws.dir, "").code == 2);
  CHECK(cli(ws.dir, "frobnicate").code == 2);
}

TEST_CASE("configuration errors name the field") {
  Workspace ws;
  std::ofstream(ws.dir / "nodir.json") << R"({"corpus": {"dir": "no_such_corpus"}})";
  auto r = cli(ws.dir, "train nodir.json");
  CHECK(r.code == 2);
  CHECK(r.err.find("corpus.dir") != std::string::npos);

  std::ofstream(ws.dir / "typo.json") << R"({"corpus": {"synthetic": {}}, "train": {"epochz": 3}})";
  r = cli(ws.dir, "train typo.json");
  CHECK(r.code == 2);
  CHECK(r.err.find("train.epochz") != std::string::npos);
}

TEST_CASE("train then evaluate on a one-epoch run") {
  Workspace ws;
  std::ofstream(ws.dir / "run.json") << R"({
    "corpus": {"synthetic": {"identities": 16, "images_per_identity": 6}},
    "surrogates": {"epochs": 1},
    "train": {"epochs": 1, "validation_size": 4},
    "run_dir": "run"
  })";
  auto t = cli(ws.dir, "train run.json --quiet --seed 3");
  REQUIRE(t.code == 0);
  CHECK(fs::exists(ws.dir / "run" / "checkpoints" / "best" / "model.dwa"));
  CHECK(fs::exists(ws.dir / "run" / "checkpoints" / "ckpt_1" / "model.dwa"));
  CHECK(fs::exists(ws.dir / "run" / "surrogates" / "3_cnn4_wide.dwa"));

  auto ev = cli(ws.dir, "evaluate run.json --images 6");
  REQUIRE(ev.code == 0);
  const std::string jsonl = slurp(ws.dir / "run" / "reports" / "report.jsonl");
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 4 * 5);
  CHECK(jsonl.find("\"jpeg:30\"") != std::string::npos);
  REQUIRE(cli(ws.dir, "evaluate run.json --images 6").code == 0);
  CHECK(slurp(ws.dir / "run" / "reports" / "report.jsonl") == jsonl);

  auto one = cli(ws.dir, "evaluate run.json --images 6 --processing jpeg:50 --out only");
  REQUIRE(one.code == 0);
  const std::string rows = slurp(ws.dir / "only" / "report.csv");
  CHECK(std::count(rows.begin(), rows.end(), '\n') == 1 + 4 * 2);
  CHECK(cli(ws.dir, "evaluate run.json --processing sharpen:2").code == 2);
}
