#include "dipwm/imaging_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace dipwm::io {

namespace fs = std::filesystem;

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::target: return "target";
  }
  return "?";
}

int IdentityCorpus::identity_count() const {
  return int(std::set<int>(labels.begin(), labels.end()).size());
}

std::vector<int> IdentityCorpus::indices(Split s) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (splits[std::size_t(i)] == s) out.push_back(i);
  }
  return out;
}

std::vector<int> IdentityCorpus::identities(Split s) const {
  std::set<int> ids;
  for (int i : indices(s)) ids.insert(labels[std::size_t(i)]);
  return {ids.begin(), ids.end()};
}

std::vector<int> IdentityCorpus::images_of(int label) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (labels[std::size_t(i)] == label) out.push_back(i);
  }
  return out;
}

ImageTensor IdentityCorpus::gather(const std::vector<int>& idx) const {
  Shape s = images.shape;
  s.n = int(idx.size());
  ImageTensor out(s);
  const Eigen::Index per = s.per_item();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    out.data.segment(Eigen::Index(k) * per, per) = images.data.segment(Eigen::Index(idx[k]) * per, per);
  }
  return out;
}

void IdentityCorpus::validate() const {
  if (images.shape.n != size() || splits.size() != labels.size()) {
    throw DataError("corpus arrays disagree in length");
  }
  check_image(images, images.shape.h);
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  for (auto [label, n] : counts) {
    if (n < 2) throw DataError("identity " + std::to_string(label) + " has fewer than 2 images");
  }
  const auto targets = identities(Split::target);
  if (targets.empty()) throw DataError("corpus has no target identities");
  for (Split s : {Split::train, Split::test}) {
    for (int id : identities(s)) {
      if (std::binary_search(targets.begin(), targets.end(), id)) {
        throw DataError("identity " + std::to_string(id) + " appears in both target and " +
                        std::string(to_string(s)) + " splits");
      }
    }
  }
}

std::vector<Split> assign_splits(const std::vector<int>& labels) {
  std::set<int> ids(labels.begin(), labels.end());
  const int n_target = std::max(1, int(ids.size()) / 4);
  std::set<int> targets;
  for (auto it = ids.rbegin(); it != ids.rend() && int(targets.size()) < n_target; ++it) targets.insert(*it);

  std::map<int, int> per_id;
  for (int l : labels) ++per_id[l];
  std::map<int, int> seen;
  std::vector<Split> splits;
  splits.reserve(labels.size());
  for (int l : labels) {
    if (targets.contains(l)) {
      splits.push_back(Split::target);
      continue;
    }
    const int n = per_id[l];
    const int n_test = std::max(1, n / 3);
    splits.push_back(seen[l]++ < n - n_test ? Split::train : Split::test);
  }
  return splits;
}

namespace {

struct IdentityStyle {
  Eigen::Array3f background, background_tint, skin, hair, eye, mouth;
  float cx, cy, rx, ry;
  float eye_dx, eye_dy, eye_r;
  float mouth_w, mouth_dy, mouth_h;
  float hair_frac;
  float tex_freq, tex_angle, tex_amp;
};

Eigen::Array3f random_color(std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> d(lo, hi);
  const float r = d(rng);
  const float g = d(rng);
  const float b = d(rng);
  return {r, g, b};
}

IdentityStyle random_style(std::mt19937_64& rng) {
  auto u = [&](float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); };
  IdentityStyle s;
  s.background = random_color(rng, 0.05f, 0.95f);
  s.background_tint = random_color(rng, -0.15f, 0.15f);
  s.skin = Eigen::Array3f(u(0.45f, 0.95f), u(0.3f, 0.8f), u(0.2f, 0.7f));
  s.hair = random_color(rng, 0.0f, 0.6f);
  s.eye = random_color(rng, 0.0f, 1.0f);
  s.mouth = random_color(rng, 0.2f, 0.9f);
  s.cx = u(50.0f, 62.0f);
  s.cy = u(54.0f, 64.0f);
  s.rx = u(28.0f, 40.0f);
  s.ry = u(36.0f, 48.0f);
  s.eye_dx = u(11.0f, 20.0f);
  s.eye_dy = u(-16.0f, -6.0f);
  s.eye_r = u(3.5f, 7.5f);
  s.mouth_w = u(12.0f, 30.0f);
  s.mouth_dy = u(14.0f, 24.0f);
  s.mouth_h = u(2.5f, 7.0f);
  s.hair_frac = u(0.35f, 0.8f);
  s.tex_freq = u(0.15f, 0.6f);
  s.tex_angle = u(0.0f, float(std::numbers::pi));
  s.tex_amp = u(0.03f, 0.12f);
  return s;
}

void render(const IdentityStyle& s, std::mt19937_64& rng, ImageTensor& out, int n) {
  auto u = [&](float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(rng); };
  const float dx = u(-4.0f, 4.0f);
  const float dy = u(-4.0f, 4.0f);
  const float brightness = u(-0.06f, 0.06f);
  const float contrast = u(0.9f, 1.1f);
  std::normal_distribution<float> noise(0.0f, 0.02f);
  const float ca = std::cos(s.tex_angle);
  const float sa = std::sin(s.tex_angle);
  const int side = out.shape.h;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const float px = float(x) - dx;
      const float py = float(y) - dy;
      const float ramp = (py / float(side)) - 0.5f;
      Eigen::Array3f c = s.background + s.background_tint * ramp;
      const float ex = (px - s.cx) / s.rx;
      const float ey = (py - s.cy) / s.ry;
      if (ex * ex + ey * ey <= 1.0f) {
        const float stripes = std::sin(s.tex_freq * (px * ca + py * sa));
        c = s.skin * (1.0f + s.tex_amp * stripes);
        if (ey < -s.hair_frac) c = s.hair * (1.0f + 0.5f * s.tex_amp * stripes);
        for (float side_sign : {-1.0f, 1.0f}) {
          const float ux = px - (s.cx + side_sign * s.eye_dx);
          const float uy = py - (s.cy + s.eye_dy);
          const float d2 = ux * ux + uy * uy;
          if (d2 <= s.eye_r * s.eye_r) c = d2 <= 0.25f * s.eye_r * s.eye_r ? s.eye * 0.3f : s.eye;
        }
        if (std::abs(px - s.cx) <= 0.5f * s.mouth_w && std::abs(py - (s.cy + s.mouth_dy)) <= 0.5f * s.mouth_h) {
          c = s.mouth;
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        const float v = (c[ch] - 0.5f) * contrast + 0.5f + brightness + noise(rng);
        out(n, ch, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
}

}  // namespace

IdentityCorpus generate_synthetic_corpus(int n_identities, int images_per_identity, std::uint64_t seed) {
  if (n_identities < 4) throw ArgumentError("synthetic corpus needs at least 4 identities");
  if (images_per_identity < 2) throw ArgumentError("synthetic corpus needs at least 2 images per identity");
  std::mt19937_64 rng(seed);
  std::vector<IdentityStyle> styles;
  for (int i = 0; i < n_identities; ++i) styles.push_back(random_style(rng));

  IdentityCorpus corpus;
  corpus.images = ImageTensor(Shape{n_identities * images_per_identity, 3, kImageSize, kImageSize});
  int n = 0;
  for (int id = 0; id < n_identities; ++id) {
    for (int k = 0; k < images_per_identity; ++k, ++n) {
      render(styles[std::size_t(id)], rng, corpus.images, n);
      corpus.labels.push_back(id);
    }
  }
  corpus.splits = assign_splits(corpus.labels);
  return corpus;
}

// ---------------------------------------------------------------------------
// Codecs

namespace {

ImageTensor from_rgb8(const std::vector<unsigned char>& px, int h, int w) {
  ImageTensor out(Shape{1, 3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) out(0, c, y, x) = float(px[(std::size_t(y) * w + x) * 3 + c]) / 255.0f;
    }
  }
  return out;
}

std::vector<unsigned char> to_rgb8(const ImageTensor& t, int n) {
  const int h = t.shape.h;
  const int w = t.shape.w;
  std::vector<unsigned char> px(std::size_t(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(t(n, c, y, x), 0.0f, 1.0f);
        px[(std::size_t(y) * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  return px;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

bool has_ext(const fs::path& p, std::initializer_list<const char*> exts) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
  return std::any_of(exts.begin(), exts.end(), [&](const char* x) { return e == x; });
}

std::vector<unsigned char> read_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ImageTensor read_png(const fs::path& file) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, file.string().c_str())) {
    throw IoError("cannot read PNG " + file.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + file.string() + ": " + image.message);
  }
  return from_rgb8(px, int(image.height), int(image.width));
}

}  // namespace

std::vector<unsigned char> encode_jpeg(const ImageTensor& images, int n, int quality) {
  if (quality < 1 || quality > 100) throw ArgumentError("JPEG quality must be in [1,100]");
  auto px = to_rgb8(images, n);
  jpeg_compress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw IoError(std::string("JPEG encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = JDIMENSION(images.shape.w);
  cinfo.image_height = JDIMENSION(images.shape.h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const int stride = images.shape.w * 3;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = px.data() + std::size_t(cinfo.next_scanline) * stride;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<unsigned char> out(buffer, buffer + size);
  std::free(buffer);
  return out;
}

ImageTensor decode_jpeg(const std::vector<unsigned char>& bytes) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError(std::string("JPEG decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = int(cinfo.output_width);
  const int h = int(cinfo.output_height);
  std::vector<unsigned char> px(std::size_t(w) * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px.data() + std::size_t(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_rgb8(px, h, w);
}

void save_jpeg(const fs::path& file, const ImageTensor& images, int n, int quality) {
  auto bytes = encode_jpeg(images, n, quality);
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

ImageTensor jpeg_roundtrip(const ImageTensor& images, int quality) {
  ImageTensor out(images.shape);
  const Eigen::Index per = images.shape.per_item();
  for (int n = 0; n < images.shape.n; ++n) {
    auto decoded = decode_jpeg(encode_jpeg(images, n, quality));
    out.data.segment(n * per, per) = decoded.data;
  }
  return out;
}

ImageTensor quantize_8bit(const ImageTensor& images) {
  ImageTensor out = images;
  out.data = (out.data.max(0.0f).min(1.0f) * 255.0f).round() / 255.0f;
  return out;
}

void save_png(const fs::path& file, const ImageTensor& images, int n) {
  if (images.shape.c != 3) throw ConfigError("save_png expects RGB images");
  auto px = to_rgb8(images, n);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = png_uint_32(images.shape.w);
  image.height = png_uint_32(images.shape.h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, file.string().c_str(), 0, px.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + file.string() + ": " + image.message);
  }
}

ImageTensor read_image(const fs::path& file) {
  if (!fs::is_regular_file(file)) throw IoError("cannot read " + file.string() + ": not a file");
  if (has_ext(file, {".png"})) return read_png(file);
  if (has_ext(file, {".jpg", ".jpeg"})) {
    try {
      return decode_jpeg(read_bytes(file));
    } catch (const IoError& e) {
      throw IoError("cannot read " + file.string() + ": " + e.what());
    }
  }
  throw IoError("unsupported image format: " + file.string());
}

ImageTensor center_crop_square(const ImageTensor& images) {
  const int side = std::min(images.shape.h, images.shape.w);
  const int oy = (images.shape.h - side) / 2;
  const int ox = (images.shape.w - side) / 2;
  ImageTensor out(Shape{images.shape.n, images.shape.c, side, side});
  for (int n = 0; n < images.shape.n; ++n)
    for (int c = 0; c < images.shape.c; ++c)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) out(n, c, y, x) = images(n, c, y + oy, x + ox);
  return out;
}

ImageTensor resize_bilinear(const ImageTensor& images, int h, int w) {
  if (h < 1 || w < 1) throw ArgumentError("resize target must be positive");
  const Shape s = images.shape;
  if (s.h == h && s.w == w) return images;
  ImageTensor out(Shape{s.n, s.c, h, w});
  const float sy = float(s.h) / float(h);
  const float sx = float(s.w) / float(w);
  for (int y = 0; y < h; ++y) {
    const float fy = std::clamp((float(y) + 0.5f) * sy - 0.5f, 0.0f, float(s.h - 1));
    const int y0 = int(fy);
    const int y1 = std::min(y0 + 1, s.h - 1);
    const float wy = fy - float(y0);
    for (int x = 0; x < w; ++x) {
      const float fx = std::clamp((float(x) + 0.5f) * sx - 0.5f, 0.0f, float(s.w - 1));
      const int x0 = int(fx);
      const int x1 = std::min(x0 + 1, s.w - 1);
      const float wx = fx - float(x0);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const float top = images(n, c, y0, x0) * (1 - wx) + images(n, c, y0, x1) * wx;
          const float bot = images(n, c, y1, x0) * (1 - wx) + images(n, c, y1, x1) * wx;
          out(n, c, y, x) = top * (1 - wy) + bot * wy;
        }
      }
    }
  }
  return out;
}

ImageTensor load_image(const fs::path& file) {
  auto img = read_image(file);
  return resize_bilinear(center_crop_square(img), kImageSize, kImageSize);
}

namespace {

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && has_ext(entry.path(), {".png", ".jpg", ".jpeg"})) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

ImageTensor load_image_dir(const fs::path& dir) {
  const auto files = image_files(dir);
  if (files.empty()) throw EmptyInputError("no PNG/JPEG images in " + dir.string());
  ImageTensor out;
  for (const auto& f : files) out = concat_items(out, load_image(f));
  return out;
}

IdentityCorpus load_corpus_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> subdirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) subdirs.push_back(entry.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty()) throw EmptyInputError("no identity subdirectories in " + dir.string());
  IdentityCorpus corpus;
  for (std::size_t id = 0; id < subdirs.size(); ++id) {
    auto imgs = load_image_dir(subdirs[id]);
    corpus.images = concat_items(corpus.images, imgs);
    corpus.labels.insert(corpus.labels.end(), std::size_t(imgs.shape.n), int(id));
  }
  corpus.splits = assign_splits(corpus.labels);
  corpus.validate();
  return corpus;
}

// ---------------------------------------------------------------------------
// Payloads

codec::Payload payload_from_hex(std::string_view hex, int length) {
  if (length < 1) throw ArgumentError("payload length must be positive");
  for (char ch : hex) {
    if (!std::isxdigit(static_cast<unsigned char>(ch))) {
      throw ParseError("invalid hex character '" + std::string(1, ch) + "' in payload");
    }
  }
  if (int(hex.size()) * 4 < length) {
    throw LengthError("hex payload encodes " + std::to_string(hex.size() * 4) + " bits, need " +
                      std::to_string(length));
  }
  codec::Payload bits(length);
  for (int i = 0; i < length; ++i) {
    const char ch = hex[std::size_t(i / 4)];
    const int nibble = std::isdigit(static_cast<unsigned char>(ch)) ? ch - '0' : std::tolower(ch) - 'a' + 10;
    bits(i) = float((nibble >> (3 - i % 4)) & 1);
  }
  return bits;
}

std::string payload_to_hex(const codec::Payload& bits) {
  static constexpr char digits[] = "0123456789ABCDEF";
  std::string out;
  for (Eigen::Index i = 0; i < bits.size(); i += 4) {
    int nibble = 0;
    for (int k = 0; k < 4; ++k) {
      nibble <<= 1;
      if (i + k < bits.size() && bits(i + k) > 0.5f) nibble |= 1;
    }
    out.push_back(digits[nibble]);
  }
  return out;
}

PayloadRegistry PayloadRegistry::load(const fs::path& file, int payload_bits) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open registry " + file.string());
  PayloadRegistry reg(payload_bits);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw ParseError(file.string() + ":" + std::to_string(lineno) + ": expected <user_id>\\t<hex_payload>");
    }
    const std::string user = line.substr(0, tab);
    if (reg.contains(user)) {
      throw ParseError(file.string() + ":" + std::to_string(lineno) + ": duplicate user " + user);
    }
    try {
      reg.add(user, payload_from_hex(line.substr(tab + 1), payload_bits));
    } catch (const Error& e) {
      throw ParseError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return reg;
}

void PayloadRegistry::save(const fs::path& file) const {
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write registry " + tmp.string());
    for (const auto& [user, hex] : entries_) out << user << '\t' << hex << '\n';
    if (!out) throw IoError("failed writing registry " + tmp.string());
  }
  fs::rename(tmp, file);
}

void PayloadRegistry::add(const std::string& user, const codec::Payload& payload) {
  if (user.empty() || user.find_first_of("\t\n\r") != std::string::npos) {
    throw ArgumentError("user id must be non-empty and free of tabs/newlines");
  }
  if (payload.size() != bits_) {
    throw LengthError("payload has " + std::to_string(payload.size()) + " bits, registry uses " +
                      std::to_string(bits_));
  }
  const std::string hex = payload_to_hex(payload);
  for (const auto& [other, h] : entries_) {
    if (h == hex && other != user) throw DataError("payload already registered to " + other);
  }
  entries_[user] = hex;
}

codec::Payload PayloadRegistry::lookup(const std::string& user) const {
  auto it = entries_.find(user);
  if (it == entries_.end()) throw ArgumentError("unknown user " + user);
  return payload_from_hex(it->second, bits_);
}

}  // namespace dipwm::io
