#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dipwm/tensor.hpp"
#include "dipwm/watermark_codec.hpp"

namespace dipwm::io {

enum class Split { train, test, target };

std::string_view to_string(Split s);

/// Labelled face images with a train/test/target partition. Target
/// identities never appear in train or test.
struct IdentityCorpus {
  ImageTensor images;
  std::vector<int> labels;
  std::vector<Split> splits;

  int size() const { return int(labels.size()); }
  int identity_count() const;
  std::vector<int> indices(Split s) const;
  std::vector<int> identities(Split s) const;
  /// Image indices of identity `label`, optionally restricted to a split.
  std::vector<int> images_of(int label) const;
  ImageTensor gather(const std::vector<int>& idx) const;
  /// Throws DataError when an invariant does not hold.
  void validate() const;
};

/// Procedural identity corpus: each identity is a fixed composition of face
/// geometry, palette and texture; every image jitters position, brightness
/// and sensor noise. Deterministic in `seed`.
IdentityCorpus generate_synthetic_corpus(int n_identities, int images_per_identity, std::uint64_t seed);

/// Assigns splits by identity and image order: the last quarter of the
/// identities (at least one) becomes the target split, and the trailing
/// third (at least one) of each remaining identity's images the test split.
std::vector<Split> assign_splits(const std::vector<int>& labels);

/// Reads every PNG/JPEG in `dir` (sorted by file name), center-crops to a
/// square and resizes to 112x112.
ImageTensor load_image_dir(const std::filesystem::path& dir);

/// One subdirectory of images per identity.
IdentityCorpus load_corpus_dir(const std::filesystem::path& dir);

/// Single image file, cropped and resized like load_image_dir.
ImageTensor load_image(const std::filesystem::path& file);

/// Decoded file at its native resolution.
ImageTensor read_image(const std::filesystem::path& file);

/// Writes item `n` as an 8-bit RGB PNG.
void save_png(const std::filesystem::path& file, const ImageTensor& images, int n = 0);

std::vector<unsigned char> encode_jpeg(const ImageTensor& images, int n, int quality);
ImageTensor decode_jpeg(const std::vector<unsigned char>& bytes);
void save_jpeg(const std::filesystem::path& file, const ImageTensor& images, int n, int quality);

/// Baseline JPEG encode/decode of every item at the given quality.
ImageTensor jpeg_roundtrip(const ImageTensor& images, int quality);

/// Rounds to the nearest multiple of 1/255.
ImageTensor quantize_8bit(const ImageTensor& images);

/// Bilinear resampling with half-pixel centres.
ImageTensor resize_bilinear(const ImageTensor& images, int h, int w);

ImageTensor center_crop_square(const ImageTensor& images);

/// First L bits of the big-endian bit expansion of `hex`.
codec::Payload payload_from_hex(std::string_view hex, int length);

/// Big-endian hex, zero-padded on the right to whole nibbles.
std::string payload_to_hex(const codec::Payload& bits);

/// user-id -> payload, persisted as sorted `<user_id>\t<hex>` lines.
class PayloadRegistry {
 public:
  explicit PayloadRegistry(int payload_bits = 50) : bits_(payload_bits) {}

  static PayloadRegistry load(const std::filesystem::path& file, int payload_bits);
  /// Atomic replace: writes a sibling temp file, then renames it.
  void save(const std::filesystem::path& file) const;

  void add(const std::string& user, const codec::Payload& payload);
  bool contains(const std::string& user) const { return entries_.contains(user); }
  codec::Payload lookup(const std::string& user) const;
  std::size_t size() const { return entries_.size(); }
  int payload_bits() const { return bits_; }
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  int bits_;
  std::map<std::string, std::string> entries_;
};

}  // namespace dipwm::io
