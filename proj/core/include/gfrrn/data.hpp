#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gfrrn/labels.hpp"

namespace gfrrn::data {

/// Deterministic synthetic scene: a two-colour gradient background with
/// rectangles, discs and a striped patch drawn on top.
Image procedural_scene(std::size_t height, std::size_t width, std::uint64_t seed);

/// One training or evaluation pair with its supervision.
struct Sample {
  std::string id;
  Image mixture;
  labels::LabelTriplet labels;
};

/// Synthesises a pair from two procedural scenes. label_sigma <= 0 selects
/// the default for the size.
Sample synthetic_sample(std::size_t size, std::uint64_t seed,
                        labels::ReflectionLabel mode = labels::ReflectionLabel::kUnified, double label_sigma = 0.0);

struct ManifestEntry {
  std::string id;
  std::filesystem::path mixture;       // I
  std::filesystem::path transmission;  // T
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

/// CSV with header "id,mixture,transmission"; relative paths resolve against
/// the manifest's directory. Throws IoError for unreadable files or missing
/// images and ConfigError for malformed rows or duplicate ids.
Manifest read_manifest(const std::filesystem::path& path);
/// Writes paths as given.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Reads both images (which must have equal sizes), centre-crops them to at
/// most `crop` per side when crop > 0, and derives labels. The kReflection
/// mode needs the true reflection and is rejected here.
Sample load_pair(const ManifestEntry& entry, labels::ReflectionLabel mode = labels::ReflectionLabel::kUnified,
                 double label_sigma = 0.0, std::size_t crop = 0);

/// Centre crop of an image to at most `size` per side.
Image centre_crop(const Image& image, std::size_t size);

}  // namespace gfrrn::data
