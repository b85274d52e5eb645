#include "gfrrn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cctype>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "gfrrn/error.hpp"

namespace gfrrn::data {

namespace {

using Colour = std::array<double, 3>;

// Scenes stay below 0.6 so that T + w * R rarely saturates after clipping.
Colour random_colour(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.6);
  return {u(rng), u(rng), u(rng)};
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  return out;
}

}  // namespace

Image procedural_scene(std::size_t height, std::size_t width, std::uint64_t seed) {
  require(height >= 1 && width >= 1, "procedural_scene: empty size");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(height, width);
  const double hh = double(height), ww = double(width);

  const Colour a = random_colour(rng), b = random_colour(rng);
  const double angle = u(rng) * 2.0 * std::numbers::pi, ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double t = std::clamp(0.5 + ((x / ww - 0.5) * ca + (y / hh - 0.5) * sa), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = (1.0 - t) * a[c] + t * b[c];
    }

  const int shapes = 3 + static_cast<int>(u(rng) * 4.0);
  for (int s = 0; s < shapes; ++s) {
    const Colour col = random_colour(rng);
    const double cy = u(rng) * hh, cx = u(rng) * ww;
    const double ry = (0.08 + 0.2 * u(rng)) * hh, rx = (0.08 + 0.2 * u(rng)) * ww;
    const bool disc = u(rng) < 0.5;
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (inside)
          for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
      }
  }

  const Colour stripe = random_colour(rng);
  const double period = 2.0 + 4.0 * u(rng);
  const std::size_t y0 = std::size_t(u(rng) * hh * 0.6), x0 = std::size_t(u(rng) * ww * 0.6);
  const std::size_t y1 = std::min(height, y0 + std::max<std::size_t>(1, height / 3));
  const std::size_t x1 = std::min(width, x0 + std::max<std::size_t>(1, width / 3));
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x)
      if (std::fmod(double(x + y), period) < period / 2.0)
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = stripe[c];
  return img;
}

Sample synthetic_sample(std::size_t size, std::uint64_t seed, labels::ReflectionLabel mode, double label_sigma) {
  const Image t = procedural_scene(size, size, seed * 3 + 1);
  const Image r = procedural_scene(size, size, seed * 3 + 2);
  const auto mix = labels::synthesize_mixture(t, r, labels::SynthesisParams::sample(seed * 3 + 3), label_sigma);
  const double sigma = label_sigma > 0.0 ? label_sigma : labels::default_label_sigma(size, size);
  Sample s;
  s.id = "synthetic_" + std::to_string(seed);
  s.mixture = mix.mixture;
  s.labels = labels::make_labels(mix.mixture, t, mode, sigma, &mix.reflection_component);
  return s;
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path.string());
  const std::filesystem::path root = path.parent_path();
  Manifest m;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto f = split_csv(line);
    if (header) {
      header = false;
      if (f.size() == 3 && f[0] == "id" && f[1] == "mixture" && f[2] == "transmission") continue;
      throw ConfigError("manifest " + path.string() + ": expected header 'id,mixture,transmission'");
    }
    if (f.size() != 3 || f[0].empty())
      throw ConfigError("manifest " + path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    if (!ids.insert(f[0]).second) throw ConfigError("manifest " + path.string() + ": duplicate id '" + f[0] + "'");
    ManifestEntry e{f[0], f[1], f[2]};
    for (auto* p : {&e.mixture, &e.transmission}) {
      if (p->is_relative()) *p = root / *p;
      if (!std::filesystem::exists(*p)) throw IoError("manifest: missing image " + p->string());
    }
    m.entries.push_back(std::move(e));
  }
  if (header) throw ConfigError("manifest " + path.string() + ": empty file");
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw IoError("manifest: cannot write " + path.string());
  out << "id,mixture,transmission\n";
  for (const auto& e : manifest.entries) out << e.id << ',' << e.mixture.string() << ',' << e.transmission.string() << '\n';
  if (!out) throw IoError("manifest: write failed for " + path.string());
}

Sample load_pair(const ManifestEntry& entry, labels::ReflectionLabel mode, double label_sigma, std::size_t crop) {
  if (mode == labels::ReflectionLabel::kReflection)
    throw ConfigError("pair '" + entry.id + "': the reflection label needs synthetic pairs");
  Sample s;
  s.id = entry.id;
  s.mixture = read_png(entry.mixture);
  Image t = read_png(entry.transmission);
  if (!s.mixture.same_size(t)) throw IoError("pair '" + entry.id + "': mixture and transmission differ in size");
  if (crop > 0) {
    s.mixture = centre_crop(s.mixture, crop);
    t = centre_crop(t, crop);
  }
  const double sigma = label_sigma > 0.0 ? label_sigma : labels::default_label_sigma(t.height(), t.width());
  s.labels = labels::make_labels(s.mixture, t, mode, sigma);
  return s;
}

Image centre_crop(const Image& image, std::size_t size) {
  const std::size_t h = std::min(size, image.height()), w = std::min(size, image.width());
  if (h == image.height() && w == image.width()) return image;
  const std::size_t y0 = (image.height() - h) / 2, x0 = (image.width() - w) / 2;
  Image out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y0 + y, x0 + x, c);
  return out;
}

}  // namespace gfrrn::data
