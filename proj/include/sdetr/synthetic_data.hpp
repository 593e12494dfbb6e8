// Deterministic desk-scale detection data: colored circles, squares and
// triangles over textured backgrounds, stored as P6 images plus a
// line-oriented manifest.
//
// Manifest layout: '#' header lines, then one block per image separated by
// a blank line. Each object is a line `image_path x1 y1 x2 y2 label`; an
// image with no objects is a single `image_path` line. Paths are relative to
// the manifest's directory.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/geometry.hpp"
#include "sdetr/image.hpp"
#include "sdetr/rng.hpp"

namespace sdetr {

enum class ShapeClass : int { kCircle = 0, kSquare = 1, kTriangle = 2 };
inline constexpr int kNumShapeClasses = 3;

struct SceneSpec {
  int image_size = 128;
  int min_objects = 1;
  int max_objects = 4;
  float min_side = 16.0f;
  float max_side = 44.0f;
  float max_pair_iou = 0.3f;
  float noise_amplitude = 0.08f;
  int noise_cell = 16;
  int min_gradients = 2;
  int max_gradients = 4;
  float gradient_strength = 0.25f;
  std::uint64_t seed = 0;
};

struct SceneObject {
  ShapeClass cls = ShapeClass::kCircle;
  BoxXYXY box;
  float color[3] = {0, 0, 0};

  /// Whether continuous point (x, y) lies inside the drawn shape.
  bool covers(double x, double y) const {
    const double cx = box.center_x(), cy = box.center_y();
    const double half = 0.5 * box.width();
    switch (cls) {
      case ShapeClass::kCircle:
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= half * half;
      case ShapeClass::kSquare:
        return x >= box.x1 && x <= box.x2 && y >= box.y1 && y <= box.y2;
      case ShapeClass::kTriangle: {
        // Apex at top-center, base along the bottom edge.
        if (y < box.y1 || y > box.y2) return false;
        const double t = (y - box.y1) / std::max(1e-9, static_cast<double>(box.height()));
        return std::abs(x - cx) <= t * half;
      }
    }
    return false;
  }
};

struct Scene {
  Image image;
  std::vector<SceneObject> objects;
};

struct LabeledImage {
  std::string path;
  Image image;
  std::vector<BoxXYXY> boxes;
  std::vector<int> labels;
};

namespace detail {

inline void paint_background(Image& img, const SceneSpec& spec, Rng& rng) {
  const int cells = img.width / spec.noise_cell + 2;
  std::vector<float> lattice(static_cast<std::size_t>(cells * cells));
  for (auto& v : lattice) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  float base[3];
  for (float& c : base) c = static_cast<float>(rng.uniform(0.3, 0.6));
  struct Gradient {
    double ux, uy, offset;
    float color[3];
  };
  const int n_grad = spec.min_gradients + static_cast<int>(rng.index(static_cast<std::size_t>(spec.max_gradients - spec.min_gradients + 1)));
  std::vector<Gradient> grads(static_cast<std::size_t>(n_grad));
  for (auto& g : grads) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    g.ux = std::cos(angle);
    g.uy = std::sin(angle);
    g.offset = rng.uniform(-0.5, 0.5);
    for (float& c : g.color) c = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  const double size = img.width;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double fx = (x + 0.5) / spec.noise_cell, fy = (y + 0.5) / spec.noise_cell;
      const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
      const double tx = fx - ix, ty = fy - iy;
      auto lat = [&](int a, int b) { return lattice[static_cast<std::size_t>(b * cells + a)]; };
      const double noise = (lat(ix, iy) * (1 - tx) + lat(ix + 1, iy) * tx) * (1 - ty) +
                           (lat(ix, iy + 1) * (1 - tx) + lat(ix + 1, iy + 1) * tx) * ty;
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + spec.noise_amplitude * noise;
        for (const auto& g : grads) {
          const double s = ((x + 0.5) / size - 0.5) * g.ux + ((y + 0.5) / size - 0.5) * g.uy + g.offset;
          v += spec.gradient_strength / n_grad * g.color[c] * std::tanh(2.0 * s);
        }
        img.at(x, y, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

}  // namespace detail

/// Renders one scene as a pure function of (spec, seed).
inline Scene render_scene(const SceneSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Scene scene;
  scene.image = Image(spec.image_size, spec.image_size);
  detail::paint_background(scene.image, spec, rng);
  const int want = spec.min_objects + static_cast<int>(rng.index(static_cast<std::size_t>(spec.max_objects - spec.min_objects + 1)));
  const float size = static_cast<float>(spec.image_size);
  for (int k = 0; k < want; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      SceneObject obj;
      obj.cls = static_cast<ShapeClass>(rng.index(kNumShapeClasses));
      const float side = static_cast<float>(std::round(rng.uniform(spec.min_side, spec.max_side)));
      const float x1 = static_cast<float>(std::floor(rng.uniform(1.0, size - side - 1.0)));
      const float y1 = static_cast<float>(std::floor(rng.uniform(1.0, size - side - 1.0)));
      obj.box = {x1, y1, x1 + side, y1 + side};
      // Saturated color: one channel high, one low, one random.
      const std::size_t hi = rng.index(3), lo = (hi + 1 + rng.index(2)) % 3;
      for (std::size_t c = 0; c < 3; ++c) obj.color[c] = static_cast<float>(rng.uniform(0.0, 1.0));
      obj.color[hi] = static_cast<float>(rng.uniform(0.85, 1.0));
      obj.color[lo] = static_cast<float>(rng.uniform(0.0, 0.15));
      bool clear = true;
      for (const auto& other : scene.objects) clear = clear && box_iou(obj.box, other.box) <= spec.max_pair_iou;
      if (!clear) continue;
      scene.objects.push_back(obj);
      break;
    }
  }
  for (const auto& obj : scene.objects) {
    for (int y = static_cast<int>(obj.box.y1); y < static_cast<int>(std::ceil(obj.box.y2)); ++y) {
      for (int x = static_cast<int>(obj.box.x1); x < static_cast<int>(std::ceil(obj.box.x2)); ++x) {
        if (obj.covers(x + 0.5, y + 0.5)) {
          for (int c = 0; c < 3; ++c) scene.image.at(x, y, c) = obj.color[c];
        }
      }
    }
  }
  return scene;
}

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string image_file_name(std::size_t index) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << index << ".ppm";
  return os.str();
}

inline std::string format_coord(float v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

/// Writes `count` scenes and `manifest.txt` into out_dir; returns the
/// manifest path. On failure every file written so far is removed.
inline std::filesystem::path generate_dataset(std::size_t count, const SceneSpec& spec,
                                              const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> written;
  try {
    fs::create_directories(out_dir / "images");
    std::ostringstream manifest;
    manifest << "# sdetr-manifest v1\n# images " << count << "\n# classes circle square triangle\n";
    const std::uint64_t stream = mix_seed(spec.seed);
    for (std::size_t i = 0; i < count; ++i) {
      const Scene scene = render_scene(spec, item_seed(stream, i));
      const std::string rel = image_file_name(i);
      write_file(out_dir / rel, encode_ppm(scene.image));
      written.push_back(out_dir / rel);
      manifest << '\n';
      if (scene.objects.empty()) manifest << rel << '\n';
      for (const auto& obj : scene.objects) {
        manifest << rel << ' ' << format_coord(obj.box.x1) << ' ' << format_coord(obj.box.y1) << ' '
                 << format_coord(obj.box.x2) << ' ' << format_coord(obj.box.y2) << ' ' << static_cast<int>(obj.cls)
                 << '\n';
      }
    }
    const fs::path manifest_path = out_dir / "manifest.txt";
    write_file(manifest_path, manifest.str());
    return manifest_path;
  } catch (...) {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    fs::remove(out_dir / "manifest.txt", ec);
    throw;
  }
}

struct ManifestEntry {
  std::string path;
  std::vector<BoxXYXY> boxes;
  std::vector<int> labels;
};

/// Parses manifest text; errors carry `source:line`.
inline std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& source) {
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool in_block = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] == '#') continue;
    if (line.find_first_not_of(" \t") == std::string::npos) {
      in_block = false;
      continue;
    }
    std::istringstream ls(line);
    std::string path;
    ls >> path;
    std::vector<std::string> rest;
    for (std::string tok; ls >> tok;) rest.push_back(tok);
    auto fail = [&](const std::string& why) {
      return DataError(source + ":" + std::to_string(line_no) + ": " + why);
    };
    if (!in_block || entries.back().path != path) {
      if (in_block) throw fail("image path changed inside a block (missing blank line?)");
      entries.push_back({path, {}, {}});
      in_block = true;
    }
    if (rest.empty()) continue;
    if (rest.size() != 5) throw fail("expected 'path x1 y1 x2 y2 label'");
    float v[4];
    int label = 0;
    try {
      for (int k = 0; k < 4; ++k) {
        std::size_t used = 0;
        v[k] = std::stof(rest[static_cast<std::size_t>(k)], &used);
        if (used != rest[static_cast<std::size_t>(k)].size()) throw std::invalid_argument("trailing");
      }
      std::size_t used = 0;
      label = std::stoi(rest[4], &used);
      if (used != rest[4].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw fail("malformed number");
    }
    BoxXYXY box{v[0], v[1], v[2], v[3]};
    if (!box.valid()) throw fail("invalid box");
    if (label < 0 || label >= kNumShapeClasses) throw fail("label out of range");
    entries.back().boxes.push_back(box);
    entries.back().labels.push_back(label);
  }
  return entries;
}

/// Loads every image referenced by a manifest.
inline std::vector<LabeledImage> load_dataset(const std::filesystem::path& manifest_path) {
  const auto entries = parse_manifest(read_file(manifest_path), manifest_path.string());
  std::vector<LabeledImage> out;
  out.reserve(entries.size());
  const auto root = manifest_path.parent_path();
  for (const auto& e : entries) {
    LabeledImage li;
    li.path = e.path;
    li.image = load_ppm(root / e.path);
    li.boxes = e.boxes;
    li.labels = e.labels;
    out.push_back(std::move(li));
  }
  return out;
}

/// Seeded permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

}  // namespace sdetr
