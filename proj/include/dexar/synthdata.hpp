// SPDX-License-Identifier: Apache-2.0
//
// Synthetic shape scenes with exact masks and templated answers in which
// every token is labelled as content (names an object) or filler.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dexar/image.hpp"

namespace dexar::synth {

using TokenId = std::size_t;

// Fixed word-level vocabulary shared by the dataset and the model.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;

  static constexpr std::array<std::string_view, 14> kWords = {
      "<pad>", "<bos>", "<eos>", "I",      "see",      "a",   "as",
      "well",  "square", "circle", "triangle", "classify", "the", "image"};

  static constexpr std::size_t size() { return kWords.size(); }

  static TokenId id(std::string_view word) {
    for (std::size_t i = 0; i < kWords.size(); ++i) {
      if (kWords[i] == word) return i;
    }
    throw std::out_of_range("vocabulary: unknown word '" + std::string(word) + "'");
  }
  static std::string_view word(TokenId id) {
    if (id >= kWords.size()) return "<unk>";
    return kWords[id];
  }
};

enum class ShapeKind { square, circle, triangle };

inline constexpr std::array<ShapeKind, 3> kShapes = {ShapeKind::square, ShapeKind::circle, ShapeKind::triangle};

inline std::string_view shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::square: return "square";
    case ShapeKind::circle: return "circle";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

inline ShapeKind parse_shape(std::string_view name) {
  for (ShapeKind s : kShapes) {
    if (shape_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown shape '" + std::string(name) + "'");
}

struct Rgb {
  std::uint8_t r, g, b;
};

inline constexpr std::array<Rgb, 6> kPalette = {
    Rgb{230, 25, 75}, Rgb{60, 180, 75}, Rgb{0, 130, 200}, Rgb{255, 225, 25}, Rgb{240, 50, 230}, Rgb{70, 240, 240}};
inline constexpr Rgb kBackground{128, 128, 128};

struct SceneConfig {
  std::size_t image_side = 32;
  std::size_t patch_size = 8;
  std::size_t object_cells = 2;  // objects span object_cells x object_cells patches
  std::size_t max_retries = 64;

  std::size_t grid_side() const { return image_side / patch_size; }
};

struct SceneObject {
  ShapeKind shape = ShapeKind::square;
  std::size_t color = 0;
  std::size_t cell_row = 0;
  std::size_t cell_col = 0;
  std::size_t extent = 1;  // in patch cells

  std::string_view class_name() const { return shape_name(shape); }
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  Image image;
  std::size_t grid_side = 0;
  std::vector<SceneObject> objects;
  std::vector<std::vector<std::uint8_t>> masks;  // painted pixels per object, [side*side]

  // Token-grid mask of the cells an object occupies, raster order.
  std::vector<std::uint8_t> cell_mask(std::size_t object) const {
    const auto& o = objects.at(object);
    std::vector<std::uint8_t> m(grid_side * grid_side, 0);
    for (std::size_t r = o.cell_row; r < o.cell_row + o.extent; ++r) {
      for (std::size_t c = o.cell_col; c < o.cell_col + o.extent; ++c) m[r * grid_side + c] = 1;
    }
    return m;
  }
  std::vector<std::uint8_t> union_cell_mask() const {
    std::vector<std::uint8_t> m(grid_side * grid_side, 0);
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto ci = cell_mask(i);
      for (std::size_t k = 0; k < m.size(); ++k) m[k] = static_cast<std::uint8_t>(m[k] | ci[k]);
    }
    return m;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool inside_shape(ShapeKind shape, double u, double v) {
  // (u, v) in [0,1]^2 relative to the object's block, v grows downward.
  switch (shape) {
    case ShapeKind::square: return true;
    case ShapeKind::circle: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::triangle: return std::abs(u - 0.5) <= 0.5 * v;
  }
  return false;
}

}  // namespace detail

inline Scene gen_scene(std::uint64_t seed, std::size_t n_objects, const SceneConfig& cfg = {}) {
  if (cfg.patch_size == 0 || cfg.image_side % cfg.patch_size != 0) {
    throw std::invalid_argument("gen_scene: image side must be a multiple of the patch size");
  }
  if (n_objects < 1 || n_objects > kShapes.size()) {
    throw std::invalid_argument("gen_scene: n_objects must be in [1, 3]");
  }
  const std::size_t grid = cfg.grid_side();
  const std::size_t ext = cfg.object_cells;
  if (ext == 0 || ext > grid) throw std::invalid_argument("gen_scene: object extent does not fit the grid");

  std::mt19937_64 rng(seed);
  std::array<ShapeKind, 3> shapes = kShapes;
  std::shuffle(shapes.begin(), shapes.end(), rng);
  std::uniform_int_distribution<std::size_t> col(0, kPalette.size() - 1);

  Scene scene;
  scene.grid_side = grid;
  bool placed = false;
  for (std::size_t attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
    scene.objects.clear();
    std::vector<std::uint8_t> occupied(grid * grid, 0);
    placed = true;
    for (std::size_t k = 0; k < n_objects && placed; ++k) {
      std::vector<std::pair<std::size_t, std::size_t>> free_spots;
      for (std::size_t r = 0; r + ext <= grid; ++r) {
        for (std::size_t c = 0; c + ext <= grid; ++c) {
          bool free = true;
          for (std::size_t i = r; i < r + ext && free; ++i) {
            for (std::size_t j = c; j < c + ext; ++j) free = free && !occupied[i * grid + j];
          }
          if (free) free_spots.emplace_back(r, c);
        }
      }
      if (free_spots.empty()) {
        placed = false;
        break;
      }
      const auto [r, c] = free_spots[std::uniform_int_distribution<std::size_t>(0, free_spots.size() - 1)(rng)];
      for (std::size_t i = r; i < r + ext; ++i) {
        for (std::size_t j = c; j < c + ext; ++j) occupied[i * grid + j] = 1;
      }
      scene.objects.push_back(SceneObject{shapes[k], col(rng), r, c, ext});
    }
  }
  if (!placed) {
    throw PlacementError("gen_scene: seed " + std::to_string(seed) + " could not place " +
                         std::to_string(n_objects) + " objects after " + std::to_string(cfg.max_retries) +
                         " attempts");
  }
  // Raster order of the top-left cells fixes the answer order.
  std::stable_sort(scene.objects.begin(), scene.objects.end(), [](const SceneObject& a, const SceneObject& b) {
    return a.cell_row != b.cell_row ? a.cell_row < b.cell_row : a.cell_col < b.cell_col;
  });

  const std::size_t side = cfg.image_side;
  scene.image = Image(side, 3);
  for (std::size_t p = 0; p < side * side; ++p) {
    scene.image.pixels[p * 3 + 0] = kBackground.r / 255.0;
    scene.image.pixels[p * 3 + 1] = kBackground.g / 255.0;
    scene.image.pixels[p * 3 + 2] = kBackground.b / 255.0;
  }
  for (const auto& o : scene.objects) {
    std::vector<std::uint8_t> mask(side * side, 0);
    const std::size_t y0 = o.cell_row * cfg.patch_size, x0 = o.cell_col * cfg.patch_size;
    const std::size_t span = o.extent * cfg.patch_size;
    const Rgb rgb = kPalette[o.color];
    for (std::size_t dy = 0; dy < span; ++dy) {
      for (std::size_t dx = 0; dx < span; ++dx) {
        const double u = (static_cast<double>(dx) + 0.5) / static_cast<double>(span);
        const double v = (static_cast<double>(dy) + 0.5) / static_cast<double>(span);
        if (!detail::inside_shape(o.shape, u, v)) continue;
        const std::size_t y = y0 + dy, x = x0 + dx;
        mask[y * side + x] = 1;
        scene.image.at(y, x, 0) = rgb.r / 255.0;
        scene.image.at(y, x, 1) = rgb.g / 255.0;
        scene.image.at(y, x, 2) = rgb.b / 255.0;
      }
    }
    scene.masks.push_back(std::move(mask));
  }
  return scene;
}

struct QASample {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  Scene scene;
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;            // ends with <eos>
  std::vector<std::uint8_t> filler_mask;  // 1 = content, 0 = filler
  std::vector<int> answer_object;         // object index for content tokens, -1 for filler

  friend bool operator==(const QASample&, const QASample&) = default;
};

inline std::vector<TokenId> default_prompt() {
  return {Vocabulary::id("classify"), Vocabulary::id("the"), Vocabulary::id("image")};
}

// "I see a X as well as a Y ... <eos>"
inline QASample build_qa(Scene scene, std::uint64_t id = 0, std::uint64_t seed = 0) {
  if (scene.objects.empty()) throw std::invalid_argument("build_qa: scene has no objects");
  QASample s;
  s.id = id;
  s.seed = seed;
  s.prompt = default_prompt();
  auto filler = [&s](std::string_view w) {
    s.answer.push_back(Vocabulary::id(w));
    s.filler_mask.push_back(0);
    s.answer_object.push_back(-1);
  };
  filler("I");
  filler("see");
  filler("a");
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (i > 0) {
      filler("as");
      filler("well");
      filler("as");
      filler("a");
    }
    s.answer.push_back(Vocabulary::id(scene.objects[i].class_name()));
    s.filler_mask.push_back(1);
    s.answer_object.push_back(static_cast<int>(i));
  }
  s.answer.push_back(Vocabulary::kEos);
  s.filler_mask.push_back(0);
  s.answer_object.push_back(-1);
  s.scene = std::move(scene);
  return s;
}

// Content/filler labels for an arbitrary token sequence (e.g. a generated
// answer): object names are content, everything else is filler.
inline std::vector<std::uint8_t> filler_mask_of(std::span<const TokenId> tokens) {
  std::vector<std::uint8_t> mask;
  mask.reserve(tokens.size());
  for (TokenId t : tokens) {
    bool content = false;
    if (t < Vocabulary::size()) {
      for (ShapeKind s : kShapes) content = content || Vocabulary::word(t) == shape_name(s);
    }
    mask.push_back(content ? 1 : 0);
  }
  return mask;
}

inline std::size_t objects_for_seed(std::uint64_t seed) {
  return 1 + static_cast<std::size_t>(std::mt19937_64(seed ^ 0x9e3779b97f4a7c15ULL)() % 3);
}

// `count` samples from consecutive seeds starting at first_seed. Seeds whose
// layout cannot be placed are skipped, so the seed list is deterministic.
inline std::vector<QASample> make_dataset(std::uint64_t first_seed, std::size_t count, const SceneConfig& cfg = {}) {
  std::vector<QASample> out;
  out.reserve(count);
  for (std::uint64_t seed = first_seed; out.size() < count; ++seed) {
    try {
      out.push_back(build_qa(gen_scene(seed, objects_for_seed(seed), cfg), out.size(), seed));
    } catch (const PlacementError&) {
      if (seed - first_seed > 16 * count + 1024) throw;
    }
  }
  return out;
}

inline std::array<double, 3> dataset_mean_pixel(std::span<const QASample> dataset) {
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  std::size_t count = 0;
  for (const auto& s : dataset) {
    const auto& img = s.scene.image;
    if (img.channels != 3) throw std::invalid_argument("dataset_mean_pixel: expected 3 channels");
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
      for (std::size_t c = 0; c < 3; ++c) sum[c] += img.pixels[p * 3 + c];
    }
    count += img.pixel_count();
  }
  if (count == 0) throw std::invalid_argument("dataset_mean_pixel: empty dataset");
  for (double& v : sum) v /= static_cast<double>(count);
  return sum;
}

inline Image mean_image(std::span<const QASample> dataset) {
  const auto mean = dataset_mean_pixel(dataset);
  const auto& first = dataset.front().scene.image;
  Image img(first.side, 3);
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    for (std::size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = mean[c];
  }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + images.bin + masks.bin (8-bit, row-major).

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void save_dataset(const std::filesystem::path& dir, std::span<const QASample> dataset) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  std::ofstream images(dir / "images.bin", std::ios::binary);
  std::ofstream masks(dir / "masks.bin", std::ios::binary);
  if (!images || !masks) throw DatasetError("save_dataset: cannot open blobs in " + dir.string());
  std::uint64_t image_off = 0, mask_off = 0;
  json samples = json::array();
  for (const auto& s : dataset) {
    const auto bytes = to_bytes(s.scene.image);
    images.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    json objects = json::array();
    for (const auto& o : s.scene.objects) {
      objects.push_back({{"shape", shape_name(o.shape)},
                         {"color", o.color},
                         {"cell_row", o.cell_row},
                         {"cell_col", o.cell_col},
                         {"extent", o.extent}});
    }
    std::uint64_t mask_bytes = 0;
    for (const auto& m : s.scene.masks) {
      masks.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size()));
      mask_bytes += m.size();
    }
    samples.push_back({{"id", s.id},
                       {"seed", s.seed},
                       {"grid_side", s.scene.grid_side},
                       {"image_side", s.scene.image.side},
                       {"channels", s.scene.image.channels},
                       {"image_offset", image_off},
                       {"image_bytes", bytes.size()},
                       {"mask_offset", mask_off},
                       {"mask_bytes", mask_bytes},
                       {"objects", objects},
                       {"prompt", s.prompt},
                       {"answer", s.answer},
                       {"filler_mask", s.filler_mask},
                       {"answer_object", s.answer_object}});
    image_off += bytes.size();
    mask_off += mask_bytes;
  }
  json manifest = {{"format", "dexar-dataset"}, {"version", 1}, {"count", dataset.size()}, {"samples", samples}};
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
}

inline std::vector<QASample> load_dataset(const std::filesystem::path& dir) {
  using nlohmann::json;
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DatasetError("load_dataset: missing " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw DatasetError("manifest.json: parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  auto read_blob = [&dir](const char* name) {
    std::ifstream in(dir / name, std::ios::binary);
    if (!in) throw DatasetError(std::string("load_dataset: missing ") + name);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
  };
  const auto images = read_blob("images.bin");
  const auto masks = read_blob("masks.bin");

  std::vector<QASample> out;
  try {
    if (manifest.at("format") != "dexar-dataset") throw DatasetError("manifest.json: unexpected format tag");
    for (const auto& js : manifest.at("samples")) {
      QASample s;
      s.id = js.at("id").get<std::uint64_t>();
      s.seed = js.at("seed").get<std::uint64_t>();
      const auto side = js.at("image_side").get<std::size_t>();
      const auto channels = js.at("channels").get<std::size_t>();
      const auto ioff = js.at("image_offset").get<std::uint64_t>();
      const auto ibytes = js.at("image_bytes").get<std::uint64_t>();
      const auto moff = js.at("mask_offset").get<std::uint64_t>();
      const auto mbytes = js.at("mask_bytes").get<std::uint64_t>();
      if (ioff + ibytes > images.size() || moff + mbytes > masks.size()) {
        throw DatasetError("load_dataset: sample " + std::to_string(s.id) + " points past the blob end");
      }
      s.scene.image = from_bytes(std::vector<std::uint8_t>(images.begin() + static_cast<std::ptrdiff_t>(ioff),
                                                           images.begin() + static_cast<std::ptrdiff_t>(ioff + ibytes)),
                                 side, channels);
      s.scene.grid_side = js.at("grid_side").get<std::size_t>();
      for (const auto& jo : js.at("objects")) {
        s.scene.objects.push_back(SceneObject{parse_shape(jo.at("shape").get<std::string>()),
                                              jo.at("color").get<std::size_t>(), jo.at("cell_row").get<std::size_t>(),
                                              jo.at("cell_col").get<std::size_t>(), jo.at("extent").get<std::size_t>()});
      }
      const std::size_t per_mask = side * side;
      if (mbytes != per_mask * s.scene.objects.size()) throw DatasetError("load_dataset: mask size mismatch");
      for (std::size_t k = 0; k < s.scene.objects.size(); ++k) {
        auto begin = masks.begin() + static_cast<std::ptrdiff_t>(moff + k * per_mask);
        s.scene.masks.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(per_mask));
      }
      s.prompt = js.at("prompt").get<std::vector<TokenId>>();
      s.answer = js.at("answer").get<std::vector<TokenId>>();
      s.filler_mask = js.at("filler_mask").get<std::vector<std::uint8_t>>();
      s.answer_object = js.at("answer_object").get<std::vector<int>>();
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DatasetError(std::string("manifest.json: invalid schema: ") + e.what());
  }
  return out;
}

}  // namespace dexar::synth
