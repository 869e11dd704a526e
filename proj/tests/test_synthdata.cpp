// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "dexar/synthdata.hpp"

using namespace dexar;
using namespace dexar::synth;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dexar_synth_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::uint64_t fnv1a(const std::vector<QASample>& data) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ULL;
  };
  for (const auto& s : data) {
    for (auto b : to_bytes(s.scene.image)) mix(b);
    for (auto t : s.answer) mix(static_cast<std::uint8_t>(t));
  }
  return h;
}

}  // namespace

TEST(Scene, DeterministicPerSeed) {
  for (std::uint64_t seed : {0ULL, 1ULL, 77ULL, 123456789ULL}) {
    EXPECT_EQ(gen_scene(seed, 2), gen_scene(seed, 2));
  }
  EXPECT_NE(gen_scene(1, 2).image, gen_scene(2, 2).image);
}

TEST(Scene, ObjectsAreDisjointOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Scene s;
    try {
      s = gen_scene(seed, objects_for_seed(seed));
    } catch (const PlacementError&) {
      continue;
    }
    std::vector<int> cells(16, 0), pixels(32 * 32, 0);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const auto cm = s.cell_mask(i);
      for (std::size_t k = 0; k < 16; ++k) cells[k] += cm[k];
      for (std::size_t k = 0; k < pixels.size(); ++k) pixels[k] += s.masks[i][k];
    }
    for (int c : cells) ASSERT_LE(c, 1) << "seed " << seed;
    for (int c : pixels) ASSERT_LE(c, 1) << "seed " << seed;
  }
}

// Squares fill their whole block; every shape reaches into each of its cells.
TEST(Scene, ShapeFootprints) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Scene s = gen_scene(seed, 3);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const auto& o = s.objects[i];
      std::size_t area = 0;
      for (auto b : s.masks[i]) area += b;
      if (o.shape == ShapeKind::square) {
        EXPECT_EQ(area, 4u * 64u);
      }
      for (std::size_t r = o.cell_row; r < o.cell_row + o.extent; ++r) {
        for (std::size_t c = o.cell_col; c < o.cell_col + o.extent; ++c) {
          std::size_t painted = 0;
          for (std::size_t y = r * 8; y < r * 8 + 8; ++y) {
            for (std::size_t x = c * 8; x < c * 8 + 8; ++x) painted += s.masks[i][y * 32 + x];
          }
          EXPECT_GT(painted, 0u) << shape_name(o.shape) << " seed " << seed;
        }
      }
    }
  }
}

TEST(Scene, PaintedPixelsCarryObjectColour) {
  const Scene s = gen_scene(5, 3);
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto rgb = kPalette[s.objects[i].color];
    for (std::size_t p = 0; p < 32 * 32; ++p) {
      if (!s.masks[i][p]) continue;
      EXPECT_EQ(s.image.pixels[p * 3], rgb.r / 255.0);
      EXPECT_EQ(s.image.pixels[p * 3 + 2], rgb.b / 255.0);
    }
  }
}

TEST(Scene, RejectsBadArguments) {
  EXPECT_THROW(gen_scene(0, 0), std::invalid_argument);
  EXPECT_THROW(gen_scene(0, 4), std::invalid_argument);
  SceneConfig c;
  c.image_side = 30;
  EXPECT_THROW(gen_scene(0, 1, c), std::invalid_argument);
  c = SceneConfig{};
  c.object_cells = 5;
  EXPECT_THROW(gen_scene(0, 1, c), std::invalid_argument);
}

TEST(Scene, ImpossiblePlacementThrows) {
  SceneConfig c;
  c.object_cells = 3;  // two 3x3 objects cannot share a 4x4 grid
  EXPECT_THROW(gen_scene(0, 2, c), PlacementError);
}

TEST(Qa, TemplateAnswersAndFillerMasks) {
  Scene s = gen_scene(11, 3);
  const auto names = std::vector<std::string>{std::string(s.objects[0].class_name()),
                                              std::string(s.objects[1].class_name()),
                                              std::string(s.objects[2].class_name())};
  const auto q = build_qa(s, 4, 11);
  std::vector<std::string> words;
  for (auto t : q.answer) words.emplace_back(Vocabulary::word(t));
  const std::vector<std::string> want{"I",  "see",  "a",  names[0], "as",  "well", "as",     "a",
                                      names[1], "as", "well", "as",  "a",  names[2], "<eos>"};
  EXPECT_EQ(words, want);
  EXPECT_EQ(q.filler_mask, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}));
  EXPECT_EQ(q.answer_object, (std::vector<int>{-1, -1, -1, 0, -1, -1, -1, -1, 1, -1, -1, -1, -1, 2, -1}));
  EXPECT_EQ(q.filler_mask, filler_mask_of(q.answer));
  std::vector<std::string> prompt;
  for (auto t : q.prompt) prompt.emplace_back(Vocabulary::word(t));
  EXPECT_EQ(prompt, (std::vector<std::string>{"classify", "the", "image"}));
}

TEST(Qa, ContentCountEqualsObjectCount) {
  for (const auto& s : make_dataset(0, 300)) {
    std::size_t content = 0;
    for (auto b : s.filler_mask) content += b;
    EXPECT_EQ(content, s.scene.objects.size());
    EXPECT_EQ(s.answer.back(), Vocabulary::kEos);
  }
}

TEST(Qa, ObjectsListedInRasterOrder) {
  for (const auto& s : make_dataset(900, 100)) {
    for (std::size_t i = 1; i < s.scene.objects.size(); ++i) {
      const auto& a = s.scene.objects[i - 1];
      const auto& b = s.scene.objects[i];
      EXPECT_TRUE(a.cell_row < b.cell_row || (a.cell_row == b.cell_row && a.cell_col < b.cell_col));
    }
  }
}

TEST(Dataset, ClassesAndObjectCountsBalanced) {
  const auto data = make_dataset(0, 3000);
  std::map<ShapeKind, double> shapes;
  std::map<std::size_t, double> counts;
  std::size_t objects = 0;
  for (const auto& s : data) {
    counts[s.scene.objects.size()] += 1;
    for (const auto& o : s.scene.objects) {
      shapes[o.shape] += 1;
      ++objects;
    }
  }
  for (auto k : kShapes) EXPECT_NEAR(shapes[k] / static_cast<double>(objects), 1.0 / 3, 0.2 / 3) << shape_name(k);
  for (std::size_t n = 1; n <= 3; ++n) EXPECT_NEAR(counts[n] / 3000.0, 1.0 / 3, 0.2 / 3) << n;
}

TEST(Dataset, SamplesUseConsecutiveIdsAndDistinctSeeds) {
  const auto data = make_dataset(50, 200);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(data[i].id, i);
    if (i) {
      EXPECT_GT(data[i].seed, data[i - 1].seed);
    }
  }
}

TEST(Dataset, HashStableAcrossGenerations) {
  EXPECT_EQ(fnv1a(make_dataset(1000, 1000)), fnv1a(make_dataset(1000, 1000)));
  EXPECT_NE(fnv1a(make_dataset(1000, 10)), fnv1a(make_dataset(1001, 10)));
}

TEST(Dataset, MeanPixelMatchesOracle) {
  const auto data = make_dataset(3, 20);
  double sum[3] = {0, 0, 0};
  for (const auto& s : data) {
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 32; ++x) {
        for (std::size_t c = 0; c < 3; ++c) sum[c] += s.scene.image.at(y, x, c);
      }
    }
  }
  const auto mean = dataset_mean_pixel(data);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(mean[c], sum[c] / (20 * 1024), 1e-12);
  const Image img = mean_image(data);
  EXPECT_EQ(img.at(31, 0, 2), mean[2]);
  EXPECT_THROW(dataset_mean_pixel(std::vector<QASample>{}), std::invalid_argument);
}

TEST(Dataset, BackgroundOnlyMeanIsBackground) {
  QASample s;
  s.scene.image = Image(4, 3, kBackground.r / 255.0);
  const auto mean = dataset_mean_pixel(std::vector<QASample>{s});
  EXPECT_NEAR(mean[0], 128 / 255.0, 1e-15);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = scratch("roundtrip");
  const auto data = make_dataset(400, 25);
  save_dataset(dir, data);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(back[i], data[i]) << i;
  EXPECT_EQ(fnv1a(back), fnv1a(data));
  std::filesystem::remove_all(dir);
}

TEST(Dataset, EmptyRoundTrip) {
  const auto dir = scratch("empty");
  save_dataset(dir, std::vector<QASample>{});
  EXPECT_TRUE(load_dataset(dir).empty());
  std::filesystem::remove_all(dir);
}

TEST(Dataset, CorruptManifestReportsByteOffset) {
  const auto dir = scratch("corrupt");
  save_dataset(dir, make_dataset(0, 2));
  const std::string bad = "{\"format\": \"dexar-dataset\", \"samples\": [,]}";
  std::ofstream(dir / "manifest.json") << bad;
  // 1-based position of the offending comma
  const std::string where = "byte " + std::to_string(bad.find("[,") + 2);
  try {
    load_dataset(dir);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, TruncatedBlobRejected) {
  const auto dir = scratch("truncated");
  save_dataset(dir, make_dataset(0, 3));
  std::filesystem::resize_file(dir / "images.bin", 100);
  EXPECT_THROW(load_dataset(dir), DatasetError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), DatasetError);
}

TEST(Vocabulary, ClosedOverDataset) {
  for (const auto& s : make_dataset(0, 500)) {
    for (auto t : s.answer) EXPECT_LT(t, Vocabulary::size());
    for (auto t : s.prompt) EXPECT_LT(t, Vocabulary::size());
  }
  for (std::size_t i = 0; i < Vocabulary::size(); ++i) EXPECT_EQ(Vocabulary::id(Vocabulary::word(i)), i);
  EXPECT_THROW(Vocabulary::id("hexagon"), std::out_of_range);
  EXPECT_EQ(Vocabulary::word(999), "<unk>");
}

TEST(FillerMask, LabelsOnlyShapeWords) {
  const std::vector<TokenId> toks{Vocabulary::id("I"), Vocabulary::id("circle"), Vocabulary::kEos,
                                  Vocabulary::id("triangle"), 60};
  EXPECT_EQ(filler_mask_of(toks), (std::vector<std::uint8_t>{0, 1, 0, 1, 0}));
}
