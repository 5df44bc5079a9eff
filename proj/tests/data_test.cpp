// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unistd.h>

#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"
#include "protoseg/data.hpp"
#include "protoseg/error.hpp"

namespace protoseg {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("protoseg_data_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// One shared 200-image corpus for the read-only tests.
class Generated : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("corpus"));
    meta_ = new DatasetMeta(generate_synthetic_dataset(*root_, 200, 32, 42));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
    delete meta_;
  }
  static fs::path* root_;
  static DatasetMeta* meta_;
};
fs::path* Generated::root_ = nullptr;
DatasetMeta* Generated::meta_ = nullptr;

TEST(SegMask, NearestResizeUsesFloorRule) {
  SegMask m(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) m.at(y, x) = y * 4 + x;
  SegMask half = resize_nearest(m, 2, 2);
  EXPECT_EQ(half.labels, (std::vector<int>{0, 2, 8, 10}));
  SegMask up = resize_nearest(half, 4, 4);
  EXPECT_EQ(up.at(1, 1), 0);
  EXPECT_EQ(up.at(3, 2), 10);
}

TEST(Png, RoundTripsGrayPixels) {
  const fs::path dir = scratch("png");
  fs::create_directories(dir);
  GrayImage img{3, 5, {}};
  for (int i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  write_png(dir / "a.png", img);
  GrayImage back = read_png(dir / "a.png");
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(read_png(dir / "missing.png"), DataError);
  fs::remove_all(dir);
}

TEST_F(Generated, WritesPairsWithLabelsInRange) {
  int images = 0;
  for (const auto& e : fs::directory_iterator(*root_ / "images")) {
    ++images;
    GrayImage m = read_png(*root_ / "masks" / e.path().filename());
    EXPECT_EQ(m.height, 32);
    for (auto v : m.pixels) EXPECT_LE(v, 8);
  }
  EXPECT_EQ(images, 200);
  EXPECT_TRUE(fs::exists(*root_ / "masks" / "00199.png"));
  EXPECT_TRUE(fs::exists(*root_ / "meta.json"));
}

TEST_F(Generated, MeasuredFrequenciesShowImbalanceAndCoverage) {
  std::vector<double> pixels(9, 0.0);
  std::vector<int> images_with(9, 0);
  for (int id = 0; id < 200; ++id) {
    char name[16];
    std::snprintf(name, sizeof name, "%05d.png", id);
    GrayImage m = read_png(*root_ / "masks" / name);
    std::set<int> present;
    for (auto v : m.pixels) {
      pixels[v] += 1.0;
      present.insert(v);
    }
    for (int c : present) ++images_with[c];
  }
  const double total = 200.0 * 32 * 32;
  EXPECT_GE(pixels[0] / total, 0.60);
  for (int c = 1; c <= 8; ++c) {
    EXPECT_GE(images_with[c], 10) << class_names()[c];
    EXPECT_LT(pixels[c], pixels[0]);
    EXPECT_NEAR(meta_->class_frequencies[c], pixels[c] / total, 1e-12);
  }
  double sum = 0.0;
  for (double f : meta_->class_frequencies) sum += f;
  EXPECT_NEAR(sum, 1.0, 1e-6);
}

TEST_F(Generated, StrokesAreAtLeastThreePixelsThick) {
  // Every crack pixel has a 3-pixel run of crack through it either
  // horizontally or vertically.
  Dataset ds = load_dataset(*root_);
  int checked = 0;
  for (const auto& s : ds.samples()) {
    if (s.id % 8 != 0) continue;  // primary class 1
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        if (s.mask.at(y, x) != 1) continue;
        auto run = [&](int dy, int dx) {
          int n = 1;
          for (int k = 1; k < 3; ++k) {
            const int yy = y + k * dy, xx = x + k * dx;
            if (yy < 0 || yy >= 32 || xx < 0 || xx >= 32 || s.mask.at(yy, xx) != 1) break;
            ++n;
          }
          for (int k = 1; k < 3; ++k) {
            const int yy = y - k * dy, xx = x - k * dx;
            if (yy < 0 || yy >= 32 || xx < 0 || xx >= 32 || s.mask.at(yy, xx) != 1) break;
            ++n;
          }
          return n;
        };
        EXPECT_TRUE(run(1, 0) >= 3 || run(0, 1) >= 3) << "image " << s.id << " at " << y << "," << x;
        ++checked;
      }
  }
  EXPECT_GT(checked, 0);
}

TEST_F(Generated, SameSeedGivesByteIdenticalFiles) {
  const fs::path again = scratch("again");
  generate_synthetic_dataset(again, 200, 32, 42);
  for (const char* sub : {"images", "masks"})
    for (const auto& e : fs::directory_iterator(*root_ / sub))
      ASSERT_EQ(slurp(e.path()), slurp(again / sub / e.path().filename())) << e.path();
  EXPECT_EQ(slurp(*root_ / "meta.json"), slurp(again / "meta.json"));
  fs::remove_all(again);
}

TEST_F(Generated, SplitsPartitionIdsSeventyFifteenFifteen) {
  std::set<int> all;
  for (const auto* v : {&meta_->train, &meta_->val, &meta_->test})
    for (int id : *v) EXPECT_TRUE(all.insert(id).second) << "id " << id << " in two splits";
  EXPECT_EQ(all.size(), 200u);
  EXPECT_NEAR(meta_->train.size() / 200.0, 0.70, 0.03);
  EXPECT_NEAR(meta_->val.size() / 200.0, 0.15, 0.03);
  EXPECT_NEAR(meta_->test.size() / 200.0, 0.15, 0.03);
}

TEST_F(Generated, LoadsWithIndexOverAllClasses) {
  Dataset ds = load_dataset(*root_);
  EXPECT_EQ(ds.size(), 200u);
  EXPECT_EQ(ds.index().size(), 9u);
  for (const auto& [cls, ids] : ds.index()) {
    for (int id : ids) EXPECT_GT(ds.sample(id).class_pixels[cls], 0);
  }
  const auto& s = ds.sample(17);
  EXPECT_EQ(s.image.shape(), (Shape{1, 32, 32, 1}));
  EXPECT_GE(s.image.storage().front(), -1.0);
  int total = 0;
  for (int c : s.class_pixels) total += c;
  EXPECT_EQ(total, 32 * 32);
}

TEST(Generator, RejectsTooFewImages) {
  EXPECT_THROW(generate_synthetic_dataset(scratch("small"), 50, 32, 1), ContractError);
  fs::remove_all(scratch("small"));
}

TEST(Generator, UnwritableDirectoryIsIoError) {
  const fs::path blocker = scratch("blocker");
  std::ofstream(blocker) << "file, not a directory";
  try {
    generate_synthetic_dataset(blocker / "ds", 90, 32, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kIo);
  }
  fs::remove_all(blocker);
}

// Writes a dataset whose masks are given explicitly.
void write_dataset(const fs::path& root, const std::vector<SegMask>& masks, int num_classes = 9) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::vector<int> ids;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%05zu.png", i);
    GrayImage img{masks[i].height, masks[i].width, std::vector<std::uint8_t>(masks[i].size(), 100)};
    GrayImage m{masks[i].height, masks[i].width, {}};
    for (int v : masks[i].labels) m.pixels.push_back(static_cast<std::uint8_t>(v));
    write_png(root / "images" / name, img);
    write_png(root / "masks" / name, m);
    ids.push_back(static_cast<int>(i));
  }
  nlohmann::json j;
  j["num_classes"] = num_classes;
  j["image_size"] = masks.front().height;
  j["splits"] = {{"train", ids}, {"val", std::vector<int>{}}, {"test", std::vector<int>{}}};
  std::ofstream(root / "meta.json") << j.dump();
}

SegMask block_mask(int cls, int pixels) {
  SegMask m(16, 16);
  for (int i = 0; i < pixels; ++i) m.labels[i] = cls;
  return m;
}

TEST(LoadDataset, LabelOutOfRangeIsReported) {
  const fs::path root = scratch("label9");
  write_dataset(root, {block_mask(1, 60), block_mask(9, 60)});
  try {
    load_dataset(root);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kLabelOutOfRange);
    EXPECT_NE(std::string(e.what()).find("label out of range"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(LoadDataset, EmptyDirectoryHasNoSamples) {
  const fs::path root = scratch("empty");
  fs::create_directories(root);
  try {
    load_dataset(root);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kNoSamples);
    EXPECT_NE(std::string(e.what()).find("no samples found"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(LoadDataset, MissingMaskAndSizeMismatch) {
  const fs::path root = scratch("broken");
  write_dataset(root, {block_mask(1, 60), block_mask(2, 60)});
  fs::remove(root / "masks" / "00001.png");
  try {
    load_dataset(root);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kMissingMask);
  }
  write_png(root / "masks" / "00001.png", GrayImage{8, 8, std::vector<std::uint8_t>(64, 0)});
  try {
    load_dataset(root);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kSizeMismatch);
  }
  fs::remove_all(root);
}

TEST(SampleEpisode, UnderPopulatedClassIsNamed) {
  // Classes 1..8 with 8 eligible images each, except class 3 with 3.
  std::vector<SegMask> masks;
  for (int c = 1; c <= 8; ++c)
    for (int i = 0; i < (c == 3 ? 3 : 8); ++i) masks.push_back(block_mask(c, 60));
  const fs::path root = scratch("under");
  write_dataset(root, masks);
  Dataset ds = load_dataset(root);
  Rng rng(1);
  try {
    sample_episode(ds, Split::kTrain, {.n_ways = 8, .k_shots = 5, .n_query = 1}, rng);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kUnderPopulated);
    EXPECT_NE(std::string(e.what()).find("class under-populated: class 3"), std::string::npos) << e.what();
  }
  fs::remove_all(root);
}

TEST_F(Generated, EpisodeCountsClosureAndDisjointness) {
  Dataset ds = load_dataset(*root_);
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Episode ep = sample_episode(ds, Split::kAll, {.n_ways = 2, .k_shots = 5, .n_query = 1}, rng);
    EXPECT_EQ(ep.support.size(), 10u);
    EXPECT_EQ(ep.query.size(), 1u);
    std::set<int> support_ids;
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      const auto& s = ep.support[i];
      EXPECT_TRUE(support_ids.insert(s.image_id).second);
      EXPECT_EQ(s.source_class, ep.classes[i / 5]);
      EXPECT_GE(static_cast<int>(s.mask.count(static_cast<int>(i / 5) + 1)), 50);
      EXPECT_LE(s.mask.max_label(), 2);
    }
    for (const auto& q : ep.query) {
      EXPECT_FALSE(support_ids.count(q.image_id));
      EXPECT_LE(q.mask.max_label(), 2);
      EXPECT_GT(q.mask.count(1) + q.mask.count(2), 0u);
    }
    EXPECT_EQ(ep.support_images().shape(), (Shape{10, 32, 32, 1}));
  }
}

TEST_F(Generated, SameRngStateGivesSameEpisode) {
  Dataset ds = load_dataset(*root_);
  Rng a(99), b(99);
  for (int i = 0; i < 5; ++i) {
    Episode x = sample_episode(ds, Split::kAll, {}, a);
    Episode y = sample_episode(ds, Split::kAll, {}, b);
    EXPECT_EQ(x.classes, y.classes);
    ASSERT_EQ(x.support.size(), y.support.size());
    for (std::size_t j = 0; j < x.support.size(); ++j) EXPECT_EQ(x.support[j].image_id, y.support[j].image_id);
    EXPECT_EQ(x.query.front().image_id, y.query.front().image_id);
  }
}

TEST_F(Generated, ClassDrawIsUniform) {
  Dataset ds = load_dataset(*root_);
  Rng rng(2024);
  std::vector<int> hits(9, 0);
  const int episodes = 1000;
  for (int i = 0; i < episodes; ++i) {
    Episode ep = sample_episode(ds, Split::kAll, {.n_ways = 2, .k_shots = 1, .n_query = 1}, rng);
    for (int c : ep.classes) ++hits[c];
  }
  for (int c = 1; c <= 8; ++c) EXPECT_NEAR(hits[c] / double(episodes), 2.0 / 8.0, 0.05) << class_names()[c];
}

TEST(EpisodeSpec, ValidatesRanges) {
  EXPECT_THROW((EpisodeSpec{.n_ways = 9}).validate(9), ContractError);
  EXPECT_THROW((EpisodeSpec{.n_ways = 0}).validate(9), ContractError);
  EXPECT_THROW((EpisodeSpec{.k_shots = 0}).validate(9), ContractError);
  EXPECT_NO_THROW((EpisodeSpec{.n_ways = 8}).validate(9));
}

}  // namespace
}  // namespace protoseg
