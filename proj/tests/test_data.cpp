// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "fpcc/attacks.hpp"
#include "fpcc/data.hpp"
#include "fpcc/errors.hpp"
#include "fpcc/harness.hpp"

using namespace fpcc;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("fpcc-data-" + std::to_string(std::random_device{}()) + "-" +
             std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w,
                                     const std::vector<std::uint8_t>& px) {
  std::vector<std::uint8_t> b;
  put_u32(b, 0x00000803);
  put_u32(b, n);
  put_u32(b, h);
  put_u32(b, w);
  b.insert(b.end(), px.begin(), px.end());
  return b;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& y) {
  std::vector<std::uint8_t> b;
  put_u32(b, 0x00000801);
  put_u32(b, static_cast<std::uint32_t>(y.size()));
  b.insert(b.end(), y.begin(), y.end());
  return b;
}

// Byte-level IDX reader independent of the library.
struct RawIdx {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;
};

RawIdx raw_idx(const fs::path& p) {
  const auto b = read_bytes(p);
  RawIdx r;
  const std::size_t rank = b[3];
  std::size_t off = 4;
  for (std::size_t i = 0; i < rank; ++i, off += 4)
    r.dims.push_back((std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
                     (std::uint32_t{b[off + 2]} << 8) | b[off + 3]);
  r.payload.assign(b.begin() + static_cast<std::ptrdiff_t>(off), b.end());
  return r;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Idx, CraftedFixtureExactValues) {
  TempDir dir;
  write_bytes(dir / "img", idx_images(2, 2, 2, {0, 1, 128, 255, 255, 128, 1, 0}));
  write_bytes(dir / "lbl", idx_labels({3, 1}));
  auto d = load_idx(dir / "img", dir / "lbl", 4, Split::test);
  EXPECT_EQ(d.images().shape(), (Shape{2, 1, 2, 2}));
  EXPECT_EQ(d.images(), Tensor({2, 1, 2, 2}, {0.0, 1.0 / 255.0, 128.0 / 255.0, 1.0, 1.0,
                                              128.0 / 255.0, 1.0 / 255.0, 0.0}));
  EXPECT_EQ(d.labels(), (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(d.classes(), 4u);
  EXPECT_EQ(d.split(), Split::test);
  EXPECT_EQ(load_idx(dir / "img", dir / "lbl").classes(), 4u);
}

TEST(Idx, Failures) {
  TempDir dir;
  auto img = idx_images(2, 2, 2, {0, 1, 2, 3, 4, 5, 6, 7});
  write_bytes(dir / "lbl", idx_labels({0, 1}));
  auto truncated = img;
  truncated.resize(img.size() - 3);
  write_bytes(dir / "trunc", truncated);
  EXPECT_THROW(load_idx(dir / "trunc", dir / "lbl"), FormatError);
  auto header_only = img;
  header_only.resize(6);
  write_bytes(dir / "short", header_only);
  EXPECT_THROW(load_idx(dir / "short", dir / "lbl"), FormatError);
  auto bad = img;
  bad[3] = 0x01;
  write_bytes(dir / "bad", bad);
  EXPECT_THROW(load_idx(dir / "bad", dir / "lbl"), FormatError);
  write_bytes(dir / "img", img);
  EXPECT_THROW(load_idx(dir / "lbl", dir / "lbl"), FormatError);
  write_bytes(dir / "three", idx_labels({0, 1, 1}));
  EXPECT_THROW(load_idx(dir / "img", dir / "three"), ConsistencyError);
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl", 1), ConsistencyError);
  EXPECT_THROW(load_idx(dir / "missing", dir / "lbl"), IoError);
}

TEST(Idx, RoundTripAgainstByteReader) {
  TempDir dir;
  const auto data = glyph_digits(3, 9);
  write_idx(data, dir / "img", dir / "lbl");
  const auto raw = raw_idx(dir / "img");
  ASSERT_EQ(raw.dims, (std::vector<std::uint32_t>{30, 28, 28}));
  ASSERT_EQ(raw.payload.size(), data.images().size());
  for (std::size_t i = 0; i < raw.payload.size(); ++i)
    ASSERT_EQ(raw.payload[i], static_cast<std::uint8_t>(std::lround(data.images()[i] * 255.0)));
  const auto lbl = raw_idx(dir / "lbl");
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(lbl.payload[i], data.labels()[i]);
  const auto back = load_idx(dir / "img", dir / "lbl", 10);
  for (std::size_t i = 0; i < raw.payload.size(); ++i)
    ASSERT_EQ(back.images()[i], raw.payload[i] / 255.0);
  EXPECT_EQ(back.labels(), data.labels());
  // A second load of the same files is bit-identical.
  EXPECT_EQ(load_idx(dir / "img", dir / "lbl", 10), back);
}

TEST(Csv, CraftedFixture) {
  TempDir dir;
  write_file(dir / "a.csv", "1,0,255,51,102\n0,255,0,0,0\n2,1,2,3,4\n");
  CsvLayout layout{{1, 2, 2}, 3, PixelScale::byte, false};
  auto d = load_csv(dir / "a.csv", layout);
  EXPECT_EQ(d.images(), Tensor({3, 1, 2, 2}, {0.0, 1.0, 51.0 / 255.0, 102.0 / 255.0, 1.0, 0.0,
                                              0.0, 0.0, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0,
                                              4.0 / 255.0}));
  EXPECT_EQ(d.labels(), (std::vector<std::size_t>{1, 0, 2}));
  write_file(dir / "u.csv", "label,p0,p1\n1,0.25,1\n0,0,0.5\n");
  auto u = load_csv(dir / "u.csv", CsvLayout{{2}, 2, PixelScale::unit, true});
  EXPECT_EQ(u.images(), Tensor({2, 2}, {0.25, 1.0, 0.0, 0.5}));
}

TEST(Csv, Failures) {
  TempDir dir;
  CsvLayout layout{{2}, 3, PixelScale::byte, false};
  write_file(dir / "empty.csv", "");
  EXPECT_THROW(load_csv(dir / "empty.csv", layout), FormatError);
  write_file(dir / "ragged.csv", "0,1,2\n1,3\n");
  EXPECT_THROW(load_csv(dir / "ragged.csv", layout), FormatError);
  write_file(dir / "label.csv", "0,1,2\n7,3,4\n");
  EXPECT_THROW(load_csv(dir / "label.csv", layout), ConsistencyError);
  write_file(dir / "range.csv", "0,1,300\n");
  EXPECT_THROW(load_csv(dir / "range.csv", layout), FormatError);
  write_file(dir / "word.csv", "0,1,x\n");
  EXPECT_THROW(load_csv(dir / "word.csv", layout), FormatError);
}

TEST(Csv, RandomFixtureAgainstIndependentParser) {
  TempDir dir;
  std::mt19937 gen(17);
  std::uniform_int_distribution<int> px(0, 255), lab(0, 9);
  std::ostringstream text;
  for (int r = 0; r < 100; ++r) {
    text << lab(gen);
    for (int i = 0; i < 12; ++i) text << ',' << px(gen);
    text << '\n';
  }
  write_file(dir / "r.csv", text.str());
  auto d = load_csv(dir / "r.csv", CsvLayout{{3, 2, 2}, 10, PixelScale::byte, false});
  // Independent parse with sscanf.
  std::istringstream in(text.str());
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    int v[13];
    ASSERT_EQ(std::sscanf(line.c_str(), "%d,%d,%d,%d,%d,%d,%d,%d,%d,%d,%d,%d,%d", &v[0], &v[1],
                          &v[2], &v[3], &v[4], &v[5], &v[6], &v[7], &v[8], &v[9], &v[10], &v[11],
                          &v[12]),
              13);
    EXPECT_EQ(d.labels()[row], static_cast<std::size_t>(v[0]));
    for (int i = 0; i < 12; ++i) EXPECT_EQ(d.images()[row * 12 + i], v[i + 1] / 255.0);
    ++row;
  }
  EXPECT_EQ(row, d.size());
}

TEST(DatasetInvariants, ConstructorChecks) {
  EXPECT_THROW(Dataset(Tensor({2, 2}, 0.5), {0, 1}, 1), ConsistencyError);
  EXPECT_THROW(Dataset(Tensor({2, 2}, 0.5), {0}, 2), ConsistencyError);
  EXPECT_THROW(Dataset(Tensor({2, 2}, 0.5), {0, 2}, 2), ConsistencyError);
  EXPECT_THROW(Dataset(Tensor({2, 2}, 1.5), {0, 1}, 2), ConsistencyError);
  const Dataset d(Tensor({3, 2}, {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}), {0, 1, 0}, 2);
  EXPECT_EQ(d.head(2).images(), Tensor({2, 2}, {0.0, 0.1, 0.2, 0.3}));
  EXPECT_EQ(d.head(9), d);
  EXPECT_EQ(d.sample_shape(), (Shape{2}));
}

TEST(Blobs, ZeroSpreadAndSeeding) {
  const auto d = synthetic_blobs(3, 4, {5}, 0.0, 2);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const std::size_t first = d.labels()[i] * 4;
      EXPECT_EQ(d.images()[i * 5 + j], d.images()[first * 5 + j]);
      EXPECT_GE(d.images()[i * 5 + j], 0.2);
      EXPECT_LE(d.images()[i * 5 + j], 0.8);
    }
  EXPECT_EQ(synthetic_blobs(3, 4, {5}, 0.1, 2), synthetic_blobs(3, 4, {5}, 0.1, 2));
  EXPECT_NE(synthetic_blobs(3, 4, {5}, 0.1, 2), synthetic_blobs(3, 4, {5}, 0.1, 3));
  EXPECT_THROW(synthetic_blobs(1, 4, {5}, 0.1, 2), ConfigError);
}

TEST(Blobs, MlpLearnsQuickly) {
  const auto train_set = synthetic_blobs(10, 100, {1, 28, 28}, 0.1, 5);
  const auto eval_set = synthetic_blobs(10, 150, {1, 28, 28}, 0.1, 5);
  RunConfig cfg;
  cfg.network = NetworkSpec::desk_mlp();
  cfg.network_name = "desk-mlp";
  cfg.fpcc.plan = InsertionPlan::at_sites(cfg.network.hook_sites());
  cfg.mode = TrainMode::baseline;
  cfg.optimizer.epochs = 1;
  cfg.optimizer.lr = 0.02;
  cfg.optimizer.batch_size = 32;
  const auto r = train(cfg, train_set);
  NetworkClassifier model(cfg.network, r.params);
  EXPECT_GT(accuracy(model, eval_set.images(), eval_set.labels()), 0.95);
}

TEST(Glyphs, DeterministicAndBalanced) {
  const auto a = glyph_digits(5, 3);
  EXPECT_EQ(a, glyph_digits(5, 3));
  EXPECT_NE(a, glyph_digits(5, 4));
  EXPECT_EQ(a.images().shape(), (Shape{50, 1, 28, 28}));
  std::vector<int> count(10, 0);
  for (auto y : a.labels()) ++count[y];
  for (int c : count) EXPECT_EQ(c, 5);
}

TEST(Batches, OrderAndPartition) {
  const auto order = batch_order(7, 1, false);
  EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(batch_order(50, 9, true), batch_order(50, 9, true));
  EXPECT_NE(batch_order(50, 9, true), batch_order(50, 10, true));

  const auto d = synthetic_blobs(2, 5, {3}, 0.2, 1);
  const auto bs = batches(d, 4, 3, true);
  ASSERT_EQ(bs.size(), 3u);
  EXPECT_EQ(bs.back().labels.size(), 2u);
  // Every sample appears exactly once, matched by its pixel row.
  std::multiset<std::vector<double>> seen, all;
  for (const auto& b : bs)
    for (std::size_t i = 0; i < b.labels.size(); ++i)
      seen.insert(std::vector<double>(b.images.vec().begin() + i * 3, b.images.vec().begin() + i * 3 + 3));
  for (std::size_t i = 0; i < d.size(); ++i)
    all.insert(std::vector<double>(d.images().vec().begin() + i * 3, d.images().vec().begin() + i * 3 + 3));
  EXPECT_EQ(seen, all);

  const auto plain = batches(d, 4, 3, false);
  EXPECT_EQ(plain[0].images, d.head(4).images());
  EXPECT_THROW(batches(d, 0, 3, false), ConfigError);
}
