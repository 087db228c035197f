// SPDX-License-Identifier: Apache-2.0
#include "fpcc/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "fpcc/errors.hpp"
#include "fpcc/rng.hpp"

namespace fpcc {
namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                                 static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b.data(), 4);
}

/// Parses an IDX header; returns the dimension list and the payload offset.
std::pair<std::vector<std::size_t>, std::size_t> idx_header(const std::vector<unsigned char>& b,
                                                            std::uint32_t magic,
                                                            const std::string& what) {
  if (b.size() < 4) throw FormatError(what + ": truncated header");
  const std::uint32_t m = be32(b, 0);
  if (m != magic) throw FormatError(what + ": bad IDX magic");
  const std::size_t rank = m & 0xff;
  if (b.size() < 4 + 4 * rank) throw FormatError(what + ": truncated header");
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = be32(b, 4 + 4 * i);
    if (dims[i] == 0) throw FormatError(what + ": zero dimension");
    count *= dims[i];
  }
  const std::size_t offset = 4 + 4 * rank;
  if (b.size() - offset != count)
    throw FormatError(what + ": payload holds " + std::to_string(b.size() - offset) +
                      " bytes, header declares " + std::to_string(count));
  return {dims, offset};
}

double parse_number(std::string_view s, std::size_t line) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || !std::isfinite(v))
    throw FormatError("csv line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::string split_name(Split split) { return split == Split::train ? "train" : "test"; }

Dataset::Dataset(Tensor images, std::vector<std::size_t> labels, std::size_t classes, Split split)
    : images_(std::move(images)), labels_(std::move(labels)), classes_(classes), split_(split) {
  if (classes_ < 2) throw ConsistencyError("dataset needs at least two classes");
  if (images_.rank() < 2) throw ConsistencyError("dataset images must be batch-major");
  if (images_.dim(0) != labels_.size())
    throw ConsistencyError("dataset has " + std::to_string(images_.dim(0)) + " images and " +
                           std::to_string(labels_.size()) + " labels");
  for (auto y : labels_)
    if (y >= classes_) throw ConsistencyError("label " + std::to_string(y) + " outside [0, K)");
  for (double v : images_.data())
    if (v < 0.0 || v > 1.0) throw ConsistencyError("pixel value outside [0, 1]");
}

Shape Dataset::sample_shape() const {
  return Shape(images_.shape().begin() + 1, images_.shape().end());
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  const std::size_t per = images_.size() / size();
  Shape s = images_.shape();
  s[0] = n;
  std::vector<double> px(images_.vec().begin(), images_.vec().begin() + n * per);
  return Dataset(Tensor(s, std::move(px)), {labels_.begin(), labels_.begin() + n}, classes_,
                 split_);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes, Split split) {
  const auto ib = read_bytes(images);
  const auto lb = read_bytes(labels);
  auto [idims, ioff] = idx_header(ib, kIdxImages, images.string());
  auto [ldims, loff] = idx_header(lb, kIdxLabels, labels.string());
  if (idims.size() != 3) throw FormatError(images.string() + ": image file must be N x H x W");
  if (idims[0] != ldims[0])
    throw ConsistencyError("image count " + std::to_string(idims[0]) + " != label count " +
                           std::to_string(ldims[0]));
  std::vector<double> px(ib.size() - ioff);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = ib[ioff + i] / 255.0;
  std::vector<std::size_t> y(lb.begin() + static_cast<std::ptrdiff_t>(loff), lb.end());
  if (classes == 0) classes = *std::max_element(y.begin(), y.end()) + 1;
  return Dataset(Tensor({idims[0], 1, idims[1], idims[2]}, std::move(px)), std::move(y), classes,
                 split);
}

void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  const Shape s = data.sample_shape();
  if (s.size() != 3 || s[0] != 1) throw DimensionError("IDX export needs [N, 1, H, W] images");
  if (data.classes() > 256) throw ConsistencyError("IDX labels are single bytes");
  std::ofstream img(images, std::ios::binary), lab(labels, std::ios::binary);
  if (!img || !lab) throw IoError("cannot write IDX files");
  put_be32(img, kIdxImages);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(s[1]));
  put_be32(img, static_cast<std::uint32_t>(s[2]));
  std::vector<char> px(data.images().size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<char>(static_cast<unsigned char>(std::lround(data.images()[i] * 255.0)));
  img.write(px.data(), static_cast<std::streamsize>(px.size()));
  put_be32(lab, kIdxLabels);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (auto y : data.labels()) lab.put(static_cast<char>(y));
  if (!img || !lab) throw IoError("short write on IDX files");
}

Dataset load_csv(const std::filesystem::path& path, const CsvLayout& layout, Split split) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::size_t width = shape_size(layout.sample_shape);
  if (layout.sample_shape.empty() || width == 0) throw ConfigError("csv layout has no pixels");
  const double hi = layout.scale == PixelScale::byte ? 255.0 : 1.0;

  std::vector<double> px;
  std::vector<std::size_t> y;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && layout.header) continue;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::size_t fields = 0, start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::string_view cell(line.data() + start,
                                  (comma == std::string::npos ? line.size() : comma) - start);
      const double v = parse_number(cell, lineno);
      if (fields == 0) {
        if (v < 0.0 || v != std::floor(v)) throw FormatError("csv line " + std::to_string(lineno) +
                                                             ": label is not a class index");
        if (v >= static_cast<double>(layout.classes))
          throw ConsistencyError("csv line " + std::to_string(lineno) + ": label out of range");
        y.push_back(static_cast<std::size_t>(v));
      } else {
        if (fields > width) break;
        if (v < 0.0 || v > hi)
          throw FormatError("csv line " + std::to_string(lineno) + ": pixel out of range");
        px.push_back(v / hi);
      }
      ++fields;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields != width + 1)
      throw FormatError("csv line " + std::to_string(lineno) + ": expected " +
                        std::to_string(width + 1) + " fields");
  }
  if (y.empty()) throw FormatError(path.string() + ": empty dataset");
  Shape s = layout.sample_shape;
  s.insert(s.begin(), y.size());
  return Dataset(Tensor(std::move(s), std::move(px)), std::move(y), layout.classes, split);
}

Dataset synthetic_blobs(std::size_t classes, std::size_t per_class, const Shape& sample_shape,
                        double spread, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synthetic_blobs needs K >= 2");
  if (per_class == 0) throw ConfigError("synthetic_blobs needs per_class >= 1");
  if (!(spread >= 0.0)) throw ConfigError("spread must be >= 0");
  const std::size_t D = shape_size(sample_shape);
  Rng rng = make_rng(seed, "blobs");
  std::uniform_real_distribution<double> mean_dist(0.2, 0.8);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> means(classes * D);
  for (auto& m : means) m = mean_dist(rng);
  std::vector<double> px;
  px.reserve(classes * per_class * D);
  std::vector<std::size_t> y;
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t d = 0; d < D; ++d)
        px.push_back(std::clamp(means[k * D + d] + spread * noise(rng), 0.0, 1.0));
      y.push_back(k);
    }
  Shape s = sample_shape;
  s.insert(s.begin(), y.size());
  return Dataset(Tensor(std::move(s), std::move(px)), std::move(y), classes);
}

namespace {

struct Point {
  double x, y;
};
using Segment = std::pair<Point, Point>;

/// Seven-segment strokes in the unit square, y pointing down.
std::vector<Segment> glyph_strokes(std::size_t digit) {
  static const std::array<Segment, 7> seg = {{
      {{0.2, 0.1}, {0.8, 0.1}},  // a
      {{0.8, 0.1}, {0.8, 0.5}},  // b
      {{0.8, 0.5}, {0.8, 0.9}},  // c
      {{0.2, 0.9}, {0.8, 0.9}},  // d
      {{0.2, 0.5}, {0.2, 0.9}},  // e
      {{0.2, 0.1}, {0.2, 0.5}},  // f
      {{0.2, 0.5}, {0.8, 0.5}},  // g
  }};
  if (digit == 1) return {{{0.5, 0.1}, {0.5, 0.9}}, {{0.35, 0.25}, {0.5, 0.1}}};
  if (digit == 7) return {seg[0], {{0.8, 0.1}, {0.45, 0.9}}};
  static const std::array<const char*, 10> code = {"abcdef", "",      "abged", "abgcd", "fgbc",
                                                   "afgcd",  "afgedc", "",     "abcdefg", "abfgcd"};
  std::vector<Segment> out;
  for (const char* c = code[digit]; *c; ++c) out.push_back(seg[static_cast<std::size_t>(*c - 'a')]);
  return out;
}

void render_glyph(std::size_t digit, Rng& rng, const GlyphOptions& o, double* out) {
  constexpr std::size_t H = 28;
  auto uni = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double ang = uni(-0.25, 0.25), sc = uni(0.75, 1.0), sh = uni(-0.2, 0.2);
  const double tx = uni(-2.5, 2.5), ty = uni(-2.5, 2.5), thick = uni(1.0, 2.0);
  const double ca = std::cos(ang), sa = std::sin(ang);
  auto place = [&](Point p) {
    double x = (p.x - 0.5) * sc * 18.0, y = (p.y - 0.5) * sc * 22.0;
    x += sh * y;
    return Point{ca * x - sa * y + 14.0 + tx, sa * x + ca * y + 14.0 + ty};
  };
  std::vector<Segment> strokes;
  for (auto [p, q] : glyph_strokes(digit)) strokes.emplace_back(place(p), place(q));

  const double bg = uni(o.background_lo, o.background_hi);
  const double contrast = uni(o.contrast_lo, o.contrast_hi);
  std::normal_distribution<double> noise(0.0, o.noise);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < H; ++c) {
      const double px = static_cast<double>(c) + 0.5, py = static_cast<double>(r) + 0.5;
      double dist = 1e9;
      for (auto [p, q] : strokes) {
        const double dx = q.x - p.x, dy = q.y - p.y;
        const double t = std::clamp(((px - p.x) * dx + (py - p.y) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
        dist = std::min(dist, std::hypot(px - (p.x + t * dx), py - (p.y + t * dy)));
      }
      const double ink = std::clamp(thick - dist + 0.5, 0.0, 1.0);
      out[r * H + c] = std::clamp(bg + contrast * ink + noise(rng), 0.0, 1.0);
    }
}

}  // namespace

Dataset glyph_digits(std::size_t per_class, std::uint64_t seed, Split split,
                     const GlyphOptions& options) {
  if (per_class == 0) throw ConfigError("glyph_digits needs per_class >= 1");
  constexpr std::size_t K = 10, P = 28 * 28;
  const std::size_t N = K * per_class;
  Rng rng = make_rng(seed, "glyphs");
  std::vector<double> px(N * P);
  std::vector<std::size_t> y(N);
  for (std::size_t i = 0; i < N; ++i) {
    y[i] = i / per_class;
    render_glyph(y[i], rng, options, px.data() + i * P);
  }
  auto order = batch_order(N, derive_seed(seed, "glyph-order"), true);
  std::vector<double> spx(N * P);
  std::vector<std::size_t> sy(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::copy_n(px.begin() + static_cast<std::ptrdiff_t>(order[i] * P), P,
                spx.begin() + static_cast<std::ptrdiff_t>(i * P));
    sy[i] = y[order[i]];
  }
  return Dataset(Tensor({N, 1, 28, 28}, std::move(spx)), std::move(sy), K, split);
}

std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                           bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  const auto order = batch_order(data.size(), seed, shuffle);
  const std::size_t per = data.images().size() / data.size();
  std::vector<Batch> out;
  for (std::size_t lo = 0; lo < order.size(); lo += batch_size) {
    const std::size_t hi = std::min(order.size(), lo + batch_size);
    Shape s = data.images().shape();
    s[0] = hi - lo;
    std::vector<double> px;
    px.reserve((hi - lo) * per);
    std::vector<std::size_t> y;
    for (std::size_t i = lo; i < hi; ++i) {
      const auto src = data.images().vec().begin() + static_cast<std::ptrdiff_t>(order[i] * per);
      px.insert(px.end(), src, src + static_cast<std::ptrdiff_t>(per));
      y.push_back(data.labels()[order[i]]);
    }
    out.push_back({Tensor(std::move(s), std::move(px)), std::move(y)});
  }
  return out;
}

}  // namespace fpcc
