#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "taconv/error.hpp"
#include "taconv/rng.hpp"
#include "taconv/tensor.hpp"

namespace taconv {

struct Dataset {
  Tensor images;            // [N, C, H, W] in [0, 1]
  std::vector<int> labels;  // empty for unlabeled image sets
  int num_classes = 0;
  std::string source;

  std::size_t size() const { return images.ndim() == 4 ? images.dim(0) : 0; }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_numel() const { return channels() * height() * width(); }
  bool labeled() const { return !labels.empty(); }

  Tensor image(std::size_t i) const {
    const std::size_t px = image_numel();
    return Tensor(Shape{channels(), height(), width()},
                  std::vector<double>(images.data().begin() + static_cast<long>(i * px),
                                      images.data().begin() + static_cast<long>((i + 1) * px)));
  }

  /// Rows [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const {
    end = std::min(end, size());
    if (begin >= end) throw DataError("dataset slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") is empty");
    const std::size_t px = image_numel();
    Dataset d;
    d.images = Tensor(Shape{end - begin, channels(), height(), width()},
                      std::vector<double>(images.data().begin() + static_cast<long>(begin * px),
                                          images.data().begin() + static_cast<long>(end * px)));
    if (labeled()) d.labels.assign(labels.begin() + static_cast<long>(begin), labels.begin() + static_cast<long>(end));
    d.num_classes = num_classes;
    d.source = source + "[" + std::to_string(begin) + ":" + std::to_string(end) + "]";
    return d;
  }

  void validate() const {
    if (images.ndim() != 4 || size() == 0) throw DataError("dataset '" + source + "' has no images");
    if (labeled()) {
      if (labels.size() != size()) throw DataError("dataset '" + source + "': label count does not match image count");
      for (int l : labels)
        if (l < 0 || l >= num_classes) throw DataError("dataset '" + source + "': label " + std::to_string(l) + " out of range");
    }
    for (double v : images.data())
      if (!(v >= 0.0 && v <= 1.0)) throw DataError("dataset '" + source + "': pixel outside [0, 1]");
  }
};

/// FNV-1a over shape, pixels and labels.
inline std::string dataset_id(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto s : d.images.shape()) {
    const std::uint64_t v = s;
    mix(&v, sizeof v);
  }
  mix(d.images.ptr(), d.images.numel() * sizeof(double));
  if (!d.labels.empty()) mix(d.labels.data(), d.labels.size() * sizeof(int));
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// IDX files: big-endian, magic = 0x00 0x00 <type> <ndim>.
// Images are [N, H, W] or [N, C, H, W]; labels are [N].

struct IdxMagicError : DataError {
  using DataError::DataError;
};
struct IdxTruncatedError : DataError {
  using DataError::DataError;
};
struct IdxCountMismatchError : DataError {
  using DataError::DataError;
};

enum class IdxType : unsigned char { UByte = 0x08, Float = 0x0D, Double = 0x0E };

struct IdxArray {
  IdxType type = IdxType::UByte;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // raw values, not rescaled
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::uint64_t read_be(const std::string& b, std::size_t pos, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n; ++i) v = (v << 8) | static_cast<unsigned char>(b[pos + i]);
  return v;
}

inline void write_be(std::string& out, std::uint64_t v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * (n - 1 - i))) & 0xFF));
}

inline std::size_t idx_elem_size(IdxType t) {
  switch (t) {
    case IdxType::UByte: return 1;
    case IdxType::Float: return 4;
    case IdxType::Double: return 8;
  }
  return 0;
}

}  // namespace detail

inline IdxArray parse_idx(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 4) throw IdxTruncatedError(name + ": truncated IDX header (" + std::to_string(bytes.size()) + " bytes)");
  for (std::size_t i = 0; i < 2; ++i)
    if (bytes[i] != 0) throw IdxMagicError(name + ": bad magic at offset " + std::to_string(i));
  const auto type = static_cast<unsigned char>(bytes[2]);
  if (type != 0x08 && type != 0x0D && type != 0x0E)
    throw IdxMagicError(name + ": bad magic at offset 2 (unsupported type code " + std::to_string(type) + ")");
  const auto ndim = static_cast<unsigned char>(bytes[3]);
  if (ndim == 0) throw IdxMagicError(name + ": bad magic at offset 3 (zero dimensions)");
  IdxArray a;
  a.type = static_cast<IdxType>(type);
  const std::size_t header = 4 + 4 * static_cast<std::size_t>(ndim);
  if (bytes.size() < header) throw IdxTruncatedError(name + ": truncated IDX header");
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    a.dims.push_back(static_cast<std::uint32_t>(detail::read_be(bytes, 4 + 4 * d, 4)));
    count *= a.dims.back();
  }
  const std::size_t es = detail::idx_elem_size(a.type);
  if (bytes.size() < header + count * es) {
    throw IdxTruncatedError(name + ": truncated payload, expected " + std::to_string(header + count * es) +
                            " bytes, found " + std::to_string(bytes.size()));
  }
  a.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t raw = detail::read_be(bytes, header + i * es, es);
    switch (a.type) {
      case IdxType::UByte: a.values[i] = static_cast<double>(raw); break;
      case IdxType::Float: a.values[i] = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(raw))); break;
      case IdxType::Double: a.values[i] = std::bit_cast<double>(raw); break;
    }
  }
  return a;
}

inline std::string encode_idx(const IdxArray& a) {
  std::string out{0, 0, static_cast<char>(a.type), static_cast<char>(a.dims.size())};
  for (auto d : a.dims) detail::write_be(out, d, 4);
  for (double v : a.values) {
    switch (a.type) {
      case IdxType::UByte: out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L)))); break;
      case IdxType::Float: detail::write_be(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4); break;
      case IdxType::Double: detail::write_be(out, std::bit_cast<std::uint64_t>(v), 8); break;
    }
  }
  return out;
}

/// Labels path paired with an image path: "images" -> "labels", "idx3"/"idx4" -> "idx1".
inline std::string paired_labels_path(const std::string& images_path) {
  namespace fs = std::filesystem;
  const fs::path p(images_path);
  std::string name = p.filename().string();
  const auto at = name.rfind("images");
  if (at == std::string::npos) throw DataError("cannot derive a labels file from '" + images_path + "'");
  name.replace(at, 6, "labels");
  for (const char* tag : {"idx3", "idx4"}) {
    const auto t = name.find(tag);
    if (t != std::string::npos) name.replace(t, 4, "idx1");
  }
  return (p.parent_path() / name).string();
}

/// Image pixels are divided by 255 for ubyte files and taken as-is otherwise.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const IdxArray img = parse_idx(detail::read_file(images_path), images_path);
  const IdxArray lab = parse_idx(detail::read_file(labels_path), labels_path);
  if (img.dims.size() != 3 && img.dims.size() != 4)
    throw DataError(images_path + ": expected 3 or 4 dimensions, found " + std::to_string(img.dims.size()));
  if (lab.dims.size() != 1) throw DataError(labels_path + ": labels must be one-dimensional");
  if (img.dims[0] != lab.dims[0]) {
    throw IdxCountMismatchError("count mismatch: " + std::to_string(img.dims[0]) + " images vs " +
                                std::to_string(lab.dims[0]) + " labels");
  }
  Dataset d;
  const std::size_t n = img.dims[0];
  const std::size_t c = img.dims.size() == 4 ? img.dims[1] : 1;
  const std::size_t h = img.dims[img.dims.size() - 2], w = img.dims.back();
  const double scale = img.type == IdxType::UByte ? 1.0 / 255.0 : 1.0;
  std::vector<double> px(img.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = img.values[i] * scale;
  d.images = Tensor(Shape{n, c, h, w}, std::move(px));
  int max_label = -1;
  for (double v : lab.values) {
    if (v < 0 || v != std::floor(v)) throw DataError(labels_path + ": labels must be non-negative integers");
    d.labels.push_back(static_cast<int>(v));
    max_label = std::max(max_label, d.labels.back());
  }
  d.num_classes = max_label + 1;
  d.source = images_path;
  d.validate();
  return d;
}

inline Dataset load_idx(const std::string& images_path) { return load_idx(images_path, paired_labels_path(images_path)); }

/// Writes images as float64 IDX (bit-exact) or ubyte, plus the labels file.
inline void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path,
                      IdxType type = IdxType::Double) {
  IdxArray img;
  img.type = type;
  img.dims = {static_cast<std::uint32_t>(d.size()), static_cast<std::uint32_t>(d.channels()),
              static_cast<std::uint32_t>(d.height()), static_cast<std::uint32_t>(d.width())};
  img.values.assign(d.images.data().begin(), d.images.data().end());
  if (type == IdxType::UByte)
    for (auto& v : img.values) v *= 255.0;
  IdxArray lab;
  lab.dims = {static_cast<std::uint32_t>(d.labels.size())};
  lab.values.assign(d.labels.begin(), d.labels.end());
  for (const auto& [path, arr] : {std::pair{images_path, &img}, std::pair{labels_path, &lab}}) {
    std::ofstream f(path, std::ios::binary);
    const std::string bytes = encode_idx(*arr);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing '" + path + "'");
  }
}

// ---------------------------------------------------------------------------
// Netpbm (binary P5 / P6, maxval <= 255)

inline Tensor read_pnm(const std::string& path) {
  const std::string b = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (start == pos) throw DataError(path + ": truncated header");
    return b.substr(start, pos - start);
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw DataError(path + ": bad magic at offset 0 (expected P5 or P6)");
  const std::size_t c = magic == "P5" ? 1 : 3;
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::logic_error&) {
    throw DataError(path + ": malformed header");
  }
  if (maxval == 0 || maxval > 255) throw DataError(path + ": only maxval 1..255 is supported");
  ++pos;  // single whitespace before the raster
  if (b.size() < pos + w * h * c) throw DataError(path + ": truncated raster");
  Tensor t(Shape{c, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        t[(ch * h + i) * w + j] = static_cast<unsigned char>(b[pos + (i * w + j) * c + ch]) / static_cast<double>(maxval);
  return t;
}

/// Writes [C, H, W] (C = 1 or 3) in [0, 1] as P5/P6 with maxval 255.
inline void write_pnm(const Tensor& image, const std::string& path) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) throw ShapeError("write_pnm: expected [1|3, H, W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = (c == 1 ? "P5\n" : "P6\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.push_back(static_cast<char>(std::lround(255.0 * std::clamp(image[(ch * h + i) * w + j], 0.0, 1.0))));
  std::ofstream f(path, std::ios::binary);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed writing '" + path + "'");
}

/// Every .pgm/.ppm in a directory, sorted by name. A leading "<label>_" in
/// the file name supplies the label; otherwise the set is unlabeled.
inline Dataset load_pnm_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .pgm/.ppm images in '" + dir + "'");
  Dataset d;
  std::vector<double> px;
  Shape shape;
  bool all_labeled = true;
  std::vector<int> labels;
  for (const auto& f : files) {
    const Tensor t = read_pnm(f.string());
    if (shape.empty()) shape = t.shape();
    if (t.shape() != shape) throw DataError(f.string() + ": image size differs from the first image");
    px.insert(px.end(), t.data().begin(), t.data().end());
    const std::string stem = f.filename().string();
    const auto us = stem.find('_');
    int label = -1;
    if (us != std::string::npos && us > 0 && std::all_of(stem.begin(), stem.begin() + static_cast<long>(us), ::isdigit))
      label = std::stoi(stem.substr(0, us));
    if (label < 0) all_labeled = false;
    labels.push_back(label);
  }
  d.images = Tensor(Shape{files.size(), shape[0], shape[1], shape[2]}, std::move(px));
  if (all_labeled) {
    d.labels = labels;
    d.num_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  }
  d.source = dir;
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeClass { Disk, Ring, HBar, VBar, Plus, Cross, LCorner, MirroredL };

inline std::string to_string(ShapeClass s) {
  static const char* names[] = {"disk", "ring", "hbar", "vbar", "plus", "cross", "l_corner", "mirrored_l"};
  return names[static_cast<int>(s)];
}

namespace detail {

inline double box_sdf(double x, double y, double hx, double hy) {
  const double dx = std::abs(x) - hx, dy = std::abs(y) - hy;
  const double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
}

/// Signed distance (pixels) of shape `cls` at local coordinates (x, y).
inline double shape_sdf(ShapeClass cls, double x, double y, double size, double thick) {
  switch (cls) {
    case ShapeClass::Disk: return std::hypot(x, y) - 0.55 * size;
    case ShapeClass::Ring: return std::abs(std::hypot(x, y) - 0.7 * size) - 0.5 * thick;
    case ShapeClass::HBar: return box_sdf(x, y, size, 0.5 * thick);
    case ShapeClass::VBar: return box_sdf(x, y, 0.5 * thick, size);
    case ShapeClass::Plus: return std::min(box_sdf(x, y, size, 0.5 * thick), box_sdf(x, y, 0.5 * thick, size));
    case ShapeClass::Cross: {
      const double u = (x + y) * std::numbers::sqrt2 / 2, v = (x - y) * std::numbers::sqrt2 / 2;
      return std::min(box_sdf(u, v, size, 0.5 * thick), box_sdf(u, v, 0.5 * thick, size));
    }
    case ShapeClass::LCorner:
    case ShapeClass::MirroredL: {
      const double xs = cls == ShapeClass::LCorner ? x : -x;
      // vertical stroke on the left, horizontal stroke along the bottom
      const double vert = box_sdf(xs + 0.6 * size, y, 0.5 * thick, size);
      const double horiz = box_sdf(xs, y - size + 0.5 * thick, 0.6 * size + 0.5 * thick, 0.5 * thick);
      return std::min(vert, horiz);
    }
  }
  return 1e9;
}

}  // namespace detail

struct SynthOptions {
  int size = 20;
  double jitter = 2.0;        // centre offset, pixels
  double max_rotation = 0.15;  // radians
  double background = 0.15;   // upper bound of the background level
  double pixel_noise = 0.03;
};

/// Class-balanced grayscale shapes with jittered position, scale, thickness,
/// orientation and intensity. Image i has class i % classes.
inline Dataset synth_dataset(int n_per_class, int classes, std::uint64_t seed, const SynthOptions& opt = {}) {
  if (n_per_class < 1) throw DataError("synthetic: n_per_class must be >= 1");
  if (classes < 2 || classes > 8) throw DataError("synthetic: classes must be in [2, 8]");
  if (opt.size < 8) throw DataError("synthetic: image size must be >= 8");
  const std::size_t n = static_cast<std::size_t>(n_per_class) * classes, s = static_cast<std::size_t>(opt.size);
  Dataset d;
  d.images = Tensor(Shape{n, 1, s, s});
  d.labels.resize(n);
  d.num_classes = classes;
  d.source = "synthetic(seed=" + std::to_string(seed) + ")";
  const double c0 = 0.5 * (opt.size - 1), scale = opt.size / 20.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % static_cast<std::size_t>(classes));
    d.labels[i] = cls;
    Rng rng(derive_seed(seed, {i}));
    const double cx = c0 + rng.uniform(-opt.jitter, opt.jitter) * scale;
    const double cy = c0 + rng.uniform(-opt.jitter, opt.jitter) * scale;
    const double size = rng.uniform(5.0, 7.0) * scale;
    const double thick = rng.uniform(1.6, 2.4) * scale;
    const double rot = rng.uniform(-opt.max_rotation, opt.max_rotation);
    const double fg = rng.uniform(0.65, 1.0);
    const double bg = rng.uniform(0.0, opt.background);
    const double cr = std::cos(rot), sr = std::sin(rot);
    double* img = d.images.ptr() + i * s * s;
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s; ++c) {
        const double dx = static_cast<double>(c) - cx, dy = static_cast<double>(r) - cy;
        const double x = cr * dx + sr * dy, y = -sr * dx + cr * dy;
        const double sdf = detail::shape_sdf(static_cast<ShapeClass>(cls), x, y, size, thick);
        const double cover = std::clamp(0.5 - sdf, 0.0, 1.0);
        const double v = bg + (fg - bg) * cover + opt.pixel_noise * rng.normal();
        img[r * s + c] = std::clamp(v, 0.0, 1.0);
      }
  }
  return d;
}

}  // namespace taconv
