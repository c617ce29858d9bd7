#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/basis.hpp"
#include "taconv/layers.hpp"
#include "taconv/transforms.hpp"

namespace taconv {

enum class LayerKind { Conv, TAConv, ResBlock, TAResBlock };

inline std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::TAConv: return "taconv";
    case LayerKind::ResBlock: return "resblock";
    case LayerKind::TAResBlock: return "taresblock";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::Conv, LayerKind::TAConv, LayerKind::ResBlock, LayerKind::TAResBlock})
    if (to_string(k) == s) return k;
  throw ShapeError("unknown layer kind '" + s + "'");
}

struct LayerConfig {
  LayerKind kind = LayerKind::Conv;
  int out_channels = 8;
  int k = 3;       // ignored by TA layers, which use the bank's size
  int stride = 1;  // residual blocks are stride 1
  bool bias = false;
};

inline void to_json(nlohmann::json& j, const LayerConfig& l) {
  j = {{"kind", to_string(l.kind)}, {"out_channels", l.out_channels}, {"k", l.k}, {"stride", l.stride}, {"bias", l.bias}};
}

inline void from_json(const nlohmann::json& j, LayerConfig& l) {
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.out_channels = j.at("out_channels").get<int>();
  l.k = j.value("k", 3);
  l.stride = j.value("stride", 1);
  l.bias = j.value("bias", false);
}

/// Layer stack -> relu after every layer -> global average pool -> linear head.
struct NetworkConfig {
  std::string name = "standard";
  int in_channels = 1;
  int height = 20;
  int width = 20;
  int num_classes = 8;
  std::vector<LayerConfig> layers;
  BankSpec bank;  // shared by every TA layer

  bool has_ta_layers() const {
    for (const auto& l : layers)
      if (l.kind == LayerKind::TAConv || l.kind == LayerKind::TAResBlock) return true;
    return false;
  }

  TransformKind transform() const { return has_ta_layers() ? bank.kind : TransformKind::Identity; }

  /// Four conv layers with the first one optionally transform-augmented.
  static NetworkConfig desk(TransformKind kind = TransformKind::Identity, bool augmented = false,
                            std::uint64_t bank_seed = 7, int extra_branches = 4) {
    NetworkConfig c;
    c.layers = {{augmented ? LayerKind::TAConv : LayerKind::Conv, 16, 5, 1, false},
                {LayerKind::Conv, 32, 3, 2, true},
                {LayerKind::Conv, 48, 3, 2, true},
                {LayerKind::Conv, 64, 3, 1, true}};
    c.bank = make_bank_spec(BasisSpec::make(5, 1.5), augmented ? kind : TransformKind::Identity,
                            augmented ? extra_branches : 0, bank_seed);
    c.name = augmented ? "taconv_" + to_string(kind) : "standard";
    return c;
  }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"name", c.name},          {"in_channels", c.in_channels}, {"height", c.height}, {"width", c.width},
       {"num_classes", c.num_classes}, {"layers", c.layers},      {"bank", c.bank}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.name = j.value("name", std::string("model"));
  c.in_channels = j.at("in_channels").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.layers = j.at("layers").get<std::vector<LayerConfig>>();
  c.bank = j.at("bank").get<BankSpec>();
}

using Layer = std::variant<ConvLayer, TAConvLayer, ResBlock, TAResBlock>;

struct NamedParam {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  /// Builds the network and initializes parameters from `seed`.
  static Model assemble(const NetworkConfig& config, std::uint64_t seed) {
    if (config.layers.empty()) throw ShapeError("network: no layers");
    if (config.in_channels < 1 || config.height < 1 || config.width < 1 || config.num_classes < 2)
      throw ShapeError("network: invalid input or class dimensions");
    Model m;
    m.config_ = config;
    if (config.has_ta_layers()) m.bank_ = std::make_shared<const BasisBank>(config.bank.build());
    int channels = config.in_channels, h = config.height, w = config.width;
    for (std::size_t i = 0; i < config.layers.size(); ++i) {
      const auto& lc = config.layers[i];
      Rng rng(derive_seed(seed, {i}));
      if (lc.out_channels < 1) throw ShapeError("network: layer " + std::to_string(i) + " has no output channels");
      switch (lc.kind) {
        case LayerKind::Conv:
          if (lc.k < 1 || lc.k % 2 == 0) throw ShapeError("network: conv kernel size must be odd");
          m.layers_.emplace_back(ConvLayer::create(channels, lc.out_channels, lc.k, lc.stride, lc.bias, rng));
          break;
        case LayerKind::TAConv:
          if (lc.bias) throw ShapeError("network: TAConv layers are bias-free");
          m.layers_.emplace_back(TAConvLayer::create(channels, lc.out_channels, m.bank_, lc.stride, rng));
          break;
        case LayerKind::ResBlock:
          if (lc.stride != 1) throw ShapeError("network: residual blocks must have stride 1");
          m.layers_.emplace_back(ResBlock::create(channels, lc.out_channels, lc.k, rng));
          break;
        case LayerKind::TAResBlock:
          if (lc.stride != 1) throw ShapeError("network: residual blocks must have stride 1");
          m.layers_.emplace_back(TAResBlock::create(channels, lc.out_channels, m.bank_, rng));
          break;
      }
      if (lc.stride < 1) throw ShapeError("network: stride must be >= 1");
      h = (h - 1) / lc.stride + 1;
      w = (w - 1) / lc.stride + 1;
      channels = lc.out_channels;
    }
    Rng rng(derive_seed(seed, {config.layers.size()}));
    m.head_w_ = detail::randn(Shape{static_cast<std::size_t>(channels), static_cast<std::size_t>(config.num_classes)},
                              std::sqrt(1.0 / channels), rng)
                    .set_requires_grad();
    m.head_b_ = Tensor(Shape{static_cast<std::size_t>(config.num_classes)}, 0.0).set_requires_grad();
    return m;
  }

  const NetworkConfig& config() const { return config_; }
  const std::string& name() const { return config_.name; }
  void set_name(std::string n) { config_.name = std::move(n); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const Tensor& head_weight() const { return head_w_; }
  const Tensor& head_bias() const { return head_b_; }
  std::shared_ptr<const BasisBank> bank() const { return bank_; }

  /// x: [N, C, H, W] in [0, 1] -> logits [N, classes]. With track_params
  /// false, parameters enter the tape as constants (input gradients only).
  Tensor forward(Tape* tape, const Tensor& x, bool track_params = true) const {
    if (x.ndim() != 4 || x.dim(1) != static_cast<std::size_t>(config_.in_channels)) {
      throw ShapeError("model '" + name() + "': input " + shape_str(x.shape()) + " does not have " +
                       std::to_string(config_.in_channels) + " channels");
    }
    Tensor a = x;
    for (const auto& layer : layers_) {
      a = std::visit([&](const auto& l) { return l.forward(tape, a, track_params); }, layer);
      a = ops::relu(tape, a);
    }
    return ops::linear(tape, ops::global_avg_pool(tape, a), detail::param(head_w_, track_params),
                       detail::param(head_b_, track_params));
  }

  /// Parameter handles in a fixed order; they share storage with the model.
  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, ConvLayer>) {
              out.push_back({p + "kernel", l.kernel});
              if (l.bias) out.push_back({p + "bias", *l.bias});
            } else if constexpr (std::is_same_v<L, TAConvLayer>) {
              out.push_back({p + "w", l.w});
              out.push_back({p + "beta", l.beta});
            } else if constexpr (std::is_same_v<L, ResBlock>) {
              out.push_back({p + "k1", l.k1});
              out.push_back({p + "k2", l.k2});
              if (l.proj) out.push_back({p + "proj", *l.proj});
            } else {
              out.push_back({p + "w1", l.w1});
              out.push_back({p + "w2", l.w2});
              out.push_back({p + "beta", l.beta});
              if (l.proj) out.push_back({p + "proj", *l.proj});
            }
          },
          layers_[i]);
    }
    out.push_back({"head.weight", head_w_});
    out.push_back({"head.bias", head_b_});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() const {
    for (auto p : parameters()) p.tensor.zero_grad();
  }

  /// Deep copy of all parameters; the (immutable) bank is shared.
  Model clone() const {
    Model m = *this;
    for (auto& layer : m.layers_) {
      std::visit(
          [](auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, ConvLayer>) {
              l.kernel = l.kernel.clone();
              if (l.bias) l.bias = l.bias->clone();
            } else if constexpr (std::is_same_v<L, TAConvLayer>) {
              l.w = l.w.clone();
              l.beta = l.beta.clone();
            } else if constexpr (std::is_same_v<L, ResBlock>) {
              l.k1 = l.k1.clone();
              l.k2 = l.k2.clone();
              if (l.proj) l.proj = l.proj->clone();
            } else {
              l.w1 = l.w1.clone();
              l.w2 = l.w2.clone();
              l.beta = l.beta.clone();
              if (l.proj) l.proj = l.proj->clone();
            }
          },
          layer);
    }
    m.head_w_ = head_w_.clone();
    m.head_b_ = head_b_.clone();
    return m;
  }

 private:
  NetworkConfig config_;
  std::shared_ptr<const BasisBank> bank_;
  std::vector<Layer> layers_;
  Tensor head_w_, head_b_;
};

/// Class predictions, evaluated in fixed-size chunks.
inline std::vector<int> predict(const Model& model, const Tensor& images, std::size_t chunk = 128) {
  const std::size_t n = images.dim(0), per = images.numel() / std::max<std::size_t>(n, 1);
  std::vector<int> out(n);
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t len = std::min(chunk, n - s);
    Shape shape = images.shape();
    shape[0] = len;
    Tensor batch(shape, std::vector<double>(images.data().begin() + static_cast<long>(s * per),
                                            images.data().begin() + static_cast<long>((s + len) * per)));
    const Tensor logits = model.forward(nullptr, batch, false);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < len; ++i) {
      const double* z = logits.ptr() + i * k;
      out[s + i] = static_cast<int>(std::max_element(z, z + k) - z);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   "TACV1" | u32 tensor count | per tensor: u32 ndim, ndim x u64 extent
//   | float64 payload of every tensor in order | u64 json length | canonical JSON
// All integers and floats little-endian.

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint truncated at byte " + std::to_string(pos));
  unsigned char b[sizeof(T)];
  std::memcpy(b, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  pos += sizeof(T);
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "TACV1";

inline std::string serialize_model(const Model& model) {
  std::string out(kCheckpointMagic, 5);
  const auto params = model.parameters();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.ndim()));
    for (auto d : p.tensor.shape()) detail::put_le<std::uint64_t>(out, d);
  }
  for (const auto& p : params)
    for (double v : p.tensor.data()) detail::put_le<double>(out, v);
  nlohmann::json meta = {{"config", model.config()}};
  nlohmann::json names = nlohmann::json::array();
  for (const auto& p : params) names.push_back(p.name);
  meta["parameters"] = names;
  const std::string js = meta.dump();
  detail::put_le<std::uint64_t>(out, js.size());
  out += js;
  return out;
}

inline Model deserialize_model(const std::string& bytes) {
  if (bytes.size() < 5 || bytes.compare(0, 5, kCheckpointMagic) != 0) throw DataError("checkpoint: bad magic at offset 0");
  std::size_t pos = 5;
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  std::vector<Shape> shapes(count);
  for (auto& s : shapes) {
    const auto nd = detail::get_le<std::uint32_t>(bytes, pos);
    if (nd > 8) throw DataError("checkpoint: implausible tensor rank");
    for (std::uint32_t i = 0; i < nd; ++i) s.push_back(detail::get_le<std::uint64_t>(bytes, pos));
  }
  std::vector<std::vector<double>> payload(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto n = shape_numel(shapes[t]);
    if (pos + n * 8 > bytes.size()) throw DataError("checkpoint truncated in parameter payload");
    payload[t].resize(n);
    for (auto& v : payload[t]) v = detail::get_le<double>(bytes, pos);
  }
  const auto jlen = detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + jlen != bytes.size()) throw DataError("checkpoint: JSON trailer length mismatch");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(pos));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad JSON trailer: ") + e.what());
  }
  Model model = Model::assemble(meta.at("config").get<NetworkConfig>(), 0);
  auto params = model.parameters();
  if (params.size() != count) throw DataError("checkpoint: parameter count does not match architecture");
  for (std::uint32_t t = 0; t < count; ++t) {
    if (params[t].tensor.shape() != shapes[t])
      throw DataError("checkpoint: shape mismatch for " + params[t].name);
    std::copy(payload[t].begin(), payload[t].end(), params[t].tensor.data().begin());
  }
  return model;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  const auto bytes = serialize_model(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing '" + path + "'");
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_model(ss.str());
}

/// FNV-1a over the serialized checkpoint, as 16 hex digits.
inline std::string model_hash(const Model& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_model(model)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Weight transfer

namespace detail {

inline Tensor project_kernels(const Tensor& kernels, const BasisBank& bank, double tol, const std::string& where) {
  const std::size_t o = kernels.dim(0), c = kernels.dim(1), kk = kernels.dim(2) * kernels.dim(3);
  if (static_cast<int>(kernels.dim(2)) != bank.k() || kernels.dim(3) != kernels.dim(2)) {
    throw ShapeError(where + ": kernel size " + std::to_string(kernels.dim(2)) + " does not match basis size " +
                     std::to_string(bank.k()));
  }
  const BasisProjector proj(bank.branch(0));
  const std::size_t nb = bank.n_basis();
  Tensor w(Shape{o, c, nb});
  for (std::size_t f = 0; f < o * c; ++f) {
    const auto r = proj.project(kernels.data().subspan(f * kk, kk));
    if (r.relative_residual > tol) {
      throw NumericalError(where + ": basis cannot represent the kernel (relative residual " +
                           std::to_string(r.relative_residual) + ")");
    }
    std::copy(r.weights.begin(), r.weights.end(), w.data().begin() + static_cast<long>(f * nb));
  }
  return w;
}

inline void copy_values(Tensor& dst, const Tensor& src, const std::string& where) {
  if (dst.shape() != src.shape()) {
    throw ShapeError(where + ": shape " + shape_str(src.shape()) + " vs " + shape_str(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

inline void copy_optional(std::optional<Tensor>& dst, const std::optional<Tensor>& src, const std::string& where) {
  if (dst.has_value() != src.has_value()) throw ShapeError(where + ": bias/projection presence differs");
  if (dst) copy_values(*dst, *src, where);
}

inline void reset_beta(Tensor& beta) {
  auto d = beta.data();
  std::fill(d.begin(), d.end(), 0.0);
  d[0] = 1.0;
}

}  // namespace detail

/// Initializes `target` so that it contains `standard` as the branch-0
/// subnetwork: beta = [1, 0, ...], kernels of matching size are projected onto
/// the untransformed basis, plain convolutions and the head are copied.
inline void weight_transfer(const Model& standard, Model& target, double tol = 1e-6) {
  const auto& src = standard.layers();
  auto& dst = target.layers();
  if (src.size() != dst.size()) throw ShapeError("transfer: layer counts differ");
  const auto& sc = standard.config();
  const auto& tc = target.config();
  if (sc.in_channels != tc.in_channels || sc.num_classes != tc.num_classes) {
    throw ShapeError("transfer: input channels or class counts differ");
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::string where = "transfer layer " + std::to_string(i);
    if (sc.layers[i].stride != tc.layers[i].stride) throw ShapeError(where + ": strides differ");
    if (auto* s = std::get_if<ConvLayer>(&src[i])) {
      if (auto* d = std::get_if<ConvLayer>(&dst[i])) {
        detail::copy_values(d->kernel, s->kernel, where);
        detail::copy_optional(d->bias, s->bias, where);
      } else if (auto* t = std::get_if<TAConvLayer>(&dst[i])) {
        if (s->bias) throw ShapeError(where + ": standard conv has a bias, TAConv layers are bias-free");
        const Tensor w = detail::project_kernels(s->kernel, *t->bank, tol, where);
        detail::copy_values(t->w, w, where);
        detail::reset_beta(t->beta);
      } else {
        throw ShapeError(where + ": conv layer cannot be transferred to a residual block");
      }
    } else if (auto* s = std::get_if<ResBlock>(&src[i])) {
      if (auto* d = std::get_if<ResBlock>(&dst[i])) {
        detail::copy_values(d->k1, s->k1, where);
        detail::copy_values(d->k2, s->k2, where);
        detail::copy_optional(d->proj, s->proj, where);
      } else if (auto* t = std::get_if<TAResBlock>(&dst[i])) {
        detail::copy_values(t->w1, detail::project_kernels(s->k1, *t->bank, tol, where), where);
        detail::copy_values(t->w2, detail::project_kernels(s->k2, *t->bank, tol, where), where);
        detail::copy_optional(t->proj, s->proj, where);
        detail::reset_beta(t->beta);
      } else {
        throw ShapeError(where + ": residual block cannot be transferred to a conv layer");
      }
    } else {
      throw ShapeError(where + ": source must be a standard network");
    }
  }
  Tensor hw = target.head_weight(), hb = target.head_bias();
  detail::copy_values(hw, standard.head_weight(), "transfer head");
  detail::copy_values(hb, standard.head_bias(), "transfer head");
}

}  // namespace taconv
