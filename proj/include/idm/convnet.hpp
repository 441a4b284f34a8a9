#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "idm/autodiff.hpp"
#include "idm/binary_io.hpp"
#include "idm/errors.hpp"
#include "idm/ops.hpp"
#include "idm/rng.hpp"
#include "idm/sgd.hpp"
#include "idm/tensor.hpp"
#include "json.hpp"

namespace idm {

/// Depth x [conv3x3(width) -> instance norm -> relu -> avgpool2x2] -> linear.
struct ConvNetConfig {
  std::size_t depth = 3;
  std::size_t width = 64;
  std::size_t in_channels = 3;
  std::size_t input_hw = 16;
  std::size_t num_classes = 10;

  void validate() const {
    if (depth == 0) throw ConfigError("net.depth must be positive");
    if (width == 0) throw ConfigError("net.width must be positive");
    if (in_channels == 0) throw ConfigError("net.in_channels must be positive");
    if (num_classes == 0) throw ConfigError("net.num_classes must be positive");
    if (depth >= 8 * sizeof(std::size_t) || input_hw == 0 ||
        input_hw % (std::size_t{1} << depth) != 0) {
      throw ConfigError("net.input_hw (" + std::to_string(input_hw) +
                        ") must be divisible by 2^depth (depth " + std::to_string(depth) + ")");
    }
  }

  std::size_t feature_hw() const { return input_hw >> depth; }
  std::size_t feature_dim() const { return width * feature_hw() * feature_hw(); }

  friend bool operator==(const ConvNetConfig&, const ConvNetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ConvNetConfig& c) {
  j = nlohmann::json{{"depth", c.depth},
                     {"width", c.width},
                     {"in_channels", c.in_channels},
                     {"input_hw", c.input_hw},
                     {"num_classes", c.num_classes}};
}

inline void from_json(const nlohmann::json& j, ConvNetConfig& c) {
  j.at("depth").get_to(c.depth);
  j.at("width").get_to(c.width);
  j.at("in_channels").get_to(c.in_channels);
  j.at("input_hw").get_to(c.input_hw);
  j.at("num_classes").get_to(c.num_classes);
}

namespace convnet_layout {

// Per block: conv weight, conv bias, norm gamma, norm beta. Then classifier weight, bias.
inline constexpr std::size_t kPerBlock = 4;

inline std::vector<std::string> names(const ConvNetConfig& c) {
  std::vector<std::string> out;
  for (std::size_t d = 0; d < c.depth; ++d) {
    const std::string p = "block" + std::to_string(d) + ".";
    out.insert(out.end(), {p + "conv.weight", p + "conv.bias", p + "norm.weight", p + "norm.bias"});
  }
  out.insert(out.end(), {"classifier.weight", "classifier.bias"});
  return out;
}

inline std::vector<Shape> shapes(const ConvNetConfig& c) {
  std::vector<Shape> out;
  std::size_t in = c.in_channels;
  for (std::size_t d = 0; d < c.depth; ++d) {
    out.push_back({c.width, in, 3, 3});
    out.push_back({c.width});
    out.push_back({c.width});
    out.push_back({c.width});
    in = c.width;
  }
  out.push_back({c.feature_dim(), c.num_classes});
  out.push_back({c.num_classes});
  return out;
}

}  // namespace convnet_layout

template <typename T>
struct ConvNetParams {
  ConvNetConfig config;
  std::vector<Tensor<T>> tensors;

  template <typename U>
  ConvNetParams<U> cast() const {
    ConvNetParams<U> out{config, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  bool all_finite() const {
    for (const auto& t : tensors) {
      if (!t.all_finite()) return false;
    }
    return true;
  }

  friend bool operator==(const ConvNetParams&, const ConvNetParams&) = default;
};

/// He-normal weights (std sqrt(2 / fan_in)); zero biases; unit norm scale.
template <typename T>
ConvNetParams<T> init_convnet(const ConvNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(derive_seed(seed, 0x6e6574));
  ConvNetParams<T> p{config, {}};
  const auto shapes = convnet_layout::shapes(config);
  const std::size_t n_blocks = config.depth;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor<T> t(shapes[i]);
    const bool block_param = i < n_blocks * convnet_layout::kPerBlock;
    const std::size_t role = block_param ? i % convnet_layout::kPerBlock : 4 + (i - n_blocks * 4);
    if (role == 0 || role == 4) {
      const std::size_t fan_in = role == 0 ? shapes[i][1] * 9 : shapes[i][0];
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : t.values()) v = static_cast<T>(std * normal(rng));
    } else if (role == 2) {
      t.fill(T(1));
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

/// Parameters placed on a tape. Frozen (requires_grad = false) when the caller
/// only differentiates with respect to inputs.
template <typename T>
class BoundNet {
 public:
  BoundNet(Tape<T>& tape, const ConvNetParams<T>& params, bool requires_grad)
      : config_(params.config) {
    vars_.reserve(params.tensors.size());
    for (const auto& t : params.tensors) vars_.push_back(tape.leaf(t, requires_grad));
  }

  const ConvNetConfig& config() const { return config_; }
  const std::vector<Var<T>>& vars() const { return vars_; }

  /// Flattened output of the last pooling stage: [B, feature_dim].
  Var<T> embed(const Var<T>& batch) const {
    const Shape& s = batch.shape();
    if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.input_hw ||
        s[3] != config_.input_hw) {
      throw DimensionError("embed expects (B," + std::to_string(config_.in_channels) + "," +
                           std::to_string(config_.input_hw) + "," +
                           std::to_string(config_.input_hw) + "), got " + to_string(s));
    }
    Var<T> x = batch;
    for (std::size_t d = 0; d < config_.depth; ++d) {
      const std::size_t o = d * convnet_layout::kPerBlock;
      x = conv2d(x, vars_[o], vars_[o + 1]);
      x = instance_norm2d(x, vars_[o + 2], vars_[o + 3]);
      x = relu(x);
      x = avg_pool2d(x);
    }
    return flatten(x);
  }

  Var<T> classify(const Var<T>& features) const {
    const std::size_t o = config_.depth * convnet_layout::kPerBlock;
    return linear(features, vars_[o], vars_[o + 1]);
  }

  Var<T> logits(const Var<T>& batch) const { return classify(embed(batch)); }

  std::vector<Tensor<T>> grads() const {
    std::vector<Tensor<T>> out;
    out.reserve(vars_.size());
    for (const auto& v : vars_) out.push_back(v.tape().grad(v));
    return out;
  }

 private:
  ConvNetConfig config_;
  std::vector<Var<T>> vars_;
};

inline constexpr std::size_t kInferenceChunk = 256;

/// Features for a batch of images without keeping a tape around.
template <typename T>
Tensor<T> embed_features(const ConvNetParams<T>& params, const Tensor<T>& images,
                         std::size_t chunk = kInferenceChunk) {
  const std::size_t n = images.dim(0);
  std::vector<Tensor<T>> parts;
  for (std::size_t b = 0; b < n; b += chunk) {
    Tape<T> tape;
    BoundNet<T> net(tape, params, false);
    parts.push_back(net.embed(tape.constant(images.slice0(b, std::min(n, b + chunk)))).value());
  }
  if (parts.empty()) return Tensor<T>({0, params.config.feature_dim()});
  return concat0<T>(parts);
}

template <typename T>
Tensor<T> logits_of(const ConvNetParams<T>& params, const Tensor<T>& images,
                    std::size_t chunk = kInferenceChunk) {
  const std::size_t n = images.dim(0);
  std::vector<Tensor<T>> parts;
  for (std::size_t b = 0; b < n; b += chunk) {
    Tape<T> tape;
    BoundNet<T> net(tape, params, false);
    parts.push_back(net.logits(tape.constant(images.slice0(b, std::min(n, b + chunk)))).value());
  }
  if (parts.empty()) return Tensor<T>({0, params.config.num_classes});
  return concat0<T>(parts);
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& scores) {
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = scores.data() + i * c;
    out[i] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const ConvNetParams<T>& params, const Tensor<T>& images) {
  return argmax_rows(logits_of(params, images));
}

/// One SGD step on mean softmax cross-entropy. Returns the pre-step loss.
template <typename T>
T train_step(ConvNetParams<T>& params, SgdState<T>& state, const Tensor<T>& batch,
             std::span<const int> labels) {
  Tape<T> tape;
  BoundNet<T> net(tape, params, true);
  Var<T> loss = softmax_cross_entropy(net.logits(tape.constant(batch)), labels);
  tape.backward(loss);
  sgd_update(params.tensors, net.grads(), state);
  return loss.value().item();
}

// Checkpoint layout: "IDMCKPT1", u64 LE header length, JSON header
// {"config": ..., "tensors": [{"name", "shape"}...]}, then every tensor as
// little-endian float32 in header order.
template <typename T>
std::vector<unsigned char> encode_checkpoint(const ConvNetParams<T>& params,
                                             const nlohmann::json& extra = {}) {
  nlohmann::json header;
  header["config"] = params.config;
  header["tensors"] = nlohmann::json::array();
  const auto names = convnet_layout::names(params.config);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    header["tensors"].push_back({{"name", names[i]}, {"shape", params.tensors[i].shape()}});
  }
  if (!extra.is_null()) header["extra"] = extra;
  const std::string text = header.dump();
  std::vector<unsigned char> out{'I', 'D', 'M', 'C', 'K', 'P', 'T', '1'};
  io::append_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : params.tensors) io::append_f32_le<T>(out, t.values());
  return out;
}

template <typename T>
ConvNetParams<T> decode_checkpoint(std::span<const unsigned char> bytes,
                                   nlohmann::json* extra = nullptr) {
  if (bytes.size() < 16 || std::string(bytes.begin(), bytes.begin() + 8) != "IDMCKPT1") {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::uint64_t hlen = io::load_u64_le(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw FormatError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  ConvNetParams<T> p;
  try {
    p.config = header.at("config").get<ConvNetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  p.config.validate();
  const auto shapes = convnet_layout::shapes(p.config);
  const auto& table = header.at("tensors");
  if (table.size() != shapes.size()) throw FormatError("checkpoint tensor table size mismatch");
  std::size_t offset = 16 + hlen;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (table[i].at("shape").get<Shape>() != shapes[i]) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " has unexpected shape");
    }
    const std::size_t n = numel(shapes[i]);
    if (offset + 4 * n > bytes.size()) throw FormatError("checkpoint payload truncated");
    Tensor<T> t(shapes[i]);
    io::load_f32_le(bytes.data() + offset, n, t.data());
    offset += 4 * n;
    p.tensors.push_back(std::move(t));
  }
  if (offset != bytes.size()) throw FormatError("checkpoint has trailing bytes");
  if (extra && header.contains("extra")) *extra = header["extra"];
  return p;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ConvNetParams<T>& params,
                     const nlohmann::json& extra = {}) {
  io::write_bytes(path, encode_checkpoint(params, extra));
}

template <typename T>
ConvNetParams<T> load_checkpoint(const std::filesystem::path& path,
                                 nlohmann::json* extra = nullptr) {
  const auto bytes = io::read_bytes(path);
  return decode_checkpoint<T>(bytes, extra);
}

}  // namespace idm
