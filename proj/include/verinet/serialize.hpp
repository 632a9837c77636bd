#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>
#include <nlohmann/json.hpp>

#include "verinet/data.hpp"
#include "verinet/network.hpp"

namespace verinet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need a swap");

using json = nlohmann::ordered_json;

struct SerializationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::uint32_t crc32_of(const std::vector<unsigned char>& data) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

inline void append_doubles(std::vector<unsigned char>& out, const Tensor& t) {
  std::size_t off = out.size();
  out.resize(off + t.size() * sizeof(double));
  std::memcpy(out.data() + off, t.data(), t.size() * sizeof(double));
}

}  // namespace detail

struct CheckpointMeta {
  std::string arch;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string rng_state;
  json training = json::object();  // method, schedule, flags; free-form
  NormalizationRecord normalization;
};

// Manifest JSON + sidecar blob of little-endian float64 values in
// manifest-declared order (per layer: weight then bias, row-major).
inline void save_checkpoint(const std::filesystem::path& manifest_path,
                            const Network& net, const CheckpointMeta& meta) {
  std::vector<unsigned char> blob;
  json layers = json::array();
  for (const Layer& l : net.layers) {
    json jl;
    switch (l.kind) {
      case Layer::Kind::Linear:
        jl["kind"] = "linear";
        jl["weight_shape"] = l.weight.shape();
        jl["bias_shape"] = l.bias.shape();
        detail::append_doubles(blob, l.weight);
        detail::append_doubles(blob, l.bias);
        break;
      case Layer::Kind::Conv2D:
        jl["kind"] = "conv2d";
        jl["weight_shape"] = l.weight.shape();
        jl["bias_shape"] = l.bias.shape();
        jl["stride"] = l.stride;
        jl["padding"] = l.padding;
        detail::append_doubles(blob, l.weight);
        detail::append_doubles(blob, l.bias);
        break;
      case Layer::Kind::Activation:
        jl["kind"] = "activation";
        jl["fn"] = activation_name(l.activation_fn);
        break;
      case Layer::Kind::Flatten:
        jl["kind"] = "flatten";
        break;
    }
    layers.push_back(jl);
  }

  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");

  json manifest;
  manifest["format"] = "verinet-checkpoint";
  manifest["version"] = 1;
  manifest["arch"] = meta.arch.empty() ? architecture_string(net) : meta.arch;
  manifest["input_shape"] = net.input_shape;
  manifest["num_classes"] = net.num_classes;
  manifest["layers"] = layers;
  manifest["blob"] = blob_path.filename().string();
  manifest["blob_dtype"] = "float64-le";
  manifest["blob_crc32"] = detail::crc32_of(blob);
  manifest["normalization"] = {{"mean", meta.normalization.mean},
                               {"std", meta.normalization.std},
                               {"applied", meta.normalization.applied}};
  manifest["seed"] = meta.seed;
  manifest["step"] = meta.step;
  manifest["rng_state"] = meta.rng_state;
  manifest["training"] = meta.training;

  std::ofstream mf(manifest_path);
  if (!mf) throw SerializationError("cannot write " + manifest_path.string());
  mf << manifest.dump(2) << "\n";
  std::ofstream bf(blob_path, std::ios::binary);
  if (!bf) throw SerializationError("cannot write " + blob_path.string());
  bf.write(reinterpret_cast<const char*>(blob.data()),
           static_cast<std::streamsize>(blob.size()));
}

struct Checkpoint {
  Network net;
  CheckpointMeta meta;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw SerializationError("cannot open " + manifest_path.string());
  json manifest = json::parse(mf);
  if (manifest.value("format", "") != "verinet-checkpoint")
    throw SerializationError("not a checkpoint manifest: " +
                             manifest_path.string());

  std::filesystem::path blob_path =
      manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw SerializationError("cannot open " + blob_path.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bf)),
                                  std::istreambuf_iterator<char>());
  if (detail::crc32_of(blob) != manifest.at("blob_crc32").get<std::uint32_t>())
    throw SerializationError("checksum mismatch in " + blob_path.string());

  Checkpoint cp;
  cp.net.input_shape =
      manifest.at("input_shape").get<std::vector<std::size_t>>();
  cp.net.num_classes = manifest.at("num_classes").get<std::size_t>();

  std::size_t off = 0;
  auto take = [&](const std::vector<std::size_t>& shape) {
    std::size_t n = Tensor::count(shape);
    if (off + n * sizeof(double) > blob.size())
      throw SerializationError("blob too short: " + blob_path.string());
    Tensor t(shape);
    std::memcpy(t.data(), blob.data() + off, n * sizeof(double));
    off += n * sizeof(double);
    return t;
  };

  for (const json& jl : manifest.at("layers")) {
    std::string kind = jl.at("kind");
    if (kind == "linear") {
      Tensor w = take(jl.at("weight_shape").get<std::vector<std::size_t>>());
      Tensor b = take(jl.at("bias_shape").get<std::vector<std::size_t>>());
      cp.net.layers.push_back(Layer::linear(std::move(w), std::move(b)));
    } else if (kind == "conv2d") {
      Tensor w = take(jl.at("weight_shape").get<std::vector<std::size_t>>());
      Tensor b = take(jl.at("bias_shape").get<std::vector<std::size_t>>());
      cp.net.layers.push_back(Layer::conv2d(std::move(w), std::move(b),
                                            jl.at("stride").get<std::size_t>(),
                                            jl.at("padding").get<std::size_t>()));
    } else if (kind == "activation") {
      std::string fn = jl.at("fn");
      ActivationFn a = fn == "relu"      ? ActivationFn::ReLU
                       : fn == "sigmoid" ? ActivationFn::Sigmoid
                       : fn == "tanh"    ? ActivationFn::Tanh
                                         : throw SerializationError(
                                               "unknown activation: " + fn);
      cp.net.layers.push_back(Layer::activation(a));
    } else if (kind == "flatten") {
      cp.net.layers.push_back(Layer::flatten());
    } else {
      throw SerializationError("unknown layer kind: " + kind);
    }
  }
  if (off != blob.size())
    throw SerializationError("blob has trailing bytes: " + blob_path.string());
  cp.net.validate();

  cp.meta.arch = manifest.value("arch", "");
  cp.meta.seed = manifest.value("seed", std::uint64_t{0});
  cp.meta.step = manifest.value("step", std::size_t{0});
  cp.meta.rng_state = manifest.value("rng_state", "");
  cp.meta.training = manifest.value("training", json::object());
  if (manifest.contains("normalization")) {
    const json& n = manifest["normalization"];
    cp.meta.normalization.mean = n.value("mean", std::vector<double>{});
    cp.meta.normalization.std = n.value("std", std::vector<double>{});
    cp.meta.normalization.applied = n.value("applied", false);
  }
  return cp;
}

// Append-only JSON-lines writer with stable field order.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path)
      : out_(path) {
    if (!out_) throw SerializationError("cannot write " + path.string());
  }

  void write(const json& obj) { out_ << obj.dump() << "\n"; }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

}  // namespace verinet
