#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include "verinet/tensor.hpp"

namespace verinet {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NormalizationRecord {
  std::vector<double> mean;  // per channel
  std::vector<double> std;
  bool applied = false;
};

struct Dataset {
  Tensor inputs;  // N x ... (images: N x C x H x W, toy: N x 2)
  std::vector<int> labels;
  std::size_t class_count = 0;
  NormalizationRecord normalization;
  std::string provenance;

  std::size_t size() const { return labels.size(); }

  Tensor example(std::size_t i) const {
    std::vector<std::size_t> s(inputs.shape().begin() + 1,
                               inputs.shape().end());
    std::size_t n = Tensor::count(s);
    Tensor out(s);
    for (std::size_t j = 0; j < n; ++j) out[j] = inputs[i * n + j];
    return out;
  }

  std::vector<std::size_t> example_shape() const {
    return {inputs.shape().begin() + 1, inputs.shape().end()};
  }

  Dataset slice(const std::vector<std::size_t>& indices) const {
    auto es = example_shape();
    std::size_t n = Tensor::count(es);
    std::vector<std::size_t> s = {indices.size()};
    s.insert(s.end(), es.begin(), es.end());
    Dataset out;
    out.inputs = Tensor(s);
    out.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::size_t i = indices[k];
      if (i >= size()) throw std::out_of_range("slice index");
      for (std::size_t j = 0; j < n; ++j)
        out.inputs[k * n + j] = inputs[i * n + j];
      out.labels.push_back(labels[i]);
    }
    out.class_count = class_count;
    out.normalization = normalization;
    out.provenance = provenance;
    return out;
  }

  Dataset head(std::size_t n) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(n, size()); ++i) idx.push_back(i);
    return slice(idx);
  }
};

namespace detail {

// Reads a whole file, transparently inflating gzip (1f 8b magic).
inline std::vector<unsigned char> read_file_maybe_gzip(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open file: " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
    std::vector<unsigned char> out;
    out.resize(raw.size() * 4 + 1024);
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
      throw DataError("gzip init failed: " + path);
    zs.next_in = raw.data();
    zs.avail_in = static_cast<uInt>(raw.size());
    std::size_t total = 0;
    int rc = Z_OK;
    do {
      if (total == out.size()) out.resize(out.size() * 2);
      zs.next_out = out.data() + total;
      zs.avail_out = static_cast<uInt>(out.size() - total);
      rc = inflate(&zs, Z_NO_FLUSH);
      if (rc != Z_OK && rc != Z_STREAM_END) {
        inflateEnd(&zs);
        throw DataError("gzip decode failed: " + path);
      }
      total = zs.total_out;
    } while (rc != Z_STREAM_END);
    inflateEnd(&zs);
    out.resize(total);
    return out;
  }
  return raw;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b,
                               std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw DataError("truncated file: " + path);
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

// IDX container: big-endian magic 0x00000803 (images: count, rows, cols,
// unsigned bytes) / 0x00000801 (labels). Pixels scale to [0,1] by /255.
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  auto img = detail::read_file_maybe_gzip(images_path);
  auto lab = detail::read_file_maybe_gzip(labels_path);

  if (detail::read_be32(img, 0, images_path) != 0x00000803u)
    throw DataError("bad magic in image file: " + images_path);
  if (detail::read_be32(lab, 0, labels_path) != 0x00000801u)
    throw DataError("bad magic in label file: " + labels_path);

  std::size_t n = detail::read_be32(img, 4, images_path);
  std::size_t rows = detail::read_be32(img, 8, images_path);
  std::size_t cols = detail::read_be32(img, 12, images_path);
  std::size_t nl = detail::read_be32(lab, 4, labels_path);
  if (n != nl)
    throw DataError("image/label count mismatch: " + std::to_string(n) +
                    " vs " + std::to_string(nl));
  if (img.size() != 16 + n * rows * cols)
    throw DataError("truncated image file: " + images_path);
  if (lab.size() != 8 + n)
    throw DataError("truncated label file: " + labels_path);

  Dataset ds;
  ds.inputs = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i)
    ds.inputs[i] = static_cast<double>(img[16 + i]) / 255.0;
  ds.labels.reserve(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(static_cast<int>(lab[8 + i]));
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.class_count = static_cast<std::size_t>(max_label) + 1;
  if (ds.class_count < 10 && rows == 28 && cols == 28) ds.class_count = 10;
  ds.provenance = "idx:" + images_path;
  return ds;
}

struct ToySpec {
  std::size_t point_count = 13;
  std::size_t positive_count = 5;
  double min_pairwise_linf = 0.08;
  double domain_lo = 0.0;
  double domain_hi = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_retries = 100000;
};

// 2-D point set in [0,1]^2, rejection-sampled until every pair is at least
// min_pairwise_linf apart in l-infinity distance.
inline Dataset generate_toy(const ToySpec& spec) {
  if (spec.positive_count > spec.point_count)
    throw std::invalid_argument("generate_toy: positive_count > point_count");
  Rng rng(spec.seed);
  std::vector<std::pair<double, double>> pts;
  std::size_t tries = 0;
  while (pts.size() < spec.point_count) {
    if (++tries > spec.max_retries)
      throw DataError("generate_toy: retry budget exceeded");
    double x = rng.uniform(spec.domain_lo, spec.domain_hi);
    double y = rng.uniform(spec.domain_lo, spec.domain_hi);
    bool ok = true;
    for (auto& p : pts) {
      double d = std::max(std::fabs(p.first - x), std::fabs(p.second - y));
      if (d < spec.min_pairwise_linf) {
        ok = false;
        break;
      }
    }
    if (ok) pts.emplace_back(x, y);
  }
  Dataset ds;
  ds.inputs = Tensor({spec.point_count, 2});
  for (std::size_t i = 0; i < spec.point_count; ++i) {
    ds.inputs[2 * i] = pts[i].first;
    ds.inputs[2 * i + 1] = pts[i].second;
    ds.labels.push_back(i < spec.positive_count ? 1 : 0);
  }
  ds.class_count = 2;
  ds.provenance = "toy:seed=" + std::to_string(spec.seed);
  return ds;
}

// (x - mean) / std per channel; stats must come from the training split.
inline Dataset normalize(const Dataset& ds, const NormalizationRecord& stats) {
  if (ds.normalization.applied)
    throw DataError("normalize: dataset already normalized");
  std::size_t channels = ds.inputs.rank() == 4 ? ds.inputs.extent(1) : 1;
  if (stats.mean.size() != channels || stats.std.size() != channels)
    throw DataError("normalize: stats channel count mismatch");
  for (double s : stats.std)
    if (s == 0.0) throw DataError("normalize: zero std");
  Dataset out = ds;
  if (ds.inputs.rank() == 4) {
    std::size_t n = ds.inputs.extent(0), hw = ds.inputs.extent(2) * ds.inputs.extent(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t j = 0; j < hw; ++j) {
          std::size_t idx = (i * channels + c) * hw + j;
          out.inputs[idx] = (ds.inputs[idx] - stats.mean[c]) / stats.std[c];
        }
  } else {
    for (std::size_t i = 0; i < ds.inputs.size(); ++i)
      out.inputs[i] = (ds.inputs[i] - stats.mean[0]) / stats.std[0];
  }
  out.normalization = stats;
  out.normalization.applied = true;
  return out;
}

inline Dataset denormalize(const Dataset& ds) {
  if (!ds.normalization.applied)
    throw DataError("denormalize: dataset is not normalized");
  const auto& stats = ds.normalization;
  std::size_t channels = ds.inputs.rank() == 4 ? ds.inputs.extent(1) : 1;
  Dataset out = ds;
  if (ds.inputs.rank() == 4) {
    std::size_t n = ds.inputs.extent(0), hw = ds.inputs.extent(2) * ds.inputs.extent(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t j = 0; j < hw; ++j) {
          std::size_t idx = (i * channels + c) * hw + j;
          out.inputs[idx] = ds.inputs[idx] * stats.std[c] + stats.mean[c];
        }
  } else {
    for (std::size_t i = 0; i < ds.inputs.size(); ++i)
      out.inputs[i] = ds.inputs[i] * stats.std[0] + stats.mean[0];
  }
  out.normalization.applied = false;
  return out;
}

// Channel statistics of a training split, for use with normalize().
inline NormalizationRecord channel_stats(const Dataset& ds) {
  std::size_t channels = ds.inputs.rank() == 4 ? ds.inputs.extent(1) : 1;
  NormalizationRecord rec;
  rec.mean.assign(channels, 0.0);
  rec.std.assign(channels, 0.0);
  std::size_t per = ds.inputs.size() / channels;
  if (ds.inputs.rank() == 4) {
    std::size_t n = ds.inputs.extent(0), hw = ds.inputs.extent(2) * ds.inputs.extent(3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t j = 0; j < hw; ++j)
          rec.mean[c] += ds.inputs[(i * channels + c) * hw + j];
    for (std::size_t c = 0; c < channels; ++c) rec.mean[c] /= double(n * hw);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t j = 0; j < hw; ++j) {
          double d = ds.inputs[(i * channels + c) * hw + j] - rec.mean[c];
          rec.std[c] += d * d;
        }
    for (std::size_t c = 0; c < channels; ++c)
      rec.std[c] = std::sqrt(rec.std[c] / double(n * hw));
  } else {
    for (std::size_t i = 0; i < ds.inputs.size(); ++i)
      rec.mean[0] += ds.inputs[i];
    rec.mean[0] /= double(per);
    for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
      double d = ds.inputs[i] - rec.mean[0];
      rec.std[0] += d * d;
    }
    rec.std[0] = std::sqrt(rec.std[0] / double(per));
  }
  return rec;
}

// epsilon given in pixel units converted to normalized units.
inline double normalized_epsilon(double pixel_epsilon, double channel_std) {
  if (channel_std == 0.0) throw DataError("normalized_epsilon: zero std");
  return pixel_epsilon / channel_std;
}

}  // namespace verinet
