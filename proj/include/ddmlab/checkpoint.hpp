#pragma once

// "DDL1" checkpoint container shared by experts and the router:
//
//   bytes 0..3   magic "DDL1"
//   bytes 4..7   header length L (uint32, little-endian)
//   next L bytes UTF-8 JSON header
//   payload      one little-endian float32 array per tensor, in the order of
//                header["tensors"]; matrices are row-major.
//
// Header keys: kind, layer_dims, m, cluster_id, seed, activation,
// train_config_hash, tensors [{name, shape}].

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "json.hpp"

#include "ddmlab/errors.hpp"
#include "ddmlab/numcore.hpp"

namespace ddmlab {

struct CheckpointMeta {
  std::string kind;        // "expert" or "router"
  int m = 0;               // Fourier time-feature pairs
  int cluster_id = -1;     // -1 for the router
  std::uint64_t seed = 0;
  std::uint64_t train_config_hash = 0;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, double value) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(value)));
}

inline double get_f32(std::string_view in, std::size_t at) {
  return static_cast<double>(std::bit_cast<float>(get_u32(in, at)));
}

}  // namespace detail

inline std::string encode_checkpoint(const DenseNet& net, const CheckpointMeta& meta) {
  net.validate();
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    tensors.push_back({{"name", "W" + std::to_string(l)}, {"shape", {net.weights[l].rows(), net.weights[l].cols()}}});
    tensors.push_back({{"name", "b" + std::to_string(l)}, {"shape", {net.biases[l].size()}}});
  }
  const nlohmann::json header = {{"kind", meta.kind},
                                 {"layer_dims", net.layer_dims},
                                 {"m", meta.m},
                                 {"cluster_id", meta.cluster_id},
                                 {"seed", meta.seed},
                                 {"activation", to_string(net.activation)},
                                 {"train_config_hash", meta.train_config_hash},
                                 {"tensors", tensors}};
  const std::string hjson = header.dump();
  std::string out = "DDL1";
  detail::put_u32(out, static_cast<std::uint32_t>(hjson.size()));
  out += hjson;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Mat& w = net.weights[l];
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) detail::put_f32(out, w(i, j));
    for (Eigen::Index i = 0; i < net.biases[l].size(); ++i) detail::put_f32(out, net.biases[l][i]);
  }
  return out;
}

struct Checkpoint {
  DenseNet net;
  CheckpointMeta meta;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "DDL1") throw FormatError("checkpoint: missing DDL1 magic");
  const std::size_t hlen = detail::get_u32(bytes, 4);
  if (8 + hlen > bytes.size()) throw FormatError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header JSON: ") + e.what());
  }
  Checkpoint ck;
  ck.meta.kind = header.at("kind").get<std::string>();
  ck.meta.m = header.at("m").get<int>();
  ck.meta.cluster_id = header.at("cluster_id").get<int>();
  ck.meta.seed = header.at("seed").get<std::uint64_t>();
  ck.meta.train_config_hash = header.at("train_config_hash").get<std::uint64_t>();
  ck.net = DenseNet::zeros(header.at("layer_dims").get<std::vector<int>>());
  ck.net.activation = activation_from_string(header.at("activation").get<std::string>());

  std::size_t at = 8 + hlen;
  const auto& tensors = header.at("tensors");
  if (tensors.size() != 2 * ck.net.num_layers()) throw FormatError("checkpoint: tensor list does not match layer_dims");
  auto need = [&](std::size_t count) {
    if (at + 4 * count > bytes.size()) throw FormatError("checkpoint: truncated payload");
  };
  for (std::size_t l = 0; l < ck.net.num_layers(); ++l) {
    Mat& w = ck.net.weights[l];
    const auto& shape = tensors[2 * l].at("shape");
    if (shape.size() != 2 || shape[0].get<Eigen::Index>() != w.rows() || shape[1].get<Eigen::Index>() != w.cols())
      throw FormatError("checkpoint: tensor W" + std::to_string(l) + " shape mismatch");
    need(static_cast<std::size_t>(w.size()));
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j, at += 4) w(i, j) = detail::get_f32(bytes, at);
    Vec& b = ck.net.biases[l];
    need(static_cast<std::size_t>(b.size()));
    for (Eigen::Index i = 0; i < b.size(); ++i, at += 4) b[i] = detail::get_f32(bytes, at);
  }
  if (at != bytes.size()) throw FormatError("checkpoint: trailing bytes after payload");
  ck.net.validate();
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const DenseNet& net, const CheckpointMeta& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  const std::string bytes = encode_checkpoint(net, meta);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed to write checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint not found: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Rounds every parameter through float32, matching what a checkpoint stores.
inline DenseNet round_to_f32(DenseNet net) {
  for (auto& w : net.weights) w = w.cast<float>().cast<double>();
  for (auto& b : net.biases) b = b.cast<float>().cast<double>();
  return net;
}

}  // namespace ddmlab
