#pragma once

// Parameter checkpoints.
//
// Layout (see docs/checkpoint_format.md):
//   line 1: "d3gzsl-checkpoint 1"
//   line 2: single-line JSON {"tensors":[{"name":..,"shape":[..]}, ...]}
//   rest:   float64 values, little-endian, tensors concatenated in header
//           order, each row-major.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "d3gzsl/error.hpp"
#include "d3gzsl/nn.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

inline constexpr const char* kCheckpointMagic = "d3gzsl-checkpoint 1";

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  nlohmann::json header;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << kCheckpointMagic << '\n' << header.dump() << '\n';
  for (const auto& t : tensors)
    for (double v : t.tensor.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
      out.write(bytes, 8);
    }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw ParseError(path, 1, "bad checkpoint magic");
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path, 2, std::string("bad checkpoint header: ") + e.what());
  }
  std::vector<NamedTensor> out;
  for (const auto& rec : header.at("tensors")) {
    Shape shape = rec.at("shape").get<Shape>();
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) {
      unsigned char bytes[8];
      if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw ParseError(path, 3, "truncated tensor data");
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
      v = std::bit_cast<double>(bits);
    }
    out.push_back({rec.at("name").get<std::string>(), Tensor::from_data(std::move(shape), std::move(data))});
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError(path, 3, "trailing bytes after tensor data");
  return out;
}

// Copies checkpoint values into the parameters of `net`, matched by name.
inline void load_parameters(Mlp& net, const std::vector<NamedTensor>& tensors) {
  for (auto& p : net.named_parameters()) {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == p.name; });
    if (it == tensors.end()) throw ValidationError("checkpoint has no tensor '" + p.name + "'");
    if (it->tensor.shape() != p.tensor.shape())
      throw ShapeError("checkpoint tensor '" + p.name + "' has shape " + shape_str(it->tensor.shape()) + ", expected " +
                       shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), dst.begin());
  }
}

}  // namespace d3gzsl
