#pragma once

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include "stdg/params.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'D', 'G', 'N', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(in.good(), "checkpoint truncated");
  return v;
}

inline void write_string(std::ofstream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  require(in.good(), "checkpoint truncated");
  return s;
}

}  // namespace detail

/// Single-file checkpoint: version tag, configuration snapshot (JSON), and
/// every named parameter as (name, shape, row-major doubles), little-endian.
inline void save_checkpoint(const std::string& path, const nlohmann::json& config,
                            const ParamRegistry& params) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_string(out, config.dump());
  detail::write_pod<std::uint64_t>(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::write_string(out, params.name_at(i));
    const Tensor& t = params.value_at(i);
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape) detail::write_pod<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  require(out.good(), "write failure on " + path);
}

struct RawCheckpoint {
  nlohmann::json config;
  ParamRegistry params;
};

inline RawCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  require(in.good() && std::string(magic, 8) == std::string(kCheckpointMagic, 8),
          path + " is not a checkpoint file");
  const auto version = detail::read_pod<std::uint32_t>(in);
  require(version == kCheckpointVersion,
          "unsupported checkpoint version " + std::to_string(version));
  RawCheckpoint cp;
  cp.config = nlohmann::json::parse(detail::read_string(in));
  const auto count = detail::read_pod<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(in);
    const auto rank = detail::read_pod<std::uint32_t>(in);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r)
      shape.push_back(detail::read_pod<std::uint64_t>(in));
    Tensor t = Tensor::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    require(in.good(), "checkpoint truncated in " + name);
    cp.params.add(name, std::move(t));
  }
  return cp;
}

}  // namespace stdg
