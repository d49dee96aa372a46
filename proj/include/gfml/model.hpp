#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gfml/error.hpp"
#include "gfml/rng.hpp"

namespace gfml {

/// Layer sizes of the three fully connected layers: input -> hidden1 ->
/// hidden2 -> classes. hidden2 is the embedding layer.
struct ModelShape {
  std::size_t input = 0;
  std::size_t hidden1 = 80;
  std::size_t hidden2 = 60;
  std::size_t classes = 10;

  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return w1_offset() + hidden1 * input; }
  std::size_t w2_offset() const { return b1_offset() + hidden1; }
  std::size_t b2_offset() const { return w2_offset() + hidden2 * hidden1; }
  std::size_t w3_offset() const { return b2_offset() + hidden2; }
  std::size_t b3_offset() const { return w3_offset() + classes * hidden2; }
  std::size_t param_count() const { return b3_offset() + classes; }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// All weights and biases of the MLP in one flat vector. Weight matrices are
/// stored column-major (Eigen default) as (out x in).
class ModelParams {
 public:
  using ConstMatrixMap = Eigen::Map<const Eigen::MatrixXd>;
  using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

  ModelParams() = default;
  explicit ModelParams(const ModelShape& shape)
      : shape_(shape), flat_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(shape.param_count()))) {}
  ModelParams(const ModelShape& shape, Eigen::VectorXd flat) : shape_(shape), flat_(std::move(flat)) {
    if (static_cast<std::size_t>(flat_.size()) != shape_.param_count()) {
      throw Error(Errc::ShapeMismatch, "flat vector does not match model shape");
    }
  }

  /// Per-layer uniform init in ±sqrt(6/(fan_in+fan_out)); biases start at 0.
  static ModelParams glorot(const ModelShape& shape, Rng& rng) {
    ModelParams p(shape);
    auto fill = [&](std::size_t offset, std::size_t fan_out, std::size_t fan_in) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (std::size_t i = 0; i < fan_out * fan_in; ++i) {
        p.flat_[static_cast<Eigen::Index>(offset + i)] = dist(rng);
      }
    };
    fill(shape.w1_offset(), shape.hidden1, shape.input);
    fill(shape.w2_offset(), shape.hidden2, shape.hidden1);
    fill(shape.w3_offset(), shape.classes, shape.hidden2);
    return p;
  }

  const ModelShape& shape() const noexcept { return shape_; }
  const Eigen::VectorXd& flat() const noexcept { return flat_; }
  Eigen::VectorXd& flat() noexcept { return flat_; }

  ConstMatrixMap w1() const { return matrix(shape_.w1_offset(), shape_.hidden1, shape_.input); }
  ConstVectorMap b1() const { return vector(shape_.b1_offset(), shape_.hidden1); }
  ConstMatrixMap w2() const { return matrix(shape_.w2_offset(), shape_.hidden2, shape_.hidden1); }
  ConstVectorMap b2() const { return vector(shape_.b2_offset(), shape_.hidden2); }
  ConstMatrixMap w3() const { return matrix(shape_.w3_offset(), shape_.classes, shape_.hidden2); }
  ConstVectorMap b3() const { return vector(shape_.b3_offset(), shape_.classes); }

  bool finite() const { return flat_.allFinite(); }

 private:
  ConstMatrixMap matrix(std::size_t offset, std::size_t rows, std::size_t cols) const {
    return ConstMatrixMap(flat_.data() + offset, static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
  }
  ConstVectorMap vector(std::size_t offset, std::size_t n) const {
    return ConstVectorMap(flat_.data() + offset, static_cast<Eigen::Index>(n));
  }

  ModelShape shape_;
  Eigen::VectorXd flat_;
};

// Checkpoint format: u64 LE header length, UTF-8 JSON header describing the
// shape, then param_count little-endian IEEE-754 doubles.

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf, 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw Error(Errc::TruncatedFile, "short read");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

}  // namespace detail

inline void save_params(const ModelParams& params, const std::filesystem::path& path) {
  const auto& s = params.shape();
  const nlohmann::json header = {{"format", "gfml-params"}, {"dtype", "f64le"},
                                 {"input", s.input},        {"hidden1", s.hidden1},
                                 {"hidden2", s.hidden2},    {"classes", s.classes},
                                 {"count", s.param_count()}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  detail::put_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double v : params.flat()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    detail::put_u64_le(out, bits);
  }
}

inline ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  const auto header_len = detail::get_u64_le(in);
  if (header_len > (1u << 20)) throw Error(Errc::BadMagic, "implausible header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw Error(Errc::TruncatedFile, "checkpoint header cut short");
  }
  const auto header = nlohmann::json::parse(text, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "gfml-params") {
    throw Error(Errc::BadMagic, path.string() + " is not a parameter checkpoint");
  }
  ModelShape shape{header.at("input").get<std::size_t>(), header.at("hidden1").get<std::size_t>(),
                   header.at("hidden2").get<std::size_t>(), header.at("classes").get<std::size_t>()};
  if (header.at("count").get<std::size_t>() != shape.param_count()) {
    throw Error(Errc::ShapeMismatch, "checkpoint count disagrees with its shape");
  }
  Eigen::VectorXd flat(static_cast<Eigen::Index>(shape.param_count()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) {
    const auto bits = detail::get_u64_le(in);
    std::memcpy(&flat[i], &bits, sizeof bits);
  }
  return ModelParams(shape, std::move(flat));
}

}  // namespace gfml
