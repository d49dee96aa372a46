#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gfml/error.hpp"
#include "gfml/rng.hpp"

namespace gfml {

/// Labeled samples stored row-major. `ids` carries each sample's index in
/// the dataset it was originally loaded or generated as, so shards cut from
/// it can be checked for disjointness.
struct Dataset {
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;
  std::vector<int> labels;
  std::vector<std::size_t> ids;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const double> feature(std::size_t i) const {
    return {features.data() + i * feature_dim, feature_dim};
  }

  void push_back(std::span<const double> x, int label, std::size_t id) {
    if (x.size() != feature_dim) {
      throw Error(Errc::DimMismatch, "sample has " + std::to_string(x.size()) +
                                         " features, dataset expects " +
                                         std::to_string(feature_dim));
    }
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
    ids.push_back(id);
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.feature_dim = feature_dim;
    out.num_classes = num_classes;
    out.features.reserve(rows.size() * feature_dim);
    out.labels.reserve(rows.size());
    out.ids.reserve(rows.size());
    for (auto r : rows) out.push_back(feature(r), labels[r], ids[r]);
    return out;
  }

  /// Throws InvalidParam when any documented invariant is broken.
  void validate() const {
    if (empty()) throw Error(Errc::InvalidParam, "dataset has no samples");
    if (features.size() != size() * feature_dim || ids.size() != size()) {
      throw Error(Errc::InvalidParam, "dataset storage sizes disagree");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw Error(Errc::InvalidParam, "label " + std::to_string(y) + " out of range");
      }
    }
  }
};

struct Shard {
  std::size_t owner_id = 0;
  Dataset train;
  Dataset test;
  std::vector<int> classes_present;
};

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                               const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw Error(Errc::TruncatedFile, path.string() + " ends inside its header");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const char buf[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                       static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(buf, 4);
}

}  // namespace detail

/// Reads an IDX image/label pair (the MNIST-family layout). Pixel bytes are
/// scaled to [0,1]; `num_classes` is one past the largest label seen.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);

  if (detail::read_be32(images, 0, images_path) != kIdxImageMagic) {
    throw Error(Errc::BadMagic, images_path.string() + " is not an IDX image file");
  }
  if (detail::read_be32(labels, 0, labels_path) != kIdxLabelMagic) {
    throw Error(Errc::BadMagic, labels_path.string() + " is not an IDX label file");
  }
  const std::size_t count = detail::read_be32(images, 4, images_path);
  const std::size_t rows = detail::read_be32(images, 8, images_path);
  const std::size_t cols = detail::read_be32(images, 12, images_path);
  const std::size_t label_count = detail::read_be32(labels, 4, labels_path);

  if (count != label_count) {
    throw Error(Errc::CountMismatch, std::to_string(count) + " images but " +
                                         std::to_string(label_count) + " labels");
  }
  const std::size_t dim = rows * cols;
  if (images.size() < 16 + count * dim) {
    throw Error(Errc::TruncatedFile, images_path.string() + " holds fewer pixels than its header");
  }
  if (labels.size() < 8 + count) {
    throw Error(Errc::TruncatedFile, labels_path.string() + " holds fewer labels than its header");
  }

  Dataset ds;
  ds.feature_dim = dim;
  ds.features.resize(count * dim);
  ds.labels.resize(count);
  ds.ids.resize(count);
  for (std::size_t i = 0; i < count * dim; ++i) ds.features[i] = images[16 + i] / 255.0;
  int max_label = -1;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = labels[8 + i];
    ds.ids[i] = i;
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  return ds;
}

/// Writes `ds` as an IDX pair. Features are mapped back to bytes with
/// round(255·x), so a dataset read by load_idx survives a write/read cycle.
inline void write_idx(const Dataset& ds, std::size_t rows, std::size_t cols,
                      const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  if (rows * cols != ds.feature_dim) {
    throw Error(Errc::DimMismatch, "rows*cols does not match feature_dim");
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lbl(labels_path, std::ios::binary);
  if (!img || !lbl) throw Error(Errc::Io, "cannot open IDX output files");

  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(rows));
  detail::write_be32(img, static_cast<std::uint32_t>(cols));
  for (double x : ds.features) {
    const double clamped = std::clamp(x, 0.0, 1.0);
    img.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(clamped * 255.0))));
  }

  detail::write_be32(lbl, kIdxLabelMagic);
  detail::write_be32(lbl, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lbl.put(static_cast<char>(static_cast<std::uint8_t>(y)));
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Isotropic Gaussian blobs. Class centers are drawn uniformly from
/// [-1,1]^feature_dim by a stream derived from `seed`; samples are then drawn
/// in class order from a second stream.
inline Dataset synth_blobs(std::size_t num_classes, std::size_t per_class, std::size_t feature_dim,
                           double sigma, std::uint64_t seed) {
  if (num_classes < 2 || per_class < 1 || feature_dim < 1 || !(sigma > 0.0)) {
    throw Error(Errc::InvalidParam, "synth_blobs needs num_classes>=2, per_class>=1, "
                                    "feature_dim>=1 and sigma>0");
  }
  Rng center_rng = make_rng(seed, 0xC3);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<double> centers(num_classes * feature_dim);
  for (auto& c : centers) c = unit(center_rng);

  Rng sample_rng = make_rng(seed, 0x5A);
  std::normal_distribution<double> noise(0.0, sigma);

  Dataset ds;
  ds.feature_dim = feature_dim;
  ds.num_classes = num_classes;
  ds.features.reserve(num_classes * per_class * feature_dim);
  std::vector<double> x(feature_dim);
  std::size_t id = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      for (std::size_t d = 0; d < feature_dim; ++d) {
        x[d] = centers[c * feature_dim + d] + noise(sample_rng);
      }
      ds.push_back(x, static_cast<int>(c), id++);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Non-IID partitioning
// ---------------------------------------------------------------------------

struct PartitionOptions {
  double dirichlet_alpha = 0.5;
  double test_fraction = 0.1;
};

/// Number of test samples for a shard of n samples: floor(n·fraction), at
/// least one as long as one sample is left for training.
inline std::size_t test_split_size(std::size_t n, double test_fraction) {
  if (n < 2) return 0;
  const auto t = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction));
  return std::clamp<std::size_t>(t, 1, n - 1);
}

/// Quantity-based label skew: every learner draws `classes_per_device`
/// distinct classes, then each class pool is divided among the learners that
/// drew it with one guaranteed sample each plus a Dirichlet-weighted share of
/// the remainder. Leftovers from flooring are dropped.
inline std::vector<Shard> partition_quantity_label(const Dataset& ds, std::size_t num_learners,
                                                   std::size_t classes_per_device,
                                                   std::uint64_t seed,
                                                   const PartitionOptions& opts = {}) {
  if (num_learners < 1) throw Error(Errc::InvalidParam, "need at least one learner");
  if (classes_per_device < 1 || classes_per_device > ds.num_classes) {
    throw Error(Errc::InvalidParam, "classes_per_device must be in [1, num_classes]");
  }
  if (!(opts.dirichlet_alpha > 0.0)) throw Error(Errc::InvalidParam, "dirichlet_alpha must be > 0");

  Rng rng = make_rng(seed, 0x9A);

  std::vector<std::vector<int>> chosen(num_learners);
  std::vector<int> classes(ds.num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  for (auto& c : chosen) {
    std::shuffle(classes.begin(), classes.end(), rng);
    c.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(classes_per_device));
    std::sort(c.begin(), c.end());
  }

  std::vector<std::vector<std::size_t>> pools(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) pools[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  std::vector<std::vector<std::size_t>> rows(num_learners);
  std::gamma_distribution<double> gamma(opts.dirichlet_alpha, 1.0);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    std::vector<std::size_t> demanders;
    for (std::size_t l = 0; l < num_learners; ++l) {
      if (std::binary_search(chosen[l].begin(), chosen[l].end(), static_cast<int>(c))) {
        demanders.push_back(l);
      }
    }
    if (demanders.empty()) continue;
    auto& pool = pools[c];
    if (demanders.size() > pool.size()) {
      throw Error(Errc::Infeasible, "class " + std::to_string(c) + " has " +
                                        std::to_string(pool.size()) + " samples for " +
                                        std::to_string(demanders.size()) + " learners");
    }
    std::shuffle(pool.begin(), pool.end(), rng);

    std::vector<double> w(demanders.size());
    double total = 0.0;
    for (auto& wi : w) total += (wi = gamma(rng));
    if (!(total > 0.0)) {
      std::fill(w.begin(), w.end(), 1.0);
      total = static_cast<double>(w.size());
    }
    const std::size_t remainder = pool.size() - demanders.size();
    std::size_t cursor = 0;
    for (std::size_t k = 0; k < demanders.size(); ++k) {
      const auto extra = static_cast<std::size_t>(std::floor(w[k] / total * static_cast<double>(remainder)));
      const std::size_t take = 1 + extra;
      auto& dst = rows[demanders[k]];
      dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(cursor),
                 pool.begin() + static_cast<std::ptrdiff_t>(cursor + take));
      cursor += take;
    }
  }

  std::vector<Shard> shards(num_learners);
  for (std::size_t l = 0; l < num_learners; ++l) {
    auto& r = rows[l];
    std::shuffle(r.begin(), r.end(), rng);
    const std::size_t n_test = test_split_size(r.size(), opts.test_fraction);
    const std::span<const std::size_t> all(r);
    shards[l].owner_id = l;
    shards[l].test = ds.subset(all.first(n_test));
    shards[l].train = ds.subset(all.subspan(n_test));
    shards[l].classes_present = chosen[l];
  }
  return shards;
}

}  // namespace gfml
