#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "gfml/error.hpp"
#include "gfml/reputation.hpp"

namespace gfml {

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::span<const std::uint8_t> bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32) {
    throw Error(Errc::Io, "SHA-256 computation failed");
  }
  return out;
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xF]);
  }
  return s;
}

// Record payloads. Field order here is the canonical serialization order.

struct ContributionRecord {
  std::uint64_t learner = 0;
  std::uint64_t head = 0;
  double theta = 0.0;
  double u = 0.0;
  double t_comp = 0.0;
  double t_comm = 0.0;
  friend bool operator==(const ContributionRecord&, const ContributionRecord&) = default;
};

struct PartitionCommitRecord {
  std::vector<std::vector<std::uint64_t>> coalitions;
  std::vector<std::uint64_t> heads;
  std::vector<std::uint64_t> parked;
  std::uint64_t switch_count = 0;
  friend bool operator==(const PartitionCommitRecord&, const PartitionCommitRecord&) = default;
};

struct EquilibriumRecord {
  std::uint64_t coalition = 0;
  std::uint64_t head = 0;
  double i_comp = 0.0;
  double u_msp = 0.0;
  std::vector<std::uint64_t> learners;
  std::vector<double> deltas;
  friend bool operator==(const EquilibriumRecord&, const EquilibriumRecord&) = default;
};

struct ReputationUpdateRecord {
  std::uint64_t learner = 0;
  double r_global = 0.0;
  friend bool operator==(const ReputationUpdateRecord&, const ReputationUpdateRecord&) = default;
};

struct RecruitmentRecord {
  double r_th = 0.0;
  double i_comp_min = 0.0;
  double i_comp_max = 0.0;
  double i_rep = 0.0;
  friend bool operator==(const RecruitmentRecord&, const RecruitmentRecord&) = default;
};

/// The variant index is the on-chain kind tag.
using Record = std::variant<ContributionRecord, PartitionCommitRecord, EquilibriumRecord,
                            ReputationUpdateRecord, RecruitmentRecord>;

inline const char* kind_name(const Record& r) {
  static constexpr const char* kNames[] = {"Contribution", "PartitionCommit", "Equilibrium",
                                           "ReputationUpdate", "Recruitment"};
  return kNames[r.index()];
}

struct LedgerBlock {
  std::uint64_t index = 0;
  std::uint64_t round = 0;
  std::vector<std::uint8_t> payload;  // canonical record bytes
  Digest prev_hash{};
  Digest hash{};
  friend bool operator==(const LedgerBlock&, const LedgerBlock&) = default;
};

using Chain = std::vector<LedgerBlock>;

namespace ledger_detail {

// Canonical form: integers as u64 little-endian, reals as the little-endian
// bytes of their IEEE-754 binary64 pattern, sequences as a u64 count then
// the elements, each record as a one-byte kind tag then its fields.

class Writer {
 public:
  std::vector<std::uint8_t> bytes;
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    if (!std::isfinite(v)) throw Error(Errc::InvalidParam, "ledger payload fields must be finite");
    u64(std::bit_cast<std::uint64_t>(v));
  }
  void raw(std::span<const std::uint8_t> s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
  void u64s(const std::vector<std::uint64_t>& v) {
    u64(v.size());
    for (auto x : v) u64(x);
  }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    for (auto x : v) f64(x);
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> s) : s_(s) {}
  bool done() const { return pos_ == s_.size(); }
  std::uint8_t u8() {
    need(1);
    return s_[pos_++];
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | s_[pos_ + static_cast<std::size_t>(i)];
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint64_t count(std::size_t elem_size) {
    const auto n = u64();
    if (n > (s_.size() - pos_) / elem_size) throw Error(Errc::TruncatedFile, "sequence longer than data");
    return n;
  }
  std::vector<std::uint64_t> u64s() {
    std::vector<std::uint64_t> v(count(8));
    for (auto& x : v) x = u64();
    return v;
  }
  std::vector<double> f64s() {
    std::vector<double> v(count(8));
    for (auto& x : v) x = f64();
    return v;
  }
  void bytes(std::span<std::uint8_t> out) {
    need(out.size());
    std::memcpy(out.data(), s_.data() + pos_, out.size());
    pos_ += out.size();
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    std::vector<std::uint8_t> out(n);
    bytes(out);
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw Error(Errc::TruncatedFile, "ledger data cut short");
  }
  std::span<const std::uint8_t> s_;
  std::size_t pos_ = 0;
};

inline void write(Writer& w, const ContributionRecord& r) {
  w.u64(r.learner);
  w.u64(r.head);
  w.f64(r.theta);
  w.f64(r.u);
  w.f64(r.t_comp);
  w.f64(r.t_comm);
}
inline void write(Writer& w, const PartitionCommitRecord& r) {
  w.u64(r.coalitions.size());
  for (const auto& c : r.coalitions) w.u64s(c);
  w.u64s(r.heads);
  w.u64s(r.parked);
  w.u64(r.switch_count);
}
inline void write(Writer& w, const EquilibriumRecord& r) {
  if (r.learners.size() != r.deltas.size()) throw Error(Errc::InvalidParam, "one delta per learner");
  w.u64(r.coalition);
  w.u64(r.head);
  w.f64(r.i_comp);
  w.f64(r.u_msp);
  w.u64s(r.learners);
  w.f64s(r.deltas);
}
inline void write(Writer& w, const ReputationUpdateRecord& r) {
  w.u64(r.learner);
  w.f64(r.r_global);
}
inline void write(Writer& w, const RecruitmentRecord& r) {
  w.f64(r.r_th);
  w.f64(r.i_comp_min);
  w.f64(r.i_comp_max);
  w.f64(r.i_rep);
}

inline Record read_record(Reader& in) {
  switch (in.u8()) {
    case 0: {
      ContributionRecord r;
      r.learner = in.u64();
      r.head = in.u64();
      r.theta = in.f64();
      r.u = in.f64();
      r.t_comp = in.f64();
      r.t_comm = in.f64();
      return r;
    }
    case 1: {
      PartitionCommitRecord r;
      r.coalitions.resize(in.count(8));
      for (auto& c : r.coalitions) c = in.u64s();
      r.heads = in.u64s();
      r.parked = in.u64s();
      r.switch_count = in.u64();
      return r;
    }
    case 2: {
      EquilibriumRecord r;
      r.coalition = in.u64();
      r.head = in.u64();
      r.i_comp = in.f64();
      r.u_msp = in.f64();
      r.learners = in.u64s();
      r.deltas = in.f64s();
      return r;
    }
    case 3: {
      ReputationUpdateRecord r;
      r.learner = in.u64();
      r.r_global = in.f64();
      return r;
    }
    case 4: {
      RecruitmentRecord r;
      r.r_th = in.f64();
      r.i_comp_min = in.f64();
      r.i_comp_max = in.f64();
      r.i_rep = in.f64();
      return r;
    }
    default: throw Error(Errc::BadMagic, "unknown ledger record kind");
  }
}

inline Digest block_digest(std::uint64_t index, std::uint64_t round,
                           std::span<const std::uint8_t> payload, const Digest& prev) {
  Writer w;
  w.u64(index);
  w.u64(round);
  w.raw(payload);
  w.raw(prev);
  return sha256(w.bytes);
}

}  // namespace ledger_detail

inline std::vector<std::uint8_t> serialize_records(std::span<const Record> records) {
  ledger_detail::Writer w;
  w.u64(records.size());
  for (const auto& r : records) {
    w.u8(static_cast<std::uint8_t>(r.index()));
    std::visit([&](const auto& rec) { ledger_detail::write(w, rec); }, r);
  }
  return std::move(w.bytes);
}

inline std::vector<Record> decode_records(std::span<const std::uint8_t> payload) {
  ledger_detail::Reader in(payload);
  std::vector<Record> out(in.count(1));
  for (auto& r : out) r = ledger_detail::read_record(in);
  if (!in.done()) throw Error(Errc::CountMismatch, "trailing bytes after ledger records");
  return out;
}

/// Hash of a block: SHA-256(index ‖ round ‖ payload ‖ prev_hash), with index
/// and round as u64 little-endian.
inline Digest compute_hash(const LedgerBlock& b) {
  return ledger_detail::block_digest(b.index, b.round, b.payload, b.prev_hash);
}

inline const LedgerBlock& append(Chain& chain, std::uint64_t round, std::span<const Record> records) {
  if (!chain.empty() && round < chain.back().round) {
    throw Error(Errc::NonMonotoneRound, "round " + std::to_string(round) + " precedes the chain tip");
  }
  LedgerBlock b;
  b.index = chain.size();
  b.round = round;
  b.payload = serialize_records(records);
  if (!chain.empty()) b.prev_hash = chain.back().hash;
  b.hash = compute_hash(b);
  chain.push_back(std::move(b));
  return chain.back();
}

struct VerifyResult {
  bool ok = true;
  std::optional<std::size_t> first_bad;
};

inline VerifyResult verify(const Chain& chain) {
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const auto& b = chain[i];
    const Digest expected_prev = i == 0 ? Digest{} : chain[i - 1].hash;
    if (b.index != i || b.prev_hash != expected_prev || compute_hash(b) != b.hash) return {false, i};
  }
  return {};
}

/// Contribution history of `learner` read back from the chain, oldest first,
/// optionally restricted to one head.
inline std::vector<ContributionEntry> query_contributions(const Chain& chain, std::size_t learner,
                                                          std::optional<std::size_t> head = {}) {
  std::vector<ContributionEntry> out;
  for (const auto& b : chain) {
    for (const auto& r : decode_records(b.payload)) {
      const auto* c = std::get_if<ContributionRecord>(&r);
      if (!c || c->learner != learner || (head && c->head != *head)) continue;
      out.push_back({learner, static_cast<std::size_t>(c->head), static_cast<int>(b.round), c->theta});
    }
  }
  return out;
}

/// A reputation store rebuilt purely from on-chain contribution records.
inline ReputationStore reputation_from_chain(const Chain& chain, double lambda, double phi) {
  ReputationStore store(lambda, phi);
  for (const auto& b : chain) {
    for (const auto& r : decode_records(b.payload)) {
      if (const auto* c = std::get_if<ContributionRecord>(&r)) {
        store.record(c->learner, c->head, static_cast<int>(b.round), c->theta);
      }
    }
  }
  return store;
}

// Dump format: "GFMLLDG1", u64 block count, then per block index, round,
// u64 payload length, payload, prev_hash (32 bytes), hash (32 bytes).

inline constexpr char kLedgerMagic[8] = {'G', 'F', 'M', 'L', 'L', 'D', 'G', '1'};

inline std::vector<std::uint8_t> dump_bytes(const Chain& chain) {
  ledger_detail::Writer w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kLedgerMagic), 8));
  w.u64(chain.size());
  for (const auto& b : chain) {
    w.u64(b.index);
    w.u64(b.round);
    w.u64(b.payload.size());
    w.raw(b.payload);
    w.raw(b.prev_hash);
    w.raw(b.hash);
  }
  return std::move(w.bytes);
}

inline Chain load_bytes(std::span<const std::uint8_t> bytes) {
  ledger_detail::Reader in(bytes);
  std::array<std::uint8_t, 8> magic{};
  in.bytes(magic);
  if (std::memcmp(magic.data(), kLedgerMagic, 8) != 0) throw Error(Errc::BadMagic, "not a ledger dump");
  Chain chain(in.count(8 + 8 + 8 + 64));
  for (auto& b : chain) {
    b.index = in.u64();
    b.round = in.u64();
    b.payload = in.bytes(in.count(1));
    in.bytes(b.prev_hash);
    in.bytes(b.hash);
  }
  if (!in.done()) throw Error(Errc::CountMismatch, "trailing bytes after the last block");
  return chain;
}

inline void save_chain(const Chain& chain, const std::filesystem::path& path) {
  const auto bytes = dump_bytes(chain);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Chain load_chain(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_bytes(bytes);
}

inline nlohmann::json record_json(const Record& r) {
  nlohmann::json j = {{"kind", kind_name(r)}};
  std::visit(
      [&](const auto& rec) {
        using T = std::decay_t<decltype(rec)>;
        if constexpr (std::is_same_v<T, ContributionRecord>) {
          j.update({{"learner", rec.learner}, {"head", rec.head}, {"theta", rec.theta},
                    {"u", rec.u}, {"t_comp", rec.t_comp}, {"t_comm", rec.t_comm}});
        } else if constexpr (std::is_same_v<T, PartitionCommitRecord>) {
          j.update({{"coalitions", rec.coalitions}, {"heads", rec.heads}, {"parked", rec.parked},
                    {"switch_count", rec.switch_count}});
        } else if constexpr (std::is_same_v<T, EquilibriumRecord>) {
          j.update({{"coalition", rec.coalition}, {"head", rec.head}, {"i_comp", rec.i_comp},
                    {"u_msp", rec.u_msp}, {"learners", rec.learners}, {"deltas", rec.deltas}});
        } else if constexpr (std::is_same_v<T, ReputationUpdateRecord>) {
          j.update({{"learner", rec.learner}, {"r_global", rec.r_global}});
        } else {
          j.update({{"r_th", rec.r_th}, {"i_comp_min", rec.i_comp_min},
                    {"i_comp_max", rec.i_comp_max}, {"i_rep", rec.i_rep}});
        }
      },
      r);
  return j;
}

inline nlohmann::json chain_json(const Chain& chain) {
  auto blocks = nlohmann::json::array();
  for (const auto& b : chain) {
    auto records = nlohmann::json::array();
    for (const auto& r : decode_records(b.payload)) records.push_back(record_json(r));
    blocks.push_back({{"index", b.index}, {"round", b.round}, {"prev_hash", to_hex(b.prev_hash)},
                      {"hash", to_hex(b.hash)}, {"records", records}});
  }
  return blocks;
}

}  // namespace gfml
