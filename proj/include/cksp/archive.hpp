#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cksp/preprocessing.hpp"

// Window archive byte layout (all integers little-endian):
//
//   magic        8 bytes  "CKSPWARC"
//   version      u32      1
//   length       u32      timesteps per window (L)
//   channels     u32      3
//   n_species    u32
//   per species: name (str), n_classes (u32), class names (str each)
//   n_windows    u64
//   per window:  species (u32), label (u32), native_length (u32),
//                subject (str), channels*L float64 values in row-major
//                [channel][time] order
//
// where str = u32 byte length followed by UTF-8 bytes.
namespace cksp {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kArchiveMagic{'C', 'K', 'S', 'P', 'W', 'A', 'R', 'C'};
inline constexpr std::uint32_t kArchiveVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  double f64() { return std::bit_cast<double>(get_le(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ArchiveError("window archive is truncated");
  }
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline std::vector<char> encode_archive(const WindowSet& set) {
  std::size_t length = set.windows.empty() ? kDefaultTargetLength : set.windows.front().data.dim(2);
  detail::ByteWriter w;
  w.raw(kArchiveMagic.data(), kArchiveMagic.size());
  w.u32(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(length));
  w.u32(static_cast<std::uint32_t>(kAxes));
  w.u32(static_cast<std::uint32_t>(set.species.size()));
  for (const auto& sp : set.species) {
    w.str(sp.name);
    w.u32(static_cast<std::uint32_t>(sp.classes.size()));
    for (const auto& c : sp.classes) w.str(c);
  }
  w.u64(set.windows.size());
  for (const auto& win : set.windows) {
    if (win.data.shape() != Shape{1, kAxes, length}) {
      throw ArchiveError("window shape " + shape_str(win.data.shape()) + " differs from archive length " +
                         std::to_string(length));
    }
    w.u32(static_cast<std::uint32_t>(win.species_id));
    w.u32(static_cast<std::uint32_t>(win.label));
    w.u32(static_cast<std::uint32_t>(win.native_length));
    w.str(win.subject_id);
    for (double v : win.data.data()) w.f64(v);
  }
  return w.bytes();
}

inline WindowSet decode_archive(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kArchiveMagic) throw ArchiveError("not a window archive (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kArchiveVersion) throw ArchiveError("unsupported archive version " + std::to_string(version));
  const std::size_t length = r.u32();
  const std::size_t channels = r.u32();
  if (channels != kAxes) throw ArchiveError("archive has " + std::to_string(channels) + " channels, expected 3");
  WindowSet set;
  const std::uint32_t n_species = r.u32();
  for (std::uint32_t s = 0; s < n_species; ++s) {
    SpeciesInfo sp;
    sp.name = r.str();
    const std::uint32_t nc = r.u32();
    for (std::uint32_t c = 0; c < nc; ++c) sp.classes.push_back(r.str());
    set.species.push_back(std::move(sp));
  }
  const std::uint64_t n = r.u64();
  set.windows.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    SampleWindow win;
    win.species_id = r.u32();
    win.label = r.u32();
    win.native_length = r.u32();
    win.subject_id = r.str();
    if (win.species_id >= set.species.size() || win.label >= set.species[win.species_id].num_classes()) {
      throw ArchiveError("window " + std::to_string(i) + " has out-of-range species/label");
    }
    std::vector<double> values(channels * length);
    for (double& v : values) v = r.f64();
    win.data = Tensor({1, channels, length}, std::move(values));
    set.windows.push_back(std::move(win));
  }
  if (!r.at_end()) throw ArchiveError("trailing bytes after window archive");
  return set;
}

inline void write_archive(const WindowSet& set, const std::filesystem::path& path) {
  const auto bytes = encode_archive(set);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArchiveError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline WindowSet read_archive(const std::filesystem::path& path) { return decode_archive(detail::read_file_bytes(path)); }

/// Merge archives whose species tables are compatible; species with the
/// same name must have identical class lists.
inline WindowSet merge_window_sets(const std::vector<WindowSet>& parts) {
  WindowSet out;
  for (const WindowSet& part : parts) {
    std::vector<std::size_t> remap(part.species.size());
    for (std::size_t s = 0; s < part.species.size(); ++s) {
      const auto& sp = part.species[s];
      auto it = std::find_if(out.species.begin(), out.species.end(), [&](const SpeciesInfo& o) { return o.name == sp.name; });
      if (it == out.species.end()) {
        remap[s] = out.species.size();
        out.species.push_back(sp);
      } else {
        if (it->classes != sp.classes) throw ArchiveError("species '" + sp.name + "' has conflicting class tables");
        remap[s] = static_cast<std::size_t>(it - out.species.begin());
      }
    }
    for (SampleWindow w : part.windows) {
      w.species_id = remap[w.species_id];
      out.windows.push_back(std::move(w));
    }
  }
  std::stable_sort(out.windows.begin(), out.windows.end(),
                   [](const SampleWindow& a, const SampleWindow& b) { return a.species_id < b.species_id; });
  return out;
}

/// FNV-1a 64-bit content hash, used to fingerprint inputs in run manifests.
inline std::uint64_t fnv1a64(const std::vector<char>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cksp
