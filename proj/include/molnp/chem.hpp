#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace molnp {

enum class BondOrder : std::uint8_t { Single = 1, Double = 2, Triple = 3, Aromatic = 4 };

struct Atom {
  std::string element;  // capitalized symbol, e.g. "C", "Cl"
  bool aromatic = false;
  int charge = 0;
  int hydrogens = 0;  // implicit (organic subset) or explicit (bracket) H count

  bool operator==(const Atom&) const = default;
};

struct Bond {
  std::size_t begin = 0;
  std::size_t end = 0;
  BondOrder order = BondOrder::Single;

  bool operator==(const Bond&) const = default;
};

struct MolGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;

  std::size_t degree(std::size_t atom) const;
};

/// Parses the supported SMILES subset: organic-subset and bracket atoms
/// (charge, H count), branches, ring closures (digits and %nn), bond symbols
/// `- = # :`, aromatic lowercase atoms and `.` separators. Stereo, isotopes
/// and atom classes are rejected with UnknownAtomToken.
MolGraph parse_smiles(std::string_view text);

/// Fixed-length binary fingerprint packed into 64-bit words.
class Fingerprint {
 public:
  Fingerprint() = default;
  Fingerprint(std::size_t nbits, int radius = 0);

  std::size_t nbits() const noexcept { return nbits_; }
  int radius() const noexcept { return radius_; }

  bool test(std::size_t bit) const { return (words_[bit >> 6] >> (bit & 63)) & 1U; }
  void set(std::size_t bit) { words_[bit >> 6] |= std::uint64_t{1} << (bit & 63); }
  void flip(std::size_t bit) { words_[bit >> 6] ^= std::uint64_t{1} << (bit & 63); }
  std::size_t popcount() const;

  const std::vector<std::uint64_t>& words() const noexcept { return words_; }

  /// 0/1 dense column, the representation consumed by the networks.
  Eigen::VectorXd to_dense() const;

  /// Hex string of nbits/4 characters; character k holds bits 4k..4k+3 with
  /// bit 4k as the most significant bit of the nibble.
  std::string to_hex() const;
  static Fingerprint from_hex(std::string_view hex, int radius = 0);

  bool operator==(const Fingerprint& other) const {
    return nbits_ == other.nbits_ && words_ == other.words_;
  }

 private:
  std::size_t nbits_ = 0;
  int radius_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Identifier recorded in fingerprint cache headers for the hash below.
inline constexpr std::string_view kFingerprintHashId = "splitmix64-v1";

/// Circular (ECFP-style) fingerprint. radius >= 0; nbits >= 8 and a power of two.
Fingerprint ecfp_fingerprint(const MolGraph& mol, int radius = 3, std::size_t nbits = 1024);

/// |a & b| / |a | b|; 1.0 when both are all-zero.
double tanimoto(const Fingerprint& a, const Fingerprint& b);

std::size_t hamming_distance(const Fingerprint& a, const Fingerprint& b);

/// Stacks fingerprints as columns of a 0/1 matrix (nbits x n).
Eigen::MatrixXd fingerprint_matrix(const std::vector<Fingerprint>& fps);

struct FingerprintCacheRecord {
  std::string molecule_id;
  Fingerprint fingerprint;
};

struct FingerprintCache {
  int radius = 3;
  std::size_t nbits = 1024;
  std::string hash_id{kFingerprintHashId};
  std::vector<FingerprintCacheRecord> records;
};

/// Writes `#ecfp radius=<r> nbits=<n> hash=<id>` then `<id>\t<hex>` per record.
void write_fingerprint_cache(const std::filesystem::path& path, const FingerprintCache& cache);

/// Throws Error(CacheInvalid) naming the file on any header or record defect.
FingerprintCache read_fingerprint_cache(const std::filesystem::path& path);

}  // namespace molnp
