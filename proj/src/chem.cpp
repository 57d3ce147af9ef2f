#include "molnp/chem.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <utility>

#include "molnp/errors.hpp"
#include "molnp/random.hpp"

namespace molnp {
namespace {

constexpr std::array<std::string_view, 118> kElements = {
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",
    "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh",
    "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re",
    "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db",
    "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

int atomic_number(std::string_view symbol) {
  const auto it = std::find(kElements.begin(), kElements.end(), symbol);
  return it == kElements.end() ? 0 : static_cast<int>(it - kElements.begin()) + 1;
}

bool is_aromatic_symbol(std::string_view s) {
  return s == "b" || s == "c" || s == "n" || s == "o" || s == "p" || s == "s" || s == "se" ||
         s == "as";
}

std::string capitalize(std::string_view s) {
  std::string out(s);
  out[0] = static_cast<char>(out[0] - 'a' + 'A');
  return out;
}

const std::vector<int>* default_valences(std::string_view element) {
  static const std::map<std::string, std::vector<int>, std::less<>> table = {
      {"B", {3}},    {"C", {4}},  {"N", {3, 5}}, {"O", {2}},  {"P", {3, 5}},
      {"S", {2, 4, 6}}, {"F", {1}}, {"Cl", {1}},   {"Br", {1}}, {"I", {1}}};
  const auto it = table.find(element);
  return it == table.end() ? nullptr : &it->second;
}

class SmilesParser {
 public:
  explicit SmilesParser(std::string_view text) : text_(text) {}

  MolGraph run() {
    if (text_.empty()) throw ParseError(ErrorKind::EmptyInput, 0, "empty SMILES");
    while (pos_ < text_.size()) step();
    if (pending_) {
      throw ParseError(ErrorKind::UnknownAtomToken, pending_offset_, "bond symbol without a following atom");
    }
    if (!branches_.empty()) {
      throw ParseError(ErrorKind::UnbalancedParenthesis, branches_.back().second, "unclosed branch");
    }
    if (!rings_.empty()) {
      throw ParseError(ErrorKind::UnclosedRingBond, rings_.begin()->second.offset,
                       "ring bond " + std::to_string(rings_.begin()->first) + " never closed");
    }
    assign_implicit_hydrogens();
    return std::move(mol_);
  }

 private:
  struct OpenRing {
    std::size_t atom;
    std::optional<BondOrder> order;
    std::size_t offset;
  };

  void step() {
    const char ch = text_[pos_];
    switch (ch) {
      case '(':
        if (!prev_) throw ParseError(ErrorKind::UnbalancedParenthesis, pos_, "branch without a preceding atom");
        branches_.emplace_back(*prev_, pos_);
        ++pos_;
        return;
      case ')':
        if (branches_.empty()) throw ParseError(ErrorKind::UnbalancedParenthesis, pos_, "unmatched ')'");
        if (pending_) throw ParseError(ErrorKind::UnknownAtomToken, pending_offset_, "dangling bond symbol");
        prev_ = branches_.back().first;
        branches_.pop_back();
        ++pos_;
        return;
      case '-': set_pending(BondOrder::Single); return;
      case '=': set_pending(BondOrder::Double); return;
      case '#': set_pending(BondOrder::Triple); return;
      case ':': set_pending(BondOrder::Aromatic); return;
      case '.':
        if (pending_) throw ParseError(ErrorKind::UnknownAtomToken, pos_, "'.' after bond symbol");
        prev_.reset();
        ++pos_;
        return;
      case '[': bracket_atom(); return;
      case '%': {
        const std::size_t start = pos_;
        if (pos_ + 2 >= text_.size() || !is_digit(text_[pos_ + 1]) || !is_digit(text_[pos_ + 2])) {
          throw ParseError(ErrorKind::UnknownAtomToken, start, "malformed %nn ring number");
        }
        const int number = (text_[pos_ + 1] - '0') * 10 + (text_[pos_ + 2] - '0');
        pos_ += 3;
        ring_bond(number, start);
        return;
      }
      default: break;
    }
    if (is_digit(ch)) {
      const std::size_t start = pos_++;
      ring_bond(ch - '0', start);
      return;
    }
    organic_atom();
  }

  static bool is_digit(char c) { return c >= '0' && c <= '9'; }
  static bool is_lower(char c) { return c >= 'a' && c <= 'z'; }
  static bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }

  void set_pending(BondOrder order) {
    if (pending_ || !prev_) throw ParseError(ErrorKind::UnknownAtomToken, pos_, "unexpected bond symbol");
    pending_ = order;
    pending_offset_ = pos_++;
  }

  BondOrder default_order(std::size_t a, std::size_t b) const {
    return mol_.atoms[a].aromatic && mol_.atoms[b].aromatic ? BondOrder::Aromatic : BondOrder::Single;
  }

  void add_bond(std::size_t a, std::size_t b, BondOrder order, std::size_t offset) {
    if (a == b) throw ParseError(ErrorKind::InvalidBond, offset, "atom bonded to itself");
    for (const Bond& bond : mol_.bonds) {
      if ((bond.begin == a && bond.end == b) || (bond.begin == b && bond.end == a)) {
        throw ParseError(ErrorKind::InvalidBond, offset, "duplicate bond between the same atoms");
      }
    }
    mol_.bonds.push_back({a, b, order});
  }

  void ring_bond(int number, std::size_t offset) {
    if (!prev_) throw ParseError(ErrorKind::UnknownAtomToken, offset, "ring bond without a preceding atom");
    const auto it = rings_.find(number);
    if (it == rings_.end()) {
      rings_.emplace(number, OpenRing{*prev_, pending_, offset});
      pending_.reset();
      return;
    }
    const OpenRing open = it->second;
    rings_.erase(it);
    BondOrder order = default_order(open.atom, *prev_);
    if (open.order && pending_ && *open.order != *pending_) {
      throw ParseError(ErrorKind::InvalidBond, offset, "conflicting ring bond orders");
    }
    if (open.order) order = *open.order;
    if (pending_) order = *pending_;
    pending_.reset();
    add_bond(open.atom, *prev_, order, offset);
  }

  void push_atom(Atom atom, bool implicit_h, std::size_t offset) {
    mol_.atoms.push_back(std::move(atom));
    implicit_h_.push_back(implicit_h);
    const std::size_t index = mol_.atoms.size() - 1;
    if (prev_) {
      add_bond(*prev_, index, pending_.value_or(default_order(*prev_, index)), offset);
    }
    pending_.reset();
    prev_ = index;
  }

  void organic_atom() {
    const std::size_t start = pos_;
    const std::string_view rest = text_.substr(pos_);
    for (std::string_view two : {"Cl", "Br"}) {
      if (rest.starts_with(two)) {
        pos_ += 2;
        push_atom(Atom{std::string(two), false, 0, 0}, true, start);
        return;
      }
    }
    const char ch = rest[0];
    if (ch == 'B' || ch == 'C' || ch == 'N' || ch == 'O' || ch == 'P' || ch == 'S' || ch == 'F' ||
        ch == 'I') {
      ++pos_;
      push_atom(Atom{std::string(1, ch), false, 0, 0}, true, start);
      return;
    }
    if (ch == 'b' || ch == 'c' || ch == 'n' || ch == 'o' || ch == 'p' || ch == 's') {
      ++pos_;
      push_atom(Atom{capitalize(std::string_view(&ch, 1)), true, 0, 0}, true, start);
      return;
    }
    throw ParseError(ErrorKind::UnknownAtomToken, start, std::string("unknown token '") + ch + "'");
  }

  void bracket_atom() {
    const std::size_t start = pos_++;
    auto fail = [&](const std::string& what) {
      throw ParseError(ErrorKind::UnknownAtomToken, std::min(pos_, text_.size()), what);
    };
    if (pos_ >= text_.size()) fail("unterminated bracket atom");
    if (is_digit(text_[pos_])) fail("isotopes are not supported");

    Atom atom;
    const std::string_view rest = text_.substr(pos_);
    if (is_upper(rest[0])) {
      if (rest.size() > 1 && is_lower(rest[1]) && atomic_number(rest.substr(0, 2)) != 0) {
        atom.element = std::string(rest.substr(0, 2));
        pos_ += 2;
      } else if (atomic_number(rest.substr(0, 1)) != 0) {
        atom.element = std::string(rest.substr(0, 1));
        pos_ += 1;
      } else {
        fail("unknown element");
      }
    } else if (rest.size() > 1 && is_aromatic_symbol(rest.substr(0, 2))) {
      atom.element = capitalize(rest.substr(0, 2));
      atom.aromatic = true;
      pos_ += 2;
    } else if (is_aromatic_symbol(rest.substr(0, 1))) {
      atom.element = capitalize(rest.substr(0, 1));
      atom.aromatic = true;
      pos_ += 1;
    } else {
      fail("unknown element");
    }

    if (pos_ < text_.size() && text_[pos_] == '@') fail("stereochemistry is not supported");
    if (pos_ < text_.size() && text_[pos_] == 'H') {
      ++pos_;
      atom.hydrogens = 1;
      if (pos_ < text_.size() && is_digit(text_[pos_])) atom.hydrogens = text_[pos_++] - '0';
    }
    if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-')) {
      const char sign = text_[pos_++];
      int magnitude = 1;
      if (pos_ < text_.size() && is_digit(text_[pos_])) {
        magnitude = text_[pos_++] - '0';
      } else {
        while (pos_ < text_.size() && text_[pos_] == sign) {
          ++magnitude;
          ++pos_;
        }
      }
      atom.charge = sign == '+' ? magnitude : -magnitude;
    }
    if (pos_ >= text_.size() || text_[pos_] != ']') fail("expected ']'");
    ++pos_;
    push_atom(std::move(atom), false, start);
  }

  void assign_implicit_hydrogens() {
    std::vector<int> used(mol_.atoms.size(), 0);
    for (const Bond& bond : mol_.bonds) {
      const int order = bond.order == BondOrder::Aromatic ? 1 : static_cast<int>(bond.order);
      used[bond.begin] += order;
      used[bond.end] += order;
    }
    for (std::size_t i = 0; i < mol_.atoms.size(); ++i) {
      if (!implicit_h_[i]) continue;
      Atom& atom = mol_.atoms[i];
      const int valence = used[i] + (atom.aromatic ? 1 : 0);
      atom.hydrogens = 0;
      if (const auto* allowed = default_valences(atom.element)) {
        for (int v : *allowed) {
          if (v >= valence) {
            atom.hydrogens = v - valence;
            break;
          }
        }
      }
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  MolGraph mol_;
  std::vector<bool> implicit_h_;
  std::optional<std::size_t> prev_;
  std::optional<BondOrder> pending_;
  std::size_t pending_offset_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> branches_;  // (atom, offset of '(')
  std::map<int, OpenRing> rings_;
};

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::uint64_t fold(std::uint64_t h, std::uint64_t value) { return mix64(h ^ value); }

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

std::size_t MolGraph::degree(std::size_t atom) const {
  return static_cast<std::size_t>(std::count_if(bonds.begin(), bonds.end(), [&](const Bond& b) {
    return b.begin == atom || b.end == atom;
  }));
}

MolGraph parse_smiles(std::string_view text) { return SmilesParser(text).run(); }

Fingerprint::Fingerprint(std::size_t nbits, int radius)
    : nbits_(nbits), radius_(radius), words_((nbits + 63) / 64, 0) {}

std::size_t Fingerprint::popcount() const {
  std::size_t total = 0;
  for (std::uint64_t w : words_) total += static_cast<std::size_t>(std::popcount(w));
  return total;
}

Eigen::VectorXd Fingerprint::to_dense() const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nbits_));
  for (std::size_t i = 0; i < nbits_; ++i) {
    if (test(i)) out[static_cast<Eigen::Index>(i)] = 1.0;
  }
  return out;
}

std::string Fingerprint::to_hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out((nbits_ + 3) / 4, '0');
  for (std::size_t k = 0; k < out.size(); ++k) {
    int nibble = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      const std::size_t bit = 4 * k + j;
      if (bit < nbits_ && test(bit)) nibble |= 8 >> j;
    }
    out[k] = kDigits[nibble];
  }
  return out;
}

Fingerprint Fingerprint::from_hex(std::string_view hex, int radius) {
  Fingerprint fp(hex.size() * 4, radius);
  for (std::size_t k = 0; k < hex.size(); ++k) {
    const int nibble = hex_value(hex[k]);
    if (nibble < 0) {
      throw Error(ErrorKind::BadNumeric, "invalid hex digit in fingerprint at position " + std::to_string(k));
    }
    for (std::size_t j = 0; j < 4; ++j) {
      if (nibble & (8 >> j)) fp.set(4 * k + j);
    }
  }
  return fp;
}

Fingerprint ecfp_fingerprint(const MolGraph& mol, int radius, std::size_t nbits) {
  if (radius < 0) throw Error(ErrorKind::DimensionMismatch, "radius must be non-negative");
  if (nbits < 8 || !std::has_single_bit(nbits)) {
    throw Error(ErrorKind::DimensionMismatch, "nbits must be a power of two >= 8");
  }
  const std::size_t n = mol.atoms.size();
  std::vector<std::vector<std::pair<std::uint64_t, std::size_t>>> neighbors(n);
  for (const Bond& bond : mol.bonds) {
    const auto code = static_cast<std::uint64_t>(bond.order);
    neighbors[bond.begin].emplace_back(code, bond.end);
    neighbors[bond.end].emplace_back(code, bond.begin);
  }

  Fingerprint fp(nbits, radius);
  const std::uint64_t mask = nbits - 1;
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Atom& atom = mol.atoms[i];
    std::uint64_t h = mix64(0x45434650ULL);
    h = fold(h, hash_string(atom.element));
    h = fold(h, neighbors[i].size());
    h = fold(h, static_cast<std::uint64_t>(atom.hydrogens));
    h = fold(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(atom.charge)));
    h = fold(h, atom.aromatic ? 1 : 0);
    ids[i] = h;
    fp.set(h & mask);
  }

  std::vector<std::uint64_t> next(n);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> env;
  for (int iteration = 1; iteration <= radius; ++iteration) {
    for (std::size_t i = 0; i < n; ++i) {
      env.clear();
      for (const auto& [code, nb] : neighbors[i]) env.emplace_back(code, ids[nb]);
      std::sort(env.begin(), env.end());
      std::uint64_t h = fold(mix64(static_cast<std::uint64_t>(iteration)), ids[i]);
      for (const auto& [code, id] : env) h = fold(fold(h, code), id);
      next[i] = h;
      fp.set(h & mask);
    }
    ids.swap(next);
  }
  return fp;
}

double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.nbits() != b.nbits()) throw Error(ErrorKind::LengthMismatch, "fingerprint lengths differ");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t k = 0; k < a.words().size(); ++k) {
    inter += static_cast<std::size_t>(std::popcount(a.words()[k] & b.words()[k]));
    uni += static_cast<std::size_t>(std::popcount(a.words()[k] | b.words()[k]));
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t hamming_distance(const Fingerprint& a, const Fingerprint& b) {
  if (a.nbits() != b.nbits()) throw Error(ErrorKind::LengthMismatch, "fingerprint lengths differ");
  std::size_t d = 0;
  for (std::size_t k = 0; k < a.words().size(); ++k) {
    d += static_cast<std::size_t>(std::popcount(a.words()[k] ^ b.words()[k]));
  }
  return d;
}

Eigen::MatrixXd fingerprint_matrix(const std::vector<Fingerprint>& fps) {
  if (fps.empty()) return {};
  const std::size_t nbits = fps.front().nbits();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nbits), static_cast<Eigen::Index>(fps.size()));
  for (std::size_t j = 0; j < fps.size(); ++j) {
    if (fps[j].nbits() != nbits) throw Error(ErrorKind::LengthMismatch, "fingerprint lengths differ");
    for (std::size_t i = 0; i < nbits; ++i) {
      if (fps[j].test(i)) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
    }
  }
  return out;
}

void write_fingerprint_cache(const std::filesystem::path& path, const FingerprintCache& cache) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << "#ecfp radius=" << cache.radius << " nbits=" << cache.nbits << " hash=" << cache.hash_id << '\n';
  for (const auto& record : cache.records) {
    out << record.molecule_id << '\t' << record.fingerprint.to_hex() << '\n';
  }
  if (!out) throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
}

FingerprintCache read_fingerprint_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot read " + path.string());
  auto invalid = [&](std::size_t line, const std::string& what) {
    return Error(ErrorKind::CacheInvalid, path.string() + ":" + std::to_string(line) + ": " + what);
  };

  std::string line;
  if (!std::getline(in, line)) throw invalid(1, "missing header");
  FingerprintCache cache;
  {
    std::istringstream header(line);
    std::string tag, radius_field, nbits_field, hash_field, extra;
    header >> tag >> radius_field >> nbits_field >> hash_field;
    if (tag != "#ecfp" || !radius_field.starts_with("radius=") || !nbits_field.starts_with("nbits=") ||
        !hash_field.starts_with("hash=") || (header >> extra)) {
      throw invalid(1, "malformed header '" + line + "'");
    }
    try {
      std::size_t used = 0;
      cache.radius = std::stoi(radius_field.substr(7), &used);
      if (used != radius_field.size() - 7 || cache.radius < 0) throw std::invalid_argument("radius");
      cache.nbits = std::stoul(nbits_field.substr(6), &used);
      if (used != nbits_field.size() - 6 || cache.nbits < 8 || !std::has_single_bit(cache.nbits)) {
        throw std::invalid_argument("nbits");
      }
    } catch (const std::exception&) {
      throw invalid(1, "malformed header '" + line + "'");
    }
    cache.hash_id = hash_field.substr(5);
    if (cache.hash_id.empty()) throw invalid(1, "empty hash id");
  }

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) throw invalid(lineno, "expected <id>\\t<hex>");
    const std::string_view hex = std::string_view(line).substr(tab + 1);
    if (hex.size() * 4 != cache.nbits) throw invalid(lineno, "fingerprint length does not match header");
    try {
      cache.records.push_back({line.substr(0, tab), Fingerprint::from_hex(hex, cache.radius)});
    } catch (const Error&) {
      throw invalid(lineno, "bad hex digits");
    }
  }
  return cache;
}

}  // namespace molnp
