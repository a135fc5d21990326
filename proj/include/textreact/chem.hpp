#pragma once

// SMILES tokenizer, minimal molecular graph parser/writer, and hashed
// count fingerprints. Grammar: organic subset + bracket atoms with charge.
// No stereo, no isotopes, no valence model.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "textreact/rng.hpp"

namespace textreact::chem {

// ---------------------------------------------------------------- errors

enum class ChemErrorKind {
  UnbalancedBracket,
  UnknownCharacter,
  UnclosedRing,
  UnbalancedParenthesis,
  DanglingBond,
  LengthMismatch,
  EmptyInput,
};

struct ChemError : std::runtime_error {
  ChemErrorKind kind;
  std::size_t offset;  // byte offset where applicable
  ChemError(ChemErrorKind k, const std::string& msg, std::size_t off = 0)
      : std::runtime_error(msg), kind(k), offset(off) {}
};

// ---------------------------------------------------------------- tokens

enum class TokenKind {
  atom,
  bracket_atom,
  bond,
  ring_digit,
  branch_open,
  branch_close,
  dot,
};

struct SmilesToken {
  std::string text;
  TokenKind kind;
  std::optional<int> atom_ordinal;  // dense over atom/bracket_atom tokens
};

inline bool is_atom_kind(TokenKind k) {
  return k == TokenKind::atom || k == TokenKind::bracket_atom;
}

// Greedy longest-match tokenizer. Two-letter organic elements (Cl, Br)
// take precedence over one-letter matches.
inline std::vector<SmilesToken> tokenize_smiles(const std::string& s) {
  if (s.empty())
    throw ChemError(ChemErrorKind::EmptyInput, "empty SMILES");
  std::vector<SmilesToken> tokens;
  int atom_ordinal = 0;
  std::size_t i = 0;
  auto push = [&](std::string text, TokenKind kind) {
    SmilesToken t{std::move(text), kind, std::nullopt};
    if (is_atom_kind(kind)) t.atom_ordinal = atom_ordinal++;
    tokens.push_back(std::move(t));
  };
  while (i < s.size()) {
    const char c = s[i];
    if (c == '[') {
      std::size_t j = s.find(']', i);
      if (j == std::string::npos)
        throw ChemError(ChemErrorKind::UnbalancedBracket,
                        "unclosed '[' at offset " + std::to_string(i), i);
      push(s.substr(i, j - i + 1), TokenKind::bracket_atom);
      i = j + 1;
    } else if (c == 'C' && i + 1 < s.size() && s[i + 1] == 'l') {
      push("Cl", TokenKind::atom);
      i += 2;
    } else if (c == 'B' && i + 1 < s.size() && s[i + 1] == 'r') {
      push("Br", TokenKind::atom);
      i += 2;
    } else if (c == 'B' || c == 'C' || c == 'N' || c == 'O' || c == 'P' ||
               c == 'S' || c == 'F' || c == 'I') {
      push(std::string(1, c), TokenKind::atom);
      ++i;
    } else if (c == 'b' || c == 'c' || c == 'n' || c == 'o' || c == 'p' ||
               c == 's') {
      push(std::string(1, c), TokenKind::atom);
      ++i;
    } else if (c == '-' || c == '=' || c == '#' || c == ':') {
      push(std::string(1, c), TokenKind::bond);
      ++i;
    } else if (c >= '0' && c <= '9') {
      push(std::string(1, c), TokenKind::ring_digit);
      ++i;
    } else if (c == '%') {
      if (i + 2 >= s.size() || !isdigit(static_cast<unsigned char>(s[i + 1])) ||
          !isdigit(static_cast<unsigned char>(s[i + 2])))
        throw ChemError(ChemErrorKind::UnknownCharacter,
                        "bad '%nn' ring closure at offset " + std::to_string(i), i);
      push(s.substr(i, 3), TokenKind::ring_digit);
      i += 3;
    } else if (c == '(') {
      push("(", TokenKind::branch_open);
      ++i;
    } else if (c == ')') {
      push(")", TokenKind::branch_close);
      ++i;
    } else if (c == '.') {
      push(".", TokenKind::dot);
      ++i;
    } else {
      throw ChemError(ChemErrorKind::UnknownCharacter,
                      std::string("unknown character '") + c + "' at offset " +
                          std::to_string(i),
                      i);
    }
  }
  return tokens;
}

// ---------------------------------------------------------------- graph

enum class BondOrder { single, double_, triple, aromatic };

struct Atom {
  std::string element;  // uppercase symbol
  bool aromatic = false;
  int charge = 0;
  int token_pos = -1;  // index into the token sequence
};

struct Bond {
  int a = -1;  // a < b
  int b = -1;
  BondOrder order = BondOrder::single;
};

struct MolGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
};

namespace detail {

// Parses "[...]" content: element symbol, optional H count (ignored),
// optional charge. Isotopes/stereo are out of grammar.
inline Atom parse_bracket_atom(const std::string& tok, std::size_t offset) {
  // strip brackets
  std::string body = tok.substr(1, tok.size() - 2);
  Atom atom;
  std::size_t i = 0;
  if (body.empty())
    throw ChemError(ChemErrorKind::UnknownCharacter, "empty bracket atom", offset);
  if (isdigit(static_cast<unsigned char>(body[0])))
    throw ChemError(ChemErrorKind::UnknownCharacter,
                    "isotopes not supported: [" + body + "]", offset);
  if (islower(static_cast<unsigned char>(body[0]))) {
    atom.aromatic = true;
    atom.element = std::string(1, static_cast<char>(toupper(body[0])));
    ++i;
  } else if (isupper(static_cast<unsigned char>(body[0]))) {
    atom.element = std::string(1, body[0]);
    ++i;
    if (i < body.size() && islower(static_cast<unsigned char>(body[i])) &&
        body[i] != 'h') {
      atom.element += body[i];
      ++i;
    }
  } else {
    throw ChemError(ChemErrorKind::UnknownCharacter,
                    "bad bracket atom: [" + body + "]", offset);
  }
  // optional hydrogen count, not modeled
  if (i < body.size() && body[i] == 'H') {
    ++i;
    while (i < body.size() && isdigit(static_cast<unsigned char>(body[i]))) ++i;
  }
  // optional charge
  if (i < body.size() && (body[i] == '+' || body[i] == '-')) {
    const int sign = body[i] == '+' ? 1 : -1;
    ++i;
    int magnitude = 1;
    if (i < body.size() && isdigit(static_cast<unsigned char>(body[i]))) {
      magnitude = 0;
      while (i < body.size() && isdigit(static_cast<unsigned char>(body[i]))) {
        magnitude = magnitude * 10 + (body[i] - '0');
        ++i;
      }
    } else {
      while (i < body.size() && body[i] == body[i - 1]) {
        ++magnitude;
        ++i;
      }
    }
    atom.charge = sign * magnitude;
  }
  if (i != body.size())
    throw ChemError(ChemErrorKind::UnknownCharacter,
                    "trailing content in bracket atom: [" + body + "]", offset);
  return atom;
}

inline BondOrder bond_from_char(char c) {
  switch (c) {
    case '-': return BondOrder::single;
    case '=': return BondOrder::double_;
    case '#': return BondOrder::triple;
    default: return BondOrder::aromatic;  // ':'
  }
}

}  // namespace detail

inline MolGraph parse_smiles_tokens(const std::vector<SmilesToken>& tokens) {
  MolGraph g;
  std::vector<int> branch_stack;
  struct RingEntry {
    int atom;
    std::optional<BondOrder> order;
  };
  std::map<std::string, RingEntry> open_rings;
  int prev_atom = -1;
  std::optional<BondOrder> pending_bond;

  auto add_bond = [&](int a, int b, std::optional<BondOrder> explicit_order) {
    BondOrder order;
    if (explicit_order) {
      order = *explicit_order;
    } else if (g.atoms[a].aromatic && g.atoms[b].aromatic) {
      order = BondOrder::aromatic;
    } else {
      order = BondOrder::single;
    }
    Bond bond;
    bond.a = std::min(a, b);
    bond.b = std::max(a, b);
    bond.order = order;
    g.bonds.push_back(bond);
  };

  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const SmilesToken& tok = tokens[pos];
    switch (tok.kind) {
      case TokenKind::atom:
      case TokenKind::bracket_atom: {
        Atom atom;
        if (tok.kind == TokenKind::bracket_atom) {
          atom = detail::parse_bracket_atom(tok.text, pos);
        } else {
          atom.aromatic = islower(static_cast<unsigned char>(tok.text[0])) != 0;
          atom.element = tok.text;
          if (atom.aromatic)
            atom.element[0] = static_cast<char>(toupper(atom.element[0]));
        }
        atom.token_pos = static_cast<int>(pos);
        const int idx = static_cast<int>(g.atoms.size());
        g.atoms.push_back(atom);
        if (prev_atom >= 0) add_bond(prev_atom, idx, pending_bond);
        pending_bond.reset();
        prev_atom = idx;
        break;
      }
      case TokenKind::bond: {
        if (prev_atom < 0)
          throw ChemError(ChemErrorKind::DanglingBond,
                          "bond token with no preceding atom");
        pending_bond = detail::bond_from_char(tok.text[0]);
        break;
      }
      case TokenKind::ring_digit: {
        if (prev_atom < 0)
          throw ChemError(ChemErrorKind::DanglingBond,
                          "ring closure with no preceding atom");
        auto it = open_rings.find(tok.text);
        if (it == open_rings.end()) {
          open_rings[tok.text] = RingEntry{prev_atom, pending_bond};
        } else {
          std::optional<BondOrder> order = pending_bond ? pending_bond : it->second.order;
          add_bond(it->second.atom, prev_atom, order);
          open_rings.erase(it);
        }
        pending_bond.reset();
        break;
      }
      case TokenKind::branch_open: {
        if (prev_atom < 0)
          throw ChemError(ChemErrorKind::UnbalancedParenthesis,
                          "'(' with no preceding atom");
        branch_stack.push_back(prev_atom);
        break;
      }
      case TokenKind::branch_close: {
        if (branch_stack.empty())
          throw ChemError(ChemErrorKind::UnbalancedParenthesis,
                          "')' without matching '('");
        if (pending_bond)
          throw ChemError(ChemErrorKind::DanglingBond, "bond before ')'");
        prev_atom = branch_stack.back();
        branch_stack.pop_back();
        break;
      }
      case TokenKind::dot: {
        if (pending_bond)
          throw ChemError(ChemErrorKind::DanglingBond, "bond before '.'");
        prev_atom = -1;
        break;
      }
    }
  }
  if (pending_bond)
    throw ChemError(ChemErrorKind::DanglingBond, "trailing bond token");
  if (!branch_stack.empty())
    throw ChemError(ChemErrorKind::UnbalancedParenthesis, "unclosed '('");
  if (!open_rings.empty())
    throw ChemError(ChemErrorKind::UnclosedRing,
                    "unpaired ring closure '" + open_rings.begin()->first + "'");

  // de-duplicate bonds (ring closure written twice, etc.)
  std::sort(g.bonds.begin(), g.bonds.end(), [](const Bond& x, const Bond& y) {
    return std::tie(x.a, x.b, x.order) < std::tie(y.a, y.b, y.order);
  });
  g.bonds.erase(std::unique(g.bonds.begin(), g.bonds.end(),
                            [](const Bond& x, const Bond& y) {
                              return x.a == y.a && x.b == y.b && x.order == y.order;
                            }),
                g.bonds.end());
  return g;
}

inline MolGraph parse_smiles(const std::string& s) {
  return parse_smiles_tokens(tokenize_smiles(s));
}

// ---------------------------------------------------------------- writer

namespace detail {

inline const std::array<std::string, 8>& organic_subset() {
  static const std::array<std::string, 8> v = {"B", "C", "N", "O",
                                               "P", "S", "F", "I"};
  return v;
}
inline bool in_organic_subset(const std::string& e) {
  for (const auto& o : organic_subset())
    if (o == e) return true;
  return e == "Cl" || e == "Br";
}
inline bool aromatic_writable(const std::string& e) {
  return e == "B" || e == "C" || e == "N" || e == "O" || e == "P" || e == "S";
}

inline std::string atom_text(const Atom& a) {
  std::string sym = a.element;
  if (a.aromatic) {
    for (auto& c : sym) c = static_cast<char>(tolower(c));
  }
  const bool needs_bracket = a.charge != 0 || !in_organic_subset(a.element) ||
                             (a.aromatic && !aromatic_writable(a.element));
  if (!needs_bracket) return sym;
  std::string out = "[" + sym;
  if (a.charge != 0) {
    out += a.charge > 0 ? '+' : '-';
    const int mag = std::abs(a.charge);
    if (mag > 1) out += std::to_string(mag);
  }
  out += ']';
  return out;
}

inline std::string bond_text(const Atom& a, const Atom& b, BondOrder order) {
  switch (order) {
    case BondOrder::double_: return "=";
    case BondOrder::triple: return "#";
    case BondOrder::aromatic:
      return (a.aromatic && b.aromatic) ? "" : ":";
    case BondOrder::single:
    default:
      // explicit single between two aromatic atoms, otherwise implicit
      return (a.aromatic && b.aromatic) ? "-" : "";
  }
}

inline std::string ring_digit_text(int d) {
  if (d <= 9) return std::to_string(d);
  std::ostringstream os;
  os << '%' << (d < 10 ? "0" : "") << d;
  return os.str();
}

}  // namespace detail

// Randomized-order writer: seeded random start atom and neighbor order.
// Output reparses to a graph isomorphic to the input. Two passes per
// component: first a randomized DFS fixing the spanning tree and back
// edges, then emission (back-edge digits must be known at both endpoints).
inline std::string write_smiles(const MolGraph& g, std::uint64_t seed) {
  Rng rng(seed);
  const int n = static_cast<int>(g.atoms.size());
  if (n == 0) return "";

  std::vector<std::vector<std::pair<int, BondOrder>>> adj(n);
  for (const auto& b : g.bonds) {
    adj[b.a].push_back({b.b, b.order});
    adj[b.b].push_back({b.a, b.order});
  }

  std::vector<bool> visited(n, false);
  std::string out;
  bool first_component = true;

  // component order: by lowest atom index; start atom randomized within
  for (int comp_root = 0; comp_root < n; ++comp_root) {
    if (visited[comp_root]) continue;
    std::vector<int> comp;
    {
      std::vector<int> stack = {comp_root};
      std::vector<bool> seen(n, false);
      seen[comp_root] = true;
      while (!stack.empty()) {
        int u = stack.back();
        stack.pop_back();
        comp.push_back(u);
        for (auto& [v, o] : adj[u])
          if (!seen[v]) {
            seen[v] = true;
            stack.push_back(v);
          }
      }
      std::sort(comp.begin(), comp.end());
    }
    const int start = comp[rng.uniform_int(comp.size())];

    // pass 1: randomized DFS -> tree children (in visit order) + back edges
    std::vector<std::vector<std::pair<int, BondOrder>>> children(n);
    struct BackEdge {
      int u, v;  // u discovered the edge; v was already visited
      BondOrder order;
    };
    std::vector<BackEdge> back_edges;
    std::vector<int> parent(n, -1);
    {
      struct Frame {
        int atom;
        std::vector<std::pair<int, BondOrder>> nb;
        std::size_t next = 0;
      };
      std::vector<Frame> stack;
      auto shuffled = [&](int u) {
        auto nb = adj[u];
        rng.shuffle(nb);
        return nb;
      };
      visited[start] = true;
      stack.push_back(Frame{start, shuffled(start)});
      while (!stack.empty()) {
        Frame& fr = stack.back();
        if (fr.next >= fr.nb.size()) {
          stack.pop_back();
          continue;
        }
        auto [v, order] = fr.nb[fr.next++];
        if (v == parent[fr.atom]) continue;
        if (visited[v]) {
          bool known = false;
          for (const auto& be : back_edges)
            if ((be.u == fr.atom && be.v == v) || (be.u == v && be.v == fr.atom))
              known = true;
          if (!known) back_edges.push_back(BackEdge{fr.atom, v, order});
          continue;
        }
        visited[v] = true;
        parent[v] = fr.atom;
        children[fr.atom].push_back({v, order});
        stack.push_back(Frame{v, shuffled(v)});
      }
    }

    // pass 2: emit. Digits allocated when the first endpoint is written.
    std::vector<std::vector<int>> incident(n);  // back-edge indices per atom
    for (std::size_t i = 0; i < back_edges.size(); ++i) {
      incident[back_edges[i].u].push_back(static_cast<int>(i));
      incident[back_edges[i].v].push_back(static_cast<int>(i));
    }
    std::vector<int> edge_digit(back_edges.size(), -1);
    std::vector<bool> digit_in_use(100, false);
    auto alloc_digit = [&]() {
      for (int d = 1; d < 100; ++d)
        if (!digit_in_use[d]) {
          digit_in_use[d] = true;
          return d;
        }
      throw std::runtime_error("write_smiles: ring digit overflow");
    };

    if (!first_component) out += '.';
    first_component = false;

    // explicit stack to avoid deep recursion on long chains
    struct EmitFrame {
      int atom;
      std::size_t child = 0;
      bool opened_paren = false;
    };
    std::vector<EmitFrame> estack;
    auto write_atom = [&](int u) {
      out += detail::atom_text(g.atoms[u]);
      for (int ei : incident[u]) {
        const BackEdge& be = back_edges[ei];
        if (edge_digit[ei] < 0) {
          edge_digit[ei] = alloc_digit();
          out += detail::bond_text(g.atoms[be.u], g.atoms[be.v], be.order);
          out += detail::ring_digit_text(edge_digit[ei]);
        } else {
          out += detail::ring_digit_text(edge_digit[ei]);
          digit_in_use[edge_digit[ei]] = false;
        }
      }
    };
    write_atom(start);
    estack.push_back(EmitFrame{start});
    while (!estack.empty()) {
      EmitFrame& fr = estack.back();
      if (fr.child >= children[fr.atom].size()) {
        bool close = fr.opened_paren;
        estack.pop_back();
        if (close) out += ')';
        continue;
      }
      auto [v, order] = children[fr.atom][fr.child];
      const bool last_child = fr.child + 1 == children[fr.atom].size();
      ++fr.child;
      if (!last_child) out += '(';
      out += detail::bond_text(g.atoms[fr.atom], g.atoms[v], order);
      write_atom(v);
      estack.push_back(EmitFrame{v, 0, !last_child});
    }
  }
  return out;
}

// ------------------------------------------------------------ fingerprints

inline constexpr std::size_t kFingerprintWidth = 2048;

struct Fingerprint {
  std::vector<std::int64_t> counts;
  Fingerprint() : counts(kFingerprintWidth, 0) {}
};

// 64-bit FNV-1a
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

inline std::string env_radius0(const Atom& a) {
  return "0:" + a.element + ":" + std::to_string(a.charge) + ":" +
         (a.aromatic ? "1" : "0");
}

inline std::string env_radius1(const Atom& a, std::vector<std::string> neighbor_elements) {
  std::sort(neighbor_elements.begin(), neighbor_elements.end());
  std::string s = "1:" + a.element + ":" + std::to_string(a.charge) + ":" +
                  (a.aromatic ? "1" : "0") + ":";
  for (std::size_t i = 0; i < neighbor_elements.size(); ++i) {
    if (i) s += ',';
    s += neighbor_elements[i];
  }
  return s;
}

}  // namespace detail

// Hashed radius<=1 atom environments, counted into 2048 buckets.
inline Fingerprint mol_fingerprint(const MolGraph& g) {
  Fingerprint fp;
  std::vector<std::vector<std::string>> neighbors(g.atoms.size());
  for (const auto& b : g.bonds) {
    neighbors[b.a].push_back(g.atoms[b.b].element);
    neighbors[b.b].push_back(g.atoms[b.a].element);
  }
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    const Atom& a = g.atoms[i];
    fp.counts[fnv1a(detail::env_radius0(a)) % kFingerprintWidth] += 1;
    fp.counts[fnv1a(detail::env_radius1(a, neighbors[i])) % kFingerprintWidth] += 1;
  }
  return fp;
}

// fp(product) - sum fp(reactant_i); signed counts
inline Fingerprint reaction_fingerprint(const std::vector<MolGraph>& reactants,
                                        const MolGraph& product) {
  if (reactants.empty())
    throw ChemError(ChemErrorKind::EmptyInput, "reaction_fingerprint: no reactants");
  Fingerprint fp = mol_fingerprint(product);
  for (const auto& r : reactants) {
    Fingerprint rf = mol_fingerprint(r);
    for (std::size_t i = 0; i < kFingerprintWidth; ++i) fp.counts[i] -= rf.counts[i];
  }
  return fp;
}

inline double fp_distance(const Fingerprint& a, const Fingerprint& b) {
  if (a.counts.size() != b.counts.size())
    throw ChemError(ChemErrorKind::LengthMismatch, "fingerprint length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.counts.size(); ++i) {
    const double d = static_cast<double>(a.counts[i] - b.counts[i]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

// Canonical invariant used by round-trip tests: sorted (element, aromatic,
// charge, degree) sequence plus the multiset of bonds keyed by endpoint
// invariants and order.
inline std::string graph_invariant(const MolGraph& g) {
  std::vector<int> degree(g.atoms.size(), 0);
  for (const auto& b : g.bonds) {
    degree[b.a]++;
    degree[b.b]++;
  }
  std::vector<std::string> atom_keys;
  atom_keys.reserve(g.atoms.size());
  for (std::size_t i = 0; i < g.atoms.size(); ++i) {
    const Atom& a = g.atoms[i];
    atom_keys.push_back(a.element + "/" + (a.aromatic ? "1" : "0") + "/" +
                        std::to_string(a.charge) + "/" + std::to_string(degree[i]));
  }
  std::vector<std::string> bond_keys;
  bond_keys.reserve(g.bonds.size());
  auto akey = [&](int i) {
    const Atom& a = g.atoms[i];
    return a.element + "/" + (a.aromatic ? "1" : "0") + "/" +
           std::to_string(a.charge) + "/" + std::to_string(degree[i]);
  };
  for (const auto& b : g.bonds) {
    std::string ka = akey(b.a), kb = akey(b.b);
    if (kb < ka) std::swap(ka, kb);
    bond_keys.push_back(ka + "|" + kb + "|" + std::to_string(static_cast<int>(b.order)));
  }
  std::sort(atom_keys.begin(), atom_keys.end());
  std::sort(bond_keys.begin(), bond_keys.end());
  std::string out;
  for (const auto& k : atom_keys) out += k + ";";
  out += "#";
  for (const auto& k : bond_keys) out += k + ";";
  return out;
}

}  // namespace textreact::chem
