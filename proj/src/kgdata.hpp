#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace rnnctp {

using SymbolId = uint32_t;
inline constexpr SymbolId kNoSymbol = UINT32_MAX;

class KgError : public std::runtime_error {
 public:
  explicit KgError(const std::string& msg) : std::runtime_error(msg) {}
};

class ParseError : public KgError {
 public:
  ParseError(const std::string& msg, size_t line)
      : KgError(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  size_t line() const { return line_; }

 private:
  size_t line_;
};

class ConfigError : public KgError {
 public:
  explicit ConfigError(const std::string& msg) : KgError(msg) {}
};

// Dense, insertion-ordered name -> id mapping for one symbol namespace.
class Interner {
 public:
  SymbolId intern(std::string_view name);
  SymbolId lookup(std::string_view name) const;  // kNoSymbol when absent
  const std::string& name(SymbolId id) const { return names_.at(id); }
  size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, SymbolId> index_;
};

// Owns both vocabularies of a knowledge base.
struct SymbolTable {
  Interner constants;
  Interner predicates;
};

struct Term {
  enum class Kind : uint8_t { Constant, Variable };
  Kind kind = Kind::Constant;
  SymbolId id = kNoSymbol;

  static Term constant(SymbolId c) { return Term{Kind::Constant, c}; }
  static Term variable(SymbolId v) { return Term{Kind::Variable, v}; }
  bool is_constant() const { return kind == Kind::Constant; }
  bool is_variable() const { return kind == Kind::Variable; }
  friend bool operator==(const Term&, const Term&) = default;
};

// Binary atom with a symbolic predicate. Soft-predicate atoms (predicate as
// a generated vector) live in the selection module.
struct Atom {
  SymbolId predicate = kNoSymbol;
  Term args[2];

  bool ground() const { return args[0].is_constant() && args[1].is_constant(); }
};

// Ground triple, the storage form of a fact.
struct Fact {
  SymbolId predicate = kNoSymbol;
  SymbolId subject = kNoSymbol;
  SymbolId object = kNoSymbol;

  friend bool operator==(const Fact&, const Fact&) = default;
  Atom atom() const {
    return Atom{predicate, {Term::constant(subject), Term::constant(object)}};
  }
};

struct FactHash {
  size_t operator()(const Fact& f) const {
    uint64_t h = 1469598103934665603ULL;
    for (uint64_t v : {uint64_t(f.predicate), uint64_t(f.subject), uint64_t(f.object)}) {
      h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return static_cast<size_t>(h);
  }
};

struct LoadStats {
  size_t lines = 0;
  size_t unary_dropped = 0;
  size_t duplicates = 0;
};

enum class TripleFormat { Tab, Whitespace };

TripleFormat triple_format_from_string(std::string_view s);

struct FileSplit;

class KnowledgeBase {
 public:
  SymbolTable symbols;

  const std::vector<Fact>& facts() const { return facts_; }
  size_t num_facts() const { return facts_.size(); }
  bool contains(const Fact& f) const { return fact_set_.count(f) != 0; }

  // Returns false (and does not insert) for duplicates.
  bool add_fact(const Fact& f);

  const LoadStats& load_stats() const { return load_stats_; }

 private:
  friend KnowledgeBase load_kb(const std::filesystem::path&, TripleFormat);
  friend FileSplit load_split_files(const std::filesystem::path&,
                                    const std::filesystem::path&,
                                    const std::filesystem::path&, TripleFormat);
  std::vector<Fact> facts_;
  std::unordered_set<Fact, FactHash> fact_set_;
  LoadStats load_stats_;
};

// Loads a triple file. Lines with three fields are binary facts; lines with
// two fields are unary atoms and are dropped with a counted warning.
// Duplicates are deduplicated with a counted warning. Empty file is an error;
// any other field count is a parse error carrying the line number.
KnowledgeBase load_kb(const std::filesystem::path& path, TripleFormat format);

struct SplitRatios {
  double train = 0.3;
  double valid = 0.2;
  double test = 0.5;
};

struct DatasetSplit {
  std::vector<Fact> train, valid, test;
  // Indices into the source KB fact list, for the split manifest.
  std::vector<uint32_t> train_idx, valid_idx, test_idx;
  SplitRatios ratios;
  uint64_t seed = 0;
};

// Deterministic shuffle by seed, then boundaries at floor(n*r_train) and
// floor(n*r_train)+floor(n*r_valid); the remainder goes to test.
DatasetSplit split_dataset(const KnowledgeBase& kb, SplitRatios ratios, uint64_t seed);

// Builds a split from explicit per-file triples (Countries S1/S2/S3 style).
// All three files are interned into one KB; returns the KB plus the split.
struct FileSplit {
  KnowledgeBase kb;
  DatasetSplit split;
};
FileSplit load_split_files(const std::filesystem::path& train,
                           const std::filesystem::path& valid,
                           const std::filesystem::path& test, TripleFormat format);

struct CorruptionSet {
  Fact target;
  std::vector<Fact> subject_corruptions;
  std::vector<Fact> object_corruptions;
};

// Enumerates every constant substitution per slot, excluding the original
// constant and anything present in the KB (filtered setting).
CorruptionSet corruptions(const Fact& fact, const KnowledgeBase& kb);

// JSON manifest of a split ({"seed":..,"train":[indices],...}).
std::string split_manifest_json(const DatasetSplit& split);

}  // namespace rnnctp
