#include "kgdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "rng.hpp"

namespace rnnctp {

SymbolId Interner::intern(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it != index_.end()) return it->second;
  SymbolId id = static_cast<SymbolId>(names_.size());
  names_.emplace_back(name);
  index_.emplace(names_.back(), id);
  return id;
}

SymbolId Interner::lookup(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? kNoSymbol : it->second;
}

TripleFormat triple_format_from_string(std::string_view s) {
  if (s == "tsv" || s == "tab") return TripleFormat::Tab;
  if (s == "whitespace" || s == "ws") return TripleFormat::Whitespace;
  throw ConfigError("unknown triple format: " + std::string(s));
}

bool KnowledgeBase::add_fact(const Fact& f) {
  if (fact_set_.count(f)) return false;
  fact_set_.insert(f);
  facts_.push_back(f);
  return true;
}

namespace {

std::vector<std::string> split_fields(const std::string& line, TripleFormat format) {
  std::vector<std::string> out;
  if (format == TripleFormat::Tab) {
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        out.push_back(line.substr(start));
        break;
      }
      out.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    // Trim carriage returns and surrounding spaces per field.
    for (auto& f : out) {
      while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
      size_t b = f.find_first_not_of(' ');
      if (b == std::string::npos)
        f.clear();
      else
        f = f.substr(b);
    }
    while (!out.empty() && out.back().empty()) out.pop_back();
  } else {
    std::istringstream iss(line);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
  }
  return out;
}

void ingest_line(KnowledgeBase& kb, const std::string& line, TripleFormat format,
                 size_t line_no, LoadStats& stats) {
  std::vector<std::string> fields = split_fields(line, format);
  if (fields.empty()) return;  // blank line
  if (fields.size() == 2) {
    stats.unary_dropped++;
    return;
  }
  if (fields.size() != 3) {
    throw ParseError("expected subject, predicate, object; got " +
                         std::to_string(fields.size()) + " fields",
                     line_no);
  }
  Fact f;
  f.subject = kb.symbols.constants.intern(fields[0]);
  f.predicate = kb.symbols.predicates.intern(fields[1]);
  f.object = kb.symbols.constants.intern(fields[2]);
  if (!kb.add_fact(f)) stats.duplicates++;
}

void load_file_into(KnowledgeBase& kb, const std::filesystem::path& path,
                    TripleFormat format, LoadStats& stats) {
  std::ifstream in(path);
  if (!in) throw KgError("cannot open triple file: " + path.string());
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    stats.lines++;
    ingest_line(kb, line, format, line_no, stats);
  }
}

}  // namespace

KnowledgeBase load_kb(const std::filesystem::path& path, TripleFormat format) {
  KnowledgeBase kb;
  load_file_into(kb, path, format, kb.load_stats_);
  if (kb.num_facts() == 0) {
    throw KgError("no binary facts loaded from " + path.string());
  }
  return kb;
}

DatasetSplit split_dataset(const KnowledgeBase& kb, SplitRatios ratios, uint64_t seed) {
  double sum = ratios.train + ratios.valid + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1, got " + std::to_string(sum));
  }
  if (kb.num_facts() == 0) throw ConfigError("cannot split an empty KB");

  const size_t n = kb.num_facts();
  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  Rng rng = make_rng(seed, /*stream=*/0x5b1d);
  rng.shuffle(order);

  const size_t n_train = static_cast<size_t>(std::floor(double(n) * ratios.train));
  const size_t n_valid = static_cast<size_t>(std::floor(double(n) * ratios.valid));

  DatasetSplit split;
  split.ratios = ratios;
  split.seed = seed;
  for (size_t i = 0; i < n; ++i) {
    uint32_t idx = order[i];
    const Fact& f = kb.facts()[idx];
    if (i < n_train) {
      split.train.push_back(f);
      split.train_idx.push_back(idx);
    } else if (i < n_train + n_valid) {
      split.valid.push_back(f);
      split.valid_idx.push_back(idx);
    } else {
      split.test.push_back(f);
      split.test_idx.push_back(idx);
    }
  }
  return split;
}

FileSplit load_split_files(const std::filesystem::path& train,
                           const std::filesystem::path& valid,
                           const std::filesystem::path& test, TripleFormat format) {
  FileSplit out;
  LoadStats& stats = out.kb.load_stats_;
  struct Part {
    const std::filesystem::path* path;
    std::vector<Fact>* facts;
    std::vector<uint32_t>* idx;
  };
  Part parts[3] = {{&train, &out.split.train, &out.split.train_idx},
                   {&valid, &out.split.valid, &out.split.valid_idx},
                   {&test, &out.split.test, &out.split.test_idx}};
  for (auto& part : parts) {
    size_t before = out.kb.num_facts();
    load_file_into(out.kb, *part.path, format, stats);
    for (size_t i = before; i < out.kb.num_facts(); ++i) {
      part.facts->push_back(out.kb.facts()[i]);
      part.idx->push_back(static_cast<uint32_t>(i));
    }
  }
  if (out.kb.num_facts() == 0) throw KgError("split files contain no facts");
  return out;
}

CorruptionSet corruptions(const Fact& fact, const KnowledgeBase& kb) {
  CorruptionSet set;
  set.target = fact;
  const size_t n_const = kb.symbols.constants.size();
  for (SymbolId c = 0; c < n_const; ++c) {
    if (c != fact.subject) {
      Fact f{fact.predicate, c, fact.object};
      if (!kb.contains(f)) set.subject_corruptions.push_back(f);
    }
    if (c != fact.object) {
      Fact f{fact.predicate, fact.subject, c};
      if (!kb.contains(f)) set.object_corruptions.push_back(f);
    }
  }
  return set;
}

std::string split_manifest_json(const DatasetSplit& split) {
  nlohmann::json j;
  j["seed"] = split.seed;
  j["ratios"] = {split.ratios.train, split.ratios.valid, split.ratios.test};
  j["train"] = split.train_idx;
  j["valid"] = split.valid_idx;
  j["test"] = split.test_idx;
  return j.dump();
}

}  // namespace rnnctp
