#pragma once

// Synthetic multi-domain corpus. Every domain draws its content tokens from
// its own sub-range of the vocabulary; only the function band (padding,
// begin-of-sequence, "=" and a separator) is shared. Grammars:
//
//   facts     BOS (k1 k2 = v)*    fixed random key-pair -> value table
//   chain     BOS x P(x) P(P(x))  fixed permutation P, random restarts
//   modular   BOS (a b = c)*      c = (a + b) mod |range|
//   successor BOS (a b = s(b))*      s(x) = x + 1 mod |range|
//   copy      BOS (a b = a)*
//   difference BOS (a b = c)*     c = (a - b) mod |range|
//   affine    BOS (a b = c)*      c = (2a + b) mod |range|
//
// The downstream grammars share the facts layout (two operands, "=", one
// answer) and differ only in the rule.
//
// Targets are next-token ids at positions whose next token is determined by
// the grammar and kIgnoreTarget elsewhere.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilu/error.hpp"
#include "ilu/json_util.hpp"
#include "ilu/models.hpp"
#include "ilu/numcore.hpp"

namespace ilu {

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kBosToken = 1;
inline constexpr std::int32_t kEqualsToken = 2;
inline constexpr std::int32_t kSepToken = 3;

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names{"pretrain", "train", "eval"};
  return names;
}

struct DomainSpec {
  std::string name;
  std::string grammar;
  std::int32_t token_lo = 0;  // content tokens [token_lo, token_hi)
  std::int32_t token_hi = 0;

  std::int32_t range() const noexcept { return token_hi - token_lo; }
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct SyntheticSuiteConfig {
  std::size_t vocab = 64;
  std::size_t seq_len = 32;
  std::int32_t function_band = 4;  // tokens [0, function_band) are shared
  std::size_t facts = 48;          // table size for the facts grammar
  double restart_prob = 0.1;       // chain grammar
  std::map<std::string, std::size_t> split_sizes{{"pretrain", 2000}, {"train", 2000}, {"eval", 500}};
  std::vector<DomainSpec> domains{{"forget", "facts", 4, 20},
                                  {"retain", "chain", 20, 32},
                                  {"T1", "modular", 32, 44},
                                  {"T2", "difference", 44, 54},
                                  {"T3", "affine", 54, 64}};
  std::uint64_t seed = 0;

  const DomainSpec& domain(const std::string& name) const {
    for (const auto& d : domains) {
      if (d.name == name) return d;
    }
    throw ArgumentError("unknown domain '" + name + "'");
  }

  void validate() const {
    ILU_REQUIRE(vocab >= 2 && vocab <= (1u << 30), "vocab out of range");
    ILU_REQUIRE(seq_len >= 2, "sequence length must be >= 2");
    ILU_REQUIRE(function_band >= 4 && static_cast<std::size_t>(function_band) < vocab,
                "function band must hold the 4 reserved tokens and fit the vocab");
    ILU_REQUIRE(!domains.empty(), "suite needs at least one domain");
    for (const auto& s : split_names()) {
      auto it = split_sizes.find(s);
      ILU_REQUIRE(it != split_sizes.end() && it->second >= 1,
                  "examples per split must be >= 1 (split '" + s + "')");
    }
    for (const auto& [s, n] : split_sizes) {
      ILU_REQUIRE(std::find(split_names().begin(), split_names().end(), s) != split_names().end(),
                  "unknown split '" + s + "'");
    }
    std::set<std::string> names;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto& d = domains[i];
      ILU_REQUIRE(names.insert(d.name).second, "duplicate domain '" + d.name + "'");
      ILU_REQUIRE(d.token_lo >= function_band && d.token_hi > d.token_lo &&
                      static_cast<std::size_t>(d.token_hi) <= vocab,
                  "domain '" + d.name + "' token range outside [function band, vocab)");
      ILU_REQUIRE(d.range() >= 2, "domain '" + d.name + "' needs at least 2 content tokens");
      for (std::size_t j = 0; j < i; ++j) {
        const auto& o = domains[j];
        if (d.token_lo < o.token_hi && o.token_lo < d.token_hi) {
          throw ArgumentError("token ranges of '" + o.name + "' and '" + d.name + "' overlap");
        }
      }
      static const std::set<std::string> grammars{"facts", "chain", "modular", "successor", "copy", "difference", "affine"};
      ILU_REQUIRE(grammars.count(d.grammar) == 1,
                  "domain '" + d.name + "' has unknown grammar '" + d.grammar + "'");
      if (d.grammar == "facts") {
        ILU_REQUIRE(facts >= 1 && facts <= static_cast<std::size_t>(d.range() * d.range()),
                    "facts table larger than the number of distinct key pairs");
      }
    }
    ILU_REQUIRE(restart_prob >= 0.0 && restart_prob < 1.0, "restart_prob must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const DomainSpec& d) {
  j = {{"name", d.name}, {"grammar", d.grammar}, {"token_lo", d.token_lo}, {"token_hi", d.token_hi}};
}

inline void from_json(const nlohmann::json& j, DomainSpec& d) {
  require_known_keys(j, {"name", "grammar", "token_lo", "token_hi"}, "domain");
  d.name = j.at("name").get<std::string>();
  d.grammar = j.at("grammar").get<std::string>();
  d.token_lo = j.at("token_lo").get<std::int32_t>();
  d.token_hi = j.at("token_hi").get<std::int32_t>();
}

inline void to_json(nlohmann::json& j, const SyntheticSuiteConfig& c) {
  j = {{"vocab", c.vocab},       {"seq_len", c.seq_len}, {"function_band", c.function_band},
       {"facts", c.facts},       {"restart_prob", c.restart_prob},
       {"split_sizes", c.split_sizes}, {"domains", c.domains}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSuiteConfig& c) {
  require_known_keys(j, {"vocab", "seq_len", "function_band", "facts", "restart_prob", "split_sizes",
                         "domains", "seed"},
                     "suite");
  read_optional(j, "vocab", c.vocab, "suite");
  read_optional(j, "seq_len", c.seq_len, "suite");
  read_optional(j, "function_band", c.function_band, "suite");
  read_optional(j, "facts", c.facts, "suite");
  read_optional(j, "restart_prob", c.restart_prob, "suite");
  read_optional(j, "split_sizes", c.split_sizes, "suite");
  read_optional(j, "domains", c.domains, "suite");
  read_optional(j, "seed", c.seed, "suite");
}

struct LabeledSequence {
  std::string task;
  std::vector<std::int32_t> input;
  std::vector<std::int32_t> target;  // per-position next tokens, or a single class label
  bool class_label = false;

  friend bool operator==(const LabeledSequence&, const LabeledSequence&) = default;
};

namespace detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// Tables shared by all splits of one domain.
struct GrammarTables {
  std::map<std::pair<std::int32_t, std::int32_t>, std::int32_t> facts;
  std::vector<std::pair<std::int32_t, std::int32_t>> fact_keys;
  std::vector<std::int32_t> perm;  // chain successor, indexed by offset
};

inline GrammarTables make_tables(const SyntheticSuiteConfig& c, const DomainSpec& d) {
  GrammarTables t;
  RngStream rng(c.seed, name_hash("tables/" + d.name));
  const auto r = d.range();
  if (d.grammar == "facts") {
    std::vector<std::pair<std::int32_t, std::int32_t>> all;
    for (std::int32_t a = 0; a < r; ++a) {
      for (std::int32_t b = 0; b < r; ++b) all.emplace_back(d.token_lo + a, d.token_lo + b);
    }
    rng.shuffle(all);
    all.resize(c.facts);
    for (const auto& k : all) {
      t.facts[k] = d.token_lo + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(r)));
    }
    t.fact_keys = all;
  } else if (d.grammar == "chain") {
    // A single cycle through the range, so every token has a fixed successor.
    std::vector<std::int32_t> order(static_cast<std::size_t>(r));
    for (std::int32_t i = 0; i < r; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    t.perm.assign(static_cast<std::size_t>(r), 0);
    for (std::size_t i = 0; i < order.size(); ++i) {
      t.perm[static_cast<std::size_t>(order[i])] = order[(i + 1) % order.size()];
    }
  }
  return t;
}

// Token stream of length seq_len + 1 and a flag per token saying whether it
// is predictable from its prefix.
struct RawSequence {
  std::vector<std::int32_t> tokens;
  std::vector<bool> predictable;

  void push(std::int32_t tok, bool pred) {
    tokens.push_back(tok);
    predictable.push_back(pred);
  }
};

inline RawSequence draw_sequence(const SyntheticSuiteConfig& c, const DomainSpec& d,
                                 const GrammarTables& t, RngStream& rng) {
  const std::size_t n = c.seq_len + 1;
  const auto r = d.range();
  auto content = [&] {
    return d.token_lo + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(r)));
  };
  RawSequence s;
  s.push(kBosToken, false);
  if (d.grammar == "chain") {
    std::int32_t x = content();
    s.push(x, false);
    while (s.tokens.size() < n) {
      if (rng.uniform() < c.restart_prob) {
        x = content();
        s.push(x, false);
      } else {
        x = d.token_lo + t.perm[static_cast<std::size_t>(x - d.token_lo)];
        s.push(x, true);
      }
    }
    return s;
  }
  while (s.tokens.size() < n) {
    std::vector<std::pair<std::int32_t, bool>> chunk;
    if (d.grammar == "facts") {
      const auto& k = t.fact_keys[static_cast<std::size_t>(rng.below(t.fact_keys.size()))];
      chunk = {{k.first, false}, {k.second, false}, {kEqualsToken, false}, {t.facts.at(k), true}};
    } else if (d.grammar == "modular") {
      const std::int32_t a = content(), b = content();
      const std::int32_t sum = d.token_lo + ((a - d.token_lo) + (b - d.token_lo)) % r;
      chunk = {{a, false}, {b, false}, {kEqualsToken, false}, {sum, true}};
    } else if (d.grammar == "affine") {
      const std::int32_t a = content(), b = content();
      const std::int32_t v = d.token_lo + (2 * (a - d.token_lo) + (b - d.token_lo)) % r;
      chunk = {{a, false}, {b, false}, {kEqualsToken, false}, {v, true}};
    } else if (d.grammar == "difference") {
      const std::int32_t a = content(), b = content();
      const std::int32_t diff = d.token_lo + ((a - d.token_lo) - (b - d.token_lo) + r) % r;
      chunk = {{a, false}, {b, false}, {kEqualsToken, false}, {diff, true}};
    } else if (d.grammar == "successor") {
      const std::int32_t a = content(), b = content();
      chunk = {{a, false}, {b, false}, {kEqualsToken, false}, {d.token_lo + (b - d.token_lo + 1) % r, true}};
    } else {  // copy
      const std::int32_t a = content(), b = content();
      chunk = {{a, false}, {b, false}, {kEqualsToken, false}, {a, true}};
    }
    if (s.tokens.size() + chunk.size() > n) {
      while (s.tokens.size() < n) s.push(kPadToken, false);
      break;
    }
    for (const auto& [tok, pred] : chunk) s.push(tok, pred);
  }
  return s;
}

inline LabeledSequence to_labeled(const std::string& task, const RawSequence& raw) {
  LabeledSequence out;
  out.task = task;
  const std::size_t len = raw.tokens.size() - 1;
  out.input.assign(raw.tokens.begin(), raw.tokens.begin() + static_cast<std::ptrdiff_t>(len));
  out.target.resize(len);
  for (std::size_t i = 0; i < len; ++i) {
    out.target[i] = raw.predictable[i + 1] ? raw.tokens[i + 1] : kIgnoreTarget;
  }
  return out;
}

}  // namespace detail

/// Generate every split of one domain. Eval is drawn first; the other splits
/// reject any sequence that also occurs in eval.
inline std::map<std::string, std::vector<LabeledSequence>> generate_domain(
    const SyntheticSuiteConfig& config, const DomainSpec& d) {
  const auto tables = detail::make_tables(config, d);
  std::set<std::vector<std::int32_t>> eval_inputs;
  std::map<std::string, std::vector<LabeledSequence>> out;
  for (const std::string split : {"eval", "train", "pretrain"}) {
    RngStream rng(config.seed, detail::name_hash(d.name + "/" + split));
    const std::size_t want = config.split_sizes.at(split);
    auto& records = out[split];
    std::size_t attempts = 0;
    while (records.size() < want) {
      if (++attempts > 100 * want + 1000) {
        throw ArgumentError("domain '" + d.name + "' cannot produce " + std::to_string(want) +
                            " sequences for split '" + split + "' without train/eval overlap");
      }
      auto rec = detail::to_labeled(d.name, detail::draw_sequence(config, d, tables, rng));
      if (split == "eval") {
        eval_inputs.insert(rec.input);
      } else if (eval_inputs.count(rec.input)) {
        continue;
      }
      records.push_back(std::move(rec));
    }
  }
  return out;
}

inline std::string split_file_name(const std::string& domain, const std::string& split) {
  return domain + "_" + split + ".jsonl";
}

inline std::string to_jsonl_line(const LabeledSequence& s) {
  nlohmann::ordered_json j;
  j["task"] = s.task;
  j["input"] = s.input;
  if (s.class_label) {
    j["target"] = s.target.at(0);
  } else {
    j["target"] = s.target;
  }
  return j.dump();
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<LabeledSequence>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << to_jsonl_line(r) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

/// Write one JSONL file per (domain, split) plus suite.json; returns the data files.
inline std::vector<std::filesystem::path> generate_suite(const SyntheticSuiteConfig& config,
                                                         const std::filesystem::path& dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> files;
  for (const auto& d : config.domains) {
    auto splits = generate_domain(config, d);
    for (const auto& s : split_names()) {
      files.push_back(dir / split_file_name(d.name, s));
      write_jsonl(files.back(), splits.at(s));
    }
  }
  std::ofstream meta(dir / "suite.json", std::ios::binary | std::ios::trunc);
  if (!meta) throw IoError("cannot write " + (dir / "suite.json").string());
  meta << nlohmann::json(config).dump(2) << '\n';
  return files;
}

inline SyntheticSuiteConfig load_suite_config(const std::filesystem::path& dir) {
  std::ifstream in(dir / "suite.json", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "suite.json").string());
  try {
    auto c = nlohmann::json::parse(in).get<SyntheticSuiteConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("suite.json: " + std::string(e.what()));
  }
}

/// Parse one JSONL file. Token ids must be < vocab; `line` numbers are 1-based.
inline std::vector<LabeledSequence> load_split(const std::filesystem::path& path, std::size_t vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<LabeledSequence> out;
  std::string text;
  std::size_t line = 0;
  const auto limit = static_cast<std::int64_t>(vocab);
  auto check_token = [&](const nlohmann::json& v, const std::string& field, bool allow_ignore) {
    if (!v.is_number_integer()) throw ValidationError("expected an integer", line, field);
    const auto t = v.get<std::int64_t>();
    if (allow_ignore && t == kIgnoreTarget) return static_cast<std::int32_t>(t);
    if (t < 0 || t >= limit) {
      throw ValidationError("token id " + std::to_string(t) + " outside [0, " +
                                std::to_string(vocab) + ")",
                            line, field);
    }
    return static_cast<std::int32_t>(t);
  };
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), line);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", line);
    for (const char* key : {"task", "input", "target"}) {
      if (!j.contains(key)) throw ValidationError("missing field", line, key);
    }
    LabeledSequence rec;
    if (!j["task"].is_string()) throw ValidationError("expected a string", line, "task");
    rec.task = j["task"].get<std::string>();
    if (!j["input"].is_array()) throw ValidationError("expected an array", line, "input");
    for (std::size_t i = 0; i < j["input"].size(); ++i) {
      rec.input.push_back(check_token(j["input"][i], "input[" + std::to_string(i) + "]", false));
    }
    const auto& tgt = j["target"];
    if (tgt.is_array()) {
      for (std::size_t i = 0; i < tgt.size(); ++i) {
        rec.target.push_back(check_token(tgt[i], "target[" + std::to_string(i) + "]", true));
      }
      if (rec.target.size() != rec.input.size()) {
        throw ValidationError("target length " + std::to_string(rec.target.size()) +
                                  " differs from input length " + std::to_string(rec.input.size()),
                              line, "target");
      }
    } else if (tgt.is_number_integer()) {
      rec.class_label = true;
      rec.target.push_back(check_token(tgt, "target", false));
    } else {
      throw ValidationError("expected an array or an integer", line, "target");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<LabeledSequence> load_split(const std::filesystem::path& dir,
                                               const std::string& domain, const std::string& split,
                                               std::size_t vocab) {
  return load_split(dir / split_file_name(domain, split), vocab);
}

/// Every split of every domain, keyed domain -> split.
struct SuiteData {
  SyntheticSuiteConfig config;
  std::map<std::string, std::map<std::string, std::vector<LabeledSequence>>> splits;

  const std::vector<LabeledSequence>& get(const std::string& domain, const std::string& split) const {
    auto d = splits.find(domain);
    if (d == splits.end()) throw ArgumentError("no data for domain '" + domain + "'");
    auto s = d->second.find(split);
    if (s == d->second.end()) throw ArgumentError("no split '" + split + "' for '" + domain + "'");
    return s->second;
  }
};

inline SuiteData load_suite(const std::filesystem::path& dir) {
  SuiteData data;
  data.config = load_suite_config(dir);
  for (const auto& d : data.config.domains) {
    for (const auto& s : split_names()) {
      data.splits[d.name][s] = load_split(dir, d.name, s, data.config.vocab);
    }
  }
  return data;
}

/// In-memory equivalent of generate_suite followed by load_suite.
inline SuiteData make_suite(const SyntheticSuiteConfig& config) {
  config.validate();
  SuiteData data;
  data.config = config;
  for (const auto& d : config.domains) data.splits[d.name] = generate_domain(config, d);
  return data;
}

/// Pack sequence records into a tinylm batch, in the given order.
inline Batch make_lm_batch(const std::vector<LabeledSequence>& records,
                           const std::vector<std::size_t>& indices) {
  ILU_REQUIRE(!indices.empty(), "batch needs at least one record");
  Batch b;
  b.examples = indices.size();
  b.seq_len = records.at(indices[0]).input.size();
  b.tokens.reserve(b.examples * b.seq_len);
  b.targets.reserve(b.examples * b.seq_len);
  for (auto i : indices) {
    const auto& r = records.at(i);
    if (r.class_label) throw ArgumentError("class-label record in a sequence batch");
    if (r.input.size() != b.seq_len) throw ArgumentError("records of unequal length in one batch");
    b.tokens.insert(b.tokens.end(), r.input.begin(), r.input.end());
    b.targets.insert(b.targets.end(), r.target.begin(), r.target.end());
  }
  return b;
}

inline Batch make_lm_batch(const std::vector<LabeledSequence>& records) {
  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_lm_batch(records, all);
}

/// Content tokens (outside the function band) used anywhere in the records.
inline std::set<std::int32_t> content_tokens(const std::vector<LabeledSequence>& records,
                                             std::int32_t function_band) {
  std::set<std::int32_t> out;
  for (const auto& r : records) {
    for (auto t : r.input) {
      if (t >= function_band) out.insert(t);
    }
    if (!r.class_label) {
      for (auto t : r.target) {
        if (t >= function_band) out.insert(t);
      }
    }
  }
  return out;
}

}  // namespace ilu
