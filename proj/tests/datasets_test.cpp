#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ilu/checkpoint.hpp"
#include "ilu/datasets.hpp"

namespace ilu {
namespace {

namespace fs = std::filesystem;

SyntheticSuiteConfig small_suite(std::uint64_t seed = 3) {
  SyntheticSuiteConfig c;
  c.seed = seed;
  c.split_sizes = {{"pretrain", 200}, {"train", 200}, {"eval", 200}};
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ilu_datasets_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  auto bytes = read_file_bytes(p);
  return {bytes.begin(), bytes.end()};
}

TEST(GenerateSuite, WritesOneFilePerDomainAndSplit) {
  auto dir = scratch("count");
  auto files = generate_suite(small_suite(), dir);
  EXPECT_EQ(files.size(), 15u);
  for (const auto& f : files) {
    std::ifstream in(f);
    std::size_t lines = 0;
    std::string s;
    while (std::getline(in, s)) ++lines;
    EXPECT_EQ(lines, 200u) << f;
  }
  fs::remove_all(dir);
}

TEST(GenerateSuite, SameSeedGivesByteIdenticalFiles) {
  auto a = scratch("det_a"), b = scratch("det_b");
  auto fa = generate_suite(small_suite(), a);
  auto fb = generate_suite(small_suite(), b);
  for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(slurp(fa[i]), slurp(fb[i]));
  EXPECT_EQ(slurp(a / "suite.json"), slurp(b / "suite.json"));
  auto c = scratch("det_c");
  auto fc = generate_suite(small_suite(4), c);
  EXPECT_NE(slurp(fa[0]), slurp(fc[0]));
  for (auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(GenerateSuite, RoundTripsThroughFiles) {
  auto dir = scratch("roundtrip");
  auto config = small_suite();
  generate_suite(config, dir);
  auto loaded = load_suite(dir);
  auto memory = make_suite(config);
  EXPECT_EQ(nlohmann::json(loaded.config), nlohmann::json(config));
  EXPECT_EQ(loaded.splits, memory.splits);
  fs::remove_all(dir);
}

TEST(GenerateSuite, DomainsShareOnlyTheFunctionBand) {
  auto data = make_suite(small_suite());
  const auto& c = data.config;
  std::map<std::string, std::set<std::int32_t>> used;
  for (const auto& d : c.domains) {
    for (const auto& s : split_names()) {
      auto t = content_tokens(data.get(d.name, s), c.function_band);
      used[d.name].insert(t.begin(), t.end());
    }
    for (auto t : used[d.name]) {
      EXPECT_GE(t, d.token_lo);
      EXPECT_LT(t, d.token_hi);
    }
  }
  for (const auto& [a, ta] : used) {
    for (const auto& [b, tb] : used) {
      if (a >= b) continue;
      std::vector<std::int32_t> both;
      std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(both));
      EXPECT_TRUE(both.empty()) << a << " vs " << b;
    }
  }
}

TEST(GenerateSuite, EvalNeverLeaksIntoTrainingSplits) {
  auto data = make_suite(small_suite());
  for (const auto& d : data.config.domains) {
    std::set<std::vector<std::int32_t>> eval;
    for (const auto& r : data.get(d.name, "eval")) eval.insert(r.input);
    for (const std::string s : {"train", "pretrain"}) {
      for (const auto& r : data.get(d.name, s)) EXPECT_EQ(eval.count(r.input), 0u) << d.name;
    }
  }
}

TEST(GenerateSuite, SequencesFollowTheirGrammar) {
  auto data = make_suite(small_suite());
  const auto& c = data.config;
  for (const auto& d : c.domains) {
    for (const auto& r : data.get(d.name, "train")) {
      ASSERT_EQ(r.input.size(), c.seq_len);
      ASSERT_EQ(r.target.size(), c.seq_len);
      EXPECT_EQ(r.input[0], kBosToken);
      for (std::size_t i = 0; i + 1 < r.input.size(); ++i) {
        if (r.target[i] != kIgnoreTarget) EXPECT_EQ(r.target[i], r.input[i + 1]);
      }
      if (d.grammar == "modular") {
        for (std::size_t i = 2; i + 1 < r.input.size(); ++i) {
          if (r.input[i] != kEqualsToken) continue;
          const auto a = r.input[i - 2] - d.token_lo, b = r.input[i - 1] - d.token_lo;
          EXPECT_EQ(r.target[i], d.token_lo + (a + b) % d.range());
        }
      }
    }
  }
}

TEST(GenerateSuite, FactsAreConsistentAcrossSplits) {
  auto data = make_suite(small_suite());
  std::map<std::pair<int, int>, int> table;
  for (const auto& s : split_names()) {
    for (const auto& r : data.get("forget", s)) {
      for (std::size_t i = 2; i < r.input.size(); ++i) {
        if (r.input[i] != kEqualsToken || r.target[i] == kIgnoreTarget) continue;
        auto key = std::make_pair(r.input[i - 2], r.input[i - 1]);
        auto [it, inserted] = table.emplace(key, r.target[i]);
        EXPECT_EQ(it->second, r.target[i]);
      }
    }
  }
  EXPECT_EQ(table.size(), data.config.facts);
}

TEST(SuiteConfig, RejectsOverlappingRangesAndBadSizes) {
  auto c = small_suite();
  c.domains[1].token_lo = 10;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = small_suite();
  c.domains[0].token_lo = 2;  // inside the function band
  EXPECT_THROW(c.validate(), ArgumentError);
  c = small_suite();
  c.split_sizes["eval"] = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = small_suite();
  c.domains[2].grammar = "nonsense";
  EXPECT_THROW(c.validate(), ArgumentError);
  EXPECT_THROW(nlohmann::json::parse(R"({"vocab": 64, "colour": 1})").get<SyntheticSuiteConfig>(),
               ConfigError);
}

TEST(LoadSplit, EmptyFileGivesEmptyList) {
  auto dir = scratch("empty");
  fs::create_directories(dir);
  std::ofstream(dir / "x.jsonl").close();
  EXPECT_TRUE(load_split(dir / "x.jsonl", 64).empty());
  fs::remove_all(dir);
}

TEST(LoadSplit, ReportsLineAndField) {
  auto dir = scratch("errors");
  fs::create_directories(dir);
  auto write = [&](const std::string& body) {
    std::ofstream(dir / "x.jsonl") << body;
    return dir / "x.jsonl";
  };
  const std::string ok = R"({"task":"T1","input":[1,5],"target":[5,-1]})";
  try {
    load_split(write(ok + "\n" + R"({"task":"T1","input":[1,64],"target":[5,-1]})" + "\n"), 64);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_EQ(e.field(), "input[1]");
  }
  try {
    load_split(write(ok + "\n" + ok + "\n{not json\n"), 64);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(load_split(write(R"({"task":"T1","input":[1,5],"target":[5]})"), 64),
               ValidationError);
  EXPECT_THROW(load_split(write(R"({"task":"T1","input":[1,5]})"), 64), ValidationError);
  auto cls = load_split(write(R"({"task":"sst","input":[1,5],"target":3})"), 64);
  ASSERT_EQ(cls.size(), 1u);
  EXPECT_TRUE(cls[0].class_label);
  EXPECT_EQ(cls[0].target, std::vector<std::int32_t>{3});
  EXPECT_THROW(load_split(dir / "missing.jsonl", 64), IoError);
  fs::remove_all(dir);
}

TEST(MakeLmBatch, PacksRecordsInOrder) {
  auto data = make_suite(small_suite());
  const auto& recs = data.get("T1", "train");
  auto b = make_lm_batch(recs, {3, 1});
  EXPECT_EQ(b.examples, 2u);
  EXPECT_EQ(b.seq_len, 32u);
  EXPECT_EQ(std::vector<std::int32_t>(b.tokens.begin(), b.tokens.begin() + 32), recs[3].input);
  EXPECT_EQ(std::vector<std::int32_t>(b.targets.begin() + 32, b.targets.end()), recs[1].target);
}

}  // namespace
}  // namespace ilu
