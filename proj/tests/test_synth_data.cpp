#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "rankdistill/synth_data.hpp"

using namespace rankdistill;
namespace fs = std::filesystem;

namespace {

// Counts distinct shared tokens directly, as an independent oracle.
std::size_t shared_count(const std::vector<TokenId>& q, const std::vector<TokenId>& d) {
  std::size_t n = 0;
  std::set<TokenId> seen;
  for (TokenId t : q) {
    if (seen.count(t)) continue;
    seen.insert(t);
    for (TokenId u : d)
      if (u == t) {
        ++n;
        break;
      }
  }
  return n;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rankdistill_test_synth";
  fs::create_directories(dir);
  return dir / name;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

// |observed - expected| within z binomial standard deviations.
bool near_binomial(std::size_t hits, std::size_t n, double p, double z = 4.5) {
  const double sd = std::sqrt(n * p * (1 - p));
  return std::abs(static_cast<double>(hits) - n * p) <= z * sd + 1.0;
}

}  // namespace

TEST_CASE("relevance_oracle examples") {
  const std::vector<TokenId> q{1, 2, 3, 4};
  CHECK(relevance_oracle(q, q) == 1.0);
  CHECK(relevance_oracle(q, std::vector<TokenId>{10, 11, 12}) == 0.0);
  CHECK(relevance_oracle(q, std::vector<TokenId>{9, 2, 7, 4}) == 0.5);
  CHECK(relevance_oracle(q, std::vector<TokenId>{4, 2, 9, 7}) == 0.5);
  CHECK(relevance_oracle(q, std::vector<TokenId>{2, 2, 2}) == 0.25);
  CHECK_THROWS_AS(relevance_oracle({}, q), std::invalid_argument);
}

TEST_CASE("SyntheticTaskSpec validation") {
  SyntheticTaskSpec s;
  CHECK_NOTHROW(s.validate());
  s.neg_overlap_max = s.pos_overlap_min;
  CHECK_THROWS(s.validate());
  s = {};
  s.pos_overlap_min = s.query_len + 1;
  CHECK_THROWS(s.validate());
  s = {};
  s.vocab_size = s.query_len + s.doc_len;
  CHECK_THROWS(s.validate());
  s = {};
  s.noise_prob = 1.5;
  CHECK_THROWS(s.validate());
  s = {};
  s.pos_overlap_min = s.doc_len + 1;
  s.query_len = s.doc_len + 2;
  s.vocab_size = 1000;
  CHECK_THROWS(gen_triples(s, 1));
  CHECK_THROWS(gen_triples(SyntheticTaskSpec{}, 0));
  const nlohmann::json j = SyntheticTaskSpec{};
  CHECK(j.get<SyntheticTaskSpec>() == SyntheticTaskSpec{});
}

TEST_CASE("gen_triples: invariant, shapes and determinism") {
  const SyntheticTaskSpec spec;
  const auto a = gen_triples(spec, 500);
  const auto b = gen_triples(spec, 500);
  REQUIRE(a.size() == 500);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& t = a[i];
    CHECK(t.query == b[i].query);
    CHECK(t.pos_doc == b[i].pos_doc);
    CHECK(t.neg_doc == b[i].neg_doc);
    CHECK(t.query.size() == spec.query_len);
    CHECK(t.pos_doc.size() == spec.doc_len);
    CHECK(t.neg_doc.size() == spec.doc_len);
    CHECK(std::set<TokenId>(t.query.begin(), t.query.end()).size() == spec.query_len);
    CHECK(relevance_oracle(t.query, t.pos_doc) > relevance_oracle(t.query, t.neg_doc));
    CHECK(shared_count(t.query, t.pos_doc) >= spec.pos_overlap_min);
    CHECK(shared_count(t.query, t.neg_doc) <= spec.neg_overlap_max);
    for (TokenId x : t.pos_doc) CHECK(x < spec.vocab_size);
  }
  // A prefix of a longer run is the shorter run.
  const auto longer = gen_triples(spec, 600);
  CHECK(longer[499].pos_doc == a[499].pos_doc);
  SyntheticTaskSpec other = spec;
  other.seed = 1;
  CHECK(gen_triples(other, 1)[0].query != a[0].query);
}

TEST_CASE("gen_triples overlap histograms on 10k samples") {
  const SyntheticTaskSpec spec;
  const std::size_t n = 10000;
  const auto triples = gen_triples(spec, n);
  const std::size_t pos_values = spec.query_len - spec.pos_overlap_min + 1;
  const std::size_t neg_values = spec.neg_overlap_max + 1;
  std::vector<std::size_t> pos_hist(spec.query_len + 1), neg_hist(spec.query_len + 1);
  std::size_t both_at_threshold = 0;
  for (const auto& t : triples) {
    const auto p = shared_count(t.query, t.pos_doc);
    const auto q = shared_count(t.query, t.neg_doc);
    ++pos_hist[p];
    ++neg_hist[q];
    if (p == spec.pos_overlap_min && q == spec.neg_overlap_max) ++both_at_threshold;
  }
  for (std::size_t v = 0; v < spec.pos_overlap_min; ++v) CHECK(pos_hist[v] == 0);
  for (std::size_t v = spec.neg_overlap_max + 1; v <= spec.query_len; ++v) CHECK(neg_hist[v] == 0);
  const double hard = spec.noise_prob;
  // Hard draws land on the thresholds; the rest are uniform over the range.
  for (std::size_t v = spec.pos_overlap_min; v <= spec.query_len; ++v) {
    double p = (1 - hard) / pos_values;
    if (v == spec.pos_overlap_min) p += hard;
    CHECK(near_binomial(pos_hist[v], n, p));
  }
  for (std::size_t v = 0; v <= spec.neg_overlap_max; ++v) {
    double p = (1 - hard) / neg_values;
    if (v == spec.neg_overlap_max) p += hard;
    CHECK(near_binomial(neg_hist[v], n, p));
  }
  // One shared hard draw per triple moves both sides together.
  const double p_both = hard + (1 - hard) / (pos_values * neg_values);
  CHECK(near_binomial(both_at_threshold, n, p_both));
}

TEST_CASE("gen_devset labels, counts and histograms") {
  const SyntheticTaskSpec spec;
  const auto dev = gen_devset(spec, 200, 50, 2);
  CHECK(dev.queries.size() == 200);
  CHECK(dev.candidate_count() == 50);
  std::size_t rel = 0, rel_at_min = 0, irr = 0, irr_at_max = 0;
  for (const auto& q : dev.queries) {
    CHECK(q.candidates.size() == 50);
    CHECK(q.labels.size() == 50);
    CHECK(std::count(q.labels.begin(), q.labels.end(), 1) == 2);
    std::set<std::string> ids(q.doc_ids.begin(), q.doc_ids.end());
    CHECK(ids.size() == 50);
    for (std::size_t c = 0; c < 50; ++c) {
      const auto k = shared_count(q.query, q.candidates[c]);
      if (q.labels[c]) {
        CHECK(k >= spec.pos_overlap_min);
        ++rel;
        rel_at_min += k == spec.pos_overlap_min;
      } else {
        CHECK(k <= spec.neg_overlap_max);
        ++irr;
        irr_at_max += k == spec.neg_overlap_max;
      }
    }
  }
  const double pos_values = spec.query_len - spec.pos_overlap_min + 1;
  CHECK(near_binomial(rel_at_min, rel, spec.noise_prob + (1 - spec.noise_prob) / pos_values));
  CHECK(near_binomial(irr_at_max, irr,
                      spec.noise_prob + (1 - spec.noise_prob) / (spec.neg_overlap_max + 1)));

  const auto again = gen_devset(spec, 200, 50, 2);
  CHECK(again.fingerprint() == dev.fingerprint());
  CHECK(gen_devset(spec, 200, 50, 1).fingerprint() != dev.fingerprint());
  CHECK_THROWS(gen_devset(spec, 10, 5, 0));
  CHECK_THROWS(gen_devset(spec, 10, 5, 5));
  CHECK_THROWS(gen_devset(spec, 0, 5, 1));
}

TEST_CASE("hash tokenizer is deterministic and in range") {
  CHECK(hash_token("query", 200) == hash_token("query", 200));
  CHECK(hash_token("query", 200) < 200);
  const auto t = tokenize("  what is\tthe  answer \n", 1000);
  CHECK(t.size() == 4);
  CHECK(t[2] == hash_token("the", 1000));
  CHECK(tokenize("", 10).empty());
  CHECK_THROWS(hash_token("x", 0));
}

TEST_CASE("TSV triples: well-formed file, malformed line and missing file") {
  const auto good = scratch("good.tsv");
  write_file(good, "a b c\td e\tf g\nh i\tj\tk l m\n");
  const auto t = load_triples_tsv(good, 100);
  REQUIRE(t.size() == 2);
  CHECK(t[0].query.size() == 3);
  CHECK(t[1].neg_doc.size() == 3);
  CHECK(t[0].query[0] == hash_token("a", 100));

  const auto bad = scratch("bad.tsv");
  write_file(bad, "a\tb\tc\nonly\ttwo\n");
  CHECK_THROWS_WITH(load_triples_tsv(bad, 100), doctest::Contains(":2:"));
  write_file(bad, "a\t\tc\n");
  CHECK_THROWS_WITH(load_triples_tsv(bad, 100), doctest::Contains(":1:"));
  CHECK_THROWS(load_triples_tsv(scratch("nope.tsv"), 100));
}

TEST_CASE("TSV devset: grouping, labels and validation") {
  const auto p = scratch("dev.tsv");
  write_file(p,
             "q1\td1\thello world\thello there\t1\n"
             "q2\td3\tfoo\tbar\t0\n"
             "q1\td2\thello world\tnothing\t0\n"
             "q2\td4\tfoo\tfoo bar\t1\n");
  const auto dev = load_devset_tsv(p, 100);
  REQUIRE(dev.queries.size() == 2);
  CHECK(dev.queries[0].qid == "q1");
  CHECK(dev.queries[0].doc_ids == std::vector<std::string>{"d1", "d2"});
  CHECK(dev.queries[0].labels == std::vector<int>{1, 0});
  CHECK(dev.queries[1].labels == std::vector<int>{0, 1});

  write_file(p, "q1\td1\tx\ty\t0\n");
  CHECK_THROWS_WITH(load_devset_tsv(p, 100), doctest::Contains("no relevant"));
  write_file(p, "q1\td1\tx\ty\tyes\n");
  CHECK_THROWS_WITH(load_devset_tsv(p, 100), doctest::Contains(":1:"));
  write_file(p, "q1\td1\tx\ty\n");
  CHECK_THROWS_WITH(load_devset_tsv(p, 100), doctest::Contains("5 tab-separated"));
}

TEST_CASE("generated data round-trips through TSV in id format") {
  const SyntheticTaskSpec spec;
  const auto triples = gen_triples(spec, 50);
  const auto dev = gen_devset(spec, 5, 20, 1);
  write_triples_tsv(scratch("rt_triples.tsv"), triples);
  write_devset_tsv(scratch("rt_dev.tsv"), dev);
  const auto t2 = load_triples_tsv(scratch("rt_triples.tsv"), spec.vocab_size, TokenFormat::ids);
  const auto d2 = load_devset_tsv(scratch("rt_dev.tsv"), spec.vocab_size, TokenFormat::ids);
  REQUIRE(t2.size() == triples.size());
  for (std::size_t i = 0; i < t2.size(); ++i) {
    CHECK(t2[i].query == triples[i].query);
    CHECK(t2[i].pos_doc == triples[i].pos_doc);
    CHECK(t2[i].neg_doc == triples[i].neg_doc);
  }
  CHECK(d2.fingerprint() == dev.fingerprint());
  CHECK(d2.queries[3].doc_ids == dev.queries[3].doc_ids);

  write_file(scratch("bad_ids.tsv"), "1 2\t3 x\t4\n");
  CHECK_THROWS_WITH(load_triples_tsv(scratch("bad_ids.tsv"), 200, TokenFormat::ids),
                    doctest::Contains(":1:"));
  write_file(scratch("bad_ids.tsv"), "1 2\t3 200\t4\n");
  CHECK_THROWS(load_triples_tsv(scratch("bad_ids.tsv"), 200, TokenFormat::ids));
}
