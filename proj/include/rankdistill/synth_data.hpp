#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rankdistill/encoder.hpp"

namespace rankdistill {

// Ranking task whose ground truth is query/document token overlap.
// Relevant documents share at least pos_overlap_min distinct query tokens,
// irrelevant ones at most neg_overlap_max. With probability noise_prob a
// sample is "hard": its overlap sits exactly on the threshold.
struct SyntheticTaskSpec {
  std::size_t vocab_size = 200;
  std::size_t query_len = 8;
  std::size_t doc_len = 24;
  std::size_t pos_overlap_min = 6;
  std::size_t neg_overlap_max = 1;
  double noise_prob = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SyntheticTaskSpec&) const = default;
};

void to_json(nlohmann::json& j, const SyntheticTaskSpec& s);
void from_json(const nlohmann::json& j, SyntheticTaskSpec& s);

struct Triple {
  std::vector<TokenId> query;
  std::vector<TokenId> pos_doc;
  std::vector<TokenId> neg_doc;
};

struct DevQuery {
  std::string qid;
  std::vector<TokenId> query;
  std::vector<std::string> doc_ids;
  std::vector<std::vector<TokenId>> candidates;
  std::vector<int> labels;  // 1 = relevant
};

struct DevSet {
  std::vector<DevQuery> queries;

  std::size_t candidate_count() const;
  // Stable content hash (hex) over queries, candidates and labels.
  std::string fingerprint() const;
};

// |set(query) ∩ set(doc)| / |set(query)|
double relevance_oracle(std::span<const TokenId> query, std::span<const TokenId> doc);

std::vector<Triple> gen_triples(const SyntheticTaskSpec& spec, std::size_t n);
DevSet gen_devset(const SyntheticTaskSpec& spec, std::size_t n_queries,
                  std::size_t n_candidates, std::size_t n_relevant);

// FNV-1a 64-bit hash of the token string, reduced mod vocab_size.
TokenId hash_token(std::string_view token, std::size_t vocab_size);
std::vector<TokenId> tokenize(std::string_view text, std::size_t vocab_size);

// hash: whitespace tokens go through hash_token. ids: tokens are decimal ids
// below vocab_size, as written by the writers below.
enum class TokenFormat { hash, ids };

TokenFormat token_format_from_string(const std::string& name);
std::string to_string(TokenFormat format);

// "query<TAB>positive<TAB>negative" per line.
std::vector<Triple> load_triples_tsv(const std::filesystem::path& path,
                                     std::size_t vocab_size,
                                     TokenFormat format = TokenFormat::hash);
// "qid<TAB>docid<TAB>query<TAB>doc<TAB>label" per line, grouped by qid in
// order of first appearance.
DevSet load_devset_tsv(const std::filesystem::path& path, std::size_t vocab_size,
                       TokenFormat format = TokenFormat::hash);

// Tokens are written as their decimal ids.
void write_triples_tsv(const std::filesystem::path& path, std::span<const Triple> triples);
void write_devset_tsv(const std::filesystem::path& path, const DevSet& devset);

}  // namespace rankdistill
