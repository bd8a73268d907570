#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rankdistill/encoder.hpp"
#include "rankdistill/synth_data.hpp"

namespace rankdistill {

// Candidate indices by descending score; equal scores keep ascending index.
struct RankedList {
  std::vector<std::size_t> order;
  std::vector<double> scores;  // scores[i] belongs to order[i]
};

RankedList rank_by_scores(std::span<const double> scores);

using DocScorer =
    std::function<double(std::span<const TokenId> query, std::span<const TokenId> doc)>;

std::vector<RankedList> rerank_with(const DevSet& devset, const DocScorer& scorer);
std::vector<RankedList> rerank(const EncoderParams& params, const DevSet& devset,
                               ScoreMode mode = ScoreMode::probability);

// 1/rank of the first relevant candidate within the top k, else 0.
double reciprocal_rank(const RankedList& ranked, std::span<const int> labels,
                       std::size_t k = 10);
std::vector<double> reciprocal_ranks(std::span<const RankedList> ranked,
                                     const std::vector<std::vector<int>>& labels,
                                     std::size_t k = 10);
double mrr_at_k(std::span<const RankedList> ranked,
                const std::vector<std::vector<int>>& labels, std::size_t k = 10);

std::vector<std::vector<int>> devset_labels(const DevSet& devset);

struct RunReport {
  std::string suite;
  std::string method;
  std::string config_hash;
  std::string devset_fingerprint;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  double mrr_at_10 = 0.0;
  std::vector<double> per_query_rr;
  double wall_seconds = 0.0;
};

void to_json(nlohmann::json& j, const RunReport& r);
void from_json(const nlohmann::json& j, RunReport& r);

RunReport evaluate(const std::vector<RankedList>& ranked, const DevSet& devset);

// "qid docid rank score" per line, rank starting at 1.
void write_run_file(const std::filesystem::path& path, const DevSet& devset,
                    std::span<const RankedList> ranked);

}  // namespace rankdistill
