#include "rankdistill/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace rankdistill {

RankedList rank_by_scores(std::span<const double> scores) {
  RankedList r;
  r.order.resize(scores.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  r.scores.reserve(scores.size());
  for (std::size_t i : r.order) r.scores.push_back(scores[i]);
  return r;
}

std::vector<RankedList> rerank_with(const DevSet& devset, const DocScorer& scorer) {
  std::vector<RankedList> out;
  out.reserve(devset.queries.size());
  for (const auto& q : devset.queries) {
    std::vector<double> scores;
    scores.reserve(q.candidates.size());
    for (const auto& doc : q.candidates) scores.push_back(scorer(q.query, doc));
    out.push_back(rank_by_scores(scores));
  }
  return out;
}

std::vector<RankedList> rerank(const EncoderParams& params, const DevSet& devset,
                               ScoreMode mode) {
  NoGradGuard no_grad;
  return rerank_with(devset, [&](std::span<const TokenId> query, std::span<const TokenId> doc) {
    return ranking_score(encode(params, pack_input(query, doc, params.config)), mode).item();
  });
}

double reciprocal_rank(const RankedList& ranked, std::span<const int> labels, std::size_t k) {
  if (labels.empty()) throw std::invalid_argument("reciprocal_rank: query has no labels");
  if (labels.size() != ranked.order.size()) {
    throw std::invalid_argument("reciprocal_rank: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(ranked.order.size()) +
                                " candidates");
  }
  const std::size_t depth = std::min(k, ranked.order.size());
  for (std::size_t r = 0; r < depth; ++r) {
    if (labels[ranked.order[r]] > 0) return 1.0 / static_cast<double>(r + 1);
  }
  return 0.0;
}

std::vector<double> reciprocal_ranks(std::span<const RankedList> ranked,
                                     const std::vector<std::vector<int>>& labels,
                                     std::size_t k) {
  if (ranked.size() != labels.size()) {
    throw std::invalid_argument("mrr: ranked lists and label lists differ in length");
  }
  std::vector<double> rr;
  rr.reserve(ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i)
    rr.push_back(reciprocal_rank(ranked[i], labels[i], k));
  return rr;
}

double mrr_at_k(std::span<const RankedList> ranked,
                const std::vector<std::vector<int>>& labels, std::size_t k) {
  if (ranked.empty()) throw std::invalid_argument("mrr_at_k: no queries");
  const auto rr = reciprocal_ranks(ranked, labels, k);
  // Fixed left-to-right reduction keeps the mean bitwise stable.
  double total = 0.0;
  for (double v : rr) total += v;
  return total / static_cast<double>(rr.size());
}

std::vector<std::vector<int>> devset_labels(const DevSet& devset) {
  std::vector<std::vector<int>> out;
  for (const auto& q : devset.queries) out.push_back(q.labels);
  return out;
}

void to_json(nlohmann::json& j, const RunReport& r) {
  j = nlohmann::json{{"suite", r.suite},
                     {"method", r.method},
                     {"config_hash", r.config_hash},
                     {"devset_fingerprint", r.devset_fingerprint},
                     {"seed", r.seed},
                     {"fraction", r.fraction},
                     {"mrr_at_10", r.mrr_at_10},
                     {"per_query_rr", r.per_query_rr},
                     {"wall_seconds", r.wall_seconds}};
}

void from_json(const nlohmann::json& j, RunReport& r) {
  r.suite = j.value("suite", "");
  r.method = j.value("method", "");
  r.config_hash = j.value("config_hash", "");
  r.devset_fingerprint = j.at("devset_fingerprint").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.fraction = j.value("fraction", 1.0);
  r.mrr_at_10 = j.at("mrr_at_10").get<double>();
  r.per_query_rr = j.at("per_query_rr").get<std::vector<double>>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
}

RunReport evaluate(const std::vector<RankedList>& ranked, const DevSet& devset) {
  RunReport r;
  r.devset_fingerprint = devset.fingerprint();
  const auto labels = devset_labels(devset);
  r.per_query_rr = reciprocal_ranks(ranked, labels, 10);
  r.mrr_at_10 = mrr_at_k(ranked, labels, 10);
  return r;
}

void write_run_file(const std::filesystem::path& path, const DevSet& devset,
                    std::span<const RankedList> ranked) {
  if (ranked.size() != devset.queries.size()) {
    throw std::invalid_argument("write_run_file: ranked lists do not match the devset");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char score[32];
  for (std::size_t qi = 0; qi < ranked.size(); ++qi) {
    const auto& q = devset.queries[qi];
    for (std::size_t r = 0; r < ranked[qi].order.size(); ++r) {
      std::snprintf(score, sizeof score, "%.17g", ranked[qi].scores[r]);
      out << q.qid << ' ' << q.doc_ids[ranked[qi].order[r]] << ' ' << (r + 1) << ' '
          << score << '\n';
    }
  }
}

}  // namespace rankdistill
