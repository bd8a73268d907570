#include "rankdistill/synth_data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "rankdistill/random.hpp"

namespace rankdistill {

namespace {

constexpr std::uint64_t kTripleStream = 0x747269706c6573ULL;
constexpr std::uint64_t kDevStream = 0x64657673657421ULL;
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::vector<TokenId> sample_query(const SyntheticTaskSpec& spec, Rng& rng) {
  std::vector<TokenId> q;
  std::unordered_set<TokenId> seen;
  while (q.size() < spec.query_len) {
    const auto t = static_cast<TokenId>(rng.below(spec.vocab_size));
    if (seen.insert(t).second) q.push_back(t);
  }
  return q;
}

// Document with exactly `overlap` distinct query tokens; the rest are drawn
// from outside the query.
std::vector<TokenId> sample_doc(const SyntheticTaskSpec& spec,
                                std::span<const TokenId> query, std::size_t overlap,
                                Rng& rng) {
  std::vector<TokenId> shared(query.begin(), query.end());
  rng.shuffle(std::span<TokenId>(shared));
  shared.resize(overlap);
  const std::unordered_set<TokenId> in_query(query.begin(), query.end());
  std::vector<TokenId> doc = shared;
  while (doc.size() < spec.doc_len) {
    const auto t = static_cast<TokenId>(rng.below(spec.vocab_size));
    if (!in_query.contains(t)) doc.push_back(t);
  }
  rng.shuffle(std::span<TokenId>(doc));
  return doc;
}

std::size_t positive_overlap(const SyntheticTaskSpec& spec, Rng& rng) {
  if (rng.uniform() < spec.noise_prob) return spec.pos_overlap_min;
  return spec.pos_overlap_min + rng.below(spec.query_len - spec.pos_overlap_min + 1);
}

std::size_t negative_overlap(const SyntheticTaskSpec& spec, Rng& rng) {
  if (rng.uniform() < spec.noise_prob) return spec.neg_overlap_max;
  return rng.below(spec.neg_overlap_max + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string join_ids(std::span<const TokenId> ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(ids[i]);
  }
  return s;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

[[noreturn]] void bad_line(const std::filesystem::path& path, std::size_t line_no,
                           const std::string& what) {
  throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

void SyntheticTaskSpec::validate() const {
  auto fail = [](const std::string& m) {
    throw std::invalid_argument("SyntheticTaskSpec: " + m);
  };
  if (query_len < 1 || doc_len < 1) fail("query_len and doc_len must be positive");
  if (!(neg_overlap_max < pos_overlap_min)) fail("neg_overlap_max must be < pos_overlap_min");
  if (pos_overlap_min > query_len) fail("pos_overlap_min exceeds query_len");
  if (pos_overlap_min > doc_len) fail("pos_overlap_min exceeds doc_len");
  if (vocab_size <= query_len + doc_len) fail("vocab_size must exceed query_len + doc_len");
  if (!(noise_prob >= 0.0 && noise_prob <= 1.0)) fail("noise_prob must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const SyntheticTaskSpec& s) {
  j = nlohmann::json{{"vocab_size", s.vocab_size},
                     {"query_len", s.query_len},
                     {"doc_len", s.doc_len},
                     {"pos_overlap_min", s.pos_overlap_min},
                     {"neg_overlap_max", s.neg_overlap_max},
                     {"noise_prob", s.noise_prob},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticTaskSpec& s) {
  SyntheticTaskSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.query_len = j.value("query_len", d.query_len);
  s.doc_len = j.value("doc_len", d.doc_len);
  s.pos_overlap_min = j.value("pos_overlap_min", d.pos_overlap_min);
  s.neg_overlap_max = j.value("neg_overlap_max", d.neg_overlap_max);
  s.noise_prob = j.value("noise_prob", d.noise_prob);
  s.seed = j.value("seed", d.seed);
}

std::size_t DevSet::candidate_count() const {
  return queries.empty() ? 0 : queries.front().candidates.size();
}

std::string DevSet::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= kFnvPrime;
    }
  };
  mix(queries.size());
  for (const auto& q : queries) {
    mix(q.query.size());
    for (TokenId t : q.query) mix(t);
    mix(q.candidates.size());
    for (std::size_t c = 0; c < q.candidates.size(); ++c) {
      mix(q.candidates[c].size());
      for (TokenId t : q.candidates[c]) mix(t);
      mix(static_cast<std::uint64_t>(q.labels[c]));
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double relevance_oracle(std::span<const TokenId> query, std::span<const TokenId> doc) {
  if (query.empty()) throw std::invalid_argument("relevance_oracle: empty query");
  const std::unordered_set<TokenId> qs(query.begin(), query.end());
  const std::unordered_set<TokenId> ds(doc.begin(), doc.end());
  std::size_t shared = 0;
  for (TokenId t : qs) shared += ds.contains(t) ? 1 : 0;
  return static_cast<double>(shared) / static_cast<double>(qs.size());
}

std::vector<Triple> gen_triples(const SyntheticTaskSpec& spec, std::size_t n) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("gen_triples: n must be at least 1");
  std::vector<Triple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(spec.seed, kTripleStream, i));
    Triple t;
    t.query = sample_query(spec, rng);
    // One shared draw decides whether the pair is hard on both sides.
    const bool hard = rng.uniform() < spec.noise_prob;
    const std::size_t pos =
        hard ? spec.pos_overlap_min
             : spec.pos_overlap_min + rng.below(spec.query_len - spec.pos_overlap_min + 1);
    const std::size_t neg = hard ? spec.neg_overlap_max : rng.below(spec.neg_overlap_max + 1);
    t.pos_doc = sample_doc(spec, t.query, pos, rng);
    t.neg_doc = sample_doc(spec, t.query, neg, rng);
    out.push_back(std::move(t));
  }
  return out;
}

DevSet gen_devset(const SyntheticTaskSpec& spec, std::size_t n_queries,
                  std::size_t n_candidates, std::size_t n_relevant) {
  spec.validate();
  if (n_queries < 1) throw std::invalid_argument("gen_devset: need at least one query");
  if (n_relevant < 1 || n_relevant >= n_candidates) {
    throw std::invalid_argument("gen_devset: need 1 <= n_relevant < n_candidates");
  }
  DevSet dev;
  for (std::size_t qi = 0; qi < n_queries; ++qi) {
    Rng rng(derive_seed(spec.seed, kDevStream, qi));
    DevQuery q;
    q.qid = "q" + std::to_string(qi);
    q.query = sample_query(spec, rng);
    std::vector<int> labels(n_candidates, 0);
    std::fill_n(labels.begin(), n_relevant, 1);
    rng.shuffle(std::span<int>(labels));
    for (std::size_t c = 0; c < n_candidates; ++c) {
      const std::size_t overlap =
          labels[c] ? positive_overlap(spec, rng) : negative_overlap(spec, rng);
      q.candidates.push_back(sample_doc(spec, q.query, overlap, rng));
      q.doc_ids.push_back(q.qid + "_d" + std::to_string(c));
    }
    q.labels = std::move(labels);
    dev.queries.push_back(std::move(q));
  }
  return dev;
}

TokenId hash_token(std::string_view token, std::size_t vocab_size) {
  if (vocab_size == 0) throw std::invalid_argument("hash_token: empty vocabulary");
  std::uint64_t h = kFnvOffset;
  for (unsigned char c : token) {
    h ^= c;
    h *= kFnvPrime;
  }
  return static_cast<TokenId>(h % vocab_size);
}

std::vector<TokenId> tokenize(std::string_view text, std::size_t vocab_size) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back(hash_token(text.substr(i, j - i), vocab_size));
    i = j;
  }
  return out;
}

TokenFormat token_format_from_string(const std::string& name) {
  if (name == "hash") return TokenFormat::hash;
  if (name == "ids") return TokenFormat::ids;
  throw std::invalid_argument("unknown token format '" + name + "'");
}

std::string to_string(TokenFormat format) {
  return format == TokenFormat::hash ? "hash" : "ids";
}

namespace {

std::vector<TokenId> read_tokens(const std::filesystem::path& path, std::size_t line_no,
                                 std::string_view text, std::size_t vocab_size,
                                 TokenFormat format) {
  if (format == TokenFormat::hash) return tokenize(text, vocab_size);
  std::vector<TokenId> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) {
      const std::string_view tok = text.substr(i, j - i);
      std::uint64_t v = 0;
      const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || ptr != tok.data() + tok.size() || v >= vocab_size) {
        bad_line(path, line_no, "token '" + std::string(tok) + "' is not an id below " +
                                    std::to_string(vocab_size));
      }
      out.push_back(static_cast<TokenId>(v));
    }
    i = j;
  }
  return out;
}

}  // namespace

std::vector<Triple> load_triples_tsv(const std::filesystem::path& path,
                                     std::size_t vocab_size, TokenFormat format) {
  auto in = open_input(path);
  std::vector<Triple> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 3) {
      bad_line(path, line_no, "expected 3 tab-separated columns, found " +
                                  std::to_string(cols.size()));
    }
    Triple t{read_tokens(path, line_no, cols[0], vocab_size, format),
             read_tokens(path, line_no, cols[1], vocab_size, format),
             read_tokens(path, line_no, cols[2], vocab_size, format)};
    if (t.query.empty() || t.pos_doc.empty() || t.neg_doc.empty()) {
      bad_line(path, line_no, "empty query or document");
    }
    out.push_back(std::move(t));
  }
  return out;
}

DevSet load_devset_tsv(const std::filesystem::path& path, std::size_t vocab_size,
                       TokenFormat format) {
  auto in = open_input(path);
  DevSet dev;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 5) {
      bad_line(path, line_no, "expected 5 tab-separated columns, found " +
                                  std::to_string(cols.size()));
    }
    int label = 0;
    if (cols[4] == "1") {
      label = 1;
    } else if (cols[4] != "0") {
      bad_line(path, line_no, "label must be 0 or 1, got '" + cols[4] + "'");
    }
    auto [it, fresh] = index.try_emplace(cols[0], dev.queries.size());
    if (fresh) {
      DevQuery q;
      q.qid = cols[0];
      q.query = read_tokens(path, line_no, cols[2], vocab_size, format);
      if (q.query.empty()) bad_line(path, line_no, "empty query");
      dev.queries.push_back(std::move(q));
    }
    auto& q = dev.queries[it->second];
    auto doc = read_tokens(path, line_no, cols[3], vocab_size, format);
    if (doc.empty()) bad_line(path, line_no, "empty document");
    q.doc_ids.push_back(cols[1]);
    q.candidates.push_back(std::move(doc));
    q.labels.push_back(label);
  }
  for (const auto& q : dev.queries) {
    if (std::find(q.labels.begin(), q.labels.end(), 1) == q.labels.end()) {
      throw std::runtime_error(path.string() + ": query " + q.qid +
                               " has no relevant candidate");
    }
  }
  return dev;
}

void write_triples_tsv(const std::filesystem::path& path, std::span<const Triple> triples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : triples) {
    out << join_ids(t.query) << '\t' << join_ids(t.pos_doc) << '\t' << join_ids(t.neg_doc)
        << '\n';
  }
}

void write_devset_tsv(const std::filesystem::path& path, const DevSet& devset) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& q : devset.queries) {
    const std::string query = join_ids(q.query);
    for (std::size_t c = 0; c < q.candidates.size(); ++c) {
      out << q.qid << '\t' << q.doc_ids[c] << '\t' << query << '\t'
          << join_ids(q.candidates[c]) << '\t' << q.labels[c] << '\n';
    }
  }
}

}  // namespace rankdistill
