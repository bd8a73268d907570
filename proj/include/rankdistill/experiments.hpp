#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rankdistill/metrics.hpp"
#include "rankdistill/synth_data.hpp"
#include "rankdistill/trainer.hpp"

namespace rankdistill {

// Optimisation settings for one side (teacher or student) of an experiment.
struct StageSettings {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
};

void to_json(nlohmann::json& j, const StageSettings& s);
void from_json(const nlohmann::json& j, StageSettings& s);

struct DataSettings {
  std::size_t train_triples = 2000;
  // The teacher trains on the first teacher_triples generated triples, a
  // superset of the students' data. 0 means the same as train_triples.
  std::size_t teacher_triples = 0;
  std::size_t dev_queries = 50;
  std::size_t dev_candidates = 50;
  std::size_t dev_relevant = 1;
  // When set, these replace the generated data.
  std::optional<std::filesystem::path> train_tsv;
  std::optional<std::filesystem::path> dev_tsv;
  TokenFormat tsv_tokens = TokenFormat::hash;
};

struct ExperimentConfig {
  std::string suite = "single";
  std::vector<std::uint64_t> seeds{0};
  SyntheticTaskSpec task;
  DataSettings data;
  EncoderConfig teacher;
  EncoderConfig student;
  StageSettings teacher_train;
  StageSettings student_train;
  TeacherObjective teacher_objective = TeacherObjective::pairwise;
  ScoreMode pair_score = ScoreMode::probability;
  ScoreMode eval_score = ScoreMode::probability;
  // Only used by the "single" suite.
  std::string plan = "L3";
  double fraction = 1.0;
  MapStrategy mapping = MapStrategy::uniform;

  std::filesystem::path output_dir = "runs";
  // Defaults to <output_dir>/teachers.
  std::optional<std::filesystem::path> cache_dir;

  ExperimentConfig();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

std::vector<std::string> suite_names();

// Relative output directories are placed under $RANKDISTILL_OUTPUT when set.
std::filesystem::path resolve_output_dir(const std::filesystem::path& dir);

struct ExperimentData {
  std::vector<Triple> triples;  // the longer of the two training sets
  std::size_t student_count = 0;
  std::size_t teacher_count = 0;
  DevSet dev;

  std::span<const Triple> student_triples() const { return {triples.data(), student_count}; }
  std::span<const Triple> teacher_triples() const { return {triples.data(), teacher_count}; }
};

ExperimentData load_experiment_data(const ExperimentConfig& config);

// One cell of an expanded suite.
struct RunSpec {
  std::string method;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  bool is_teacher = false;
  TrainConfig train;  // fully resolved

  nlohmann::json resolved(const ExperimentConfig& config) const;
  std::string config_hash(const ExperimentConfig& config) const;
};

TrainConfig teacher_train_config(const ExperimentConfig& config, std::uint64_t seed);
TrainConfig student_train_config(const ExperimentConfig& config, const ObjectivePlan& plan,
                                 std::uint64_t seed, double fraction);

// Deterministic expansion, seeds outermost, methods in roster order.
std::vector<RunSpec> expand_suite(const ExperimentConfig& config);

// 16 hex digits of FNV-1a over the compact JSON dump.
std::string hash_json(const nlohmann::json& j);

// Teacher for (task, data, teacher settings, seed), trained once and cached
// as a checkpoint in the cache directory.
EncoderParams obtain_teacher(const ExperimentConfig& config, std::span<const Triple> triples,
                             std::uint64_t seed, const std::filesystem::path& cache_dir,
                             bool* from_cache = nullptr);

struct SuiteResult {
  std::vector<RunReport> reports;  // in expansion order
  std::filesystem::path output_dir;
};

using ProgressFn = std::function<void(const std::string&)>;

// Writes plan.json before training, then per-run reports/<method>_s<seed>_f<frac>.json,
// results.csv (suite, method, seed, fraction, mrr_at_10, config_hash) and
// timings.csv (suite, method, seed, fraction, wall_seconds).
SuiteResult run_suite(const ExperimentConfig& config, const ProgressFn& progress = {});

std::string format_double(double v);
void write_results_csv(const std::filesystem::path& path, std::span<const RunReport> reports);
void write_timings_csv(const std::filesystem::path& path, std::span<const RunReport> reports);

struct SeedComparison {
  std::uint64_t seed = 0;
  double mrr_a = 0.0;
  double mrr_b = 0.0;
  double delta = 0.0;  // b - a
  std::vector<double> per_query_delta;
};

struct ComparisonSummary {
  std::string method_a;
  std::string method_b;
  double mean_a = 0.0;
  double mean_b = 0.0;
  double delta = 0.0;  // mean_b - mean_a
  std::size_t wins_a = 0;
  std::size_t wins_b = 0;
  std::size_t ties = 0;
  std::vector<SeedComparison> seeds;
};

void to_json(nlohmann::json& j, const ComparisonSummary& s);

// Pairs reports by seed (fraction must agree too); every seed in `a` needs a
// partner in `b`. Throws on devset fingerprint mismatch.
ComparisonSummary compare_runs(std::span<const RunReport> a, std::span<const RunReport> b);
ComparisonSummary compare_runs(const RunReport& a, const RunReport& b);

RunReport load_report(const std::filesystem::path& path);
void save_report(const std::filesystem::path& path, const RunReport& report);

}  // namespace rankdistill
