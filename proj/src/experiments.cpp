#include "rankdistill/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <stdexcept>

namespace rankdistill {

namespace fs = std::filesystem;

namespace {

constexpr double kFractions[] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

nlohmann::json data_json(const DataSettings& d) {
  nlohmann::json j{{"train_triples", d.train_triples},
                   {"teacher_triples", d.teacher_triples},
                   {"dev_queries", d.dev_queries},
                   {"dev_candidates", d.dev_candidates},
                   {"dev_relevant", d.dev_relevant}};
  j["train_tsv"] = d.train_tsv ? nlohmann::json(d.train_tsv->string()) : nlohmann::json();
  j["dev_tsv"] = d.dev_tsv ? nlohmann::json(d.dev_tsv->string()) : nlohmann::json();
  j["tsv_tokens"] = to_string(d.tsv_tokens);
  return j;
}

DataSettings data_from_json(const nlohmann::json& j) {
  DataSettings d;
  d.train_triples = j.value("train_triples", d.train_triples);
  d.teacher_triples = j.value("teacher_triples", d.teacher_triples);
  d.dev_queries = j.value("dev_queries", d.dev_queries);
  d.dev_candidates = j.value("dev_candidates", d.dev_candidates);
  d.dev_relevant = j.value("dev_relevant", d.dev_relevant);
  if (j.contains("train_tsv") && !j.at("train_tsv").is_null())
    d.train_tsv = j.at("train_tsv").get<std::string>();
  if (j.contains("dev_tsv") && !j.at("dev_tsv").is_null())
    d.dev_tsv = j.at("dev_tsv").get<std::string>();
  if (j.contains("tsv_tokens")) d.tsv_tokens = token_format_from_string(j.at("tsv_tokens"));
  return d;
}

std::string objective_name(TeacherObjective o) {
  return o == TeacherObjective::pairwise ? "pairwise" : "pointwise";
}

TeacherObjective objective_from_name(const std::string& s) {
  if (s == "pairwise") return TeacherObjective::pairwise;
  if (s == "pointwise") return TeacherObjective::pointwise;
  throw std::invalid_argument("unknown teacher_objective '" + s + "'");
}

struct Method {
  std::string label;
  std::string preset;  // empty for the teacher
  std::optional<MapStrategy> mapping;
};

std::vector<Method> roster(const ExperimentConfig& c) {
  if (c.suite == "single") {
    if (c.plan == "teacher") return {{"teacher", "", std::nullopt}};
    return {{c.plan, c.plan, c.mapping}};
  }
  if (c.suite == "table2") {
    return {{"teacher", "", std::nullopt},
            // the baseline student is fine-tuned exactly like the teacher
            {"student-finetune", "finetune-" + objective_name(c.teacher_objective), std::nullopt},
            {"L1", "L1", std::nullopt},
            {"L2", "L2", std::nullopt},
            {"margin-mse", "margin-mse", std::nullopt},
            {"L3", "L3", std::nullopt}};
  }
  if (c.suite == "table3") {
    return {{"L2", "L2", std::nullopt},
            {"w/o-intermediate", "table3-no-intermediate", std::nullopt},
            {"w/o-embedding", "table3-no-embedding", std::nullopt},
            {"w/o-logits", "table3-no-logits", std::nullopt},
            {"L3", "L3", std::nullopt}};
  }
  if (c.suite == "table4") {
    return {{"L2-uniform", "L2", MapStrategy::uniform},
            {"L2-last-k", "L2", MapStrategy::last_k},
            {"L2-last-one", "L2", MapStrategy::last_one},
            {"L3", "L3", std::nullopt}};
  }
  if (c.suite == "fig1") {
    return {{"L2", "L2", std::nullopt}, {"L3", "L3", std::nullopt}};
  }
  throw std::invalid_argument("unknown suite '" + c.suite + "'");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string report_name(const RunReport& r) {
  std::string m = r.method;
  std::replace(m.begin(), m.end(), '/', '_');
  return m + "_s" + std::to_string(r.seed) + "_f" + format_double(r.fraction) + ".json";
}

void write_text_atomically(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void to_json(nlohmann::json& j, const StageSettings& s) {
  j = nlohmann::json{
      {"learning_rate", s.learning_rate}, {"batch_size", s.batch_size}, {"epochs", s.epochs}};
}

void from_json(const nlohmann::json& j, StageSettings& s) {
  const StageSettings d;
  s.learning_rate = j.value("learning_rate", d.learning_rate);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.epochs = j.value("epochs", d.epochs);
}

ExperimentConfig::ExperimentConfig() {
  teacher.num_layers = 4;
  teacher.hidden = 64;
  teacher.heads = 2;
  teacher.ffn_dim = 128;
  student.num_layers = 2;
  student.hidden = 32;
  student.heads = 2;
  student.ffn_dim = 64;
}

void ExperimentConfig::validate() const {
  const auto names = suite_names();
  if (std::find(names.begin(), names.end(), suite) == names.end()) {
    throw std::invalid_argument("unknown suite '" + suite + "'");
  }
  if (seeds.empty()) throw std::invalid_argument("experiment: seeds must not be empty");
  task.validate();
  teacher.validate();
  student.validate();
  if (!data.train_tsv && data.train_triples == 0) {
    throw std::invalid_argument("experiment: train_triples must be positive");
  }
  if (!data.dev_tsv && (data.dev_relevant < 1 || data.dev_relevant >= data.dev_candidates)) {
    throw std::invalid_argument("experiment: need 1 <= dev_relevant < dev_candidates");
  }
  for (const auto* s : {&teacher_train, &student_train}) {
    if (s->batch_size < 1) throw std::invalid_argument("experiment: batch_size must be >= 1");
    if (!(s->learning_rate > 0.0)) {
      throw std::invalid_argument("experiment: learning_rate must be positive");
    }
  }
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("experiment: fraction must be in (0, 1]");
  }
  if (suite == "single" && plan != "teacher") plan_preset(plan);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"suite", c.suite},
                     {"seeds", c.seeds},
                     {"task", c.task},
                     {"data", data_json(c.data)},
                     {"teacher", c.teacher},
                     {"student", c.student},
                     {"teacher_train", c.teacher_train},
                     {"student_train", c.student_train},
                     {"teacher_objective", objective_name(c.teacher_objective)},
                     {"pair_score", to_string(c.pair_score)},
                     {"eval_score", to_string(c.eval_score)},
                     {"plan", c.plan},
                     {"fraction", c.fraction},
                     {"mapping", to_string(c.mapping)},
                     {"output_dir", c.output_dir.string()}};
  j["cache_dir"] = c.cache_dir ? nlohmann::json(c.cache_dir->string()) : nlohmann::json();
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
  c.suite = j.value("suite", d.suite);
  c.seeds = j.contains("seeds") ? j.at("seeds").get<std::vector<std::uint64_t>>() : d.seeds;
  c.task = j.contains("task") ? j.at("task").get<SyntheticTaskSpec>() : d.task;
  c.data = j.contains("data") ? data_from_json(j.at("data")) : d.data;
  // Encoder sections override the desk-scale defaults key by key.
  auto encoder = [&](const char* key, const EncoderConfig& base) {
    if (!j.contains(key)) return base;
    nlohmann::json merged = base;
    merged.merge_patch(j.at(key));
    return merged.get<EncoderConfig>();
  };
  c.teacher = encoder("teacher", d.teacher);
  c.student = encoder("student", d.student);
  c.teacher_train =
      j.contains("teacher_train") ? j.at("teacher_train").get<StageSettings>() : d.teacher_train;
  c.student_train =
      j.contains("student_train") ? j.at("student_train").get<StageSettings>() : d.student_train;
  c.teacher_objective = objective_from_name(j.value("teacher_objective", "pairwise"));
  c.pair_score = score_mode_from_string(j.value("pair_score", to_string(d.pair_score)));
  c.eval_score = score_mode_from_string(j.value("eval_score", to_string(d.eval_score)));
  c.plan = j.value("plan", d.plan);
  c.fraction = j.value("fraction", d.fraction);
  c.mapping = map_strategy_from_string(j.value("mapping", to_string(d.mapping)));
  c.output_dir = j.value("output_dir", d.output_dir.string());
  c.cache_dir.reset();
  if (j.contains("cache_dir") && !j.at("cache_dir").is_null())
    c.cache_dir = j.at("cache_dir").get<std::string>();
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  // Relative data paths are taken relative to the config file.
  const fs::path base = path.parent_path();
  for (auto* p : {&c.data.train_tsv, &c.data.dev_tsv}) {
    if (*p && p->value().is_relative()) *p = base / p->value();
  }
  c.validate();
  return c;
}

std::vector<std::string> suite_names() { return {"single", "table2", "table3", "table4", "fig1"}; }

fs::path resolve_output_dir(const fs::path& dir) {
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv("RANKDISTILL_OUTPUT"); root && *root) {
    return fs::path(root) / dir;
  }
  return dir;
}

ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (c.data.train_tsv) {
    // A file is used whole by both sides.
    d.triples = load_triples_tsv(*c.data.train_tsv, c.teacher.vocab, c.data.tsv_tokens);
    d.student_count = d.teacher_count = d.triples.size();
  } else {
    d.student_count = c.data.train_triples;
    d.teacher_count = c.data.teacher_triples ? c.data.teacher_triples : c.data.train_triples;
    // Generation is prefix-stable, so the shorter set is a prefix of the longer.
    d.triples = gen_triples(c.task, std::max(d.student_count, d.teacher_count));
  }
  d.dev = c.data.dev_tsv ? load_devset_tsv(*c.data.dev_tsv, c.teacher.vocab, c.data.tsv_tokens)
                         : gen_devset(c.task, c.data.dev_queries, c.data.dev_candidates,
                                      c.data.dev_relevant);
  return d;
}

TrainConfig teacher_train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = c.teacher_train.learning_rate;
  t.batch_size = c.teacher_train.batch_size;
  t.epochs = c.teacher_train.epochs;
  t.seed = seed;
  t.data_fraction = 1.0;
  t.plan = plan_preset(c.teacher_objective == TeacherObjective::pairwise ? "finetune-pairwise"
                                                                          : "finetune-pointwise");
  t.plan.pair_score = c.pair_score;
  t.teacher_config = c.teacher;
  t.student_config = c.student;
  t.teacher_objective = c.teacher_objective;
  return t;
}

TrainConfig student_train_config(const ExperimentConfig& c, const ObjectivePlan& plan,
                                 std::uint64_t seed, double fraction) {
  TrainConfig t;
  t.learning_rate = c.student_train.learning_rate;
  t.batch_size = c.student_train.batch_size;
  t.epochs = c.student_train.epochs;
  t.seed = seed;
  t.data_fraction = fraction;
  t.plan = plan;
  t.plan.pair_score = c.pair_score;
  t.teacher_config = c.teacher;
  t.student_config = c.student;
  t.teacher_objective = c.teacher_objective;
  return t;
}

nlohmann::json RunSpec::resolved(const ExperimentConfig& c) const {
  nlohmann::json j{{"suite", c.suite},
                   {"method", method},
                   {"seed", seed},
                   {"fraction", fraction},
                   {"role", is_teacher ? "teacher" : "student"},
                   {"task", c.task},
                   {"data", data_json(c.data)},
                   {"eval_score", to_string(c.eval_score)},
                   {"train", train}};
  if (!is_teacher) j["teacher_train"] = teacher_train_config(c, seed);
  return j;
}

std::string RunSpec::config_hash(const ExperimentConfig& c) const {
  return hash_json(resolved(c));
}

std::vector<RunSpec> expand_suite(const ExperimentConfig& c) {
  const auto methods = roster(c);
  std::vector<double> fractions;
  if (c.suite == "fig1") {
    fractions.assign(std::begin(kFractions), std::end(kFractions));
  } else {
    fractions.push_back(c.suite == "single" ? c.fraction : 1.0);
  }
  std::vector<RunSpec> out;
  for (std::uint64_t seed : c.seeds) {
    for (double f : fractions) {
      for (const auto& m : methods) {
        RunSpec r;
        r.method = m.label;
        r.seed = seed;
        r.fraction = m.preset.empty() ? 1.0 : f;
        r.is_teacher = m.preset.empty();
        if (r.is_teacher) {
          r.train = teacher_train_config(c, seed);
        } else {
          ObjectivePlan plan = plan_preset(m.preset);
          if (m.mapping) plan.mapping = *m.mapping;
          r.train = student_train_config(c, plan, seed, f);
        }
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

std::string hash_json(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

EncoderParams obtain_teacher(const ExperimentConfig& c, std::span<const Triple> triples,
                             std::uint64_t seed, const fs::path& cache_dir, bool* from_cache) {
  const TrainConfig tc = teacher_train_config(c, seed);
  nlohmann::json key{{"task", c.task}, {"data", data_json(c.data)}, {"train", tc}};
  const fs::path path = cache_dir / ("teacher-" + hash_json(key) + ".ckpt");
  if (fs::exists(path)) {
    EncoderParams p = load_checkpoint(path);
    if (!(p.config.num_layers == c.teacher.num_layers && p.config.hidden == c.teacher.hidden &&
          p.config.vocab == c.teacher.vocab)) {
      throw std::runtime_error("cached teacher " + path.string() + " has the wrong shape");
    }
    if (from_cache) *from_cache = true;
    return p;
  }
  TrainResult r = finetune_teacher(tc, triples);
  fs::create_directories(cache_dir);
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(tmp, r.params);
  fs::rename(tmp, path);
  if (from_cache) *from_cache = false;
  return std::move(r.params);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_results_csv(const fs::path& path, std::span<const RunReport> reports) {
  std::string s = "suite,method,seed,fraction,mrr_at_10,config_hash\n";
  for (const auto& r : reports) {
    s += r.suite + "," + r.method + "," + std::to_string(r.seed) + "," +
         format_double(r.fraction) + "," + format_double(r.mrr_at_10) + "," + r.config_hash +
         "\n";
  }
  write_text_atomically(path, s);
}

void write_timings_csv(const fs::path& path, std::span<const RunReport> reports) {
  std::string s = "suite,method,seed,fraction,wall_seconds\n";
  for (const auto& r : reports) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.3f", r.wall_seconds);
    s += r.suite + "," + r.method + "," + std::to_string(r.seed) + "," +
         format_double(r.fraction) + "," + secs + "\n";
  }
  write_text_atomically(path, s);
}

RunReport load_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return j.get<RunReport>();
}

void save_report(const fs::path& path, const RunReport& report) {
  write_text_atomically(path, nlohmann::json(report).dump(2) + "\n");
}

SuiteResult run_suite(const ExperimentConfig& config, const ProgressFn& progress) {
  config.validate();
  auto say = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  SuiteResult result;
  result.output_dir = resolve_output_dir(config.output_dir);
  const fs::path cache_dir =
      config.cache_dir ? resolve_output_dir(*config.cache_dir) : result.output_dir / "teachers";
  std::error_code ec;
  fs::create_directories(result.output_dir / "reports", ec);
  if (ec) {
    throw std::runtime_error("cannot create output directory " + result.output_dir.string() +
                             ": " + ec.message());
  }

  const auto cells = expand_suite(config);
  nlohmann::json plan{{"config", config}, {"runs", nlohmann::json::array()}};
  for (const auto& cell : cells) {
    nlohmann::json r = cell.resolved(config);
    r["config_hash"] = hash_json(r);
    plan["runs"].push_back(std::move(r));
  }
  write_text_atomically(result.output_dir / "plan.json", plan.dump(2) + "\n");
  say("suite " + config.suite + ": " + std::to_string(cells.size()) + " runs");

  const ExperimentData data = load_experiment_data(config);
  say("data: " + std::to_string(data.student_count) + " student triples, " +
      std::to_string(data.teacher_count) + " teacher triples, " +
      std::to_string(data.dev.queries.size()) + " dev queries, devset " +
      data.dev.fingerprint());

  std::map<std::uint64_t, EncoderParams> teachers;
  auto teacher_for = [&](std::uint64_t seed) -> const EncoderParams& {
    auto it = teachers.find(seed);
    if (it != teachers.end()) return it->second;
    bool cached = false;
    EncoderParams p = obtain_teacher(config, data.teacher_triples(), seed, cache_dir, &cached);
    say("teacher seed " + std::to_string(seed) + (cached ? " loaded from cache" : " trained"));
    return teachers.emplace(seed, std::move(p)).first->second;
  };

  for (std::size_t i = 0; i < cells.size(); ++i) {
    const RunSpec& cell = cells[i];
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    if (cell.is_teacher) {
      const EncoderParams& teacher = teacher_for(cell.seed);
      report = evaluate(rerank(teacher, data.dev, config.eval_score), data.dev);
      report.wall_seconds = seconds_since(t0);
    } else {
      const EncoderParams* teacher = nullptr;
      if (cell.train.plan.needs_teacher()) teacher = &teacher_for(cell.seed);
      const auto t1 = std::chrono::steady_clock::now();
      // Teacher-free plans still take the teacher argument but never read it.
      static const EncoderParams kNoTeacher;
      const TrainResult tr =
          distill_student(teacher ? *teacher : kNoTeacher, cell.train, data.student_triples());
      report = evaluate(rerank(tr.params, data.dev, config.eval_score), data.dev);
      report.wall_seconds = seconds_since(t1);
    }
    report.suite = config.suite;
    report.method = cell.method;
    report.seed = cell.seed;
    report.fraction = cell.fraction;
    report.config_hash = cell.config_hash(config);
    save_report(result.output_dir / "reports" / report_name(report), report);
    result.reports.push_back(report);
    write_results_csv(result.output_dir / "results.csv", result.reports);
    write_timings_csv(result.output_dir / "timings.csv", result.reports);

    char line[160];
    std::snprintf(line, sizeof line, "[%zu/%zu] %s seed %llu fraction %s: MRR@10 %.4f (%.1fs)",
                  i + 1, cells.size(), cell.method.c_str(),
                  static_cast<unsigned long long>(cell.seed),
                  format_double(cell.fraction).c_str(), report.mrr_at_10, report.wall_seconds);
    say(line);
  }
  return result;
}

void to_json(nlohmann::json& j, const ComparisonSummary& s) {
  j = nlohmann::json{{"method_a", s.method_a}, {"method_b", s.method_b},
                     {"mean_a", s.mean_a},     {"mean_b", s.mean_b},
                     {"delta", s.delta},       {"wins_a", s.wins_a},
                     {"wins_b", s.wins_b},     {"ties", s.ties},
                     {"seeds", nlohmann::json::array()}};
  for (const auto& sc : s.seeds) {
    j["seeds"].push_back({{"seed", sc.seed},
                          {"mrr_a", sc.mrr_a},
                          {"mrr_b", sc.mrr_b},
                          {"delta", sc.delta},
                          {"per_query_delta", sc.per_query_delta}});
  }
}

ComparisonSummary compare_runs(std::span<const RunReport> a, std::span<const RunReport> b) {
  if (a.empty()) throw std::invalid_argument("compare_runs: no reports to compare");
  ComparisonSummary s;
  s.method_a = a.front().method;
  s.method_b = b.empty() ? "" : b.front().method;
  double sum_a = 0.0, sum_b = 0.0;
  for (const auto& ra : a) {
    const auto it = std::find_if(b.begin(), b.end(), [&](const RunReport& rb) {
      return rb.seed == ra.seed && rb.fraction == ra.fraction;
    });
    if (it == b.end()) {
      throw std::invalid_argument("compare_runs: no partner for seed " + std::to_string(ra.seed) +
                                  " fraction " + format_double(ra.fraction));
    }
    const RunReport& rb = *it;
    if (ra.devset_fingerprint != rb.devset_fingerprint) {
      throw std::invalid_argument("compare_runs: devset mismatch (" + ra.devset_fingerprint +
                                  " vs " + rb.devset_fingerprint + ")");
    }
    if (ra.per_query_rr.size() != rb.per_query_rr.size()) {
      throw std::invalid_argument("compare_runs: per-query lists differ in length");
    }
    SeedComparison sc;
    sc.seed = ra.seed;
    sc.mrr_a = ra.mrr_at_10;
    sc.mrr_b = rb.mrr_at_10;
    sc.delta = rb.mrr_at_10 - ra.mrr_at_10;
    for (std::size_t q = 0; q < ra.per_query_rr.size(); ++q)
      sc.per_query_delta.push_back(rb.per_query_rr[q] - ra.per_query_rr[q]);
    if (sc.mrr_a > sc.mrr_b) {
      ++s.wins_a;
    } else if (sc.mrr_b > sc.mrr_a) {
      ++s.wins_b;
    } else {
      ++s.ties;
    }
    sum_a += sc.mrr_a;
    sum_b += sc.mrr_b;
    s.seeds.push_back(std::move(sc));
  }
  s.mean_a = sum_a / static_cast<double>(a.size());
  s.mean_b = sum_b / static_cast<double>(a.size());
  s.delta = s.mean_b - s.mean_a;
  return s;
}

ComparisonSummary compare_runs(const RunReport& a, const RunReport& b) {
  return compare_runs(std::span<const RunReport>(&a, 1), std::span<const RunReport>(&b, 1));
}

}  // namespace rankdistill
