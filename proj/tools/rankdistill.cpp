// Command-line front end: data generation, training, evaluation and suites.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rankdistill/experiments.hpp"

namespace fs = std::filesystem;
using namespace rankdistill;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::string> suite;
  std::vector<std::uint64_t> seeds;
  std::optional<std::string> output;
  std::optional<std::string> plan;
  std::optional<double> fraction;
  std::optional<std::string> mapping;
  std::optional<std::size_t> train_triples;
  std::optional<std::string> pair_score;
  std::optional<std::string> eval_score;
};

void add_config_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config_path, "experiment config (JSON)");
  cmd->add_option("--output", f.output, "output directory");
  cmd->add_option("--seeds", f.seeds, "seeds")->delimiter(',');
  cmd->add_option("--train-triples", f.train_triples, "number of generated training triples");
  cmd->add_option("--pair-score", f.pair_score, "hinge score: probability or logit");
  cmd->add_option("--eval-score", f.eval_score, "ranking score: probability or logit");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = f.config_path.empty() ? ExperimentConfig{}
                                             : load_experiment_config(f.config_path);
  if (f.suite) c.suite = *f.suite;
  if (!f.seeds.empty()) c.seeds = f.seeds;
  if (f.output) c.output_dir = *f.output;
  if (f.plan) c.plan = *f.plan;
  if (f.fraction) c.fraction = *f.fraction;
  if (f.mapping) c.mapping = map_strategy_from_string(*f.mapping);
  if (f.train_triples) c.data.train_triples = *f.train_triples;
  if (f.pair_score) c.pair_score = score_mode_from_string(*f.pair_score);
  if (f.eval_score) c.eval_score = score_mode_from_string(*f.eval_score);
  c.validate();
  return c;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

int cmd_gen_data(const CommonFlags& f, const std::string& train_out, const std::string& dev_out) {
  const ExperimentConfig c = resolve_config(f);
  const ExperimentData d = load_experiment_data(c);
  if (!train_out.empty()) write_triples_tsv(train_out, d.triples);
  if (!dev_out.empty()) write_devset_tsv(dev_out, d.dev);
  std::cout << d.triples.size() << " triples (students use " << d.student_count
            << ", the teacher " << d.teacher_count << "), " << d.dev.queries.size() << " dev queries ("
            << d.dev.candidate_count() << " candidates each), devset " << d.dev.fingerprint()
            << "\n";
  return 0;
}

int cmd_train_teacher(const CommonFlags& f, const std::string& out, const std::string& history) {
  const ExperimentConfig c = resolve_config(f);
  const ExperimentData d = load_experiment_data(c);
  const TrainResult r = finetune_teacher(teacher_train_config(c, c.seeds.front()), d.teacher_triples());
  save_checkpoint(out, r.params);
  if (!history.empty()) write_loss_history_csv(history, r.history);
  const RunReport rep = evaluate(rerank(r.params, d.dev, c.eval_score), d.dev);
  std::printf("teacher seed %llu: MRR@10 %.4f -> %s\n",
              static_cast<unsigned long long>(c.seeds.front()), rep.mrr_at_10, out.c_str());
  return 0;
}

int cmd_distill(const CommonFlags& f, const std::string& teacher_path, const std::string& out,
                const std::string& history) {
  const ExperimentConfig c = resolve_config(f);
  const ExperimentData d = load_experiment_data(c);
  ObjectivePlan plan = plan_preset(c.plan);
  plan.mapping = c.mapping;
  const TrainConfig tc = student_train_config(c, plan, c.seeds.front(), c.fraction);
  EncoderParams teacher;
  if (plan.needs_teacher()) {
    if (teacher_path.empty()) throw std::invalid_argument("plan " + c.plan + " needs --teacher");
    teacher = load_checkpoint(teacher_path);
  }
  const TrainResult r = distill_student(teacher, tc, d.student_triples());
  save_checkpoint(out, r.params);
  if (!history.empty()) write_loss_history_csv(history, r.history);
  const RunReport rep = evaluate(rerank(r.params, d.dev, c.eval_score), d.dev);
  std::printf("%s seed %llu fraction %s: MRR@10 %.4f -> %s\n", c.plan.c_str(),
              static_cast<unsigned long long>(c.seeds.front()), format_double(c.fraction).c_str(),
              rep.mrr_at_10, out.c_str());
  return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& report_out,
             const std::string& run_file) {
  const ExperimentConfig c = resolve_config(f);
  const ExperimentData d = load_experiment_data(c);
  const EncoderParams params = load_checkpoint(checkpoint);
  const auto ranked = rerank(params, d.dev, c.eval_score);
  RunReport rep = evaluate(ranked, d.dev);
  rep.method = fs::path(checkpoint).stem().string();
  rep.seed = c.seeds.front();
  if (!report_out.empty()) save_report(report_out, rep);
  if (!run_file.empty()) write_run_file(run_file, d.dev, ranked);
  std::printf("MRR@10 %.6f over %zu queries\n", rep.mrr_at_10, rep.per_query_rr.size());
  return 0;
}

int cmd_suite(const CommonFlags& f) {
  const ExperimentConfig c = resolve_config(f);
  const SuiteResult r = run_suite(c, log_line);
  std::cout << "results: " << (r.output_dir / "results.csv").string() << "\n";
  return 0;
}

std::vector<RunReport> load_reports(const std::vector<std::string>& paths) {
  std::vector<RunReport> out;
  for (const auto& p : paths) out.push_back(load_report(p));
  return out;
}

int cmd_compare(const std::vector<std::string>& a, const std::vector<std::string>& b,
                const std::string& json_out) {
  const auto ra = load_reports(a);
  const auto rb = load_reports(b);
  const ComparisonSummary s = compare_runs(ra, rb);
  std::printf("%s vs %s: mean %.4f vs %.4f, delta %+.4f, wins %zu-%zu (%zu ties)\n",
              s.method_a.c_str(), s.method_b.c_str(), s.mean_a, s.mean_b, s.delta, s.wins_a,
              s.wins_b, s.ties);
  for (const auto& sc : s.seeds) {
    std::printf("  seed %llu: %.4f vs %.4f (%+.4f)\n", static_cast<unsigned long long>(sc.seed),
                sc.mrr_a, sc.mrr_b, sc.delta);
  }
  if (!json_out.empty()) {
    std::ofstream out(json_out);
    if (!out) throw std::runtime_error("cannot write " + json_out);
    out << nlohmann::json(s).dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-encoder ranking distillation lab"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string train_out, dev_out, out, history, teacher_path, checkpoint, report_out, run_file,
      json_out;
  std::vector<std::string> reports_a, reports_b;

  auto* gen = app.add_subcommand("gen-data", "write the configured train/dev data as TSV");
  add_config_flags(gen, flags);
  gen->add_option("--train-out", train_out, "triples TSV");
  gen->add_option("--dev-out", dev_out, "devset TSV");

  auto* teach = app.add_subcommand("train-teacher", "fine-tune a teacher");
  add_config_flags(teach, flags);
  teach->add_option("-o,--out", out, "checkpoint path")->required();
  teach->add_option("--history", history, "loss history CSV");

  auto* dist = app.add_subcommand("distill", "train a student under one objective plan");
  add_config_flags(dist, flags);
  dist->add_option("--plan", flags.plan, "plan preset");
  dist->add_option("--fraction", flags.fraction, "training data fraction");
  dist->add_option("--mapping", flags.mapping, "uniform, last-k or last-one");
  dist->add_option("--teacher", teacher_path, "teacher checkpoint");
  dist->add_option("-o,--out", out, "checkpoint path")->required();
  dist->add_option("--history", history, "loss history CSV");

  auto* ev = app.add_subcommand("eval", "rerank the devset with a checkpoint");
  add_config_flags(ev, flags);
  ev->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  ev->add_option("--report", report_out, "RunReport JSON");
  ev->add_option("--run-file", run_file, "run file (qid docid rank score)");

  auto* suite = app.add_subcommand("suite", "run an experiment suite");
  add_config_flags(suite, flags);
  suite->add_option("--suite", flags.suite, "single, table2, table3, table4 or fig1");
  suite->add_option("--plan", flags.plan, "plan preset (single suite)");
  suite->add_option("--fraction", flags.fraction, "data fraction (single suite)");
  suite->add_option("--mapping", flags.mapping, "layer mapping (single suite)");

  auto* cmp = app.add_subcommand("compare", "paired comparison of two sets of run reports");
  cmp->add_option("-a", reports_a, "reports of the first method")->required();
  cmp->add_option("-b", reports_b, "reports of the second method")->required();
  cmp->add_option("--json", json_out, "write the summary as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(flags, train_out, dev_out);
    if (*teach) return cmd_train_teacher(flags, out, history);
    if (*dist) return cmd_distill(flags, teacher_path, out, history);
    if (*ev) return cmd_eval(flags, checkpoint, report_out, run_file);
    if (*suite) return cmd_suite(flags);
    if (*cmp) return cmd_compare(reports_a, reports_b, json_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
