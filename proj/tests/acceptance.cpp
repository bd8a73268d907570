// Acceptance run: one PASS/FAIL line per criterion, then a summary.
// Usage: acceptance [--output DIR] [--config FILE] [--quick]
// --quick skips the training suites (criteria 5-8).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rankdistill/experiments.hpp"
#include "rankdistill/grad_check.hpp"
#include "rankdistill/objectives.hpp"
#include "rankdistill/random.hpp"
#include "test_util.hpp"

using namespace rankdistill;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

EncoderConfig encoder(std::size_t layers, std::size_t hidden, std::uint64_t seed) {
  EncoderConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = 2;
  c.ffn_dim = 2 * hidden;
  c.vocab = 40;
  c.max_query_len = 4;
  c.max_doc_len = 6;
  c.seed = seed;
  return c;
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(vocab));
  return t;
}

// ---- 1: gradients ------------------------------------------------------------

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  bool all_ok = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const EncoderParams teacher = init_params(encoder(4, 24, 100 + seed));
    EncoderParams student = init_params(encoder(2, 16, 200 + seed));
    Rng rng(300 + seed);
    // Move off the tiny initial weights so every path carries signal.
    for (auto& nt : student.named_tensors())
      for (double& v : nt.tensor.mutable_data()) v += 0.2 * rng.normal();
    student.set_requires_grad(true);
    ProjectionParams proj = ProjectionParams::create(16, 24, 2, 400 + seed);
    for (auto& t : proj.parameters()) t.set_requires_grad(true);
    const auto map = make_layer_map(MapStrategy::uniform, 4, 2);

    // Redraw tokens until both hinge arguments sit clear of the kink.
    std::vector<TokenId> q, dp, dn;
    for (;;) {
      q = random_tokens(rng, 3, 40);
      dp = random_tokens(rng, 5, 40);
      dn = random_tokens(rng, 4, 40);
      NoGradGuard ng;
      const auto sp = encode(student, pack_input(q, dp, student.config));
      const auto sn = encode(student, pack_input(q, dn, student.config));
      bool clear = true;
      for (auto mode : {ScoreMode::probability, ScoreMode::logit}) {
        const double m =
            1.0 - ranking_score(sp, mode).item() + ranking_score(sn, mode).item();
        if (std::abs(m) < 1e-3) clear = false;
      }
      if (clear) break;
    }
    const auto tp = [&] {
      NoGradGuard ng;
      return encode(teacher, pack_input(q, dp, teacher.config));
    }();
    const auto tn = [&] {
      NoGradGuard ng;
      return encode(teacher, pack_input(q, dn, teacher.config));
    }();
    auto sp = [&] { return encode(student, pack_input(q, dp, student.config)); };
    auto sn = [&] { return encode(student, pack_input(q, dn, student.config)); };

    std::vector<std::pair<std::string, ScalarFunction>> fns;
    for (auto [name, kind] : {std::pair{"L_attn", LayerTerm::attn},
                              std::pair{"L_hidn", LayerTerm::hidn},
                              std::pair{"L_emb", LayerTerm::emb}}) {
      const LayerTerm k = kind;
      fns.emplace_back(name, [&, k] { return l_layerwise(tp, sp(), map, proj, k); });
    }
    fns.emplace_back("L_logits", [&] { return l_logits(tp.logits, sp().logits, 1.0); });
    fns.emplace_back("L_logits(t=2)", [&] { return l_logits(tp.logits, sp().logits, 2.0); });
    fns.emplace_back("L_hard", [&] { return l_hard(sp().logits, Relevance::relevant); });
    for (auto mode : {ScoreMode::probability, ScoreMode::logit}) {
      fns.emplace_back("L_pair(" + to_string(mode) + ")", [&, mode] {
        return l_pair(ranking_score(sp(), mode), ranking_score(sn(), mode));
      });
    }
    fns.emplace_back("Margin-MSE", [&] {
      return l_margin_mse(ranking_score(tp, ScoreMode::logit), ranking_score(tn, ScoreMode::logit),
                          ranking_score(sp(), ScoreMode::logit),
                          ranking_score(sn(), ScoreMode::logit));
    });
    fns.emplace_back("L1", [&] {
      return compose_pointwise(plan_preset("L1"), map, proj, &tp, sp(), Relevance::relevant)
          .total;
    });
    for (const char* name : {"L2", "L3"}) {
      for (auto mode : {ScoreMode::probability, ScoreMode::logit}) {
        ObjectivePlan plan = plan_preset(name);
        plan.pair_score = mode;
        fns.emplace_back(std::string(name) + "(" + to_string(mode) + ")", [&, plan] {
          const auto p = sp();
          const auto n = sn();
          return compose_pairwise(plan, map, proj, {&tp, &tn, &p, &n}).total;
        });
      }
    }

    std::vector<Tensor> inputs = student.parameters();
    for (const auto& t : proj.parameters()) inputs.push_back(t);
    for (const auto& [name, f] : fns) {
      const auto r = grad_check(f, inputs, {.step = 1e-5, .max_coordinates = 60, .seed = seed});
      ++checks;
      if (!r.ok || r.max_relative_error >= 1e-4) {
        all_ok = false;
        std::printf("  seed %llu %s: %s\n", static_cast<unsigned long long>(seed), name.c_str(),
                    r.message.c_str());
      }
      if (r.max_relative_error > worst) {
        worst = r.max_relative_error;
        worst_name = name;
      }
    }
  }
  const double secs = seconds_since(t0);
  verdict(1, all_ok && secs < 300.0,
          std::to_string(checks) + " gradient checks over 10 seeds, max relative error " +
              fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1f", secs) + "s");
}

// ---- 2: loss identities -------------------------------------------------------

void criterion_identities() {
  std::vector<std::string> broken;
  const EncoderParams m = init_params(encoder(2, 16, 5));
  const auto tr = encode(m, pack_input(std::vector<TokenId>{1, 2, 3},
                                       std::vector<TokenId>{3, 4, 5, 6}, m.config));
  const auto map = make_layer_map(MapStrategy::uniform, 2, 2);
  for (auto kind : {LayerTerm::attn, LayerTerm::hidn, LayerTerm::emb})
    if (l_layerwise(tr, tr, map, ProjectionParams{}, kind).item() != 0.0)
      broken.push_back("layer-wise term on identical traces");

  const double ln2 = l_logits(Tensor::from({2}, {0, 0}), Tensor::from({2}, {0, 0}), 1.0).item();
  if (std::abs(ln2 - std::log(2.0)) > 1e-12) broken.push_back("l_logits([0,0],[0,0])");

  double max_grad = 0.0;
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const double a = 4 * rng.normal(), b = 4 * rng.normal();
    for (double t : {0.5, 1.0, 3.0}) {
      Tensor zs = Tensor::from({2}, {a, b}, true);
      l_logits(Tensor::from({2}, {a, b}), zs, t).backward();
      for (double g : zs.grad()) max_grad = std::max(max_grad, std::abs(g));
    }
  }
  if (max_grad > 1e-10) broken.push_back("l_logits gradient at zS = zT");

  for (double margin : {1.0, 1.5, 7.0}) {
    Tensor sp = Tensor::scalar(margin + 0.25, true);
    Tensor sn = Tensor::scalar(0.25, true);
    const Tensor l = l_pair(sp, sn);
    l.backward();
    if (l.item() != 0.0 || sp.grad()[0] != 0.0 || sn.grad()[0] != 0.0)
      broken.push_back("l_pair at margin " + fmt("%g", margin));
  }

  const double mm = l_margin_mse(Tensor::scalar(2.5), Tensor::scalar(-1.0), Tensor::scalar(10.0),
                                 Tensor::scalar(6.5))
                        .item();
  if (mm != 0.0) broken.push_back("margin_mse at equal margins");

  std::string detail = "layer-wise zero, l_logits = ln2 (" + fmt("%.1e", std::abs(ln2 - std::log(2.0))) +
                       " off), max logits gradient " + fmt("%.1e", max_grad) +
                       ", hinge saturation, margin-MSE zero";
  for (const auto& b : broken) detail += "; broken: " + b;
  verdict(2, broken.empty(), detail);
}

// ---- 3: L2 - L3 decomposition ---------------------------------------------------

void criterion_composition() {
  double worst = 0.0;
  SyntheticTaskSpec spec;
  for (std::uint64_t b = 0; b < 100; ++b) {
    EncoderConfig tc, sc;
    tc.num_layers = 4;
    tc.hidden = 16;
    tc.heads = 2;
    tc.ffn_dim = 32;
    tc.seed = 1000 + b;
    sc = tc;
    sc.num_layers = 2;
    sc.hidden = 8;
    sc.ffn_dim = 16;
    sc.seed = 2000 + b;
    const auto teacher = init_params(tc);
    auto student = init_params(sc);
    Rng rng(3000 + b);
    for (auto& nt : student.named_tensors())
      for (double& v : nt.tensor.mutable_data()) v += 0.1 * rng.normal();
    const auto proj = ProjectionParams::create(8, 16, 2, 4000 + b);
    const auto map = make_layer_map(b % 2 ? MapStrategy::last_k : MapStrategy::uniform, 4, 2);
    spec.seed = b;
    double l2 = 0.0, l3 = 0.0, six = 0.0;
    for (const auto& t : gen_triples(spec, 4)) {
      const auto sp = encode(student, pack_input(t.query, t.pos_doc, sc));
      const auto sn = encode(student, pack_input(t.query, t.neg_doc, sc));
      const auto tp = encode(teacher, pack_input(t.query, t.pos_doc, tc));
      const auto tn = encode(teacher, pack_input(t.query, t.neg_doc, tc));
      const PairTraces tr{&tp, &tn, &sp, &sn};
      l2 += compose_pairwise(plan_preset("L2"), map, proj, tr).total.item();
      l3 += compose_pairwise(plan_preset("L3"), map, proj, tr).total.item();
      for (const auto* s : {&sp, &sn}) {
        const auto* t_ = s == &sp ? &tp : &tn;
        for (auto kind : {LayerTerm::attn, LayerTerm::hidn, LayerTerm::emb})
          six += l_layerwise(*t_, *s, map, proj, kind).item();
      }
    }
    worst = std::max(worst, std::abs((l2 - l3) - six));
  }
  verdict(3, worst < 1e-10,
          "100 batches of 4 triples, max |(L2 - L3) - six terms| = " + fmt("%.2e", worst));
}

// ---- 4: MRR oracle ---------------------------------------------------------------

void criterion_mrr() {
  Rng rng(77);
  std::size_t exact = 0;
  for (int d = 0; d < 100; ++d) {
    std::vector<std::vector<double>> scores(20, std::vector<double>(20));
    std::vector<std::vector<int>> labels(20, std::vector<int>(20, 0));
    for (std::size_t q = 0; q < 20; ++q) {
      // Every other devset uses coarse scores to force ties.
      for (double& v : scores[q]) v = d % 2 ? rng.normal() : static_cast<double>(rng.below(5));
      const std::size_t nrel = 1 + rng.below(3);
      for (std::size_t i = 0; i < nrel; ++i) labels[q][rng.below(20)] = 1;
    }
    std::vector<RankedList> ranked;
    for (const auto& s : scores) ranked.push_back(rank_by_scores(s));
    if (mrr_at_k(ranked, labels, 10) == testing::brute_force_mrr(scores, labels, 10)) ++exact;
  }
  verdict(4, exact == 100, std::to_string(exact) + "/100 devsets match the brute-force scan exactly");
}

// ---- 9: layer maps ---------------------------------------------------------------

void criterion_layer_maps() {
  const auto u = make_layer_map(MapStrategy::uniform, 12, 4).teacher_layers();
  const auto k = make_layer_map(MapStrategy::last_k, 12, 4).teacher_layers();
  const auto o = make_layer_map(MapStrategy::last_one, 12, 4).teacher_layers();
  auto show = [](const std::vector<std::size_t>& v) {
    std::string s = "{";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s + "}";
  };
  const bool ok = u == std::vector<std::size_t>{3, 6, 9, 12} &&
                  k == std::vector<std::size_t>{9, 10, 11, 12} && o == std::vector<std::size_t>{12};
  verdict(9, ok, "uniform " + show(u) + ", last-k " + show(k) + ", last-one " + show(o));
}

// ---- suites ----------------------------------------------------------------------

using Table = std::map<std::uint64_t, std::map<std::string, double>>;  // seed -> method -> mrr

Table by_seed(const SuiteResult& r) {
  Table t;
  for (const auto& rep : r.reports) t[rep.seed][rep.method] = rep.mrr_at_10;
  return t;
}

void print_table(const Table& t, const std::vector<std::string>& methods) {
  std::printf("  %-6s", "seed");
  for (const auto& m : methods) std::printf(" %16s", m.c_str());
  std::printf("\n");
  std::map<std::string, double> mean;
  for (const auto& [seed, row] : t) {
    std::printf("  %-6llu", static_cast<unsigned long long>(seed));
    for (const auto& m : methods) {
      std::printf(" %16.4f", row.at(m));
      mean[m] += row.at(m) / static_cast<double>(t.size());
    }
    std::printf("\n");
  }
  std::printf("  %-6s", "mean");
  for (const auto& m : methods) std::printf(" %16.4f", mean[m]);
  std::printf("\n");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void progress(const std::string& msg) { std::printf("  %s\n", msg.c_str()), std::fflush(stdout); }

void criterion_table2(ExperimentConfig c) {
  c.suite = "table2";
  c.seeds = {0, 1, 2, 3, 4};
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = run_suite(c, progress);
  const double secs = seconds_since(t0);
  const Table t = by_seed(result);
  const std::vector<std::string> students{"student-finetune", "L1", "L2", "margin-mse", "L3"};
  const std::vector<std::string> distilled{"L1", "L2", "margin-mse", "L3"};
  std::vector<std::string> methods{"teacher"};
  methods.insert(methods.end(), students.begin(), students.end());
  print_table(t, methods);
  int a = 0, b = 0, cc = 0;
  for (const auto& [seed, row] : t) {
    a += std::all_of(students.begin(), students.end(),
                     [&](const std::string& m) { return row.at("teacher") >= row.at(m); });
    b += std::all_of(distilled.begin(), distilled.end(), [&](const std::string& m) {
      return row.at(m) > row.at("student-finetune");
    });
    cc += row.at("L3") >= row.at("L1");
  }
  const bool ok = a >= 4 && b >= 4 && cc >= 4 && secs < 1800.0;
  verdict(5, ok,
          "teacher >= all students in " + std::to_string(a) + "/5, distilled > fine-tuned in " +
              std::to_string(b) + "/5, L3 >= L1 in " + std::to_string(cc) + "/5, suite " +
              fmt("%.0f", secs) + "s");
}

void criterion_table3(ExperimentConfig c) {
  c.suite = "table3";
  c.seeds = {0, 1, 2, 3, 4};
  const auto result = run_suite(c, progress);
  const Table t = by_seed(result);
  const std::vector<std::string> methods{"L2", "w/o-intermediate", "w/o-embedding", "w/o-logits",
                                         "L3"};
  print_table(t, methods);
  int last = 0;
  for (const auto& [seed, row] : t) {
    bool strictly_last = true;
    for (const auto& m : methods)
      if (m != "w/o-logits" && row.at(m) <= row.at("w/o-logits")) strictly_last = false;
    last += strictly_last;
  }
  verdict(6, last >= 4, "w/o-logits ranks last in " + std::to_string(last) + "/5 seeds");
}

// Spearman correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0 + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx == 0 || syy == 0 ? 0.0 : sxy / std::sqrt(sxx * syy);
}

void criterion_fig1(ExperimentConfig c) {
  c.suite = "fig1";
  c.seeds = {0, 1, 2};
  const auto result = run_suite(c, progress);
  std::map<double, double> l3;
  std::map<double, double> l2;
  for (const auto& r : result.reports) (r.method == "L3" ? l3 : l2)[r.fraction] += r.mrr_at_10 / 3.0;
  std::vector<double> fx, fy;
  std::printf("  fraction        L2        L3\n");
  for (const auto& [f, v] : l3) {
    fx.push_back(f);
    fy.push_back(v);
    std::printf("  %8.1f %9.4f %9.4f\n", f, l2[f], v);
  }
  const double rho = spearman(fx, fy);
  verdict(7, rho > 0.6, "Spearman(fraction, mean L3 MRR@10) = " + fmt("%.3f", rho));
}

void criterion_determinism(ExperimentConfig c, const fs::path& root) {
  c.suite = "table4";
  c.seeds = {0};
  c.cache_dir = root / "teachers";
  c.output_dir = root / "determinism_a";
  fs::remove_all(c.output_dir);
  run_suite(c, progress);
  ExperimentConfig again = c;
  again.output_dir = root / "determinism_b";
  fs::remove_all(again.output_dir);
  run_suite(again, progress);
  const std::string a = slurp(c.output_dir / "results.csv");
  const std::string b = slurp(again.output_dir / "results.csv");
  verdict(8, !a.empty() && a == b,
          "table4 suite run twice: results.csv " + std::string(a == b ? "identical" : "differs") +
              " (" + std::to_string(a.size()) + " bytes)");
}

}  // namespace

int main(int argc, char** argv) {
  fs::path output = "acceptance_runs";
  fs::path config_path = RANKDISTILL_DESK_CONFIG;
  bool quick = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--output" && i + 1 < argc) {
      output = argv[++i];
    } else if (a == "--config" && i + 1 < argc) {
      config_path = argv[++i];
    } else if (a == "--quick") {
      quick = true;
    } else {
      std::fprintf(stderr, "usage: acceptance [--output DIR] [--config FILE] [--quick]\n");
      return 2;
    }
  }

  try {
    criterion_gradients();
    criterion_identities();
    criterion_composition();
    criterion_mrr();
    if (!quick) {
      ExperimentConfig c = load_experiment_config(config_path);
      // Start cold so the table2 timing includes teacher training.
      fs::remove_all(output);
      c.output_dir = output / "table2";
      c.cache_dir = output / "teachers";
      criterion_table2(c);
      c.output_dir = output / "table3";
      criterion_table3(c);
      c.output_dir = output / "fig1";
      criterion_fig1(c);
      criterion_determinism(c, output);
    }
    criterion_layer_maps();
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
