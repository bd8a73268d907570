#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "rankdistill/trainer.hpp"
#include "test_util.hpp"

using namespace rankdistill;
namespace fs = std::filesystem;

namespace {

EncoderConfig small(std::size_t layers, std::size_t hidden) {
  EncoderConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = 2;
  c.ffn_dim = 2 * hidden;
  return c;
}

TrainConfig base_config(const std::string& plan = "L3") {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 4;
  c.epochs = 1;
  c.seed = 3;
  c.plan = plan_preset(plan);
  c.plan.pair_score = ScoreMode::logit;
  c.teacher_config = small(2, 16);
  c.student_config = small(1, 8);
  return c;
}

bool same_bits(const EncoderParams& a, const EncoderParams& b) {
  const auto na = a.named_tensors();
  const auto nb = b.named_tensors();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    const auto da = na[i].tensor.data();
    const auto db = nb[i].tensor.data();
    if (!std::equal(da.begin(), da.end(), db.begin(), db.end())) return false;
  }
  return true;
}

double entropy(const Tensor& logits) {
  const double a = logits.at(0), b = logits.at(1);
  const double m = std::max(a, b);
  const double z = std::exp(a - m) + std::exp(b - m);
  double h = 0.0;
  for (double v : {a, b}) {
    const double p = std::exp(v - m) / z;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

TEST_CASE("Adam's first step moves each coordinate by lr against the gradient sign") {
  Tensor w = testing::random_tensor({3, 4}, 1, 1.0, true);
  const Tensor c = testing::random_tensor({3, 4}, 2, 5.0);
  const std::vector<double> before(w.data().begin(), w.data().end());
  sum(mul(w, c)).backward();
  std::vector<NamedTensor> params{{"w", w}};
  auto state = make_optimizer_state(params);
  adam_step(params, state, 0.01);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double sign = c.at(i) > 0 ? 1.0 : -1.0;
    CHECK(std::abs(w.at(i) - (before[i] - 0.01 * sign)) < 1e-9);
  }
  CHECK(state.step == 1);
}

TEST_CASE("a zero gradient leaves parameters unchanged") {
  Tensor w = testing::random_tensor({5}, 3, 1.0, true);
  const std::vector<double> before(w.data().begin(), w.data().end());
  sum(scale(w, 0.0)).backward();
  std::vector<NamedTensor> params{{"w", w}};
  auto state = make_optimizer_state(params);
  for (int i = 0; i < 3; ++i) adam_step(params, state, 0.1);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(w.at(i) == before[i]);
}

TEST_CASE("a non-finite gradient names the parameter and changes nothing") {
  Tensor a = testing::random_tensor({2}, 4, 1.0, true);
  Tensor b = testing::random_tensor({2}, 5, 1.0, true);
  const Tensor bad = Tensor::from({2}, {1.0, std::numeric_limits<double>::infinity()});
  sum(add(a, mul(b, bad))).backward();
  std::vector<NamedTensor> params{{"first", a}, {"layer.1.ffn_w1", b}};
  auto state = make_optimizer_state(params);
  const double a0 = a.at(0);
  CHECK_THROWS_WITH(adam_step(params, state, 0.1), doctest::Contains("layer.1.ffn_w1"));
  CHECK(a.at(0) == a0);
  CHECK(state.step == 0);
}

TEST_CASE("training subsets: prefix property, rounding and validation") {
  const auto all = select_training_subset(100, 1.0, 9);
  const auto half = select_training_subset(100, 0.5, 9);
  REQUIRE(half.size() == 50);
  CHECK(std::equal(half.begin(), half.end(), all.begin()));
  std::vector<std::size_t> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK(select_training_subset(100, 0.001, 9).size() == 1);
  CHECK(select_training_subset(10, 0.25, 9).size() == 3);
  CHECK(select_training_subset(100, 1.0, 10) != all);
  CHECK_THROWS(select_training_subset(10, 0.0, 1));
  CHECK_THROWS(select_training_subset(10, 1.5, 1));
}

TEST_CASE("zero epochs returns the initialisation and an empty history") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 8);
  auto cfg = base_config("finetune-pairwise");
  cfg.epochs = 0;
  const auto r = finetune_teacher(cfg, triples);
  CHECK(r.history.empty());
  EncoderConfig init = cfg.teacher_config;
  init.seed = teacher_init_seed(cfg.seed);
  CHECK(same_bits(r.params, init_params(init)));
}

TEST_CASE("history has one record per optimiser step") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 10);
  auto cfg = base_config("finetune-pairwise");
  cfg.epochs = 2;
  cfg.batch_size = 4;
  const auto r = distill_student(EncoderParams{}, cfg, triples);
  REQUIRE(r.history.size() == 6);
  CHECK(r.history[2].epoch == 0);
  CHECK(r.history[3].epoch == 1);
  CHECK(r.history[5].step == 5);
  for (const auto& rec : r.history) CHECK(rec.total == doctest::Approx(rec.pair));
}

TEST_CASE("distillation leaves the teacher bit-identical and is deterministic") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 12);
  auto cfg = base_config("L2");
  auto tcfg = cfg.teacher_config;
  tcfg.seed = 77;
  const auto teacher = init_params(tcfg);
  const auto snapshot = teacher.clone(false);
  const auto a = distill_student(teacher, cfg, triples);
  const auto b = distill_student(teacher, cfg, triples);
  CHECK(same_bits(teacher, snapshot));
  CHECK(same_bits(a.params, b.params));
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].total == b.history[i].total);
  cfg.seed = 4;
  CHECK_FALSE(same_bits(distill_student(teacher, cfg, triples).params, a.params));
}

TEST_CASE("self-distillation: zero attention loss and logits loss equal to the teacher entropy") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 6);
  auto cfg = base_config();
  cfg.plan = ObjectivePlan{};
  cfg.plan.attn = true;
  cfg.plan.logits = true;
  cfg.batch_size = triples.size();
  auto tcfg = cfg.teacher_config;
  tcfg.seed = 5;
  auto teacher = init_params(tcfg);
  Rng rng(1);
  for (auto& nt : teacher.named_tensors())
    for (double& v : nt.tensor.mutable_data()) v += 0.2 * rng.normal();
  DistillOptions opts;
  opts.student_init = teacher.clone(false);
  const auto r = distill_student(teacher, cfg, triples, opts);
  REQUIRE(r.history.size() == 1);
  double expected = 0.0;
  for (const auto& t : triples) {
    NoGradGuard ng;
    expected += entropy(encode(teacher, pack_input(t.query, t.pos_doc, tcfg)).logits);
    expected += entropy(encode(teacher, pack_input(t.query, t.neg_doc, tcfg)).logits);
  }
  expected /= static_cast<double>(triples.size());
  CHECK(r.history[0].attn == 0.0);
  CHECK(r.history[0].logits == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("attention distillation rejects unequal head counts") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 2);
  auto cfg = base_config("L2");
  cfg.student_config.heads = 4;
  auto tcfg = cfg.teacher_config;
  CHECK_THROWS_WITH(distill_student(init_params(tcfg), cfg, triples),
                    doctest::Contains("head"));
  cfg = base_config("L3");
  CHECK_THROWS(distill_student(init_params(tcfg), cfg, std::span<const Triple>{}));
  cfg.data_fraction = 0.0;
  CHECK_THROWS(distill_student(init_params(tcfg), cfg, triples));
}

TEST_CASE("fine-tuning lowers the training loss") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 40);
  auto cfg = base_config("finetune-pairwise");
  cfg.student_config = small(1, 16);
  cfg.epochs = 8;
  const auto r = distill_student(EncoderParams{}, cfg, triples);
  const std::size_t per_epoch = 10;
  REQUIRE(r.history.size() == 8 * per_epoch);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < per_epoch; ++i) {
    first += r.history[i].total;
    last += r.history[r.history.size() - 1 - i].total;
  }
  CHECK(last < first);
}

TEST_CASE("loss history CSV and config JSON") {
  const auto triples = gen_triples(SyntheticTaskSpec{}, 4);
  auto cfg = base_config("finetune-pairwise");
  const auto r = distill_student(EncoderParams{}, cfg, triples);
  const fs::path path = fs::temp_directory_path() / "rankdistill_test_history.csv";
  write_loss_history_csv(path, r.history);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,epoch,pair,hard,logits,attn,hidn,emb,margin_mse,total");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == r.history.size());

  const nlohmann::json j = cfg;
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.plan.pair_score == ScoreMode::logit);
}
