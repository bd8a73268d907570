#include "rankdistill/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "rankdistill/random.hpp"

namespace rankdistill {

namespace {

constexpr std::uint64_t kSubsetStream = 0x737562736574ULL;
constexpr std::uint64_t kEpochStream = 0x65706f6368ULL;
constexpr std::uint64_t kTeacherInit = 0x7465616368ULL;
constexpr std::uint64_t kStudentInit = 0x73747564ULL;
constexpr std::uint64_t kProjectionInit = 0x70726f6aULL;

struct TracePair {
  ForwardTrace pos;
  ForwardTrace neg;
};

// Keeps only what the plan reads from the teacher.
ForwardTrace prune_teacher_trace(ForwardTrace full, const ObjectivePlan& plan,
                                 const LayerMap& map) {
  ForwardTrace t;
  t.logits = full.logits;
  if (plan.emb) t.emb_out = full.emb_out;
  if (plan.attn || plan.hidn) {
    t.hidden.resize(full.hidden.size());
    t.attn_scores.resize(full.attn_scores.size());
    for (std::size_t lt : map.teacher_layers()) {
      if (plan.hidn) t.hidden[lt - 1] = full.hidden[lt - 1];
      if (plan.attn) t.attn_scores[lt - 1] = full.attn_scores[lt - 1];
    }
  }
  return t;
}

TracePair teacher_traces(const EncoderParams& teacher, const ObjectivePlan& plan,
                         const LayerMap& map, const Triple& triple) {
  NoGradGuard no_grad;
  const auto& cfg = teacher.config;
  return {prune_teacher_trace(encode(teacher, pack_input(triple.query, triple.pos_doc, cfg)),
                              plan, map),
          prune_teacher_trace(encode(teacher, pack_input(triple.query, triple.neg_doc, cfg)),
                              plan, map)};
}

LossTerms merge_pointwise(LossTerms pos, LossTerms neg) {
  LossTerms out;
  for (auto& [name, t] : pos.terms) out.terms.emplace_back(name + "+", t);
  for (auto& [name, t] : neg.terms) out.terms.emplace_back(name + "-", t);
  out.total = add(pos.total, neg.total);
  return out;
}

LossTerms student_loss(const EncoderParams& student, const ObjectivePlan& plan,
                       const LayerMap& map, const ProjectionParams& projection,
                       const TracePair* teacher, const Triple& triple) {
  const auto& cfg = student.config;
  const ForwardTrace pos = encode(student, pack_input(triple.query, triple.pos_doc, cfg));
  const ForwardTrace neg = encode(student, pack_input(triple.query, triple.neg_doc, cfg));
  if (plan.pairwise()) {
    PairTraces traces{teacher ? &teacher->pos : nullptr, teacher ? &teacher->neg : nullptr,
                      &pos, &neg};
    return compose_pairwise(plan, map, projection, traces);
  }
  return merge_pointwise(
      compose_pointwise(plan, map, projection, teacher ? &teacher->pos : nullptr, pos,
                        Relevance::relevant),
      compose_pointwise(plan, map, projection, teacher ? &teacher->neg : nullptr, neg,
                        Relevance::irrelevant));
}

void accumulate(LossRecord& rec, const LossTerms& terms, double weight) {
  for (const auto& [name, t] : terms.terms) {
    std::string base = name;
    if (!base.empty() && (base.back() == '+' || base.back() == '-')) base.pop_back();
    const double v = t.item() * weight;
    if (base == "pair") rec.pair += v;
    else if (base == "hard") rec.hard += v;
    else if (base == "logits") rec.logits += v;
    else if (base == "attn") rec.attn += v;
    else if (base == "hidn") rec.hidn += v;
    else if (base == "emb") rec.emb += v;
    else if (base == "margin_mse") rec.margin_mse += v;
  }
  rec.total += terms.total.item() * weight;
}

std::vector<NamedTensor> trainable(const EncoderParams& params,
                                   const ProjectionParams& projection) {
  auto out = params.named_tensors();
  for (auto& nt : projection.named_tensors()) out.push_back(nt);
  return out;
}

// Shared optimisation loop: `teacher_for(i)` yields cached teacher traces for
// subset position i (or null when the plan needs none).
template <typename TeacherLookup>
std::vector<LossRecord> run_training(EncoderParams& model, ProjectionParams& projection,
                                     const ObjectivePlan& plan, const LayerMap& map,
                                     const TrainConfig& config,
                                     std::span<const Triple> triples,
                                     const std::vector<std::size_t>& subset,
                                     TeacherLookup teacher_for) {
  std::vector<LossRecord> history;
  if (config.epochs == 0) return history;
  auto params = trainable(model, projection);
  OptimizerState state = make_optimizer_state(params);
  std::size_t step = 0;
  std::vector<std::size_t> order(subset.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, kEpochStream, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      LossRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      for (auto& p : params) p.tensor.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t pos = order[i];
        const LossTerms terms = student_loss(model, plan, map, projection, teacher_for(pos),
                                             triples[subset[pos]]);
        accumulate(rec, terms, inv_b);
        scale(terms.total, inv_b).backward();
      }
      adam_step(params, state, config.learning_rate);
      history.push_back(rec);
      ++step;
    }
  }
  return history;
}

}  // namespace

// ---- optimiser -----------------------------------------------------------------

OptimizerState make_optimizer_state(std::span<const NamedTensor> params, AdamConfig config) {
  OptimizerState s;
  s.config = config;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor.numel(), 0.0);
    s.second_moment.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_step(std::span<const NamedTensor> params, OptimizerState& state,
               double learning_rate) {
  if (params.size() != state.first_moment.size()) {
    throw std::invalid_argument("adam_step: optimizer state tracks " +
                                std::to_string(state.first_moment.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (state.first_moment[i].size() != t.numel()) {
      throw std::invalid_argument("adam_step: state shape mismatch for " + params[i].name);
    }
    for (double g : t.grad()) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("adam_step: non-finite gradient in parameter '" +
                                 params[i].name + "'");
      }
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    const auto grad = t.grad();
    auto values = t.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      values[j] -= learning_rate * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

// ---- config --------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(data_fraction > 0.0 && data_fraction <= 1.0)) {
    throw std::invalid_argument("TrainConfig: data_fraction must lie in (0, 1]");
  }
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("TrainConfig: learning_rate must be positive");
  }
  plan.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"learning_rate", c.learning_rate},
      {"batch_size", c.batch_size},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"data_fraction", c.data_fraction},
      {"plan", c.plan},
      {"teacher_config", c.teacher_config},
      {"student_config", c.student_config},
      {"teacher_objective",
       c.teacher_objective == TeacherObjective::pairwise ? "pairwise" : "pointwise"}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.data_fraction = j.value("data_fraction", d.data_fraction);
  c.plan = j.contains("plan") ? j.at("plan").get<ObjectivePlan>() : d.plan;
  c.teacher_config =
      j.contains("teacher_config") ? j.at("teacher_config").get<EncoderConfig>() : d.teacher_config;
  c.student_config =
      j.contains("student_config") ? j.at("student_config").get<EncoderConfig>() : d.student_config;
  const std::string obj = j.value("teacher_objective", "pairwise");
  if (obj == "pairwise") {
    c.teacher_objective = TeacherObjective::pairwise;
  } else if (obj == "pointwise") {
    c.teacher_objective = TeacherObjective::pointwise;
  } else {
    throw std::invalid_argument("unknown teacher_objective '" + obj + "'");
  }
}

// ---- training ------------------------------------------------------------------

std::vector<std::size_t> select_training_subset(std::size_t n, double fraction,
                                                std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("select_training_subset: fraction must lie in (0, 1]");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, kSubsetStream));
  rng.shuffle(std::span<std::size_t>(idx));
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  idx.resize(std::min(n, std::max<std::size_t>(1, keep)));
  return idx;
}

std::uint64_t teacher_init_seed(std::uint64_t seed) { return derive_seed(seed, kTeacherInit); }
std::uint64_t student_init_seed(std::uint64_t seed) { return derive_seed(seed, kStudentInit); }

TrainResult finetune_teacher(const TrainConfig& config, std::span<const Triple> triples) {
  config.validate();
  if (triples.empty()) throw std::invalid_argument("finetune_teacher: no training triples");
  EncoderConfig model_cfg = config.teacher_config;
  model_cfg.seed = teacher_init_seed(config.seed);
  TrainResult result;
  result.params = init_params(model_cfg);
  ObjectivePlan plan = plan_preset(config.teacher_objective == TeacherObjective::pairwise
                                       ? "finetune-pairwise"
                                       : "finetune-pointwise");
  plan.pair_score = config.plan.pair_score;
  const auto subset = select_training_subset(triples.size(), config.data_fraction, config.seed);
  result.history = run_training(result.params, result.projection, plan, LayerMap{}, config,
                                triples, subset,
                                [](std::size_t) -> const TracePair* { return nullptr; });
  return result;
}

TrainResult distill_student(const EncoderParams& teacher, const TrainConfig& config,
                            std::span<const Triple> triples, const DistillOptions& options) {
  config.validate();
  if (triples.empty()) throw std::invalid_argument("distill_student: no training triples");
  const ObjectivePlan& plan = config.plan;

  TrainResult result;
  if (options.student_init) {
    result.params = options.student_init->clone(true);
  } else {
    EncoderConfig model_cfg = config.student_config;
    model_cfg.seed = student_init_seed(config.seed);
    result.params = init_params(model_cfg);
  }
  const auto& scfg = result.params.config;

  LayerMap map;
  if (plan.needs_teacher()) {
    const auto& tcfg = teacher.config;
    if (tcfg.vocab != scfg.vocab || tcfg.max_query_len != scfg.max_query_len ||
        tcfg.max_doc_len != scfg.max_doc_len) {
      throw std::invalid_argument(
          "distill_student: teacher and student must share vocabulary and truncation lengths");
    }
    if (plan.attn && tcfg.heads != scfg.heads) {
      throw std::invalid_argument("distill_student: attention distillation needs equal head "
                                  "counts (teacher " + std::to_string(tcfg.heads) +
                                  ", student " + std::to_string(scfg.heads) + ")");
    }
    if (plan.uses_layerwise()) {
      map = make_layer_map(plan.mapping, tcfg.num_layers, scfg.num_layers);
      result.projection = ProjectionParams::create(
          scfg.hidden, tcfg.hidden, map.pairs.size(), derive_seed(config.seed, kProjectionInit));
    }
  }

  const auto subset = select_training_subset(triples.size(), config.data_fraction, config.seed);

  // The teacher is frozen, so its (pruned) traces are computed once per run.
  std::vector<TracePair> cache;
  if (plan.needs_teacher() && config.epochs > 0) {
    cache.reserve(subset.size());
    for (std::size_t i : subset) cache.push_back(teacher_traces(teacher, plan, map, triples[i]));
  }
  result.history = run_training(result.params, result.projection, plan, map, config, triples,
                                subset, [&](std::size_t i) -> const TracePair* {
                                  return cache.empty() ? nullptr : &cache[i];
                                });
  return result;
}

LossTerms triple_loss(const EncoderParams& teacher, const EncoderParams& student,
                      const ObjectivePlan& plan, const LayerMap& map,
                      const ProjectionParams& projection, const Triple& triple) {
  if (!plan.needs_teacher()) {
    return student_loss(student, plan, map, projection, nullptr, triple);
  }
  const TracePair t = teacher_traces(teacher, plan, map, triple);
  return student_loss(student, plan, map, projection, &t, triple);
}

void write_loss_history_csv(const std::filesystem::path& path,
                            std::span<const LossRecord> history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "step,epoch,pair,hard,logits,attn,hidn,emb,margin_mse,total\n";
  for (const auto& r : history) {
    out << r.step << ',' << r.epoch << ',' << r.pair << ',' << r.hard << ',' << r.logits << ','
        << r.attn << ',' << r.hidn << ',' << r.emb << ',' << r.margin_mse << ',' << r.total
        << '\n';
  }
}

}  // namespace rankdistill
