#include "rankdistill/objectives.hpp"

#include <stdexcept>

#include "rankdistill/random.hpp"

namespace rankdistill {

namespace {

constexpr double kMaskThreshold = -1e4;

Tensor weighted(const Tensor& t, double w) { return w == 1.0 ? t : scale(t, w); }

// Masked key columns hold a huge negative constant; they are excluded from the
// attention loss by zeroing them on both sides.
Tensor masked_attention(const Tensor& scores, const Tensor& keep) {
  return keep.defined() ? mul(scores, keep) : scores;
}

Tensor attention_keep_mask(const Tensor& teacher_scores) {
  const auto v = teacher_scores.data();
  bool any = false;
  std::vector<double> keep(v.size(), 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] <= kMaskThreshold) {
      keep[i] = 0.0;
      any = true;
    }
  }
  if (!any) return Tensor();
  return Tensor::from(teacher_scores.shape(), std::move(keep));
}

Tensor project(const Tensor& x, const Tensor& w) { return w.defined() ? matmul(x, w) : x; }

}  // namespace

// ---- layer maps ----------------------------------------------------------------

void LayerMap::validate(std::size_t teacher_layers, std::size_t student_layers) const {
  std::size_t prev_s = 0, prev_t = 0;
  for (const auto& p : pairs) {
    if (p.student < 1 || p.student > student_layers) {
      throw std::invalid_argument("LayerMap: student layer " + std::to_string(p.student) +
                                  " outside 1.." + std::to_string(student_layers));
    }
    if (p.teacher < 1 || p.teacher > teacher_layers) {
      throw std::invalid_argument("LayerMap: teacher layer " + std::to_string(p.teacher) +
                                  " outside 1.." + std::to_string(teacher_layers));
    }
    if (p.student <= prev_s || p.teacher <= prev_t) {
      throw std::invalid_argument("LayerMap: layer indices must strictly increase");
    }
    prev_s = p.student;
    prev_t = p.teacher;
  }
}

std::vector<std::size_t> LayerMap::teacher_layers() const {
  std::vector<std::size_t> out;
  for (const auto& p : pairs) out.push_back(p.teacher);
  return out;
}

MapStrategy map_strategy_from_string(const std::string& name) {
  if (name == "uniform") return MapStrategy::uniform;
  if (name == "last-k" || name == "last_k") return MapStrategy::last_k;
  if (name == "last-one" || name == "last_one") return MapStrategy::last_one;
  throw std::invalid_argument("unknown layer mapping '" + name + "'");
}

std::string to_string(MapStrategy strategy) {
  switch (strategy) {
    case MapStrategy::uniform: return "uniform";
    case MapStrategy::last_k: return "last-k";
    case MapStrategy::last_one: return "last-one";
  }
  return "uniform";
}

LayerMap make_layer_map(MapStrategy strategy, std::size_t teacher_layers,
                        std::size_t student_layers, std::optional<std::size_t> k) {
  if (teacher_layers < 1 || student_layers < 1) {
    throw std::invalid_argument("make_layer_map: layer counts must be positive");
  }
  if (student_layers > teacher_layers) {
    throw std::invalid_argument("make_layer_map: student deeper than teacher");
  }
  LayerMap map;
  switch (strategy) {
    case MapStrategy::uniform: {
      if (teacher_layers % student_layers != 0) {
        throw std::invalid_argument("make_layer_map: uniform mapping needs " +
                                    std::to_string(teacher_layers) + " divisible by " +
                                    std::to_string(student_layers));
      }
      const std::size_t stride = teacher_layers / student_layers;
      for (std::size_t s = 1; s <= student_layers; ++s) map.pairs.push_back({s, s * stride});
      break;
    }
    case MapStrategy::last_k: {
      const std::size_t kk = k.value_or(student_layers);
      if (kk != student_layers) {
        throw std::invalid_argument("make_layer_map: last-k needs k == student layers (" +
                                    std::to_string(student_layers) + "), got " +
                                    std::to_string(kk));
      }
      for (std::size_t s = 1; s <= student_layers; ++s)
        map.pairs.push_back({s, teacher_layers - student_layers + s});
      break;
    }
    case MapStrategy::last_one:
      map.pairs.push_back({student_layers, teacher_layers});
      break;
  }
  map.validate(teacher_layers, student_layers);
  return map;
}

// ---- projections ---------------------------------------------------------------

std::vector<NamedTensor> ProjectionParams::named_tensors() const {
  std::vector<NamedTensor> out;
  if (!active()) return out;
  out.push_back({"projection.embedding", embedding});
  for (std::size_t i = 0; i < layers.size(); ++i)
    out.push_back({"projection.layer." + std::to_string(i), layers[i]});
  return out;
}

std::vector<Tensor> ProjectionParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_tensors()) out.push_back(nt.tensor);
  return out;
}

ProjectionParams ProjectionParams::create(std::size_t student_hidden,
                                          std::size_t teacher_hidden,
                                          std::size_t mapped_layers, std::uint64_t seed) {
  ProjectionParams p;
  if (student_hidden == teacher_hidden) return p;
  Rng rng(derive_seed(seed, 0x70726f6aULL));
  auto make = [&] {
    std::vector<double> v(student_hidden * teacher_hidden);
    for (double& x : v) x = rng.truncated_normal(0.02);
    return Tensor::from({student_hidden, teacher_hidden}, std::move(v), true);
  };
  p.embedding = make();
  for (std::size_t i = 0; i < mapped_layers; ++i) p.layers.push_back(make());
  return p;
}

// ---- plans ---------------------------------------------------------------------

void ObjectivePlan::validate() const {
  if (pair && hard) {
    throw std::invalid_argument("ObjectivePlan: pair and hard are mutually exclusive");
  }
  if (margin_mse && hard) {
    throw std::invalid_argument("ObjectivePlan: margin_mse requires the pairwise regime");
  }
  if (!(attn || hidn || emb || logits || hard || pair || margin_mse)) {
    throw std::invalid_argument("ObjectivePlan: no active terms");
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("ObjectivePlan: temperature must be positive");
  }
}

ObjectivePlan plan_preset(const std::string& name) {
  ObjectivePlan p;
  if (name == "L1") {
    p.attn = p.hidn = p.emb = p.hard = p.logits = true;
  } else if (name == "L2") {
    p.pair = p.attn = p.hidn = p.emb = p.logits = true;
  } else if (name == "L3") {
    p.pair = p.logits = true;
  } else if (name == "table3-no-intermediate") {
    p.pair = p.logits = p.emb = true;
  } else if (name == "table3-no-embedding") {
    p.pair = p.logits = p.attn = p.hidn = true;
  } else if (name == "table3-no-logits") {
    p.pair = p.attn = p.hidn = p.emb = true;
  } else if (name == "finetune-pairwise") {
    p.pair = true;
  } else if (name == "finetune-pointwise") {
    p.hard = true;
  } else if (name == "margin-mse") {
    p.margin_mse = true;
  } else {
    throw std::invalid_argument("unknown objective preset '" + name + "'");
  }
  return p;
}

std::vector<std::string> plan_preset_names() {
  return {"L1",
          "L2",
          "L3",
          "table3-no-intermediate",
          "table3-no-embedding",
          "table3-no-logits",
          "finetune-pairwise",
          "finetune-pointwise",
          "margin-mse"};
}

void to_json(nlohmann::json& j, const ObjectivePlan& p) {
  j = nlohmann::json{
      {"attn", p.attn},
      {"hidn", p.hidn},
      {"emb", p.emb},
      {"logits", p.logits},
      {"hard", p.hard},
      {"pair", p.pair},
      {"margin_mse", p.margin_mse},
      {"temperature", p.temperature},
      {"pair_score", to_string(p.pair_score)},
      {"mapping", to_string(p.mapping)},
      {"layer_reduction", p.layer_reduction == LayerReduction::mean ? "mean" : "sum"},
      {"weights",
       {{"attn", p.weights.attn},
        {"hidn", p.weights.hidn},
        {"emb", p.weights.emb},
        {"logits", p.weights.logits},
        {"hard", p.weights.hard},
        {"pair", p.weights.pair},
        {"margin_mse", p.weights.margin_mse}}}};
}

void from_json(const nlohmann::json& j, ObjectivePlan& p) {
  if (j.is_string()) {
    p = plan_preset(j.get<std::string>());
    return;
  }
  p = j.contains("preset") ? plan_preset(j.at("preset").get<std::string>())
                           : ObjectivePlan{};
  p.attn = j.value("attn", p.attn);
  p.hidn = j.value("hidn", p.hidn);
  p.emb = j.value("emb", p.emb);
  p.logits = j.value("logits", p.logits);
  p.hard = j.value("hard", p.hard);
  p.pair = j.value("pair", p.pair);
  p.margin_mse = j.value("margin_mse", p.margin_mse);
  p.temperature = j.value("temperature", p.temperature);
  if (j.contains("pair_score")) p.pair_score = score_mode_from_string(j.at("pair_score"));
  if (j.contains("mapping")) p.mapping = map_strategy_from_string(j.at("mapping"));
  if (j.contains("layer_reduction")) {
    const auto r = j.at("layer_reduction").get<std::string>();
    if (r == "mean") {
      p.layer_reduction = LayerReduction::mean;
    } else if (r == "sum") {
      p.layer_reduction = LayerReduction::sum;
    } else {
      throw std::invalid_argument("unknown layer_reduction '" + r + "'");
    }
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    p.weights.attn = w.value("attn", p.weights.attn);
    p.weights.hidn = w.value("hidn", p.weights.hidn);
    p.weights.emb = w.value("emb", p.weights.emb);
    p.weights.logits = w.value("logits", p.weights.logits);
    p.weights.hard = w.value("hard", p.weights.hard);
    p.weights.pair = w.value("pair", p.weights.pair);
    p.weights.margin_mse = w.value("margin_mse", p.weights.margin_mse);
  }
}

// ---- terms ---------------------------------------------------------------------

Tensor l_layerwise(const ForwardTrace& teacher, const ForwardTrace& student,
                   const LayerMap& map, const ProjectionParams& projection, LayerTerm kind,
                   LayerReduction reduction) {
  if (kind == LayerTerm::emb) {
    return mse(project(student.emb_out, projection.embedding), teacher.emb_out);
  }
  if (map.pairs.empty()) throw std::invalid_argument("l_layerwise: empty layer map");
  if (projection.active() && kind == LayerTerm::hidn &&
      projection.layers.size() != map.pairs.size()) {
    throw std::invalid_argument("l_layerwise: projection count does not match layer map");
  }
  std::vector<Tensor> per_layer;
  for (std::size_t i = 0; i < map.pairs.size(); ++i) {
    const auto [ls, lt] = map.pairs[i];
    if (ls > student.hidden.size() || lt > teacher.hidden.size() ||
        ls > student.attn_scores.size() || lt > teacher.attn_scores.size()) {
      throw std::invalid_argument("l_layerwise: unmapped layer (" + std::to_string(ls) +
                                  " -> " + std::to_string(lt) + ")");
    }
    if (kind == LayerTerm::attn) {
      const Tensor& t = teacher.attn_scores[lt - 1];
      const Tensor& s = student.attn_scores[ls - 1];
      if (!t.defined() || !s.defined()) {
        throw std::invalid_argument("l_layerwise: missing attention for mapped layer");
      }
      if (t.dim(0) != s.dim(0)) {
        throw std::invalid_argument("l_layerwise: attention head counts differ (teacher " +
                                    std::to_string(t.dim(0)) + ", student " +
                                    std::to_string(s.dim(0)) + ")");
      }
      if (t.shape() != s.shape()) {
        throw std::invalid_argument("l_layerwise: attention shapes differ " +
                                    shape_str(t.shape()) + " vs " + shape_str(s.shape()));
      }
      const Tensor keep = attention_keep_mask(t);
      per_layer.push_back(mse(masked_attention(s, keep), masked_attention(t, keep)));
    } else {
      const Tensor& t = teacher.hidden[lt - 1];
      const Tensor& s = student.hidden[ls - 1];
      if (!t.defined() || !s.defined()) {
        throw std::invalid_argument("l_layerwise: missing hidden state for mapped layer");
      }
      const Tensor w = projection.active() ? projection.layers[i] : Tensor();
      per_layer.push_back(mse(project(s, w), t));
    }
  }
  Tensor total = per_layer[0];
  for (std::size_t i = 1; i < per_layer.size(); ++i) total = add(total, per_layer[i]);
  if (reduction == LayerReduction::mean && per_layer.size() > 1) {
    total = scale(total, 1.0 / static_cast<double>(per_layer.size()));
  }
  return total;
}

Tensor l_logits(const Tensor& teacher_logits, const Tensor& student_logits,
                double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("l_logits: temperature must be positive");
  }
  if (teacher_logits.shape() != student_logits.shape()) {
    throw std::invalid_argument("l_logits: logit shapes differ");
  }
  const double inv_t = 1.0 / temperature;
  Tensor target;
  {
    NoGradGuard no_grad;
    target = softmax(scale(teacher_logits.detach(), inv_t));
  }
  return scale(sum(mul(target, log_softmax(scale(student_logits, inv_t)))), -1.0);
}

Tensor l_hard(const Tensor& student_logits, Relevance label) {
  if (label != Relevance::relevant && label != Relevance::irrelevant) {
    throw std::invalid_argument("l_hard: label must be relevant or irrelevant");
  }
  return scale(element(log_softmax(student_logits), relevance_class(label)), -1.0);
}

Tensor l_pair(const Tensor& score_pos, const Tensor& score_neg) {
  return relu(add_scalar(sub(score_neg, score_pos), 1.0));
}

Tensor l_margin_mse(const Tensor& teacher_pos, const Tensor& teacher_neg,
                    const Tensor& student_pos, const Tensor& student_neg) {
  return mse(sub(student_pos, student_neg), sub(teacher_pos, teacher_neg).detach());
}

// ---- composites ----------------------------------------------------------------

double LossTerms::value(const std::string& name) const {
  for (const auto& [n, t] : terms)
    if (n == name) return t.item();
  throw std::out_of_range("LossTerms: no term '" + name + "'");
}

bool LossTerms::has(const std::string& name) const {
  for (const auto& [n, t] : terms)
    if (n == name) return true;
  return false;
}

namespace {

void add_term(LossTerms& out, std::string name, const Tensor& t) {
  out.total = out.total.defined() ? add(out.total, t) : t;
  out.terms.emplace_back(std::move(name), t);
}

void add_distillation_terms(LossTerms& out, const ObjectivePlan& plan, const LayerMap& map,
                            const ProjectionParams& projection, const ForwardTrace& teacher,
                            const ForwardTrace& student, const std::string& suffix) {
  const auto& w = plan.weights;
  if (plan.attn) {
    add_term(out, "attn" + suffix,
             weighted(l_layerwise(teacher, student, map, projection, LayerTerm::attn,
                                  plan.layer_reduction),
                      w.attn));
  }
  if (plan.hidn) {
    add_term(out, "hidn" + suffix,
             weighted(l_layerwise(teacher, student, map, projection, LayerTerm::hidn,
                                  plan.layer_reduction),
                      w.hidn));
  }
  if (plan.emb && map.include_embedding) {
    add_term(out, "emb" + suffix,
             weighted(l_layerwise(teacher, student, map, projection, LayerTerm::emb,
                                  plan.layer_reduction),
                      w.emb));
  }
  if (plan.logits) {
    add_term(out, "logits" + suffix,
             weighted(l_logits(teacher.logits, student.logits, plan.temperature), w.logits));
  }
}

}  // namespace

LossTerms compose_pairwise(const ObjectivePlan& plan, const LayerMap& map,
                           const ProjectionParams& projection, const PairTraces& traces) {
  plan.validate();
  if (!plan.pairwise()) {
    throw std::invalid_argument("compose_pairwise: plan is not in the pairwise regime");
  }
  if (!traces.student_pos || !traces.student_neg) {
    throw std::invalid_argument("compose_pairwise: student traces are required");
  }
  if (plan.needs_teacher() && (!traces.teacher_pos || !traces.teacher_neg)) {
    throw std::invalid_argument("compose_pairwise: plan needs teacher traces");
  }
  LossTerms out;
  if (plan.pair) {
    add_term(out, "pair",
             weighted(l_pair(ranking_score(*traces.student_pos, plan.pair_score),
                             ranking_score(*traces.student_neg, plan.pair_score)),
                      plan.weights.pair));
  }
  if (plan.margin_mse) {
    add_term(out, "margin_mse",
             weighted(l_margin_mse(ranking_score(*traces.teacher_pos, ScoreMode::logit),
                                   ranking_score(*traces.teacher_neg, ScoreMode::logit),
                                   ranking_score(*traces.student_pos, ScoreMode::logit),
                                   ranking_score(*traces.student_neg, ScoreMode::logit)),
                      plan.weights.margin_mse));
  }
  if (plan.needs_teacher()) {
    add_distillation_terms(out, plan, map, projection, *traces.teacher_pos,
                           *traces.student_pos, "+");
    add_distillation_terms(out, plan, map, projection, *traces.teacher_neg,
                           *traces.student_neg, "-");
  }
  return out;
}

LossTerms compose_pointwise(const ObjectivePlan& plan, const LayerMap& map,
                            const ProjectionParams& projection, const ForwardTrace* teacher,
                            const ForwardTrace& student, Relevance label) {
  plan.validate();
  if (plan.pairwise()) {
    throw std::invalid_argument("compose_pointwise: plan is in the pairwise regime");
  }
  if (plan.needs_teacher() && !teacher) {
    throw std::invalid_argument("compose_pointwise: plan needs a teacher trace");
  }
  LossTerms out;
  if (plan.needs_teacher()) add_distillation_terms(out, plan, map, projection, *teacher, student, "");
  if (plan.hard) add_term(out, "hard", weighted(l_hard(student.logits, label), plan.weights.hard));
  return out;
}

}  // namespace rankdistill
