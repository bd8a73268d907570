#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rankdistill/encoder.hpp"

namespace rankdistill {

// ---- layer mapping -------------------------------------------------------------

struct LayerPair {
  std::size_t student = 0;  // 1-based
  std::size_t teacher = 0;  // 1-based
  bool operator==(const LayerPair&) const = default;
};

struct LayerMap {
  std::vector<LayerPair> pairs;
  bool include_embedding = true;

  // Teacher indices strictly increase with the student index and stay in range.
  void validate(std::size_t teacher_layers, std::size_t student_layers) const;
  std::vector<std::size_t> teacher_layers() const;
};

enum class MapStrategy { uniform, last_k, last_one };

MapStrategy map_strategy_from_string(const std::string& name);
std::string to_string(MapStrategy strategy);

// uniform:  l_S -> l_S * (L_T / L_S)       (L_T divisible by L_S)
// last_k:   l_S -> L_T - L_S + l_S          (k must equal L_S)
// last_one: L_S -> L_T only
LayerMap make_layer_map(MapStrategy strategy, std::size_t teacher_layers,
                        std::size_t student_layers,
                        std::optional<std::size_t> k = std::nullopt);

// ---- projections ---------------------------------------------------------------

// Learnable student->teacher width maps (H_S x H_T): one per mapped layer plus
// one for the embedding output. Empty when the widths already agree.
struct ProjectionParams {
  std::vector<Tensor> layers;
  Tensor embedding;

  bool active() const { return embedding.defined(); }
  std::vector<NamedTensor> named_tensors() const;
  std::vector<Tensor> parameters() const;

  static ProjectionParams create(std::size_t student_hidden, std::size_t teacher_hidden,
                                 std::size_t mapped_layers, std::uint64_t seed);
};

// ---- objective plan ------------------------------------------------------------

enum class LayerReduction { mean, sum };

struct TermWeights {
  double attn = 1.0, hidn = 1.0, emb = 1.0, logits = 1.0, hard = 1.0, pair = 1.0,
         margin_mse = 1.0;
};

struct ObjectivePlan {
  bool attn = false;
  bool hidn = false;
  bool emb = false;
  bool logits = false;
  bool hard = false;
  bool pair = false;
  bool margin_mse = false;
  double temperature = 1.0;
  // Score fed to the pairwise hinge. Margin-MSE always uses raw logits.
  ScoreMode pair_score = ScoreMode::probability;
  MapStrategy mapping = MapStrategy::uniform;
  LayerReduction layer_reduction = LayerReduction::mean;
  TermWeights weights;

  // Pairwise (pair / margin_mse) and pointwise (hard) regimes are exclusive.
  void validate() const;
  bool pairwise() const { return pair || margin_mse; }
  bool uses_layerwise() const { return attn || hidn || emb; }
  bool needs_teacher() const { return uses_layerwise() || logits || margin_mse; }
};

// "L1", "L2", "L3", "table3-no-intermediate", "table3-no-embedding",
// "table3-no-logits", plus "finetune-pairwise", "finetune-pointwise" and
// "margin-mse".
ObjectivePlan plan_preset(const std::string& name);
std::vector<std::string> plan_preset_names();

void to_json(nlohmann::json& j, const ObjectivePlan& plan);
// Accepts either a preset name string or an object with optional "preset"
// followed by explicit overrides.
void from_json(const nlohmann::json& j, ObjectivePlan& plan);

// ---- individual terms ----------------------------------------------------------

enum class LayerTerm { attn, hidn, emb };
enum class Relevance { irrelevant = 0, relevant = 1 };

// Class index used by the logits: 0 = relevant, 1 = irrelevant.
inline std::size_t relevance_class(Relevance r) { return r == Relevance::relevant ? 0 : 1; }

Tensor l_layerwise(const ForwardTrace& teacher, const ForwardTrace& student,
                   const LayerMap& map, const ProjectionParams& projection, LayerTerm kind,
                   LayerReduction reduction = LayerReduction::mean);

// Soft cross-entropy -sum_c softmax(zT/t)[c] * log_softmax(zS/t)[c]; zT is a
// constant target.
Tensor l_logits(const Tensor& teacher_logits, const Tensor& student_logits,
                double temperature);

Tensor l_hard(const Tensor& student_logits, Relevance label);

// max(0, 1 - f(q,d+) + f(q,d-))
Tensor l_pair(const Tensor& score_pos, const Tensor& score_neg);

// ((fS+ - fS-) - (fT+ - fT-))^2
Tensor l_margin_mse(const Tensor& teacher_pos, const Tensor& teacher_neg,
                    const Tensor& student_pos, const Tensor& student_neg);

// ---- composites ----------------------------------------------------------------

struct LossTerms {
  std::vector<std::pair<std::string, Tensor>> terms;
  Tensor total;

  double value(const std::string& name) const;
  bool has(const std::string& name) const;
};

struct PairTraces {
  const ForwardTrace* teacher_pos = nullptr;  // may be null when the plan needs no teacher
  const ForwardTrace* teacher_neg = nullptr;
  const ForwardTrace* student_pos = nullptr;
  const ForwardTrace* student_neg = nullptr;
};

// Unit-weighted (by default) sum of the active terms. Per-pair terms are
// suffixed "+" (q,d+) and "-" (q,d-).
LossTerms compose_pairwise(const ObjectivePlan& plan, const LayerMap& map,
                           const ProjectionParams& projection, const PairTraces& traces);

LossTerms compose_pointwise(const ObjectivePlan& plan, const LayerMap& map,
                            const ProjectionParams& projection, const ForwardTrace* teacher,
                            const ForwardTrace& student, Relevance label);

}  // namespace rankdistill
