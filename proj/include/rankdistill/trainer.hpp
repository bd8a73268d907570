#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rankdistill/encoder.hpp"
#include "rankdistill/objectives.hpp"
#include "rankdistill/synth_data.hpp"

namespace rankdistill {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

OptimizerState make_optimizer_state(std::span<const NamedTensor> params,
                                    AdamConfig config = {});

// Bias-corrected Adam update in place. Parameters without a gradient are
// treated as having a zero gradient. Throws naming the first parameter whose
// gradient is not finite, before anything is modified.
void adam_step(std::span<const NamedTensor> params, OptimizerState& state,
               double learning_rate);

enum class TeacherObjective { pairwise, pointwise };

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  double data_fraction = 1.0;
  ObjectivePlan plan = plan_preset("L3");
  EncoderConfig teacher_config;
  EncoderConfig student_config;
  TeacherObjective teacher_objective = TeacherObjective::pairwise;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double pair = 0, hard = 0, logits = 0, attn = 0, hidn = 0, emb = 0, margin_mse = 0;
  double total = 0;
};

struct TrainResult {
  EncoderParams params;
  ProjectionParams projection;
  std::vector<LossRecord> history;
};

// Indices of the training prefix: the triples are shuffled once with a
// seed-derived stream and the first round(fraction * n) (at least one) kept.
std::vector<std::size_t> select_training_subset(std::size_t n, double fraction,
                                                std::uint64_t seed);

// Model initialisation seeds derived from TrainConfig::seed.
std::uint64_t teacher_init_seed(std::uint64_t seed);
std::uint64_t student_init_seed(std::uint64_t seed);

// Fine-tunes a freshly initialised teacher on pairwise hinge (default) or
// pointwise cross-entropy. The hinge scores with config.plan.pair_score.
TrainResult finetune_teacher(const TrainConfig& config, std::span<const Triple> triples);

struct DistillOptions {
  // Start the student from these weights instead of a fresh initialisation.
  std::optional<EncoderParams> student_init;
};

// Single-stage task-specific distillation from a frozen teacher. Plans that
// need no teacher (e.g. "finetune-pairwise") train the student alone.
TrainResult distill_student(const EncoderParams& teacher, const TrainConfig& config,
                            std::span<const Triple> triples,
                            const DistillOptions& options = {});

// Loss of `plan` for one triple with the student at its current weights
// (teacher and student traces computed fresh). Used for diagnostics and tests.
LossTerms triple_loss(const EncoderParams& teacher, const EncoderParams& student,
                      const ObjectivePlan& plan, const LayerMap& map,
                      const ProjectionParams& projection, const Triple& triple);

void write_loss_history_csv(const std::filesystem::path& path,
                            std::span<const LossRecord> history);

}  // namespace rankdistill
