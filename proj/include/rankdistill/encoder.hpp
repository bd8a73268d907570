#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rankdistill/tensor.hpp"

namespace rankdistill {

using TokenId = std::uint32_t;

// Transformer cross-encoder dimensions. Token ids in [0, vocab) are content
// tokens; the three ids after them are [CLS], [SEP] and [PAD].
struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t vocab = 200;
  std::size_t max_query_len = 8;
  std::size_t max_doc_len = 24;
  std::size_t type_vocab = 2;
  // 0 sizes the table to exactly max_query_len + max_doc_len + 3.
  std::size_t max_positions = 0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t position_table_size() const;
  std::size_t embedding_rows() const { return vocab + 3; }
  std::size_t head_dim() const { return hidden / heads; }
  std::size_t cls_id() const { return vocab; }
  std::size_t sep_id() const { return vocab + 1; }
  std::size_t pad_id() const { return vocab + 2; }

  bool operator==(const EncoderConfig&) const = default;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor attn_ln_gain, attn_ln_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ffn_ln_gain, ffn_ln_bias;
};

struct EncoderParams {
  EncoderConfig config;
  Tensor token_emb, position_emb, segment_emb;
  Tensor emb_ln_gain, emb_ln_bias;
  std::vector<LayerParams> layers;
  Tensor pooler_w, pooler_b;
  Tensor classifier_w, classifier_b;

  // Stable order; names are the checkpoint keys.
  std::vector<NamedTensor> named_tensors() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  EncoderParams clone(bool requires_grad) const;
  void set_requires_grad(bool flag);
};

// Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
EncoderParams init_params(const EncoderConfig& config);

struct PackedInput {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> segments;
  std::vector<std::uint8_t> mask;

  std::size_t length() const { return ids.size(); }
};

// [CLS] q' [SEP] d' [SEP], truncating query and document to the configured
// lengths. No padding is added.
PackedInput pack_input(std::span<const TokenId> query, std::span<const TokenId> doc,
                       const EncoderConfig& config);

// Appends [PAD] positions (mask 0) up to `length`.
PackedInput pad_to(PackedInput input, std::size_t length, const EncoderConfig& config);

struct ForwardTrace {
  Tensor emb_out;                    // seq×H, after the embedding layer norm
  std::vector<Tensor> hidden;        // one seq×H per layer, layer 1 first
  std::vector<Tensor> attn_scores;   // one heads×seq×seq per layer, pre-softmax
  Tensor logits;                     // [2], index 0 = relevant
};

inline constexpr double kMaskedScore = -1e9;
inline constexpr double kLayerNormEps = 1e-12;

ForwardTrace encode(const EncoderParams& params, const PackedInput& input);

enum class ScoreMode { probability, logit };

ScoreMode score_mode_from_string(const std::string& name);
std::string to_string(ScoreMode mode);

// probability: softmax(z)[0]; logit: z[0] - z[1] (its log-odds).
Tensor ranking_score(const Tensor& logits, ScoreMode mode = ScoreMode::probability);
inline Tensor ranking_score(const ForwardTrace& trace,
                            ScoreMode mode = ScoreMode::probability) {
  return ranking_score(trace.logits, mode);
}

// Versioned binary checkpoint: magic, version, JSON manifest (names, shapes,
// metadata), then raw little-endian float64 payloads. Round trips bit-exactly.
void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& meta,
                       std::span<const NamedTensor> tensors);
std::pair<nlohmann::json, std::vector<NamedTensor>> read_tensor_file(
    const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params);
EncoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace rankdistill
