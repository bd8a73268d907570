#include "rankdistill/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "rankdistill/random.hpp"

namespace rankdistill {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host byte order");

namespace {

constexpr double kInitStd = 0.02;
constexpr char kMagic[8] = {'R', 'D', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.truncated_normal(kInitStd);
  return Tensor::from({rows, cols}, std::move(v), true);
}

Tensor zero_vector(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor unit_vector(std::size_t n) { return Tensor::full({n}, 1.0, true); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace

// ---- config ------------------------------------------------------------------

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("EncoderConfig: " + msg);
  };
  if (num_layers < 1) fail("num_layers must be at least 1");
  if (heads < 1 || hidden < 2) fail("hidden must be >= 2 and heads >= 1");
  if (hidden % heads != 0) {
    fail("hidden " + std::to_string(hidden) + " is not divisible by heads " +
         std::to_string(heads));
  }
  if (ffn_dim < 1) fail("ffn_dim must be positive");
  if (vocab < 1) fail("vocab must be positive");
  if (max_query_len < 1 || max_doc_len < 1) fail("query/doc lengths must be positive");
  if (type_vocab != 2) fail("type_vocab must be 2");
  if (max_query_len + max_doc_len + 3 > position_table_size()) {
    fail("max_positions " + std::to_string(max_positions) + " cannot hold " +
         std::to_string(max_query_len + max_doc_len + 3) + " packed tokens");
  }
}

std::size_t EncoderConfig::position_table_size() const {
  return max_positions == 0 ? max_query_len + max_doc_len + 3 : max_positions;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},       {"hidden", c.hidden},
                     {"heads", c.heads},                 {"ffn_dim", c.ffn_dim},
                     {"vocab", c.vocab},                 {"max_query_len", c.max_query_len},
                     {"max_doc_len", c.max_doc_len},     {"type_vocab", c.type_vocab},
                     {"max_positions", c.max_positions}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.num_layers = j.value("num_layers", d.num_layers);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.vocab = j.value("vocab", d.vocab);
  c.max_query_len = j.value("max_query_len", d.max_query_len);
  c.max_doc_len = j.value("max_doc_len", d.max_doc_len);
  c.type_vocab = j.value("type_vocab", d.type_vocab);
  c.max_positions = j.value("max_positions", d.max_positions);
  c.seed = j.value("seed", d.seed);
}

// ---- params ------------------------------------------------------------------

std::vector<NamedTensor> EncoderParams::named_tensors() const {
  std::vector<NamedTensor> out{
      {"embeddings.token", token_emb},       {"embeddings.position", position_emb},
      {"embeddings.segment", segment_emb},   {"embeddings.ln.gain", emb_ln_gain},
      {"embeddings.ln.bias", emb_ln_bias},
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    out.push_back({p + "attn.wq", l.wq});
    out.push_back({p + "attn.bq", l.bq});
    out.push_back({p + "attn.wk", l.wk});
    out.push_back({p + "attn.bk", l.bk});
    out.push_back({p + "attn.wv", l.wv});
    out.push_back({p + "attn.bv", l.bv});
    out.push_back({p + "attn.wo", l.wo});
    out.push_back({p + "attn.bo", l.bo});
    out.push_back({p + "attn.ln.gain", l.attn_ln_gain});
    out.push_back({p + "attn.ln.bias", l.attn_ln_bias});
    out.push_back({p + "ffn.w1", l.ffn_w1});
    out.push_back({p + "ffn.b1", l.ffn_b1});
    out.push_back({p + "ffn.w2", l.ffn_w2});
    out.push_back({p + "ffn.b2", l.ffn_b2});
    out.push_back({p + "ffn.ln.gain", l.ffn_ln_gain});
    out.push_back({p + "ffn.ln.bias", l.ffn_ln_bias});
  }
  out.push_back({"pooler.w", pooler_w});
  out.push_back({"pooler.b", pooler_b});
  out.push_back({"classifier.w", classifier_w});
  out.push_back({"classifier.b", classifier_b});
  return out;
}

std::vector<Tensor> EncoderParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_tensors()) out.push_back(nt.tensor);
  return out;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

EncoderParams EncoderParams::clone(bool requires_grad) const {
  auto copy = [requires_grad](const Tensor& t) {
    return Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, requires_grad);
  };
  EncoderParams p;
  p.config = config;
  p.token_emb = copy(token_emb);
  p.position_emb = copy(position_emb);
  p.segment_emb = copy(segment_emb);
  p.emb_ln_gain = copy(emb_ln_gain);
  p.emb_ln_bias = copy(emb_ln_bias);
  for (const auto& l : layers) {
    p.layers.push_back(LayerParams{
        copy(l.wq), copy(l.bq), copy(l.wk), copy(l.bk), copy(l.wv), copy(l.bv),
        copy(l.wo), copy(l.bo), copy(l.attn_ln_gain), copy(l.attn_ln_bias),
        copy(l.ffn_w1), copy(l.ffn_b1), copy(l.ffn_w2), copy(l.ffn_b2),
        copy(l.ffn_ln_gain), copy(l.ffn_ln_bias)});
  }
  p.pooler_w = copy(pooler_w);
  p.pooler_b = copy(pooler_b);
  p.classifier_w = copy(classifier_w);
  p.classifier_b = copy(classifier_b);
  return p;
}

void EncoderParams::set_requires_grad(bool flag) {
  for (auto& t : parameters()) t.set_requires_grad(flag);
}

EncoderParams init_params(const EncoderConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x656e636f646572ULL));
  const std::size_t h = config.hidden;
  EncoderParams p;
  p.config = config;
  p.token_emb = random_matrix(rng, config.embedding_rows(), h);
  p.position_emb = random_matrix(rng, config.position_table_size(), h);
  p.segment_emb = random_matrix(rng, config.type_vocab, h);
  p.emb_ln_gain = unit_vector(h);
  p.emb_ln_bias = zero_vector(h);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    LayerParams l;
    l.wq = random_matrix(rng, h, h);
    l.bq = zero_vector(h);
    l.wk = random_matrix(rng, h, h);
    l.bk = zero_vector(h);
    l.wv = random_matrix(rng, h, h);
    l.bv = zero_vector(h);
    l.wo = random_matrix(rng, h, h);
    l.bo = zero_vector(h);
    l.attn_ln_gain = unit_vector(h);
    l.attn_ln_bias = zero_vector(h);
    l.ffn_w1 = random_matrix(rng, h, config.ffn_dim);
    l.ffn_b1 = zero_vector(config.ffn_dim);
    l.ffn_w2 = random_matrix(rng, config.ffn_dim, h);
    l.ffn_b2 = zero_vector(h);
    l.ffn_ln_gain = unit_vector(h);
    l.ffn_ln_bias = zero_vector(h);
    p.layers.push_back(std::move(l));
  }
  p.pooler_w = random_matrix(rng, h, h);
  p.pooler_b = zero_vector(h);
  p.classifier_w = random_matrix(rng, h, 2);
  p.classifier_b = zero_vector(2);
  return p;
}

// ---- input packing -----------------------------------------------------------

PackedInput pack_input(std::span<const TokenId> query, std::span<const TokenId> doc,
                       const EncoderConfig& config) {
  if (query.empty()) throw std::invalid_argument("pack_input: empty query");
  if (doc.empty()) throw std::invalid_argument("pack_input: empty document");
  const std::size_t q = std::min(query.size(), config.max_query_len);
  const std::size_t d = std::min(doc.size(), config.max_doc_len);
  PackedInput in;
  in.ids.reserve(q + d + 3);
  auto push = [&](std::size_t id, std::size_t segment) {
    in.ids.push_back(id);
    in.segments.push_back(segment);
    in.mask.push_back(1);
  };
  auto content = [&](TokenId t) -> std::size_t {
    if (t >= config.vocab) {
      throw std::out_of_range("pack_input: token " + std::to_string(t) +
                              " outside vocabulary of " + std::to_string(config.vocab));
    }
    return t;
  };
  push(config.cls_id(), 0);
  for (std::size_t i = 0; i < q; ++i) push(content(query[i]), 0);
  push(config.sep_id(), 0);
  for (std::size_t i = 0; i < d; ++i) push(content(doc[i]), 1);
  push(config.sep_id(), 1);
  return in;
}

PackedInput pad_to(PackedInput input, std::size_t length, const EncoderConfig& config) {
  if (length > config.position_table_size()) {
    throw std::invalid_argument("pad_to: length " + std::to_string(length) +
                                " exceeds the position table");
  }
  while (input.ids.size() < length) {
    input.ids.push_back(config.pad_id());
    input.segments.push_back(1);
    input.mask.push_back(0);
  }
  return input;
}

// ---- forward -----------------------------------------------------------------

ForwardTrace encode(const EncoderParams& params, const PackedInput& input) {
  const auto& cfg = params.config;
  const std::size_t seq = input.length();
  if (seq == 0 || input.segments.size() != seq || input.mask.size() != seq) {
    throw std::invalid_argument("encode: ids, segments and mask must be equally long");
  }
  if (seq > cfg.position_table_size()) {
    throw std::invalid_argument("encode: sequence of " + std::to_string(seq) +
                                " exceeds the position table");
  }
  for (std::size_t id : input.ids) {
    if (id >= cfg.embedding_rows()) {
      throw std::out_of_range("encode: token id " + std::to_string(id) +
                              " outside vocabulary");
    }
  }
  for (std::size_t s : input.segments) {
    if (s >= cfg.type_vocab) throw std::out_of_range("encode: bad segment id");
  }

  std::vector<std::size_t> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = i;

  ForwardTrace trace;
  Tensor x = add(add(gather_rows(params.token_emb, input.ids),
                     gather_rows(params.position_emb, positions)),
                 gather_rows(params.segment_emb, input.segments));
  x = layer_norm(x, params.emb_ln_gain, params.emb_ln_bias, kLayerNormEps);
  trace.emb_out = x;

  std::vector<double> key_bias(seq);
  for (std::size_t j = 0; j < seq; ++j) key_bias[j] = input.mask[j] ? 0.0 : kMaskedScore;
  const Tensor mask_bias = Tensor::from({seq}, std::move(key_bias));

  const std::size_t heads = cfg.heads;
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (const auto& layer : params.layers) {
    const Tensor q = linear(x, layer.wq, layer.bq);
    const Tensor k = linear(x, layer.wk, layer.bk);
    const Tensor v = linear(x, layer.wv, layer.bv);
    std::vector<Tensor> scores;
    std::vector<Tensor> contexts;
    scores.reserve(heads);
    contexts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(q, h * dh, dh);
      const Tensor kh = slice_cols(k, h * dh, dh);
      const Tensor vh = slice_cols(v, h * dh, dh);
      Tensor s = add_bias(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), mask_bias);
      contexts.push_back(matmul(softmax(s), vh));
      scores.push_back(std::move(s));
    }
    trace.attn_scores.push_back(stack(scores));
    const Tensor attn_out = linear(concat_cols(contexts), layer.wo, layer.bo);
    x = layer_norm(add(x, attn_out), layer.attn_ln_gain, layer.attn_ln_bias,
                   kLayerNormEps);
    const Tensor ffn =
        linear(gelu(linear(x, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2);
    x = layer_norm(add(x, ffn), layer.ffn_ln_gain, layer.ffn_ln_bias, kLayerNormEps);
    trace.hidden.push_back(x);
  }

  const Tensor pooled = tanh(linear(row(x, 0), params.pooler_w, params.pooler_b));
  trace.logits =
      reshape(linear(pooled, params.classifier_w, params.classifier_b), Shape{2});
  return trace;
}

ScoreMode score_mode_from_string(const std::string& name) {
  if (name == "probability") return ScoreMode::probability;
  if (name == "logit") return ScoreMode::logit;
  throw std::invalid_argument("unknown score mode '" + name + "'");
}

std::string to_string(ScoreMode mode) {
  return mode == ScoreMode::probability ? "probability" : "logit";
}

Tensor ranking_score(const Tensor& logits, ScoreMode mode) {
  if (logits.numel() != 2) {
    throw std::invalid_argument("ranking_score: expected 2 logits, got " +
                                shape_str(logits.shape()));
  }
  if (mode == ScoreMode::logit) return sub(element(logits, 0), element(logits, 1));
  return element(softmax(reshape(logits, Shape{2})), 0);
}

// ---- checkpoints -------------------------------------------------------------

void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& meta,
                       std::span<const NamedTensor> tensors) {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& nt : tensors) {
    manifest["tensors"].push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
  }
  const std::string header = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::uint64_t header_len = header.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kFormatVersion), sizeof kFormatVersion);
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : tensors) {
    const auto d = nt.tensor.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::pair<nlohmann::json, std::vector<NamedTensor>> read_tensor_file(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  }
  if (version != kFormatVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " +
                             std::to_string(version));
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  const auto manifest = nlohmann::json::parse(header);
  std::vector<NamedTensor> tensors;
  for (const auto& entry : manifest.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(shape_numel(shape));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path.string() + ": truncated tensor payload");
    tensors.push_back(
        {entry.at("name").get<std::string>(), Tensor::from(shape, std::move(values))});
  }
  return {manifest.at("meta"), std::move(tensors)};
}

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params) {
  nlohmann::json meta;
  meta["kind"] = "cross-encoder";
  meta["config"] = params.config;
  const auto named = params.named_tensors();
  write_tensor_file(path, meta, named);
}

EncoderParams load_checkpoint(const std::filesystem::path& path) {
  auto [meta, tensors] = read_tensor_file(path);
  if (meta.value("kind", "") != "cross-encoder") {
    throw std::runtime_error(path.string() + " does not hold cross-encoder parameters");
  }
  EncoderParams params = init_params(meta.at("config").get<EncoderConfig>());
  auto slots = params.named_tensors();
  if (slots.size() != tensors.size()) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(slots.size()) +
                             " tensors, found " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name != tensors[i].name ||
        slots[i].tensor.shape() != tensors[i].tensor.shape()) {
      throw std::runtime_error(path.string() + ": tensor '" + tensors[i].name +
                               "' does not match expected '" + slots[i].name + "' " +
                               shape_str(slots[i].tensor.shape()));
    }
    auto dst = slots[i].tensor.mutable_data();
    const auto src = tensors[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return params;
}

}  // namespace rankdistill
