#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "proto_ood/errors.hpp"
#include "proto_ood/matrix.hpp"
#include "proto_ood/mlp.hpp"
#include "proto_ood/rng.hpp"
#include "proto_ood/util.hpp"

namespace proto_ood {

// ---------------------------------------------------------------------------
// Prototype bank
// ---------------------------------------------------------------------------

/// Per-category running means of embeddings. Rows start at zero and stay zero
/// until the category's first update; such rows are excluded from every
/// downstream computation (a zero vector has no direction).
struct PrototypeBank {
  Matrix prototypes;                // categories x embedding_width
  double update_factor = 0.9;      // weight kept on the previous value
  std::vector<std::uint8_t> seen;

  PrototypeBank() = default;
  PrototypeBank(std::size_t categories, std::size_t embedding_width, double alpha)
      : prototypes(categories, embedding_width),
        update_factor(alpha),
        seen(categories, 0) {}

  std::size_t category_count() const { return prototypes.rows(); }
  std::size_t embedding_width() const { return prototypes.cols(); }

  std::size_t seen_count() const {
    return static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
  }

  std::vector<std::size_t> seen_categories() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < seen.size(); ++c)
      if (seen[c]) out.push_back(c);
    return out;
  }

  /// Compact matrix of the seen rows, in ascending category order.
  Matrix seen_prototypes() const {
    const auto cats = seen_categories();
    Matrix out(cats.size(), embedding_width());
    for (std::size_t i = 0; i < cats.size(); ++i)
      for (std::size_t j = 0; j < embedding_width(); ++j)
        out(i, j) = prototypes(cats[i], j);
    return out;
  }
};

/// One EMA step per category present in the batch: the category's batch-mean
/// embedding moves its prototype by (1 - update_factor). Absent categories
/// are untouched.
inline void update_prototypes(PrototypeBank& bank, const Matrix& embeddings,
                              std::span<const int> labels) {
  if (embeddings.rows() != labels.size()) {
    throw DimensionError("update_prototypes: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(embeddings.rows()) + " rows");
  }
  if (embeddings.rows() > 0 && embeddings.cols() != bank.embedding_width()) {
    throw DimensionError("update_prototypes: embedding width " +
                         std::to_string(embeddings.cols()));
  }
  const std::size_t t = bank.category_count();
  std::vector<std::size_t> counts(t, 0);
  Matrix sums(t, bank.embedding_width());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= t) {
      throw DomainError("update_prototypes: label " + std::to_string(label) +
                        " outside [0, " + std::to_string(t) + ")");
    }
    counts[label] += 1;
    for (std::size_t j = 0; j < sums.cols(); ++j) sums(label, j) += embeddings(i, j);
  }
  const double alpha = bank.update_factor;
  for (std::size_t c = 0; c < t; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < sums.cols(); ++j) {
      const double mean = sums(c, j) / static_cast<double>(counts[c]);
      bank.prototypes(c, j) = alpha * bank.prototypes(c, j) + (1.0 - alpha) * mean;
    }
    bank.seen[c] = 1;
  }
}

// ---------------------------------------------------------------------------
// Negative embedding generator
// ---------------------------------------------------------------------------

/// Turns per-category similarities into mixing weights that favor the
/// *dissimilar* categories: softmax over (1 - similarity) / temperature.
inline Matrix negative_weights(const Matrix& similarity, double temperature) {
  if (!(temperature > 0.0)) {
    throw DomainError("negative_weights: temperature must be positive");
  }
  Matrix scaled(similarity.rows(), similarity.cols());
  for (std::size_t i = 0; i < similarity.rows(); ++i)
    for (std::size_t j = 0; j < similarity.cols(); ++j)
      scaled(i, j) = (1.0 - similarity(i, j)) / temperature;
  return softmax_rows(scaled);
}

/// Synthesizes one OOD-like embedding per input row by pushing it toward the
/// prototypes it resembles least. Only seen categories participate.
inline Matrix generate_negatives(const Matrix& embeddings, const PrototypeBank& bank,
                                 double temperature) {
  const auto cats = bank.seen_categories();
  if (cats.empty()) {
    throw StateError("generate_negatives: no prototype has been updated yet");
  }
  const Matrix protos = bank.seen_prototypes();
  const Matrix weights =
      negative_weights(cosine_rows(embeddings, protos), temperature);
  Matrix out = embeddings;
  for (std::size_t i = 0; i < embeddings.rows(); ++i)
    for (std::size_t j = 0; j < cats.size(); ++j)
      for (std::size_t k = 0; k < embeddings.cols(); ++k)
        out(i, k) += weights(i, j) * protos(j, k);
  return out;
}

// ---------------------------------------------------------------------------
// Similarity module
// ---------------------------------------------------------------------------

/// Rows of [embedding_i | prototype_j] for every pair, j fastest.
inline Matrix fuse_pairs(const Matrix& embeddings, const Matrix& prototypes) {
  if (embeddings.cols() != prototypes.cols()) {
    throw DimensionError("fuse_pairs: widths " + shape_str(embeddings) + " vs " +
                         shape_str(prototypes));
  }
  const std::size_t d = embeddings.cols();
  Matrix fused(embeddings.rows() * prototypes.rows(), 2 * d);
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    for (std::size_t j = 0; j < prototypes.rows(); ++j) {
      const std::size_t r = i * prototypes.rows() + j;
      for (std::size_t k = 0; k < d; ++k) {
        fused(r, k) = embeddings(i, k);
        fused(r, d + k) = prototypes(j, k);
      }
    }
  }
  return fused;
}

/// Match probability for every (embedding, prototype) pair through the given
/// module; output is n x prototypes.rows(), entries strictly inside (0, 1).
inline Matrix pairwise_similarity(const Matrix& embeddings, const Matrix& prototypes,
                                  const Mlp2& module, Mlp2Cache* cache = nullptr) {
  if (module.input_width() != 2 * embeddings.cols()) {
    throw DimensionError("pairwise_similarity: module expects width " +
                         std::to_string(module.input_width()));
  }
  Mlp2Cache local;
  Mlp2Cache& c = cache ? *cache : local;
  const Matrix flat = module.forward(fuse_pairs(embeddings, prototypes), c);
  Matrix out(embeddings.rows(), prototypes.rows());
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j)
      out(i, j) = flat(i * out.cols() + j, 0);
  return out;
}

/// Backward of pairwise_similarity for the embedding side. Accumulates module
/// parameter gradients; prototype inputs are EMA state, not trained.
inline Matrix pairwise_similarity_backward(const Matrix& upstream, Mlp2& module,
                                           const Mlp2Cache& cache,
                                           std::size_t embedding_width) {
  Matrix flat(upstream.rows() * upstream.cols(), 1);
  for (std::size_t i = 0; i < upstream.rows(); ++i)
    for (std::size_t j = 0; j < upstream.cols(); ++j)
      flat(i * upstream.cols() + j, 0) = upstream(i, j);
  const Matrix d_fused = module.backward(flat, cache);
  Matrix d_emb(upstream.rows(), embedding_width);
  for (std::size_t i = 0; i < upstream.rows(); ++i)
    for (std::size_t j = 0; j < upstream.cols(); ++j)
      for (std::size_t k = 0; k < embedding_width; ++k)
        d_emb(i, k) += d_fused(i * upstream.cols() + j, k);
  return d_emb;
}

/// Scores over a bank's seen categories; `categories[j]` names the category
/// behind column j of `values`.
struct CategoryScores {
  std::vector<std::size_t> categories;
  Matrix values;
};

inline CategoryScores similarity_scores(const Matrix& embeddings,
                                        const PrototypeBank& bank,
                                        const Mlp2& module) {
  auto cats = bank.seen_categories();
  if (cats.empty()) {
    throw StateError("similarity_scores: no prototype has been updated yet");
  }
  Matrix values = pairwise_similarity(embeddings, bank.seen_prototypes(), module);
  return {std::move(cats), std::move(values)};
}

// ---------------------------------------------------------------------------
// OOD energy and decision
// ---------------------------------------------------------------------------

enum class EnergyReduction { kMaxOverCategories, kAtPredictedCategory };

struct OODDecisionConfig {
  double gamma = 1.0;  // energy at or above gamma means in-distribution
  EnergyReduction reduction = EnergyReduction::kMaxOverCategories;
};

struct EnergyScores {
  std::vector<std::size_t> categories;
  Matrix per_category;          // exp(cosine) * similarity, entries in (0, e)
  std::vector<double> scalar;   // reduced per row
};

/// E = exp(cosine(embedding, prototype)) * similarity score. The scalar per
/// row is the max over seen categories, or the predicted category's entry
/// when a prediction is supplied (falling back to max for unseen predictions).
inline EnergyScores ood_energy(const Matrix& embeddings, const PrototypeBank& bank,
                               const Mlp2& module,
                               EnergyReduction reduction = EnergyReduction::kMaxOverCategories,
                               std::span<const int> predicted = {}) {
  if (reduction == EnergyReduction::kAtPredictedCategory &&
      predicted.size() != embeddings.rows()) {
    throw DimensionError("ood_energy: predicted labels missing for per-category reduction");
  }
  EnergyScores out;
  out.categories = bank.seen_categories();
  if (out.categories.empty()) {
    throw StateError("ood_energy: no prototype has been updated yet");
  }
  const Matrix protos = bank.seen_prototypes();
  const Matrix cosine = cosine_rows(embeddings, protos);
  const Matrix sim = pairwise_similarity(embeddings, protos, module);
  out.per_category = Matrix(embeddings.rows(), out.categories.size());
  for (std::size_t i = 0; i < out.per_category.rows(); ++i)
    for (std::size_t j = 0; j < out.per_category.cols(); ++j)
      out.per_category(i, j) = std::exp(cosine(i, j)) * sim(i, j);
  out.scalar.resize(embeddings.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < out.categories.size(); ++j)
      best = std::max(best, out.per_category(i, j));
    if (reduction == EnergyReduction::kAtPredictedCategory) {
      const auto it = std::find(out.categories.begin(), out.categories.end(),
                                static_cast<std::size_t>(std::max(predicted[i], 0)));
      if (predicted[i] >= 0 && it != out.categories.end()) {
        best = out.per_category(i, static_cast<std::size_t>(it - out.categories.begin()));
      }
    }
    out.scalar[i] = best;
  }
  return out;
}

/// 1 = in-distribution. The boundary is inclusive: energy == gamma is ID.
inline std::vector<std::uint8_t> classify_ood(std::span<const double> energy,
                                              const OODDecisionConfig& cfg) {
  std::vector<std::uint8_t> out(energy.size());
  for (std::size_t i = 0; i < energy.size(); ++i)
    out[i] = energy[i] >= cfg.gamma ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Model state and checkpointing
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::size_t categories = 5;
  std::size_t feature_width = 64;
  std::size_t embedding_width = 16;
  std::size_t projection_hidden = 64;
  std::size_t similarity_hidden = 64;
  double prototype_alpha = 0.9;
  bool sim_output_relu = false;  // keep the extra ReLU before the output sigmoid
  OODDecisionConfig decision{};

  void validate() const {
    if (categories < 2) throw ConfigError("model: need at least 2 categories");
    if (embedding_width >= feature_width) {
      throw ConfigError("model: embedding_width must be smaller than feature_width");
    }
    if (projection_hidden == 0 || similarity_hidden == 0) {
      throw ConfigError("model: hidden widths must be positive");
    }
    if (!(prototype_alpha > 0.0 && prototype_alpha < 1.0)) {
      throw ConfigError("model: prototype_alpha must lie in (0, 1)");
    }
    if (!std::isfinite(decision.gamma)) throw ConfigError("model: gamma must be finite");
  }
};

/// Everything inference needs, checkpointable bit-exactly. The classification
/// readout exists so the training objective has a class pressure on the
/// embeddings; at inference time only projection, similarity, and the bank
/// are consulted.
struct ModelState {
  ModelConfig config;
  Mlp2 projection;
  Linear classifier;
  Mlp2 similarity;
  PrototypeBank bank;

  explicit ModelState(const ModelConfig& cfg)
      : config(cfg),
        projection("projection", cfg.feature_width, cfg.projection_hidden,
                   cfg.embedding_width, FinalActivation::kNone),
        classifier("classifier", cfg.embedding_width, cfg.categories),
        similarity("similarity", 2 * cfg.embedding_width, cfg.similarity_hidden, 1,
                   FinalActivation::kSigmoid, cfg.sim_output_relu),
        bank(cfg.categories, cfg.embedding_width, cfg.prototype_alpha) {
    cfg.validate();
  }

  static ModelState random_init(const ModelConfig& cfg, std::uint64_t seed) {
    ModelState state(cfg);
    Rng rng(seed);
    state.projection.init_random(rng);
    state.classifier.init_random(rng);
    state.similarity.init_random(rng);
    return state;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out = projection.parameters();
    for (Parameter* p : classifier.parameters()) out.push_back(p);
    for (Parameter* p : similarity.parameters()) out.push_back(p);
    return out;
  }
};

/// Lower-dimensional embedding of raw object features.
inline Matrix project(const Matrix& features, const Mlp2& head,
                      Mlp2Cache* cache = nullptr) {
  Mlp2Cache local;
  return head.forward(features, cache ? *cache : local);
}

namespace detail {

inline void write_matrix(std::ostream& os, const std::string& name, const Matrix& m) {
  os << "matrix " << name << ' ' << m.rows() << 'x' << m.cols() << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << format_double_hex(m(i, j));
    }
    os << '\n';
  }
}

class LineReader {
 public:
  explicit LineReader(std::istream& is) : is_(is) {}

  std::string next(std::string_view what) {
    std::string line;
    if (!std::getline(is_, line)) {
      throw ParseError("unexpected end of file, expected " + std::string(what));
    }
    ++line_no_;
    return line;
  }

  bool at_end() {
    return is_.peek() == std::char_traits<char>::eof();
  }

  std::size_t line_no() const { return line_no_; }

 private:
  std::istream& is_;
  std::size_t line_no_ = 0;
};

inline Matrix read_matrix(LineReader& reader, const std::string& expect_name,
                          std::size_t rows, std::size_t cols) {
  const std::string header = reader.next("matrix header");
  std::ostringstream want;
  want << "matrix " << expect_name << ' ' << rows << 'x' << cols;
  if (header != want.str()) {
    throw ParseError("checkpoint line " + std::to_string(reader.line_no()) +
                     ": expected '" + want.str() + "', got '" + header + "'");
  }
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::string line = reader.next("matrix row");
    const auto tokens = split_tokens(line);
    if (tokens.size() != cols) {
      throw ParseError("checkpoint line " + std::to_string(reader.line_no()) +
                       ": expected " + std::to_string(cols) + " values");
    }
    for (std::size_t j = 0; j < cols; ++j) {
      m(i, j) = parse_double(tokens[j], expect_name, std::chars_format::hex);
    }
  }
  if (!m.all_finite()) {
    throw FormatError("checkpoint matrix " + expect_name + " contains non-finite values");
  }
  return m;
}

inline std::string header_value(LineReader& reader, std::string_view key) {
  const std::string line = reader.next(key);
  const auto tokens = split_tokens(line);
  if (tokens.size() != 2 || tokens[0] != key) {
    throw ParseError("checkpoint line " + std::to_string(reader.line_no()) +
                     ": expected '" + std::string(key) + " <value>'");
  }
  return std::string(tokens[1]);
}

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "pockpt";
inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  std::ostringstream body;
  const ModelConfig& cfg = state.config;
  body << kCheckpointMagic << ' ' << kCheckpointVersion << '\n'
       << "categories " << cfg.categories << '\n'
       << "feature_width " << cfg.feature_width << '\n'
       << "embedding_width " << cfg.embedding_width << '\n'
       << "projection_hidden " << cfg.projection_hidden << '\n'
       << "similarity_hidden " << cfg.similarity_hidden << '\n'
       << "sim_output_relu " << (cfg.sim_output_relu ? 1 : 0) << '\n'
       << "alpha " << format_double_hex(cfg.prototype_alpha) << '\n'
       << "gamma " << format_double_hex(cfg.decision.gamma) << '\n'
       << "reduction "
       << (cfg.decision.reduction == EnergyReduction::kMaxOverCategories ? "max"
                                                                         : "predicted")
       << '\n';
  body << "seen";
  for (const auto flag : state.bank.seen) body << ' ' << (flag ? 1 : 0);
  body << '\n';
  for (const Mlp2* mlp : {&state.projection, &state.similarity}) {
    const std::string prefix = mlp == &state.projection ? "projection" : "similarity";
    detail::write_matrix(body, prefix + "_w1", mlp->w1.value);
    detail::write_matrix(body, prefix + "_b1", mlp->b1.value);
    detail::write_matrix(body, prefix + "_w2", mlp->w2.value);
    detail::write_matrix(body, prefix + "_b2", mlp->b2.value);
  }
  detail::write_matrix(body, "classifier_w", state.classifier.w.value);
  detail::write_matrix(body, "classifier_b", state.classifier.b.value);
  detail::write_matrix(body, "prototypes", state.bank.prototypes);
  body << "end\n";

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os << body.str() << "checksum " << to_hex(fnv1a(body.str())) << '\n';
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

inline ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::stringstream content;
  content << is.rdbuf();
  const std::string& full = content.str();

  // Split off the trailing checksum line and verify the body first.
  const std::string tail = "checksum ";
  const std::size_t pos = full.rfind(tail);
  if (pos == std::string::npos || pos == 0 || full[pos - 1] != '\n') {
    throw ParseError("checkpoint is missing its checksum line: " + path.string());
  }
  const std::string body = full.substr(0, pos);
  std::string checksum_line = full.substr(pos);
  if (!checksum_line.empty() && checksum_line.back() == '\n') checksum_line.pop_back();
  if (checksum_line != "checksum " + to_hex(fnv1a(body))) {
    throw FormatError("checkpoint checksum mismatch: " + path.string());
  }

  std::istringstream bs(body);
  detail::LineReader reader(bs);
  const std::string magic_line = reader.next("magic");
  const auto magic_tokens = split_tokens(magic_line);
  if (magic_tokens.size() != 2 || magic_tokens[0] != kCheckpointMagic) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  const std::int64_t version = parse_int(magic_tokens[1], "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }

  ModelConfig cfg;
  cfg.categories = static_cast<std::size_t>(
      parse_int(detail::header_value(reader, "categories"), "categories"));
  cfg.feature_width = static_cast<std::size_t>(
      parse_int(detail::header_value(reader, "feature_width"), "feature_width"));
  cfg.embedding_width = static_cast<std::size_t>(
      parse_int(detail::header_value(reader, "embedding_width"), "embedding_width"));
  cfg.projection_hidden = static_cast<std::size_t>(
      parse_int(detail::header_value(reader, "projection_hidden"), "projection_hidden"));
  cfg.similarity_hidden = static_cast<std::size_t>(
      parse_int(detail::header_value(reader, "similarity_hidden"), "similarity_hidden"));
  cfg.sim_output_relu =
      parse_int(detail::header_value(reader, "sim_output_relu"), "sim_output_relu") != 0;
  cfg.prototype_alpha = parse_double(detail::header_value(reader, "alpha"), "alpha",
                                     std::chars_format::hex);
  cfg.decision.gamma = parse_double(detail::header_value(reader, "gamma"), "gamma",
                                    std::chars_format::hex);
  const std::string reduction = detail::header_value(reader, "reduction");
  if (reduction == "max") {
    cfg.decision.reduction = EnergyReduction::kMaxOverCategories;
  } else if (reduction == "predicted") {
    cfg.decision.reduction = EnergyReduction::kAtPredictedCategory;
  } else {
    throw ParseError("checkpoint: unknown reduction '" + reduction + "'");
  }

  ModelState state(cfg);

  const std::string seen_line = reader.next("seen flags");
  const auto seen_tokens = split_tokens(seen_line);
  if (seen_tokens.size() != cfg.categories + 1 || seen_tokens[0] != "seen") {
    throw ParseError("checkpoint: malformed seen line");
  }
  for (std::size_t c = 0; c < cfg.categories; ++c) {
    const std::int64_t flag = parse_int(seen_tokens[c + 1], "seen flag");
    if (flag != 0 && flag != 1) throw ParseError("checkpoint: seen flag must be 0 or 1");
    state.bank.seen[c] = static_cast<std::uint8_t>(flag);
  }

  state.projection.w1.value = detail::read_matrix(reader, "projection_w1",
                                                  cfg.feature_width, cfg.projection_hidden);
  state.projection.b1.value =
      detail::read_matrix(reader, "projection_b1", 1, cfg.projection_hidden);
  state.projection.w2.value = detail::read_matrix(reader, "projection_w2",
                                                  cfg.projection_hidden, cfg.embedding_width);
  state.projection.b2.value =
      detail::read_matrix(reader, "projection_b2", 1, cfg.embedding_width);
  state.similarity.w1.value = detail::read_matrix(
      reader, "similarity_w1", 2 * cfg.embedding_width, cfg.similarity_hidden);
  state.similarity.b1.value =
      detail::read_matrix(reader, "similarity_b1", 1, cfg.similarity_hidden);
  state.similarity.w2.value =
      detail::read_matrix(reader, "similarity_w2", cfg.similarity_hidden, 1);
  state.similarity.b2.value = detail::read_matrix(reader, "similarity_b2", 1, 1);
  state.classifier.w.value =
      detail::read_matrix(reader, "classifier_w", cfg.embedding_width, cfg.categories);
  state.classifier.b.value = detail::read_matrix(reader, "classifier_b", 1, cfg.categories);
  state.bank.prototypes =
      detail::read_matrix(reader, "prototypes", cfg.categories, cfg.embedding_width);

  if (reader.next("end marker") != "end") {
    throw ParseError("checkpoint: missing end marker");
  }
  // Unseen rows must be exactly zero.
  for (std::size_t c = 0; c < cfg.categories; ++c) {
    if (state.bank.seen[c]) continue;
    for (std::size_t j = 0; j < cfg.embedding_width; ++j) {
      if (state.bank.prototypes(c, j) != 0.0) {
        throw FormatError("checkpoint: unseen prototype row " + std::to_string(c) +
                          " is nonzero");
      }
    }
  }
  return state;
}

}  // namespace proto_ood
