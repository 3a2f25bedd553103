#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "proto_ood/data.hpp"
#include "proto_ood/errors.hpp"
#include "proto_ood/losses.hpp"
#include "proto_ood/proto_head.hpp"
#include "proto_ood/rng.hpp"

namespace proto_ood {

enum class Ablation { kFull, kNoNegativeGenerator, kNoContrastiveNoNegatives };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoNegativeGenerator: return "no-neg";
    case Ablation::kNoContrastiveNoNegatives: return "no-con-no-neg";
  }
  return "?";
}

enum class OptimizerKind { kAdam, kSgd };

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Elementwise first-order update. Adam keeps bias-corrected moment estimates
/// per parameter; the SGD path is a plain scaled step. A non-finite gradient
/// aborts with the offending parameter's name.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate)
      : kind_(kind), learning_rate_(learning_rate) {}

  void step(std::span<Parameter* const> params) {
    for (const Parameter* p : params) {
      if (!p->grad.all_finite()) {
        throw NumericError("optimizer: non-finite gradient in parameter '" + p->name + "'");
      }
    }
    if (kind_ == OptimizerKind::kSgd) {
      for (Parameter* p : params)
        for (std::size_t i = 0; i < p->value.size(); ++i)
          p->value.data()[i] -= learning_rate_ * p->grad.data()[i];
      return;
    }
    if (first_moment_.empty()) {
      for (const Parameter* p : params) {
        first_moment_.emplace_back(p->value.rows(), p->value.cols());
        second_moment_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
    if (first_moment_.size() != params.size()) {
      throw UsageError("optimizer: parameter set changed between steps");
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_count_));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Parameter& p = *params[pi];
      Matrix& m = first_moment_[pi];
      Matrix& v = second_moment_[pi];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad.data()[i];
        m.data()[i] = kBeta1 * m.data()[i] + (1.0 - kBeta1) * g;
        v.data()[i] = kBeta2 * v.data()[i] + (1.0 - kBeta2) * g * g;
        const double m_hat = m.data()[i] / bc1;
        const double v_hat = v.data()[i] / bc2;
        p.value.data()[i] -= learning_rate_ * m_hat / (std::sqrt(v_hat) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  OptimizerKind kind_;
  double learning_rate_;
  std::uint64_t step_count_ = 0;
  std::vector<Matrix> first_moment_;
  std::vector<Matrix> second_moment_;
};

// ---------------------------------------------------------------------------
// Training schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t prototype_start_epoch = 20;   // collect prototypes from this epoch on
  std::size_t similarity_delay_epochs = 5;  // extra epochs before similarity training
  double prototype_alpha = 0.9;
  double tau = 0.2;
  double temperature = 2.0;  // negative generator scaling
  double focal_exponent = 2.0;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 8;
  Ablation ablation = Ablation::kFull;
  OptimizerKind optimizer = OptimizerKind::kAdam;

  std::size_t embedding_width = 16;
  std::size_t projection_hidden = 64;
  std::size_t similarity_hidden = 64;
  bool sim_output_relu = false;
  OODDecisionConfig decision{};

  std::size_t similarity_start_epoch() const {
    return prototype_start_epoch + similarity_delay_epochs;
  }

  void validate() const {
    if (similarity_start_epoch() >= epochs) {
      throw ConfigError(
          "train: prototype_start_epoch + similarity_delay_epochs must be below epochs");
    }
    if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
    if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
    if (!(temperature > 0.0)) throw ConfigError("train: temperature must be positive");
    if (!(focal_exponent >= 0.0)) throw ConfigError("train: focal_exponent must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (!(prototype_alpha > 0.0 && prototype_alpha < 1.0)) {
      throw ConfigError("train: prototype_alpha must lie in (0, 1)");
    }
  }

  ModelConfig model_config(std::size_t categories, std::size_t feature_width) const {
    ModelConfig mc;
    mc.categories = categories;
    mc.feature_width = feature_width;
    mc.embedding_width = embedding_width;
    mc.projection_hidden = projection_hidden;
    mc.similarity_hidden = similarity_hidden;
    mc.prototype_alpha = prototype_alpha;
    mc.sim_output_relu = sim_output_relu;
    mc.decision = decision;
    return mc;
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss_total = 0.0;
  double loss_classification = 0.0;
  double loss_contrastive = 0.0;
  double loss_focal = 0.0;
  std::size_t batches = 0;
  std::size_t negatives_used = 0;
  bool similarity_updated = false;
  std::vector<double> prototype_norms;  // one per category, after the epoch

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  /// Wall-clock is informational only; it is excluded from the log file so
  /// two runs with the same seed produce identical logs.
  double wall_seconds = 0.0;
};

struct TrainResult {
  ModelState model;
  TrainReport report;
};

/// Three-phase schedule over shuffled batches of the train split's ID
/// records:
///   epoch <  prototype_start_epoch                  warm-up objective only
///   epoch <  prototype_start_epoch + delay          warm-up + EMA collection
///   else                                            full objective + EMA
/// Background records ride along as extra zero-target similarity examples in
/// the third phase; the negative generator contributes synthesized
/// embeddings there unless ablated. Prototypes update after each batch's
/// gradient step, from that batch's forward-pass embeddings.
inline TrainResult train(const DatasetSplit& split, const TrainConfig& cfg) {
  cfg.validate();
  if (split.categories < 2) throw ConfigError("train: split needs at least 2 categories");

  std::vector<std::size_t> id_rows, background_rows;
  for (std::size_t i = 0; i < split.records.size(); ++i) {
    if (split.records[i].kind == RecordKind::kId) id_rows.push_back(i);
    if (split.records[i].kind == RecordKind::kBackground) background_rows.push_back(i);
  }
  if (id_rows.size() < cfg.batch_size) {
    throw ConfigError("train: split has " + std::to_string(id_rows.size()) +
                      " ID records, need at least batch_size=" +
                      std::to_string(cfg.batch_size));
  }

  const auto start = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  ModelState state =
      ModelState::random_init(cfg.model_config(split.categories, split.feature_width),
                              rng.next_u64());
  // One optimizer over every parameter. Before the full objective kicks in
  // the similarity module's gradients are identically zero, so its Adam
  // moments stay zero and its weights do not move.
  const std::vector<Parameter*> all_params = state.parameters();
  Optimizer optimizer(cfg.optimizer, cfg.learning_rate);

  StageLossSettings settings;
  settings.contrastive.tau = cfg.tau;
  settings.focal.exponent = cfg.focal_exponent;
  settings.use_contrastive = cfg.ablation != Ablation::kNoContrastiveNoNegatives;
  const bool generate = cfg.ablation == Ablation::kFull;

  const auto gather = [&split](std::span<const std::size_t> rows, std::size_t begin,
                               std::size_t end, Matrix& features,
                               std::vector<int>& labels) {
    features = Matrix(end - begin, split.feature_width);
    labels.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const FeatureRecord& r = split.records[rows[i]];
      for (std::size_t j = 0; j < split.feature_width; ++j)
        features(i - begin, j) = r.feature[j];
      labels.push_back(r.category);
    }
  };

  TrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(id_rows);
    rng.shuffle(background_rows);
    const bool collect = epoch >= cfg.prototype_start_epoch;
    const bool full_objective = epoch >= cfg.similarity_start_epoch();

    // Batch boundaries; a trailing partial batch is kept only if it still has
    // a pair in it.
    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t begin = 0; begin < id_rows.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(id_rows.size(), begin + cfg.batch_size);
      if (end - begin >= 2) batches.emplace_back(begin, end);
    }

    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto [begin, end] = batches[bi];
      Matrix features;
      std::vector<int> labels;
      gather(id_rows, begin, end, features, labels);

      zero_gradients(all_params);
      StageLoss loss;
      Matrix embeddings_for_bank = state.projection.forward(features);
      // With similarity_delay_epochs == 0 the very first full-objective batch
      // can precede the first EMA update; warm up that one batch instead.
      const bool run_full = full_objective && state.bank.seen_count() > 0;
      if (!run_full) {
        loss = stage1_loss(features, labels, state, settings);
      } else {
        // Background slice for this batch: contiguous share of the shuffled
        // background pool.
        Matrix background(0, split.feature_width);
        if (!background_rows.empty()) {
          const std::size_t share =
              (background_rows.size() + batches.size() - 1) / batches.size();
          const std::size_t b0 = std::min(background_rows.size(), bi * share);
          const std::size_t b1 = std::min(background_rows.size(), b0 + share);
          std::vector<int> unused;
          gather(background_rows, b0, b1, background, unused);
        }
        Matrix negatives(0, cfg.embedding_width);
        if (generate) {
          negatives = generate_negatives(embeddings_for_bank, state.bank, cfg.temperature);
          stats.negatives_used += negatives.rows();
        }
        loss = stage2_loss(features, labels, negatives, background, state, settings);
        stats.similarity_updated = true;
      }
      if (!std::isfinite(loss.total)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(bi));
      }
      try {
        optimizer.step(all_params);
      } catch (const NumericError& err) {
        throw NumericError(std::string(err.what()) + " (epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(bi) + ")");
      }
      if (collect) {
        update_prototypes(state.bank, embeddings_for_bank, labels);
      }
      stats.loss_total += loss.total;
      stats.loss_classification += loss.classification;
      stats.loss_contrastive += loss.contrastive;
      stats.loss_focal += loss.focal;
      stats.batches += 1;
    }
    if (stats.batches > 0) {
      const double inv = 1.0 / static_cast<double>(stats.batches);
      stats.loss_total *= inv;
      stats.loss_classification *= inv;
      stats.loss_contrastive *= inv;
      stats.loss_focal *= inv;
    }
    stats.prototype_norms.resize(split.categories);
    for (std::size_t c = 0; c < split.categories; ++c)
      stats.prototype_norms[c] = row_norm(state.bank.prototypes, c);
    report.epochs.push_back(std::move(stats));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(state), std::move(report)};
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

/// One line per epoch, deterministic for a fixed seed (no timing).
inline void write_train_log(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open train log for writing: " + path.string());
  for (const EpochStats& e : report.epochs) {
    os << "epoch " << e.epoch << " total " << format_double(e.loss_total) << " cls "
       << format_double(e.loss_classification) << " con "
       << format_double(e.loss_contrastive) << " focal " << format_double(e.loss_focal)
       << " batches " << e.batches << " negatives " << e.negatives_used
       << " sim_updated " << (e.similarity_updated ? 1 : 0) << " proto_norms ";
    for (std::size_t c = 0; c < e.prototype_norms.size(); ++c) {
      if (c) os << ',';
      os << format_double(e.prototype_norms[c]);
    }
    os << '\n';
  }
  if (!os) throw IoError("failed writing train log: " + path.string());
}

/// Human-oriented summary; wall_seconds makes this file run-dependent.
inline void write_train_summary(const TrainReport& report, const TrainConfig& cfg,
                                const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open train summary for writing: " + path.string());
  os << "epochs " << report.epochs.size() << '\n'
     << "ablation " << to_string(cfg.ablation) << '\n'
     << "seed " << cfg.seed << '\n';
  if (!report.epochs.empty()) {
    const EpochStats& last = report.epochs.back();
    os << "final_total " << format_double(last.loss_total) << '\n'
       << "final_cls " << format_double(last.loss_classification) << '\n'
       << "final_con " << format_double(last.loss_contrastive) << '\n'
       << "final_focal " << format_double(last.loss_focal) << '\n';
  }
  os << "wall_seconds " << format_double(report.wall_seconds) << '\n';
  if (!os) throw IoError("failed writing train summary: " + path.string());
}

}  // namespace proto_ood
