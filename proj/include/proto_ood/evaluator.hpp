#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "proto_ood/data.hpp"
#include "proto_ood/dump.hpp"
#include "proto_ood/errors.hpp"
#include "proto_ood/proto_head.hpp"
#include "proto_ood/util.hpp"

namespace proto_ood {

/// Protocol A scores every prediction. Protocol B keeps, per ID-dataset
/// image, only the K highest-cls_score predictions (K = the image's annotated
/// count); OOD-dataset predictions are never filtered.
enum class Protocol { kA, kB };

inline std::string to_string(Protocol p) { return p == Protocol::kA ? "A" : "B"; }

inline std::vector<ScoredPrediction> protocol_filter(
    std::span<const ImageGroup> groups, Protocol protocol,
    std::vector<std::string>* warnings = nullptr) {
  std::vector<ScoredPrediction> out;
  for (const ImageGroup& g : groups) {
    if (protocol == Protocol::kA || g.source == PredictionSource::kOodDataset) {
      out.insert(out.end(), g.predictions.begin(), g.predictions.end());
      continue;
    }
    if (g.annotated_count >= g.predictions.size()) {
      if (g.annotated_count > g.predictions.size() && warnings) {
        warnings->push_back("image " + std::to_string(g.image_id) + ": K=" +
                            std::to_string(g.annotated_count) + " but only " +
                            std::to_string(g.predictions.size()) +
                            " predictions; keeping all");
      }
      out.insert(out.end(), g.predictions.begin(), g.predictions.end());
      continue;
    }
    // Stable order index sort: ties in cls_score keep input order.
    std::vector<std::size_t> order(g.predictions.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return g.predictions[a].cls_score > g.predictions[b].cls_score;
    });
    order.resize(g.annotated_count);
    std::sort(order.begin(), order.end());  // preserve input order among the kept
    for (const std::size_t idx : order) out.push_back(g.predictions[idx]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics. ID predictions are the ROC positives and scores are oriented
// "higher = more in-distribution".
// ---------------------------------------------------------------------------

struct Fpr95Result {
  double fpr = 0.0;
  double threshold = 0.0;
};

/// Threshold = the largest value t such that at least 95% of id_scores are
/// >= t (an order statistic, no interpolation); fpr = fraction of ood_scores
/// >= that threshold.
inline Fpr95Result fpr_at_95_tpr(std::span<const double> id_scores,
                                 std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw EvalError("fpr_at_95_tpr: empty score list");
  }
  std::vector<double> sorted(id_scores.begin(), id_scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t n = sorted.size();
  const std::size_t k = (19 * n + 19) / 20;  // ceil(0.95 n), exact in integers
  const double threshold = sorted[k - 1];
  std::size_t above = 0;
  for (const double s : ood_scores)
    if (s >= threshold) ++above;
  return {static_cast<double>(above) / static_cast<double>(ood_scores.size()), threshold};
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counted 1/2. Rank-based; the numerator 2*wins + ties is assembled in
/// integer arithmetic, so the result matches the O(n*m) pairwise count
/// bit-for-bit.
inline double auroc(std::span<const double> id_scores,
                    std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw EvalError("auroc: empty score list");
  }
  struct Tagged {
    double score;
    bool is_id;
  };
  std::vector<Tagged> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (const double s : id_scores) all.push_back({s, true});
  for (const double s : ood_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(),
            [](const Tagged& a, const Tagged& b) { return a.score < b.score; });

  // Sum of 2*midrank over ID entries: a tied block [lo..hi] (1-based) gives
  // each member 2*midrank = lo + hi.
  std::uint64_t twice_rank_sum = 0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const std::uint64_t lo = i + 1, hi = j;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].is_id) twice_rank_sum += lo + hi;
    i = j;
  }
  const std::uint64_t n = id_scores.size(), m = ood_scores.size();
  const std::uint64_t twice_u = twice_rank_sum - n * (n + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n) * static_cast<double>(m));
}

struct MetricsReport {
  Protocol protocol = Protocol::kA;
  double fpr95 = 0.0;
  double auroc = 0.0;
  double threshold = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport compute_metrics(std::span<const ScoredPrediction> predictions,
                                     Protocol protocol) {
  std::vector<double> id_scores, ood_scores;
  for (const ScoredPrediction& p : predictions) {
    (p.source == PredictionSource::kIdDataset ? id_scores : ood_scores)
        .push_back(p.ood_score);
  }
  if (id_scores.empty() || ood_scores.empty()) {
    throw EvalError("compute_metrics: need predictions from both datasets");
  }
  const Fpr95Result f = fpr_at_95_tpr(id_scores, ood_scores);
  MetricsReport report;
  report.protocol = protocol;
  report.fpr95 = f.fpr;
  report.threshold = f.threshold;
  report.auroc = auroc(id_scores, ood_scores);
  report.n_id = id_scores.size();
  report.n_ood = ood_scores.size();
  return report;
}

// ---------------------------------------------------------------------------
// Scoring a split with a trained model
// ---------------------------------------------------------------------------

/// Scores every record and groups the results by image in first-appearance
/// order. K per image = count of annotated records. Row computations are
/// independent, so the chunked parallel loop returns identical bytes at any
/// thread count.
inline std::vector<ImageGroup> score_split(const ModelState& state,
                                           const DatasetSplit& split,
                                           PredictionSource source) {
  if (split.feature_width != state.config.feature_width) {
    throw DimensionError("score_split: split width " + std::to_string(split.feature_width) +
                         ", model expects " + std::to_string(state.config.feature_width));
  }
  const std::size_t n = split.records.size();
  std::vector<double> energy(n, 0.0);
  std::vector<std::uint8_t> flags(n, 0);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    if (begin >= end) return;
    Matrix chunk(end - begin, split.feature_width);
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t j = 0; j < split.feature_width; ++j)
        chunk(i - begin, j) = split.records[i].feature[j];
    const Matrix embeddings = state.projection.forward(chunk);
    std::vector<int> predicted;
    if (state.config.decision.reduction == EnergyReduction::kAtPredictedCategory) {
      const Matrix logits = state.classifier.forward(embeddings);
      predicted.resize(embeddings.rows());
      for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
          if (logits(i, j) > logits(i, best)) best = j;
        predicted[i] = static_cast<int>(best);
      }
    }
    const EnergyScores scores =
        ood_energy(embeddings, state.bank, state.similarity,
                   state.config.decision.reduction, predicted);
    const auto decisions = classify_ood(scores.scalar, state.config.decision);
    for (std::size_t i = begin; i < end; ++i) {
      energy[i] = scores.scalar[i - begin];
      flags[i] = decisions[i - begin];
    }
  });

  std::vector<ImageGroup> groups;
  std::vector<std::int64_t> seen_order;
  for (std::size_t i = 0; i < n; ++i) {
    const FeatureRecord& r = split.records[i];
    auto it = std::find(seen_order.begin(), seen_order.end(), r.image_id);
    std::size_t gi;
    if (it == seen_order.end()) {
      seen_order.push_back(r.image_id);
      groups.push_back(ImageGroup{r.image_id, source, 0, {}});
      gi = groups.size() - 1;
    } else {
      gi = static_cast<std::size_t>(it - seen_order.begin());
    }
    if (r.annotated) groups[gi].annotated_count += 1;
    ScoredPrediction p;
    p.image_id = r.image_id;
    p.source = source;
    p.cls_score = r.cls_score;
    p.ood_score = energy[i];
    p.id_flag = flags[i] == 1;
    groups[gi].predictions.push_back(p);
  }
  return groups;
}

/// Full pipeline: score both splits, apply the protocol, compute metrics.
inline MetricsReport evaluate(const ModelState& state, const DatasetSplit& id_split,
                              const DatasetSplit& ood_split, Protocol protocol) {
  if (id_split.feature_width != ood_split.feature_width) {
    throw DimensionError("evaluate: splits disagree on feature width");
  }
  std::vector<ImageGroup> groups = score_split(state, id_split, PredictionSource::kIdDataset);
  const std::vector<ImageGroup> ood_groups =
      score_split(state, ood_split, PredictionSource::kOodDataset);
  groups.insert(groups.end(), ood_groups.begin(), ood_groups.end());
  return compute_metrics(protocol_filter(groups, protocol), protocol);
}

// ---------------------------------------------------------------------------
// Report file: fixed field names, machine-diffable.
// ---------------------------------------------------------------------------

inline void write_metrics_report(const MetricsReport& report,
                                 const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open report for writing: " + path.string());
  os << "protocol " << to_string(report.protocol) << '\n'
     << "fpr95 " << format_double(report.fpr95) << '\n'
     << "auroc " << format_double(report.auroc) << '\n'
     << "threshold " << format_double(report.threshold) << '\n'
     << "n_id " << report.n_id << '\n'
     << "n_ood " << report.n_ood << '\n';
  if (!os) throw IoError("failed writing report: " + path.string());
}

inline MetricsReport read_metrics_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open report: " + path.string());
  MetricsReport report;
  auto field = [&is](std::string_view key) {
    std::string line;
    if (!std::getline(is, line)) {
      throw ParseError("report: missing field " + std::string(key));
    }
    const auto tokens = split_tokens(line);
    if (tokens.size() != 2 || tokens[0] != key) {
      throw ParseError("report: expected '" + std::string(key) + " <value>', got '" +
                       line + "'");
    }
    return std::string(tokens[1]);
  };
  const std::string protocol = field("protocol");
  if (protocol == "A") {
    report.protocol = Protocol::kA;
  } else if (protocol == "B") {
    report.protocol = Protocol::kB;
  } else {
    throw ParseError("report: unknown protocol '" + protocol + "'");
  }
  report.fpr95 = parse_double(field("fpr95"), "fpr95");
  report.auroc = parse_double(field("auroc"), "auroc");
  report.threshold = parse_double(field("threshold"), "threshold");
  report.n_id = static_cast<std::size_t>(parse_int(field("n_id"), "n_id"));
  report.n_ood = static_cast<std::size_t>(parse_int(field("n_ood"), "n_ood"));
  return report;
}

}  // namespace proto_ood
