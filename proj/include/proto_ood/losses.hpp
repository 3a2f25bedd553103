#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "proto_ood/errors.hpp"
#include "proto_ood/matrix.hpp"
#include "proto_ood/proto_head.hpp"

namespace proto_ood {

// ---------------------------------------------------------------------------
// Supervised contrastive loss over row-normalized embeddings
// ---------------------------------------------------------------------------

struct ContrastiveConfig {
  double tau = 0.2;  // similarity scaling factor
};

struct ContrastiveResult {
  double loss = 0.0;
  Matrix grad;             // w.r.t. the unnormalized embeddings
  std::size_t anchors = 0; // rows that had at least one same-category partner
  bool no_valid_anchors = false;
};

/// Mean over anchors of -log( sum_same exp(z_i.z_j / tau) / sum_all exp(...) ),
/// j != i, z = row-normalized embeddings. Anchors whose category appears only
/// once in the batch contribute nothing (they still appear in other anchors'
/// denominators). With no valid anchor at all the result is flagged zero
/// rather than an error, so small batches cannot diverge.
inline ContrastiveResult contrastive_loss(const Matrix& embeddings,
                                          std::span<const int> labels,
                                          const ContrastiveConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw DomainError("contrastive_loss: tau must be positive");
  if (embeddings.rows() != labels.size()) {
    throw DimensionError("contrastive_loss: labels do not align with rows");
  }
  const std::size_t m = embeddings.rows();
  ContrastiveResult result;
  result.grad = Matrix(m, embeddings.cols());

  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i && labels[j] == labels[i]) {
        valid.push_back(i);
        break;
      }
    }
  }
  if (valid.empty()) {
    result.no_valid_anchors = true;
    return result;
  }
  result.anchors = valid.size();

  const auto normalized = l2_normalize_rows(embeddings);
  const Matrix& z = normalized.normalized;
  const Matrix dots = matmul_nt(z, z);

  // Per anchor, shift by the row max over j != i before exponentiating; the
  // shift cancels in every ratio below.
  Matrix expd(m, m);
  std::vector<double> denom(m, 0.0), numer(m, 0.0);
  for (const std::size_t i : valid) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) mx = std::max(mx, dots(i, j) / cfg.tau);
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      expd(i, j) = std::exp(dots(i, j) / cfg.tau - mx);
      denom[i] += expd(i, j);
      if (labels[j] == labels[i]) numer[i] += expd(i, j);
    }
    result.loss += std::log(denom[i]) - std::log(numer[i]);
  }
  const double inv_anchors = 1.0 / static_cast<double>(valid.size());
  result.loss *= inv_anchors;

  // d loss / d dots(i,j) = (e_ij/denom_i - [same]*e_ij/numer_i) / (anchors*tau),
  // contributing through z_i and z_j symmetrically.
  Matrix dz(m, embeddings.cols());
  for (const std::size_t i : valid) {
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const bool same = labels[j] == labels[i];
      const double g = inv_anchors / cfg.tau *
                       (expd(i, j) / denom[i] - (same ? expd(i, j) / numer[i] : 0.0));
      if (g == 0.0) continue;
      for (std::size_t k = 0; k < z.cols(); ++k) {
        dz(i, k) += g * z(j, k);
        dz(j, k) += g * z(i, k);
      }
    }
  }
  // Through the normalization: dr = (dz - z (z.dz)) / |r|; identity for rows
  // the normalizer passed through unchanged.
  for (std::size_t i = 0; i < m; ++i) {
    if (normalized.below_eps[i]) {
      for (std::size_t k = 0; k < z.cols(); ++k) result.grad(i, k) = dz(i, k);
      continue;
    }
    const double norm = row_norm(embeddings, i);
    double zdot = 0.0;
    for (std::size_t k = 0; k < z.cols(); ++k) zdot += z(i, k) * dz(i, k);
    for (std::size_t k = 0; k < z.cols(); ++k)
      result.grad(i, k) = (dz(i, k) - zdot * z(i, k)) / norm;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Focal loss
// ---------------------------------------------------------------------------

struct FocalConfig {
  double exponent = 2.0;  // 0 reduces exactly to binary cross-entropy
};

struct LossGrad {
  double loss = 0.0;
  Matrix grad;
};

/// Elementwise -(1-p)^g log p for targets 1 and -p^g log(1-p) for targets 0,
/// averaged over all entries. Probabilities must lie strictly inside (0, 1);
/// the sigmoid upstream guarantees that.
inline LossGrad focal_loss(const Matrix& probs, const Matrix& targets,
                           const FocalConfig& cfg) {
  if (probs.rows() != targets.rows() || probs.cols() != targets.cols()) {
    throw DimensionError("focal_loss: " + shape_str(probs) + " vs " + shape_str(targets));
  }
  if (!(cfg.exponent >= 0.0) || !std::isfinite(cfg.exponent)) {
    throw DomainError("focal_loss: exponent must be finite and non-negative");
  }
  LossGrad out;
  out.grad = Matrix(probs.rows(), probs.cols());
  if (probs.size() == 0) return out;
  const double g = cfg.exponent;
  const double inv_n = 1.0 / static_cast<double>(probs.size());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double p = probs(i, j);
      if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("focal_loss: probability outside (0, 1)");
      }
      const double y = targets(i, j);
      if (y == 1.0) {
        const double w = std::pow(1.0 - p, g);
        out.loss += -w * std::log(p) * inv_n;
        const double dw = g == 0.0 ? 0.0 : g * std::pow(1.0 - p, g - 1.0) * std::log(p);
        out.grad(i, j) = (dw - w / p) * inv_n;
      } else if (y == 0.0) {
        const double w = std::pow(p, g);
        out.loss += -w * std::log(1.0 - p) * inv_n;
        const double dw = g == 0.0 ? 0.0 : g * std::pow(p, g - 1.0) * std::log(1.0 - p);
        out.grad(i, j) = (-dw + w / (1.0 - p)) * inv_n;
      } else {
        throw DomainError("focal_loss: targets must be 0 or 1");
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification surrogate (softmax cross-entropy)
// ---------------------------------------------------------------------------

inline LossGrad classification_loss(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() != labels.size()) {
    throw DimensionError("classification_loss: labels do not align with rows");
  }
  LossGrad out;
  out.grad = Matrix(logits.rows(), logits.cols());
  if (logits.rows() == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  const Matrix probs = softmax_rows(logits);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= logits.cols()) {
      throw DomainError("classification_loss: label " + std::to_string(label) +
                        " outside [0, " + std::to_string(logits.cols()) + ")");
    }
    out.loss += -std::log(probs(i, static_cast<std::size_t>(label))) * inv_n;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      out.grad(i, j) =
          (probs(i, j) - (j == static_cast<std::size_t>(label) ? 1.0 : 0.0)) * inv_n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage compositions
// ---------------------------------------------------------------------------

struct StageLossSettings {
  ContrastiveConfig contrastive{};
  FocalConfig focal{};
  bool use_contrastive = true;
};

struct StageLoss {
  double total = 0.0;
  double classification = 0.0;
  double contrastive = 0.0;
  double focal = 0.0;
  bool contrastive_flagged = false;  // batch had no valid anchor pair
  std::size_t focal_pairs = 0;
};

/// Warm-up objective: classification + contrastive over a batch of raw
/// features. Accumulates gradients into the model's parameters.
inline StageLoss stage1_loss(const Matrix& features, std::span<const int> labels,
                             ModelState& state, const StageLossSettings& settings) {
  StageLoss out;
  Mlp2Cache proj_cache;
  const Matrix embeddings = state.projection.forward(features, proj_cache);
  LinearCache cls_cache;
  const Matrix logits = state.classifier.forward(embeddings, cls_cache);

  const LossGrad cls = classification_loss(logits, labels);
  out.classification = cls.loss;
  Matrix d_embeddings = state.classifier.backward(cls.grad, cls_cache);

  if (settings.use_contrastive) {
    const ContrastiveResult con = contrastive_loss(embeddings, labels, settings.contrastive);
    out.contrastive = con.loss;
    out.contrastive_flagged = con.no_valid_anchors;
    if (!con.no_valid_anchors) {
      for (std::size_t i = 0; i < d_embeddings.rows(); ++i)
        for (std::size_t j = 0; j < d_embeddings.cols(); ++j)
          d_embeddings(i, j) += con.grad(i, j);
    }
  }
  state.projection.backward(d_embeddings, proj_cache);
  out.total = out.classification + out.contrastive;
  return out;
}

inline std::vector<std::size_t> bank_seen_or_throw(const ModelState& state) {
  auto cats = state.bank.seen_categories();
  if (cats.empty()) {
    throw StateError("stage2_loss: prototype bank has no seen categories");
  }
  return cats;
}

/// Full objective: stage-1 terms plus focal loss on the similarity module.
/// Target layout over the bank's seen prototypes: batch embeddings score 1
/// against their own category and 0 elsewhere; generated negatives (passed in
/// as fixed embeddings) and background features score 0 everywhere.
inline StageLoss stage2_loss(const Matrix& features, std::span<const int> labels,
                             const Matrix& negatives, const Matrix& background_features,
                             ModelState& state, const StageLossSettings& settings) {
  const auto cats = bank_seen_or_throw(state);
  if (negatives.rows() > 0 && negatives.cols() != state.config.embedding_width) {
    throw DimensionError("stage2_loss: negatives have width " +
                         std::to_string(negatives.cols()) + ", expected " +
                         std::to_string(state.config.embedding_width));
  }
  StageLoss out;

  Mlp2Cache proj_cache;
  const Matrix embeddings = state.projection.forward(features, proj_cache);
  LinearCache cls_cache;
  const Matrix logits = state.classifier.forward(embeddings, cls_cache);

  const LossGrad cls = classification_loss(logits, labels);
  out.classification = cls.loss;
  Matrix d_embeddings = state.classifier.backward(cls.grad, cls_cache);

  if (settings.use_contrastive) {
    const ContrastiveResult con = contrastive_loss(embeddings, labels, settings.contrastive);
    out.contrastive = con.loss;
    out.contrastive_flagged = con.no_valid_anchors;
    if (!con.no_valid_anchors) {
      for (std::size_t i = 0; i < d_embeddings.rows(); ++i)
        for (std::size_t j = 0; j < d_embeddings.cols(); ++j)
          d_embeddings(i, j) += con.grad(i, j);
    }
  }

  // Similarity pairs, stacked: [batch; negatives; background].
  const Matrix protos = state.bank.seen_prototypes();
  Mlp2Cache bg_proj_cache;
  Matrix background_embeddings;
  if (background_features.rows() > 0) {
    background_embeddings = state.projection.forward(background_features, bg_proj_cache);
  }
  const std::size_t n = embeddings.rows();
  const std::size_t n_neg = negatives.rows();
  const std::size_t n_bg = background_embeddings.rows();
  Matrix stacked(n + n_neg + n_bg, state.config.embedding_width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < stacked.cols(); ++k) stacked(i, k) = embeddings(i, k);
  for (std::size_t i = 0; i < n_neg; ++i)
    for (std::size_t k = 0; k < stacked.cols(); ++k)
      stacked(n + i, k) = negatives(i, k);
  for (std::size_t i = 0; i < n_bg; ++i)
    for (std::size_t k = 0; k < stacked.cols(); ++k)
      stacked(n + n_neg + i, k) = background_embeddings(i, k);

  Mlp2Cache sim_cache;
  const Matrix scores = pairwise_similarity(stacked, protos, state.similarity, &sim_cache);
  Matrix targets(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < cats.size(); ++j)
      targets(i, j) = cats[j] == static_cast<std::size_t>(labels[i]) ? 1.0 : 0.0;
  const LossGrad focal = focal_loss(scores, targets, settings.focal);
  out.focal = focal.loss;
  out.focal_pairs = scores.size();

  const Matrix d_stacked = pairwise_similarity_backward(
      focal.grad, state.similarity, sim_cache, state.config.embedding_width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d_embeddings.cols(); ++k)
      d_embeddings(i, k) += d_stacked(i, k);
  // Negatives are synthesized inputs, not a gradient path.
  if (n_bg > 0) {
    Matrix d_bg(n_bg, state.config.embedding_width);
    for (std::size_t i = 0; i < n_bg; ++i)
      for (std::size_t k = 0; k < d_bg.cols(); ++k)
        d_bg(i, k) = d_stacked(n + n_neg + i, k);
    state.projection.backward(d_bg, bg_proj_cache);
  }
  state.projection.backward(d_embeddings, proj_cache);

  out.total = out.classification + out.contrastive + out.focal;
  return out;
}

}  // namespace proto_ood
