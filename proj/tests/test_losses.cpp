#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "proto_ood/losses.hpp"

using namespace proto_ood;

TEST_CASE("contrastive loss decision cases") {
  SECTION("two identical same-category unit vectors give zero loss") {
    const Matrix r = Matrix::from_rows({{1.0, 0.0}, {1.0, 0.0}});
    const std::vector<int> labels{3, 3};
    const auto result = contrastive_loss(r, labels, {});
    CHECK(result.loss == 0.0);
    CHECK_FALSE(result.no_valid_anchors);
    CHECK(result.anchors == 2);
  }
  SECTION("all-singleton batch is flagged, not an error") {
    const Matrix r = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const std::vector<int> labels{0, 1};
    const auto result = contrastive_loss(r, labels, {});
    CHECK(result.loss == 0.0);
    CHECK(result.no_valid_anchors);
    for (std::size_t i = 0; i < result.grad.size(); ++i)
      CHECK(result.grad.data()[i] == 0.0);
  }
}

TEST_CASE("contrastive loss matches the high-precision reference instance") {
  // Reference value computed by evaluating the definition directly at
  // 50-digit precision on this fixed batch (tau = 0.2, labels {0,0,1};
  // anchor 2 is a singleton and drops out).
  const Matrix r = Matrix::from_rows({{0.6, -0.2, 0.1, 0.3},
                                      {0.5, 0.1, -0.3, 0.2},
                                      {0.4, -0.3, 0.2, 0.1}});
  const std::vector<int> labels{0, 0, 1};
  const auto result = contrastive_loss(r, labels, ContrastiveConfig{0.2});
  CHECK(result.anchors == 2);
  CHECK(result.loss == Catch::Approx(0.75084613276205450929).margin(1e-13));
}

TEST_CASE("contrastive loss is invariant to positive rescaling of rows") {
  Rng rng(23);
  const Matrix r = oracles::random_matrix(rng, 6, 4);
  const std::vector<int> labels{0, 1, 0, 2, 1, 2};
  const double base = contrastive_loss(r, labels, {}).loss;
  Matrix scaled = r;
  const double factors[] = {0.03, 5.0, 17.0, 0.2, 1.0, 100.0};
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= factors[i];
  CHECK(contrastive_loss(scaled, labels, {}).loss == Catch::Approx(base).margin(1e-10));
}

TEST_CASE("contrastive loss is non-negative on random batches") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.below(6);
    const Matrix r = oracles::random_matrix(rng, m, 3);
    std::vector<int> labels(m);
    for (auto& l : labels) l = static_cast<int>(rng.below(3));
    const auto result = contrastive_loss(r, labels, ContrastiveConfig{0.3});
    CHECK(result.loss >= 0.0);
  }
}

TEST_CASE("contrastive gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed * 7 + 1);
    Parameter r("r", oracles::random_matrix(rng, 6, 4));
    std::vector<int> labels(6);
    for (auto& l : labels) l = static_cast<int>(rng.below(3));
    const std::vector<Parameter*> params{&r};
    const auto loss = [&]() {
      r.zero_grad();
      const auto result = contrastive_loss(r.value, labels, ContrastiveConfig{0.2});
      r.grad = result.grad;
      return result.loss;
    };
    const auto check = grad_check(loss, params, 1e-5);
    INFO("seed " << seed);
    CHECK(check.max_rel_error < 1e-4);
  }
}

TEST_CASE("focal loss values") {
  SECTION("target 1 with confident prediction goes to zero") {
    const auto result = focal_loss(Matrix(1, 1, 1.0 - 1e-12), Matrix(1, 1, 1.0),
                                   FocalConfig{2.0});
    CHECK(result.loss < 1e-20);
  }
  SECTION("frozen value: target 1, p = 0.5, exponent 2 is 0.25 ln 2") {
    const auto result = focal_loss(Matrix(1, 1, 0.5), Matrix(1, 1, 1.0), FocalConfig{2.0});
    CHECK(result.loss == Catch::Approx(0.17328679513998632735).margin(1e-15));
  }
  SECTION("exponent 0 reduces exactly to binary cross-entropy") {
    Rng rng(41);
    for (int trial = 0; trial < 30; ++trial) {
      const double p = rng.uniform(0.02, 0.98);
      const double y = rng.below(2) ? 1.0 : 0.0;
      const auto focal = focal_loss(Matrix(1, 1, p), Matrix(1, 1, y), FocalConfig{0.0});
      const double bce = y == 1.0 ? -std::log(p) : -std::log(1.0 - p);
      CHECK(focal.loss == bce);
    }
  }
  SECTION("probabilities outside the open interval are rejected") {
    CHECK_THROWS_AS(focal_loss(Matrix(1, 1, 0.0), Matrix(1, 1, 1.0), {}), DomainError);
    CHECK_THROWS_AS(focal_loss(Matrix(1, 1, 1.0), Matrix(1, 1, 0.0), {}), DomainError);
  }
}

TEST_CASE("focal gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed * 13 + 5);
    // Keep probabilities comfortably inside (0,1) so the finite-difference
    // probes stay in-domain.
    Parameter logits("logits", oracles::random_matrix(rng, 4, 3));
    Matrix targets(4, 3);
    for (std::size_t i = 0; i < targets.size(); ++i)
      targets.data()[i] = rng.below(2) ? 1.0 : 0.0;
    const std::vector<Parameter*> params{&logits};
    const FocalConfig cfg{seed % 3 == 0 ? 0.0 : 2.0};
    const auto loss = [&]() {
      logits.zero_grad();
      Matrix probs(logits.value.rows(), logits.value.cols());
      for (std::size_t i = 0; i < probs.size(); ++i)
        probs.data()[i] = sigmoid(logits.value.data()[i]);
      const auto result = focal_loss(probs, targets, cfg);
      for (std::size_t i = 0; i < probs.size(); ++i) {
        const double s = probs.data()[i];
        logits.grad.data()[i] = result.grad.data()[i] * s * (1.0 - s);
      }
      return result.loss;
    };
    const auto check = grad_check(loss, params, 1e-5);
    INFO("seed " << seed);
    CHECK(check.max_rel_error < 1e-4);
  }
}

TEST_CASE("classification loss values and gradient") {
  SECTION("uniform logits give ln t") {
    const std::vector<int> labels{0, 3, 1};
    const auto result = classification_loss(Matrix(3, 4, 0.25), labels);
    CHECK(result.loss == Catch::Approx(std::log(4.0)).margin(1e-12));
  }
  SECTION("dominant correct logit drives the loss to zero") {
    Matrix logits(1, 3);
    logits(0, 1) = 200.0;
    const std::vector<int> labels{1};
    CHECK(classification_loss(logits, labels).loss < 1e-12);
  }
  SECTION("label out of range is a domain error") {
    const std::vector<int> labels{4};
    CHECK_THROWS_AS(classification_loss(Matrix(1, 3), labels), DomainError);
  }
  SECTION("gradient matches finite differences") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Rng rng(seed + 99);
      Parameter logits("logits", oracles::random_matrix(rng, 5, 4));
      std::vector<int> labels(5);
      for (auto& l : labels) l = static_cast<int>(rng.below(4));
      const std::vector<Parameter*> params{&logits};
      const auto loss = [&]() {
        logits.zero_grad();
        const auto result = classification_loss(logits.value, labels);
        logits.grad = result.grad;
        return result.loss;
      };
      CHECK(grad_check(loss, params, 1e-5).max_rel_error < 1e-4);
    }
  }
}

namespace {

ModelState small_model(std::uint64_t seed, bool mark_seen = false) {
  ModelConfig cfg;
  cfg.categories = 3;
  cfg.feature_width = 6;
  cfg.embedding_width = 3;
  cfg.projection_hidden = 5;
  cfg.similarity_hidden = 4;
  ModelState state = ModelState::random_init(cfg, seed);
  if (mark_seen) {
    Rng rng(seed + 1);
    Matrix embeddings = oracles::random_matrix(rng, 6, 3);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    update_prototypes(state.bank, embeddings, labels);
  }
  return state;
}

}  // namespace

TEST_CASE("stage-1 loss is the exact sum of its parts") {
  Rng rng(55);
  ModelState state = small_model(7);
  const Matrix features = oracles::random_matrix(rng, 6, 6);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  zero_gradients(std::vector<Parameter*>(state.parameters()));
  const StageLoss loss = stage1_loss(features, labels, state, {});
  CHECK(loss.classification >= 0.0);
  CHECK(loss.contrastive >= 0.0);
  CHECK(std::abs(loss.total - (loss.classification + loss.contrastive)) < 1e-12);
  CHECK(loss.focal == 0.0);
}

TEST_CASE("stage-1 loss on a contrastive-flagged batch equals classification alone") {
  Rng rng(56);
  ModelState state = small_model(8);
  const Matrix features = oracles::random_matrix(rng, 3, 6);
  const std::vector<int> labels{0, 1, 2};  // all singletons
  zero_gradients(std::vector<Parameter*>(state.parameters()));
  const StageLoss loss = stage1_loss(features, labels, state, {});
  CHECK(loss.contrastive_flagged);
  CHECK(loss.contrastive == 0.0);
  CHECK(loss.total == loss.classification);
}

TEST_CASE("stage-2 focal term at zero similarity parameters is exactly computable") {
  // Zero parameters force every similarity score to 0.5; with exponent 2 the
  // focal term is 0.25 ln 2 for both target values, so the mean equals it.
  ModelState state = small_model(9, /*mark_seen=*/true);
  state.similarity.w1.value.fill(0.0);
  state.similarity.b1.value.fill(0.0);
  state.similarity.w2.value.fill(0.0);
  state.similarity.b2.value.fill(0.0);
  Rng rng(57);
  const Matrix features = oracles::random_matrix(rng, 4, 6);
  const std::vector<int> labels{0, 1, 2, 0};
  zero_gradients(std::vector<Parameter*>(state.parameters()));
  const StageLoss loss = stage2_loss(features, labels, Matrix(0, 3), Matrix(0, 6),
                                     state, {});
  CHECK(loss.focal == Catch::Approx(0.25 * std::log(2.0)).margin(1e-15));
  CHECK(std::abs(loss.total - (loss.classification + loss.contrastive + loss.focal)) <
        1e-12);
  CHECK(loss.focal_pairs == 12);  // 4 rows x 3 seen categories
}

TEST_CASE("stage-2 requires a seen prototype") {
  ModelState state = small_model(10);
  Rng rng(58);
  const Matrix features = oracles::random_matrix(rng, 4, 6);
  const std::vector<int> labels{0, 1, 2, 0};
  CHECK_THROWS_AS(
      stage2_loss(features, labels, Matrix(0, 3), Matrix(0, 6), state, {}),
      StateError);
}

TEST_CASE("stage-2 end-to-end gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    ModelState state = small_model(seed * 3, /*mark_seen=*/true);
    Rng rng(seed * 17 + 2);
    const Matrix features = oracles::random_matrix(rng, 5, 6);
    const std::vector<int> labels{0, 0, 1, 2, 1};
    const Matrix background = oracles::random_matrix(rng, 3, 6);
    const Matrix negatives =
        generate_negatives(state.projection.forward(features), state.bank, 2.0);
    const auto params = state.parameters();
    const auto loss = [&]() {
      zero_gradients(std::span<Parameter* const>(params));
      return stage2_loss(features, labels, negatives, background, state, {}).total;
    };
    const auto check = grad_check(loss, params, 1e-5);
    INFO("seed " << seed << " worst " << check.worst_param);
    CHECK(check.max_rel_error < 1e-4);
  }
}

TEST_CASE("stage-1 end-to-end gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    ModelState state = small_model(seed * 5 + 1);
    Rng rng(seed * 19 + 3);
    const Matrix features = oracles::random_matrix(rng, 6, 6);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    const auto params = state.parameters();
    const auto loss = [&]() {
      zero_gradients(std::span<Parameter* const>(params));
      return stage1_loss(features, labels, state, {}).total;
    };
    CHECK(grad_check(loss, params, 1e-5).max_rel_error < 1e-4);
  }
}
