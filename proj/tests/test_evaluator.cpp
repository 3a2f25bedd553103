#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "oracles.hpp"
#include "proto_ood/evaluator.hpp"
#include "proto_ood/trainer.hpp"

using namespace proto_ood;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_scores(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> out(n);
  for (double& s : out) s = rng.uniform(lo, hi);
  return out;
}

ImageGroup make_group(std::int64_t image_id, PredictionSource source, std::size_t k,
                      std::vector<std::pair<double, double>> cls_and_energy) {
  ImageGroup g;
  g.image_id = image_id;
  g.source = source;
  g.annotated_count = k;
  for (const auto& [cls, e] : cls_and_energy)
    g.predictions.push_back({image_id, source, cls, e, false});
  return g;
}

}  // namespace

TEST_CASE("protocol filter") {
  SECTION("protocol A keeps everything") {
    const std::vector<ImageGroup> groups{
        make_group(0, PredictionSource::kIdDataset, 1, {{0.9, 1.0}, {0.1, 0.2}}),
        make_group(1, PredictionSource::kOodDataset, 2, {{0.7, 0.4}})};
    const auto kept = protocol_filter(groups, Protocol::kA);
    CHECK(kept.size() == 3);
  }
  SECTION("protocol B drops the lowest-scored surplus predictions") {
    const std::vector<ImageGroup> groups{make_group(
        0, PredictionSource::kIdDataset, 2, {{0.9, 1.0}, {0.8, 0.9}, {0.3, 0.1}})};
    const auto kept = protocol_filter(groups, Protocol::kB);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].cls_score == 0.9);
    CHECK(kept[1].cls_score == 0.8);
  }
  SECTION("ties break toward earlier input order") {
    const std::vector<ImageGroup> groups{make_group(
        0, PredictionSource::kIdDataset, 1, {{0.5, 111.0}, {0.5, 222.0}})};
    const auto kept = protocol_filter(groups, Protocol::kB);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].ood_score == 111.0);
  }
  SECTION("OOD images are never filtered") {
    const std::vector<ImageGroup> groups{make_group(
        5, PredictionSource::kOodDataset, 1, {{0.9, 1.0}, {0.8, 0.9}, {0.3, 0.1}})};
    CHECK(protocol_filter(groups, Protocol::kB).size() == 3);
  }
  SECTION("K larger than the prediction count keeps all and warns") {
    const std::vector<ImageGroup> groups{
        make_group(7, PredictionSource::kIdDataset, 5, {{0.9, 1.0}, {0.8, 0.9}})};
    std::vector<std::string> warnings;
    const auto kept = protocol_filter(groups, Protocol::kB, &warnings);
    CHECK(kept.size() == 2);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("image 7") != std::string::npos);
  }
}

TEST_CASE("fpr_at_95_tpr") {
  SECTION("perfect separation") {
    const std::vector<double> id(20, 1.0), ood(10, 0.0);
    const auto r = fpr_at_95_tpr(id, ood);
    CHECK(r.fpr == 0.0);
    CHECK(r.threshold == 1.0);
  }
  SECTION("hand-enumerated case: twenty distinct scores") {
    std::vector<double> id;
    for (int i = 1; i <= 20; ++i) id.push_back(i);
    const std::vector<double> ood{1.0, 2.0, 3.0};
    const auto r = fpr_at_95_tpr(id, ood);
    CHECK(r.threshold == 2.0);
    CHECK(r.fpr == Catch::Approx(2.0 / 3.0).margin(1e-15));
    const auto sweep = oracles::sweep_fpr_at_95_tpr(id, ood);
    CHECK(r.threshold == sweep.threshold);
    CHECK(r.fpr == sweep.fpr);
  }
  SECTION("identical distributions sit at 0.95 within quantization") {
    Rng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 40 + rng.below(200);
      const auto scores = random_scores(rng, n, 0.0, 2.0);
      const auto r = fpr_at_95_tpr(scores, scores);
      CHECK(r.fpr >= 0.95 - 1e-12);
      CHECK(r.fpr <= 0.95 + 1.0 / static_cast<double>(n) + 1e-12);
    }
  }
  SECTION("empty inputs are evaluation errors") {
    const std::vector<double> some{1.0};
    CHECK_THROWS_AS(fpr_at_95_tpr({}, some), EvalError);
    CHECK_THROWS_AS(fpr_at_95_tpr(some, {}), EvalError);
  }
  SECTION("matches the exhaustive sweep oracle on random instances") {
    Rng rng(16);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 1 + rng.below(1000), m = 1 + rng.below(1000);
      // quantized scores so ties actually occur
      std::vector<double> id(n), ood(m);
      for (double& s : id) s = static_cast<double>(rng.below(50)) / 10.0;
      for (double& s : ood) s = static_cast<double>(rng.below(50)) / 10.0;
      const auto fast = fpr_at_95_tpr(id, ood);
      const auto slow = oracles::sweep_fpr_at_95_tpr(id, ood);
      REQUIRE(fast.threshold == slow.threshold);
      REQUIRE(fast.fpr == slow.fpr);
    }
  }
  SECTION("adding an OOD score above the threshold never lowers the rate") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
      const auto id = random_scores(rng, 30 + rng.below(100), 0.0, 3.0);
      auto ood = random_scores(rng, 20 + rng.below(100), 0.0, 3.0);
      const auto before = fpr_at_95_tpr(id, ood);
      ood.push_back(before.threshold + 0.5);
      const auto after = fpr_at_95_tpr(id, ood);
      CHECK(after.fpr >= before.fpr - 1e-15);
    }
  }
}

TEST_CASE("auroc") {
  SECTION("perfect separation is 1") {
    const std::vector<double> id{2.0, 3.0}, ood{0.5, 1.0};
    CHECK(auroc(id, ood) == 1.0);
  }
  SECTION("identical constants are all ties: exactly one half") {
    const std::vector<double> id(7, 1.5), ood(13, 1.5);
    CHECK(auroc(id, ood) == 0.5);
  }
  SECTION("pairwise hand case: one win, one loss") {
    const std::vector<double> id{3.0, 1.0}, ood{2.0};
    CHECK(auroc(id, ood) == 0.5);
  }
  SECTION("empty inputs are evaluation errors") {
    const std::vector<double> some{1.0};
    CHECK_THROWS_AS(auroc({}, some), EvalError);
    CHECK_THROWS_AS(auroc(some, {}), EvalError);
  }
  SECTION("rank computation equals the pairwise oracle exactly") {
    Rng rng(18);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 1 + rng.below(1000), m = 1 + rng.below(1000);
      std::vector<double> id(n), ood(m);
      for (double& s : id) s = static_cast<double>(rng.below(40)) / 8.0;
      for (double& s : ood) s = static_cast<double>(rng.below(40)) / 8.0;
      REQUIRE(auroc(id, ood) == oracles::pairwise_auroc(id, ood));
    }
  }
}

TEST_CASE("metrics report file round-trips") {
  MetricsReport report;
  report.protocol = Protocol::kB;
  report.fpr95 = 0.08123456789012345;
  report.auroc = 0.987654321098765;
  report.threshold = 1.2345678901234567;
  report.n_id = 321;
  report.n_ood = 123;
  const fs::path path = fs::temp_directory_path() / "proto_ood_report_test.txt";
  write_metrics_report(report, path);
  CHECK(read_metrics_report(path) == report);
}

TEST_CASE("scored evaluation pipeline on a trained model") {
  SyntheticConfig synth;
  synth.categories = 3;
  synth.feature_width = 16;
  synth.per_class = 20;
  synth.class_separation = 8.0;
  synth.ood_clusters = 2;
  synth.ood_per_cluster = 12;
  synth.background_per_image = 1;
  synth.objects_per_image = 3;
  synth.seed = 5;
  const SyntheticData data = generate_synthetic(synth);

  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.prototype_start_epoch = 4;
  cfg.similarity_delay_epochs = 2;
  cfg.batch_size = 16;
  cfg.embedding_width = 6;
  cfg.projection_hidden = 24;
  cfg.similarity_hidden = 24;
  cfg.learning_rate = 3e-3;
  cfg.seed = 5;
  const TrainResult result = train(data.train, cfg);

  SECTION("protocol B never keeps more ID predictions than protocol A") {
    const MetricsReport a = evaluate(result.model, data.id_eval, data.ood_eval, Protocol::kA);
    const MetricsReport b = evaluate(result.model, data.id_eval, data.ood_eval, Protocol::kB);
    CHECK(b.n_id <= a.n_id);
    CHECK(b.n_ood == a.n_ood);
    CHECK(a.auroc >= 0.0);
    CHECK(a.auroc <= 1.0);
    CHECK(a.fpr95 >= 0.0);
    CHECK(a.fpr95 <= 1.0);
  }

  SECTION("a split evaluated against itself is chance level") {
    const MetricsReport self =
        evaluate(result.model, data.id_eval, data.id_eval, Protocol::kA);
    CHECK(self.auroc == Catch::Approx(0.5).margin(0.05));
  }

  SECTION("scoring is deterministic and independent of the thread cap") {
    const auto groups1 = score_split(result.model, data.id_eval, PredictionSource::kIdDataset);
    const auto groups2 = score_split(result.model, data.id_eval, PredictionSource::kIdDataset);
    CHECK(groups1 == groups2);
  }

  SECTION("per-image annotated counts survive scoring") {
    const auto groups = score_split(result.model, data.id_eval, PredictionSource::kIdDataset);
    for (const ImageGroup& g : groups) {
      std::size_t annotated = 0;
      for (const FeatureRecord& r : data.id_eval.records)
        if (r.image_id == g.image_id && r.annotated) ++annotated;
      CHECK(g.annotated_count == annotated);
    }
  }
}

TEST_CASE("constructed dump: filtering background false positives lowers FPR95") {
  // Every ID image has K=3 well-scored objects with high energy plus two
  // low-confidence background predictions with low energy; OOD predictions
  // land in between. Protocol B removes exactly the background side.
  Rng rng(44);
  std::vector<ImageGroup> groups;
  for (int i = 0; i < 40; ++i) {
    ImageGroup g = make_group(i, PredictionSource::kIdDataset, 3, {});
    for (int k = 0; k < 3; ++k)
      g.predictions.push_back({i, PredictionSource::kIdDataset,
                               rng.uniform(0.6, 1.0), rng.uniform(1.5, 2.5), false});
    for (int k = 0; k < 2; ++k)
      g.predictions.push_back({i, PredictionSource::kIdDataset,
                               rng.uniform(0.0, 0.4), rng.uniform(0.05, 0.5), false});
    groups.push_back(std::move(g));
  }
  for (int i = 0; i < 30; ++i) {
    ImageGroup g = make_group(1000 + i, PredictionSource::kOodDataset, 2, {});
    for (int k = 0; k < 3; ++k)
      g.predictions.push_back({1000 + i, PredictionSource::kOodDataset,
                               rng.uniform(0.3, 0.9), rng.uniform(0.4, 1.2), false});
    groups.push_back(std::move(g));
  }

  const MetricsReport a = compute_metrics(protocol_filter(groups, Protocol::kA), Protocol::kA);
  const MetricsReport b = compute_metrics(protocol_filter(groups, Protocol::kB), Protocol::kB);
  CHECK(b.fpr95 < a.fpr95);
  CHECK(b.n_id == 120);
  CHECK(a.n_id == 200);

  // cross-check both protocols against the sweep oracle
  for (const Protocol protocol : {Protocol::kA, Protocol::kB}) {
    const auto kept = protocol_filter(groups, protocol);
    std::vector<double> id_scores, ood_scores;
    for (const auto& p : kept)
      (p.source == PredictionSource::kIdDataset ? id_scores : ood_scores)
          .push_back(p.ood_score);
    const auto sweep = oracles::sweep_fpr_at_95_tpr(id_scores, ood_scores);
    const MetricsReport& report = protocol == Protocol::kA ? a : b;
    CHECK(report.fpr95 == sweep.fpr);
    CHECK(report.threshold == sweep.threshold);
  }
}
