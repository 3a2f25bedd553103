#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "proto_ood/errors.hpp"
#include "proto_ood/rng.hpp"
#include "proto_ood/util.hpp"

namespace proto_ood {

enum class RecordKind { kId, kOod, kBackground };

/// One detected-object feature vector. `cls_score` stands in for a class
/// head's max score (consumed by the top-K evaluation protocol); `annotated`
/// marks records that correspond to ground-truth objects.
struct FeatureRecord {
  std::int64_t image_id = 0;
  RecordKind kind = RecordKind::kId;
  int category = -1;  // meaningful only when kind == kId
  bool annotated = false;
  double cls_score = 0.0;
  std::vector<double> feature;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

enum class SplitRole { kTrain, kIdEval, kOodEval };

inline std::string to_string(SplitRole role) {
  switch (role) {
    case SplitRole::kTrain: return "train";
    case SplitRole::kIdEval: return "id_eval";
    case SplitRole::kOodEval: return "ood_eval";
  }
  return "?";
}

struct DatasetSplit {
  SplitRole role = SplitRole::kTrain;
  std::size_t categories = 0;     // ID category count t
  std::size_t feature_width = 0;  // h
  std::vector<FeatureRecord> records;

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;

  /// Structural invariants; readers call this after parsing.
  void validate() const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      const FeatureRecord& r = records[i];
      if (r.feature.size() != feature_width) {
        throw FormatError("record " + std::to_string(i) + ": feature width " +
                          std::to_string(r.feature.size()) + ", split declares " +
                          std::to_string(feature_width));
      }
      if (r.kind == RecordKind::kId &&
          (r.category < 0 || static_cast<std::size_t>(r.category) >= categories)) {
        throw FormatError("record " + std::to_string(i) + ": category " +
                          std::to_string(r.category) + " outside [0, " +
                          std::to_string(categories) + ")");
      }
      if (r.kind != RecordKind::kId && r.category != -1) {
        throw FormatError("record " + std::to_string(i) +
                          ": non-ID record must not carry a category");
      }
      if (!(r.cls_score >= 0.0 && r.cls_score <= 1.0)) {
        throw FormatError("record " + std::to_string(i) + ": cls_score outside [0, 1]");
      }
      if (role == SplitRole::kTrain && r.kind == RecordKind::kOod) {
        throw FormatError("record " + std::to_string(i) +
                          ": train split must not contain OOD records");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct SyntheticConfig {
  std::size_t categories = 5;
  std::size_t feature_width = 64;
  std::size_t per_class = 60;        // records per category, per split
  double class_separation = 8.0;     // minimum distance between category means
  double noise_sigma = 1.0;
  std::size_t ood_clusters = 3;
  std::size_t ood_per_cluster = 40;
  std::size_t background_per_image = 2;
  std::size_t objects_per_image = 4;
  std::uint64_t seed = 8;

  void validate() const {
    if (categories < 2) throw ConfigError("synthetic: need at least 2 categories");
    if (feature_width == 0) throw ConfigError("synthetic: feature_width must be positive");
    if (!(noise_sigma > 0.0)) throw ConfigError("synthetic: noise_sigma must be positive");
    if (!(class_separation >= 0.0) || !std::isfinite(class_separation)) {
      throw ConfigError("synthetic: class_separation must be finite and non-negative");
    }
    const bool has_records = per_class > 0 || (ood_clusters > 0 && ood_per_cluster > 0);
    if (has_records && objects_per_image == 0) {
      throw ConfigError("synthetic: objects_per_image must be at least 1");
    }
  }
};

struct SyntheticData {
  DatasetSplit train;
  DatasetSplit id_eval;
  DatasetSplit ood_eval;
};

namespace detail {

inline constexpr std::size_t kMeanPlacementRetries = 1000;

inline std::vector<double> gaussian_vector(Rng& rng, std::size_t width, double sigma) {
  std::vector<double> v(width);
  for (double& x : v) x = sigma * rng.normal();
  return v;
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

/// Groups records into images of `objects` annotated objects each, appending
/// `distractors` unannotated background records per image. Annotated records
/// get cls_score in [0.5, 1), distractors in [0, 0.5), so a top-K filter by
/// score deterministically keeps exactly the annotated ones.
inline std::vector<FeatureRecord> group_into_images(std::vector<FeatureRecord> objects_in,
                                                    std::size_t objects_per_image,
                                                    std::size_t distractors_per_image,
                                                    std::size_t feature_width,
                                                    double background_sigma, Rng& rng) {
  rng.shuffle(objects_in);
  std::vector<FeatureRecord> out;
  std::int64_t image_id = 0;
  std::size_t i = 0;
  while (i < objects_in.size()) {
    for (std::size_t k = 0; k < objects_per_image && i < objects_in.size(); ++k, ++i) {
      FeatureRecord r = std::move(objects_in[i]);
      r.image_id = image_id;
      r.annotated = true;
      r.cls_score = rng.uniform(0.5, 1.0);
      out.push_back(std::move(r));
    }
    for (std::size_t k = 0; k < distractors_per_image; ++k) {
      FeatureRecord bg;
      bg.image_id = image_id;
      bg.kind = RecordKind::kBackground;
      bg.annotated = false;
      bg.feature = gaussian_vector(rng, feature_width, background_sigma);
      bg.cls_score = rng.uniform(0.0, 0.5);
      out.push_back(std::move(bg));
    }
    ++image_id;
  }
  return out;
}

}  // namespace detail

/// Draws ID features from per-category isotropic Gaussians (pairwise mean
/// distance at least class_separation), OOD features from clusters placed
/// near — but at least class_separation/2 away from — the ID means, and
/// background distractors from a broad zero-mean Gaussian. Output is a pure
/// function of the config; all randomness flows through one seeded generator
/// in a fixed draw order (ID means, OOD means, train records, id_eval
/// records, ood records, then per-split grouping).
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  const std::size_t h = cfg.feature_width;
  const double mean_sigma =
      1.3 * cfg.class_separation / std::sqrt(2.0 * static_cast<double>(h));

  std::vector<std::vector<double>> id_means;
  for (std::size_t c = 0; c < cfg.categories; ++c) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < detail::kMeanPlacementRetries; ++attempt) {
      auto candidate = detail::gaussian_vector(rng, h, mean_sigma);
      bool ok = true;
      for (const auto& existing : id_means) {
        if (detail::distance(candidate, existing) < cfg.class_separation) {
          ok = false;
          break;
        }
      }
      if (ok) {
        id_means.push_back(std::move(candidate));
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw GenerationError("could not place ID mean " + std::to_string(c) +
                            " after " + std::to_string(detail::kMeanPlacementRetries) +
                            " attempts");
    }
  }

  // OOD cluster means live in the span of the ID means: a point between two
  // random categories plus a little jitter, subject to the half-separation
  // floor from every ID mean. In-span placement matters: feature directions
  // carrying no ID-discriminative signal do not survive a learned projection,
  // so off-span novelty would be invisible to any detector by construction.
  std::vector<std::vector<double>> ood_means;
  for (std::size_t k = 0; k < cfg.ood_clusters; ++k) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < detail::kMeanPlacementRetries; ++attempt) {
      const std::size_t a = static_cast<std::size_t>(rng.below(cfg.categories));
      std::size_t b = static_cast<std::size_t>(rng.below(cfg.categories - 1));
      if (b >= a) ++b;
      const double u = rng.uniform(0.35, 0.65);
      std::vector<double> candidate(h);
      for (std::size_t j = 0; j < h; ++j) {
        candidate[j] = id_means[a][j] + u * (id_means[b][j] - id_means[a][j]) +
                       0.25 * mean_sigma * rng.normal();
      }
      bool ok = true;
      for (const auto& mean : id_means) {
        if (detail::distance(candidate, mean) < cfg.class_separation / 2.0) {
          ok = false;
          break;
        }
      }
      if (ok) {
        ood_means.push_back(std::move(candidate));
        placed = true;
        break;
      }
    }
    if (!placed) {
      throw GenerationError("could not place OOD mean " + std::to_string(k) +
                            " after " + std::to_string(detail::kMeanPlacementRetries) +
                            " attempts");
    }
  }

  const auto draw_id_records = [&](std::vector<FeatureRecord>& out) {
    for (std::size_t c = 0; c < cfg.categories; ++c) {
      for (std::size_t i = 0; i < cfg.per_class; ++i) {
        FeatureRecord r;
        r.kind = RecordKind::kId;
        r.category = static_cast<int>(c);
        r.feature = detail::gaussian_vector(rng, h, cfg.noise_sigma);
        for (std::size_t j = 0; j < h; ++j) r.feature[j] += id_means[c][j];
        out.push_back(std::move(r));
      }
    }
  };

  std::vector<FeatureRecord> train_objects, id_eval_objects, ood_objects;
  draw_id_records(train_objects);
  draw_id_records(id_eval_objects);
  for (const auto& mean : ood_means) {
    for (std::size_t i = 0; i < cfg.ood_per_cluster; ++i) {
      FeatureRecord r;
      r.kind = RecordKind::kOod;
      r.feature = detail::gaussian_vector(rng, h, cfg.noise_sigma);
      for (std::size_t j = 0; j < h; ++j) r.feature[j] += mean[j];
      ood_objects.push_back(std::move(r));
    }
  }

  const double background_sigma = 2.0 * (mean_sigma + cfg.noise_sigma);
  SyntheticData data;
  data.train.role = SplitRole::kTrain;
  data.id_eval.role = SplitRole::kIdEval;
  data.ood_eval.role = SplitRole::kOodEval;
  for (DatasetSplit* split : {&data.train, &data.id_eval, &data.ood_eval}) {
    split->categories = cfg.categories;
    split->feature_width = h;
  }
  data.train.records = detail::group_into_images(
      std::move(train_objects), cfg.objects_per_image, cfg.background_per_image, h,
      background_sigma, rng);
  data.id_eval.records = detail::group_into_images(
      std::move(id_eval_objects), cfg.objects_per_image, cfg.background_per_image, h,
      background_sigma, rng);
  data.ood_eval.records = detail::group_into_images(
      std::move(ood_objects), cfg.objects_per_image, /*distractors_per_image=*/0, h,
      background_sigma, rng);
  data.train.validate();
  data.id_eval.validate();
  data.ood_eval.validate();
  return data;
}

// ---------------------------------------------------------------------------
// Split file format (.posplit)
//
//   posplit 1
//   role train
//   categories 5
//   feature_width 64
//   count 450
//   checksum <fnv1a of the five lines above>
//   <one record per line:
//      image_id kind category annotated cls_score f0 .. f(h-1)>
//
// Text, UTF-8, LF. Floats are shortest-round-trip decimal, so a save/load
// cycle is bit-exact. The checksum makes any corruption of the header a
// detectable error rather than a silently different dataset.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kSplitMagic = "posplit";
inline constexpr int kSplitVersion = 1;

inline std::string kind_tag(RecordKind kind) {
  switch (kind) {
    case RecordKind::kId: return "id";
    case RecordKind::kOod: return "ood";
    case RecordKind::kBackground: return "bg";
  }
  return "?";
}

inline void save_split(const DatasetSplit& split, const std::filesystem::path& path) {
  split.validate();
  std::ostringstream header;
  header << kSplitMagic << ' ' << kSplitVersion << '\n'
         << "role " << to_string(split.role) << '\n'
         << "categories " << split.categories << '\n'
         << "feature_width " << split.feature_width << '\n'
         << "count " << split.records.size() << '\n';
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open split for writing: " + path.string());
  os << header.str() << "checksum " << to_hex(fnv1a(header.str())) << '\n';
  for (const FeatureRecord& r : split.records) {
    os << r.image_id << ' ' << kind_tag(r.kind) << ' ';
    if (r.kind == RecordKind::kId) {
      os << r.category;
    } else {
      os << '-';
    }
    os << ' ' << (r.annotated ? 1 : 0) << ' ' << format_double(r.cls_score);
    for (const double f : r.feature) os << ' ' << format_double(f);
    os << '\n';
  }
  if (!os) throw IoError("failed writing split: " + path.string());
}

inline DatasetSplit load_split(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open split: " + path.string());

  auto next_line = [&is, line_no = std::size_t(0)](std::string_view what) mutable {
    std::string line;
    if (!std::getline(is, line)) {
      throw ParseError("line " + std::to_string(line_no + 1) +
                       ": unexpected end of file, expected " + std::string(what));
    }
    ++line_no;
    return line;
  };

  const std::string magic_line = next_line("magic");
  const auto magic_tokens = split_tokens(magic_line);
  if (magic_tokens.size() != 2 || magic_tokens[0] != kSplitMagic) {
    throw FormatError("not a feature split file: " + path.string());
  }
  if (parse_int(magic_tokens[1], "version") != kSplitVersion) {
    throw FormatError("split version '" + std::string(magic_tokens[1]) +
                      "' is not supported (expected " + std::to_string(kSplitVersion) + ")");
  }
  const std::string role_line = next_line("role");
  const std::string categories_line = next_line("categories");
  const std::string width_line = next_line("feature_width");
  const std::string count_line = next_line("count");
  const std::string checksum_line = next_line("checksum");

  const std::string header = magic_line + '\n' + role_line + '\n' + categories_line +
                             '\n' + width_line + '\n' + count_line + '\n';
  if (checksum_line != "checksum " + to_hex(fnv1a(header))) {
    throw FormatError("split header checksum mismatch: " + path.string());
  }

  auto header_field = [](const std::string& line, std::string_view key) {
    const auto tokens = split_tokens(line);
    if (tokens.size() != 2 || tokens[0] != key) {
      throw ParseError("malformed header line '" + line + "', expected '" +
                       std::string(key) + " <value>'");
    }
    return std::string(tokens[1]);
  };

  DatasetSplit split;
  const std::string role = header_field(role_line, "role");
  if (role == "train") {
    split.role = SplitRole::kTrain;
  } else if (role == "id_eval") {
    split.role = SplitRole::kIdEval;
  } else if (role == "ood_eval") {
    split.role = SplitRole::kOodEval;
  } else {
    throw ParseError("unknown split role '" + role + "'");
  }
  split.categories = static_cast<std::size_t>(
      parse_int(header_field(categories_line, "categories"), "categories"));
  split.feature_width = static_cast<std::size_t>(
      parse_int(header_field(width_line, "feature_width"), "feature_width"));
  const std::int64_t count = parse_int(header_field(count_line, "count"), "count");
  if (count < 0) throw ParseError("negative record count");

  split.records.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const std::string line = next_line("record " + std::to_string(i));
    const auto tokens = split_tokens(line);
    if (tokens.size() != 5 + split.feature_width) {
      throw ParseError("line " + std::to_string(7 + i) + ": expected " +
                       std::to_string(5 + split.feature_width) + " fields, got " +
                       std::to_string(tokens.size()));
    }
    FeatureRecord r;
    r.image_id = parse_int(tokens[0], "image_id");
    const auto kind = tokens[1];
    if (kind == "id") {
      r.kind = RecordKind::kId;
      r.category = static_cast<int>(parse_int(tokens[2], "category"));
    } else if (kind == "ood" || kind == "bg") {
      r.kind = kind == "ood" ? RecordKind::kOod : RecordKind::kBackground;
      if (tokens[2] != "-") {
        throw ParseError("line " + std::to_string(7 + i) +
                         ": non-ID record must use '-' for category");
      }
    } else {
      throw ParseError("line " + std::to_string(7 + i) + ": unknown record kind '" +
                       std::string(kind) + "'");
    }
    const std::int64_t annotated = parse_int(tokens[3], "annotated");
    if (annotated != 0 && annotated != 1) {
      throw ParseError("line " + std::to_string(7 + i) + ": annotated must be 0 or 1");
    }
    r.annotated = annotated == 1;
    r.cls_score = parse_double(tokens[4], "cls_score");
    r.feature.resize(split.feature_width);
    for (std::size_t j = 0; j < split.feature_width; ++j) {
      r.feature[j] = parse_double(tokens[5 + j], "feature value");
      if (!std::isfinite(r.feature[j])) {
        throw ParseError("line " + std::to_string(7 + i) + ": non-finite feature value");
      }
    }
    split.records.push_back(std::move(r));
  }
  std::string trailing;
  if (std::getline(is, trailing)) {
    throw ParseError("trailing content after " + std::to_string(count) + " records");
  }
  split.validate();
  return split;
}

}  // namespace proto_ood
