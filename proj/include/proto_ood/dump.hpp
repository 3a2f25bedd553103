#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "proto_ood/errors.hpp"
#include "proto_ood/util.hpp"

namespace proto_ood {

enum class PredictionSource { kIdDataset, kOodDataset };

inline std::string to_string(PredictionSource source) {
  return source == PredictionSource::kIdDataset ? "id_dataset" : "ood_dataset";
}

/// One scored detection: the unit the evaluator consumes. `id_flag` is the
/// threshold decision recorded at scoring time (1 = judged in-distribution);
/// metrics ignore it and re-derive everything from the scores.
struct ScoredPrediction {
  std::int64_t image_id = 0;
  PredictionSource source = PredictionSource::kIdDataset;
  double cls_score = 0.0;
  double ood_score = 0.0;  // energy, always positive
  bool id_flag = false;

  friend bool operator==(const ScoredPrediction&, const ScoredPrediction&) = default;
};

/// All predictions of one image plus the image's annotated-object count K,
/// which drives the top-K evaluation protocol.
struct ImageGroup {
  std::int64_t image_id = 0;
  PredictionSource source = PredictionSource::kIdDataset;
  std::size_t annotated_count = 0;
  std::vector<ScoredPrediction> predictions;

  friend bool operator==(const ImageGroup&, const ImageGroup&) = default;
};

// ---------------------------------------------------------------------------
// Detection dump format (.podump)
//
//   podump 1
//   images <group count>
//   checksum <fnv1a of the two lines above>
//   image <image_id> <id_dataset|ood_dataset> <K> <prediction count>
//   pred <cls_score> <ood_score> <id_flag>
//   ...
//
// Lets the evaluator score any detector's output without this library's
// training path.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDumpMagic = "podump";
inline constexpr int kDumpVersion = 1;

inline void save_detection_dump(std::span<const ImageGroup> groups,
                                const std::filesystem::path& path) {
  std::ostringstream header;
  header << kDumpMagic << ' ' << kDumpVersion << '\n'
         << "images " << groups.size() << '\n';
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open dump for writing: " + path.string());
  os << header.str() << "checksum " << to_hex(fnv1a(header.str())) << '\n';
  for (const ImageGroup& g : groups) {
    os << "image " << g.image_id << ' ' << to_string(g.source) << ' '
       << g.annotated_count << ' ' << g.predictions.size() << '\n';
    for (const ScoredPrediction& p : g.predictions) {
      os << "pred " << format_double(p.cls_score) << ' ' << format_double(p.ood_score)
         << ' ' << (p.id_flag ? 1 : 0) << '\n';
    }
  }
  if (!os) throw IoError("failed writing dump: " + path.string());
}

inline std::vector<ImageGroup> load_detection_dump(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dump: " + path.string());

  std::size_t line_no = 0;
  auto next_line = [&](std::string_view what) {
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
  if (magic_tokens.size() != 2 || magic_tokens[0] != kDumpMagic) {
    throw FormatError("not a detection dump: " + path.string());
  }
  if (parse_int(magic_tokens[1], "version") != kDumpVersion) {
    throw FormatError("dump version '" + std::string(magic_tokens[1]) +
                      "' is not supported (expected " + std::to_string(kDumpVersion) + ")");
  }
  const std::string images_line = next_line("images");
  const auto images_tokens = split_tokens(images_line);
  if (images_tokens.size() != 2 || images_tokens[0] != "images") {
    throw ParseError("line 2: expected 'images <count>'");
  }
  const std::int64_t group_count = parse_int(images_tokens[1], "images");
  if (group_count < 0) throw ParseError("negative image count");

  const std::string header = magic_line + '\n' + images_line + '\n';
  if (next_line("checksum") != "checksum " + to_hex(fnv1a(header))) {
    throw FormatError("dump header checksum mismatch: " + path.string());
  }

  std::vector<ImageGroup> groups;
  groups.reserve(static_cast<std::size_t>(group_count));
  for (std::int64_t gi = 0; gi < group_count; ++gi) {
    const std::string image_line = next_line("image header " + std::to_string(gi));
    const auto tokens = split_tokens(image_line);
    if (tokens.size() != 5 || tokens[0] != "image") {
      throw ParseError("line " + std::to_string(line_no) + ": image group " +
                       std::to_string(gi) +
                       ": expected 'image <id> <source> <K> <count>'");
    }
    ImageGroup g;
    g.image_id = parse_int(tokens[1], "image_id");
    if (tokens[2] == "id_dataset") {
      g.source = PredictionSource::kIdDataset;
    } else if (tokens[2] == "ood_dataset") {
      g.source = PredictionSource::kOodDataset;
    } else {
      throw ParseError("line " + std::to_string(line_no) + ": image group " +
                       std::to_string(gi) + ": unknown source '" +
                       std::string(tokens[2]) + "'");
    }
    const std::int64_t k = parse_int(tokens[3], "annotated count");
    const std::int64_t preds = parse_int(tokens[4], "prediction count");
    if (k < 0 || preds < 0) {
      throw ParseError("line " + std::to_string(line_no) + ": negative count");
    }
    g.annotated_count = static_cast<std::size_t>(k);
    g.predictions.reserve(static_cast<std::size_t>(preds));
    for (std::int64_t pi = 0; pi < preds; ++pi) {
      const std::string pred_line = next_line("prediction " + std::to_string(pi));
      const auto pt = split_tokens(pred_line);
      if (pt.size() != 4 || pt[0] != "pred") {
        throw ParseError("line " + std::to_string(line_no) + ": prediction " +
                         std::to_string(pi) + " of image group " + std::to_string(gi) +
                         ": expected 'pred <cls_score> <ood_score> <id_flag>'");
      }
      ScoredPrediction p;
      p.image_id = g.image_id;
      p.source = g.source;
      p.cls_score = parse_double(pt[1], "cls_score");
      p.ood_score = parse_double(pt[2], "ood_score");
      const std::int64_t flag = parse_int(pt[3], "id_flag");
      if (flag != 0 && flag != 1) {
        throw ParseError("line " + std::to_string(line_no) + ": id_flag must be 0 or 1");
      }
      p.id_flag = flag == 1;
      if (!(p.ood_score > 0.0)) {
        throw ParseError("line " + std::to_string(line_no) + ": prediction " +
                         std::to_string(pi) + " of image group " + std::to_string(gi) +
                         ": ood_score must be positive");
      }
      g.predictions.push_back(p);
    }
    groups.push_back(std::move(g));
  }
  std::string trailing;
  if (std::getline(is, trailing)) {
    throw ParseError("trailing content after " + std::to_string(group_count) + " image groups");
  }
  return groups;
}

}  // namespace proto_ood
