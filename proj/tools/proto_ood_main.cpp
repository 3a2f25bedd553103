// Command-line front end: synthetic data generation, training, evaluation,
// scoring, and checkpoint inspection, wired for reproducible runs (explicit
// seeds, resolved config echoed beside every output).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "proto_ood/proto_ood.hpp"

namespace fs = std::filesystem;
using namespace proto_ood;

namespace {

struct RunConfig {
  SyntheticConfig synth;
  TrainConfig training;
  Protocol protocol = Protocol::kB;
  bool protocol_both = true;
};

std::string to_string_bool(bool b) { return b ? "1" : "0"; }

std::map<std::string, std::string> config_entries(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["categories"] = std::to_string(cfg.synth.categories);
  kv["feature_width"] = std::to_string(cfg.synth.feature_width);
  kv["per_class"] = std::to_string(cfg.synth.per_class);
  kv["class_separation"] = format_double(cfg.synth.class_separation);
  kv["noise_sigma"] = format_double(cfg.synth.noise_sigma);
  kv["ood_clusters"] = std::to_string(cfg.synth.ood_clusters);
  kv["ood_per_cluster"] = std::to_string(cfg.synth.ood_per_cluster);
  kv["background_per_image"] = std::to_string(cfg.synth.background_per_image);
  kv["objects_per_image"] = std::to_string(cfg.synth.objects_per_image);
  kv["seed"] = std::to_string(cfg.training.seed);
  kv["epochs"] = std::to_string(cfg.training.epochs);
  kv["prototype_start_epoch"] = std::to_string(cfg.training.prototype_start_epoch);
  kv["similarity_delay_epochs"] = std::to_string(cfg.training.similarity_delay_epochs);
  kv["prototype_alpha"] = format_double(cfg.training.prototype_alpha);
  kv["tau"] = format_double(cfg.training.tau);
  kv["temperature"] = format_double(cfg.training.temperature);
  kv["focal_exponent"] = format_double(cfg.training.focal_exponent);
  kv["batch_size"] = std::to_string(cfg.training.batch_size);
  kv["learning_rate"] = format_double(cfg.training.learning_rate);
  kv["ablation"] = to_string(cfg.training.ablation);
  kv["optimizer"] = cfg.training.optimizer == OptimizerKind::kAdam ? "adam" : "sgd";
  kv["embedding_width"] = std::to_string(cfg.training.embedding_width);
  kv["projection_hidden"] = std::to_string(cfg.training.projection_hidden);
  kv["similarity_hidden"] = std::to_string(cfg.training.similarity_hidden);
  kv["sim_output_relu"] = to_string_bool(cfg.training.sim_output_relu);
  kv["gamma"] = format_double(cfg.training.decision.gamma);
  kv["reduction"] =
      cfg.training.decision.reduction == EnergyReduction::kMaxOverCategories ? "max"
                                                                             : "predicted";
  kv["protocol"] = cfg.protocol_both ? "both" : (cfg.protocol == Protocol::kA ? "a" : "b");
  return kv;
}

Ablation parse_ablation(const std::string& value) {
  if (value == "full") return Ablation::kFull;
  if (value == "no-neg") return Ablation::kNoNegativeGenerator;
  if (value == "no-con-no-neg") return Ablation::kNoContrastiveNoNegatives;
  throw ConfigError("unknown ablation '" + value + "' (full|no-neg|no-con-no-neg)");
}

void apply_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto as_size = [&] { return static_cast<std::size_t>(parse_int(value, key)); };
  auto as_double = [&] { return parse_double(value, key); };
  if (key == "categories") cfg.synth.categories = as_size();
  else if (key == "feature_width") cfg.synth.feature_width = as_size();
  else if (key == "per_class") cfg.synth.per_class = as_size();
  else if (key == "class_separation") cfg.synth.class_separation = as_double();
  else if (key == "noise_sigma") cfg.synth.noise_sigma = as_double();
  else if (key == "ood_clusters") cfg.synth.ood_clusters = as_size();
  else if (key == "ood_per_cluster") cfg.synth.ood_per_cluster = as_size();
  else if (key == "background_per_image") cfg.synth.background_per_image = as_size();
  else if (key == "objects_per_image") cfg.synth.objects_per_image = as_size();
  else if (key == "seed") {
    cfg.training.seed = static_cast<std::uint64_t>(parse_int(value, key));
    cfg.synth.seed = cfg.training.seed;
  } else if (key == "epochs") cfg.training.epochs = as_size();
  else if (key == "prototype_start_epoch") cfg.training.prototype_start_epoch = as_size();
  else if (key == "similarity_delay_epochs") cfg.training.similarity_delay_epochs = as_size();
  else if (key == "prototype_alpha") cfg.training.prototype_alpha = as_double();
  else if (key == "tau") cfg.training.tau = as_double();
  else if (key == "temperature") cfg.training.temperature = as_double();
  else if (key == "focal_exponent") cfg.training.focal_exponent = as_double();
  else if (key == "batch_size") cfg.training.batch_size = as_size();
  else if (key == "learning_rate") cfg.training.learning_rate = as_double();
  else if (key == "ablation") cfg.training.ablation = parse_ablation(value);
  else if (key == "optimizer") {
    if (value == "adam") cfg.training.optimizer = OptimizerKind::kAdam;
    else if (value == "sgd") cfg.training.optimizer = OptimizerKind::kSgd;
    else throw ConfigError("unknown optimizer '" + value + "' (adam|sgd)");
  } else if (key == "embedding_width") cfg.training.embedding_width = as_size();
  else if (key == "projection_hidden") cfg.training.projection_hidden = as_size();
  else if (key == "similarity_hidden") cfg.training.similarity_hidden = as_size();
  else if (key == "sim_output_relu") cfg.training.sim_output_relu = parse_int(value, key) != 0;
  else if (key == "gamma") cfg.training.decision.gamma = as_double();
  else if (key == "reduction") {
    if (value == "max") cfg.training.decision.reduction = EnergyReduction::kMaxOverCategories;
    else if (value == "predicted")
      cfg.training.decision.reduction = EnergyReduction::kAtPredictedCategory;
    else throw ConfigError("unknown reduction '" + value + "' (max|predicted)");
  } else if (key == "protocol") {
    if (value == "a") { cfg.protocol = Protocol::kA; cfg.protocol_both = false; }
    else if (value == "b") { cfg.protocol = Protocol::kB; cfg.protocol_both = false; }
    else if (value == "both") cfg.protocol_both = true;
    else throw ConfigError("unknown protocol '" + value + "' (a|b|both)");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

RunConfig load_run_config(const std::optional<std::string>& path) {
  RunConfig cfg;
  if (!path) return cfg;
  std::ifstream is(*path);
  if (!is) throw IoError("cannot open config file: " + *path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto tokens = split_tokens(line);
    if (tokens.empty()) continue;
    if (tokens.size() != 3 || tokens[1] != "=") {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    apply_entry(cfg, std::string(tokens[0]), std::string(tokens[2]));
  }
  return cfg;
}

void write_resolved_config(const RunConfig& cfg, const fs::path& out_dir) {
  std::ofstream os(out_dir / "resolved_config.txt", std::ios::binary);
  if (!os) throw IoError("cannot write resolved config in " + out_dir.string());
  for (const auto& [key, value] : config_entries(cfg)) {
    os << key << " = " << value << '\n';
  }
}

void ensure_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
}

// Flag plumbing shared by the subcommands. Overrides apply after the config
// file, so flags win.
struct CommonFlags {
  std::optional<std::string> config_path;
  std::optional<std::int64_t> seed;
  std::optional<double> gamma;
  std::optional<std::string> ablation;
  std::optional<std::string> protocol;

  RunConfig resolve() const {
    RunConfig cfg = load_run_config(config_path);
    if (seed) {
      apply_entry(cfg, "seed", std::to_string(*seed));
    }
    if (gamma) apply_entry(cfg, "gamma", format_double(*gamma));
    if (ablation) apply_entry(cfg, "ablation", *ablation);
    if (protocol) apply_entry(cfg, "protocol", *protocol);
    return cfg;
  }
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "config file (key = value lines)");
  cmd->add_option("--seed", flags.seed, "override the run seed");
  cmd->add_option("--gamma", flags.gamma, "override the ID/OOD energy threshold");
  cmd->add_option("--ablation", flags.ablation, "full|no-neg|no-con-no-neg");
  cmd->add_option("--protocol", flags.protocol, "a|b|both");
}

int run_synth(const CommonFlags& flags, const std::string& out_dir) {
  const RunConfig cfg = flags.resolve();
  ensure_out_dir(out_dir);
  const SyntheticData data = generate_synthetic(cfg.synth);
  save_split(data.train, fs::path(out_dir) / "train.posplit");
  save_split(data.id_eval, fs::path(out_dir) / "id_eval.posplit");
  save_split(data.ood_eval, fs::path(out_dir) / "ood_eval.posplit");
  write_resolved_config(cfg, out_dir);
  std::cout << "train records " << data.train.records.size() << '\n'
            << "id_eval records " << data.id_eval.records.size() << '\n'
            << "ood_eval records " << data.ood_eval.records.size() << '\n';
  return 0;
}

int run_train(const CommonFlags& flags, const std::string& data_dir,
              const std::string& out_dir) {
  const RunConfig cfg = flags.resolve();
  ensure_out_dir(out_dir);
  const DatasetSplit split = load_split(fs::path(data_dir) / "train.posplit");
  TrainResult result = train(split, cfg.training);
  const fs::path checkpoint = fs::path(out_dir) / "checkpoint.pockpt";
  save_checkpoint(result.model, checkpoint);
  write_train_log(result.report, fs::path(out_dir) / "train_log.txt");
  write_train_summary(result.report, cfg.training, fs::path(out_dir) / "train_summary.txt");
  write_resolved_config(cfg, out_dir);
  std::cout << "trained " << result.report.epochs.size() << " epochs in "
            << format_double(result.report.wall_seconds) << " s\n"
            << "checkpoint " << checkpoint.string() << '\n';
  return 0;
}

int run_eval(const CommonFlags& flags, const std::string& checkpoint_path,
             const std::string& id_path, const std::string& ood_path,
             const std::string& out_dir) {
  const RunConfig cfg = flags.resolve();
  ensure_out_dir(out_dir);
  ModelState state = load_checkpoint(checkpoint_path);
  if (flags.gamma) state.config.decision.gamma = *flags.gamma;
  const DatasetSplit id_split = load_split(id_path);
  const DatasetSplit ood_split = load_split(ood_path);
  std::vector<Protocol> protocols;
  if (cfg.protocol_both) {
    protocols = {Protocol::kA, Protocol::kB};
  } else {
    protocols = {cfg.protocol};
  }
  for (const Protocol protocol : protocols) {
    const MetricsReport report = evaluate(state, id_split, ood_split, protocol);
    const std::string name =
        protocol == Protocol::kA ? "metrics_protocol_a.txt" : "metrics_protocol_b.txt";
    write_metrics_report(report, fs::path(out_dir) / name);
    std::cout << "protocol " << to_string(protocol) << " fpr95 "
              << format_double(report.fpr95) << " auroc " << format_double(report.auroc)
              << " n_id " << report.n_id << " n_ood " << report.n_ood << '\n';
  }
  write_resolved_config(cfg, out_dir);
  return 0;
}

int run_score(const CommonFlags& flags, const std::string& checkpoint_path,
              const std::string& split_path, const std::string& out_dir) {
  const RunConfig cfg = flags.resolve();
  ensure_out_dir(out_dir);
  ModelState state = load_checkpoint(checkpoint_path);
  if (flags.gamma) state.config.decision.gamma = *flags.gamma;
  const DatasetSplit split = load_split(split_path);
  const PredictionSource source = split.role == SplitRole::kOodEval
                                      ? PredictionSource::kOodDataset
                                      : PredictionSource::kIdDataset;
  const std::vector<ImageGroup> groups = score_split(state, split, source);
  const fs::path dump_path = fs::path(out_dir) / "scores.podump";
  save_detection_dump(groups, dump_path);
  write_resolved_config(cfg, out_dir);
  std::size_t predictions = 0;
  for (const ImageGroup& g : groups) predictions += g.predictions.size();
  std::cout << "scored " << predictions << " predictions over " << groups.size()
            << " images -> " << dump_path.string() << '\n';
  return 0;
}

int run_inspect(const std::string& checkpoint_path) {
  const ModelState state = load_checkpoint(checkpoint_path);
  const PrototypeBank& bank = state.bank;
  std::cout << "categories " << bank.category_count() << " embedding_width "
            << bank.embedding_width() << " alpha " << format_double(bank.update_factor)
            << '\n';
  std::cout << "seen";
  for (const auto flag : bank.seen) std::cout << ' ' << (flag ? 1 : 0);
  std::cout << '\n';
  std::cout << "norms";
  for (std::size_t c = 0; c < bank.category_count(); ++c)
    std::cout << ' ' << format_double(row_norm(bank.prototypes, c));
  std::cout << '\n';
  if (bank.seen_count() >= 1) {
    const Matrix protos = bank.seen_prototypes();
    const Matrix cos = cosine_rows(protos, protos);
    std::cout << "pairwise_cosine (seen categories";
    for (const std::size_t c : bank.seen_categories()) std::cout << ' ' << c;
    std::cout << ")\n";
    for (std::size_t i = 0; i < cos.rows(); ++i) {
      for (std::size_t j = 0; j < cos.cols(); ++j) {
        if (j) std::cout << ' ';
        std::cout << format_double(cos(i, j));
      }
      std::cout << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-similarity OOD detection toolkit"};
  app.require_subcommand(1);

  CommonFlags synth_flags, train_flags, eval_flags, score_flags;
  std::string out_dir = "out";
  std::string data_dir, checkpoint_path, id_path, ood_path, split_path;

  CLI::App* synth = app.add_subcommand("synth", "generate synthetic feature splits");
  add_common_flags(synth, synth_flags);
  synth->add_option("--out", out_dir, "output directory");

  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a feature split");
  add_common_flags(train_cmd, train_flags);
  train_cmd->add_option("--data", data_dir, "directory containing train.posplit")->required();
  train_cmd->add_option("--out", out_dir, "output directory");

  CLI::App* eval_cmd = app.add_subcommand("eval", "compute FPR95/AUROC for a checkpoint");
  add_common_flags(eval_cmd, eval_flags);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  eval_cmd->add_option("--id", id_path, "ID evaluation split")->required();
  eval_cmd->add_option("--ood", ood_path, "OOD evaluation split")->required();
  eval_cmd->add_option("--out", out_dir, "output directory");

  CLI::App* score = app.add_subcommand("score", "write a detection dump with energies");
  add_common_flags(score, score_flags);
  score->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  score->add_option("--split", split_path, "feature split to score")->required();
  score->add_option("--out", out_dir, "output directory");

  CLI::App* inspect = app.add_subcommand("inspect", "print prototype bank summary");
  inspect->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return run_synth(synth_flags, out_dir);
    if (train_cmd->parsed()) return run_train(train_flags, data_dir, out_dir);
    if (eval_cmd->parsed()) return run_eval(eval_flags, checkpoint_path, id_path, ood_path, out_dir);
    if (score->parsed()) return run_score(score_flags, checkpoint_path, split_path, out_dir);
    if (inspect->parsed()) return run_inspect(checkpoint_path);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
