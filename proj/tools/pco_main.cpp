// Command-line surface: dataset generation, training, hyper-parameter
// sweeps, and phone-embedding export.
//
// Exit codes: 0 success, 2 usage or data error, 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pco/dataset.hpp"
#include "pco/loss.hpp"
#include "pco/metrics.hpp"
#include "pco/model.hpp"
#include "pco/trainer.hpp"
#include "pco/util.hpp"
#include "pco/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_run_root() {
  if (const char* env = std::getenv("PCO_RUN_DIR")) return env;
  return "runs";
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write file: " + path);
  out << content;
  if (!out) throw UsageError("write failed: " + path);
}

// Written with status "running" before any compute; rewritten as "complete"
// on success, so an interrupted run is visibly incomplete.
struct RunManifest {
  std::string command;
  json config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> artifacts;
  std::string dataset_digest;
  std::string path;

  void write(const std::string& status) const {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["seeds"] = seeds;
    j["artifacts"] = artifacts;
    j["dataset_digest"] = dataset_digest;
    j["tool_version"] = pco::kToolVersion;
    j["status"] = status;
    write_text_file(path, j.dump(2) + "\n");
  }
};

std::string file_digest(const std::string& path) {
  return "fnv1a64:" + pco::util::fnv1a_hex(pco::util::read_file(path));
}

// ---------------------------------------------------------------------------
// shared option groups
// ---------------------------------------------------------------------------

struct ModelFlags {
  pco::model::ModelConfig config;

  void attach(CLI::App* cmd) {
    cmd->add_option("--d-model", config.d_model, "encoder width");
    cmd->add_option("--blocks", config.n_blocks, "number of transformer blocks");
    cmd->add_option("--heads", config.n_heads, "attention heads");
    cmd->add_option("--ff-dim", config.ff_dim, "feed-forward width");
    cmd->add_option("--max-len", config.max_len, "maximum phones per utterance");
  }
};

struct TrainFlags {
  pco::train::TrainConfig config;
  int seed_count = 0;
  std::vector<std::uint64_t> seed_list;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", config.epochs, "training epochs per seed");
    cmd->add_option("--batch-size", config.batch_size, "utterances per batch");
    cmd->add_option("--learning-rate", config.learning_rate, "Adam learning rate");
    cmd->add_option("--lambda-d", config.loss.lambda_d, "phonemic distinction weight");
    cmd->add_option("--lambda-o", config.loss.lambda_o, "ordinal tightness weight");
    cmd->add_option("--margin", config.loss.margin, "inter-center margin m_c");
    cmd->add_flag_callback(
        "--no-normalize", [this]() { config.loss.normalize_features = false; },
        "do not unit-normalize embeddings in the loss");
    cmd->add_option("--seeds", seed_count, "number of trials (seeds 1..N)");
    cmd->add_option("--seed-list", seed_list, "explicit seed values")->delimiter(',');
    cmd->add_option("--parallel-seeds", config.parallel_seeds, "seeds trained concurrently");
    cmd->add_option("--lr-decay-every", config.lr_decay_every_epochs,
                    "epochs between learning-rate decays (0 = constant)");
    cmd->add_option("--lr-decay-factor", config.lr_decay_factor, "learning-rate decay factor");
  }

  void resolve() {
    if (!seed_list.empty()) {
      config.seeds = seed_list;
    } else if (seed_count > 0) {
      config.seeds.clear();
      for (int i = 1; i <= seed_count; ++i) {
        config.seeds.push_back(static_cast<std::uint64_t>(i));
      }
    }
  }
};

json loss_config_json(const pco::loss::LossConfig& c) {
  return json{{"lambda_d", c.lambda_d},
              {"lambda_o", c.lambda_o},
              {"margin", c.margin},
              {"normalize_features", c.normalize_features}};
}

json model_config_json(const pco::model::ModelConfig& c) {
  return json{{"d_model", c.d_model},   {"n_blocks", c.n_blocks}, {"n_heads", c.n_heads},
              {"ff_dim", c.ff_dim},     {"max_len", c.max_len},   {"input_dim", c.input_dim},
              {"n_utt_aspects", c.n_utt_aspects}, {"n_word_aspects", c.n_word_aspects}};
}

json train_config_json(const pco::train::TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"lr_decay_every_epochs", c.lr_decay_every_epochs},
              {"lr_decay_factor", c.lr_decay_factor},
              {"parallel_seeds", c.parallel_seeds},
              {"loss", loss_config_json(c.loss)}};
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenCmd {
  pco::data::SyntheticSpec spec;
  std::string out_path;
  std::string run_dir;

  void attach(CLI::App* cmd) {
    cmd->add_option("--phonemes", spec.phoneme_count, "phoneme categories (P)");
    cmd->add_option("--utterances", spec.utterances, "number of utterances");
    cmd->add_option("--center-scale", spec.center_scale, "prototype scale");
    cmd->add_option("--noise-scale", spec.noise_scale, "feature noise stddev");
    cmd->add_option("--min-phones", spec.min_phones, "minimum phones per utterance");
    cmd->add_option("--max-phones", spec.max_phones, "maximum phones per utterance");
    cmd->add_option("--seed", spec.seed, "generator seed");
    cmd->add_option("-o,--out", out_path, "output dataset path");
    cmd->add_option("--run-dir", run_dir, "manifest directory (default: next to output)");
  }

  int run() {
    if (out_path.empty()) throw UsageError("gen: -o/--out is required");
    pco::data::validate_spec(spec);
    RunManifest manifest;
    manifest.command = "gen";
    manifest.config = json{{"phonemes", spec.phoneme_count},
                           {"utterances", spec.utterances},
                           {"center_scale", spec.center_scale},
                           {"noise_scale", spec.noise_scale},
                           {"min_phones", spec.min_phones},
                           {"max_phones", spec.max_phones},
                           {"seed", spec.seed}};
    manifest.seeds = {spec.seed};
    manifest.artifacts = {out_path};
    if (run_dir.empty()) {
      manifest.path = out_path + ".manifest.json";
    } else {
      fs::create_directories(run_dir);
      manifest.path = (fs::path(run_dir) / "manifest.json").string();
    }
    manifest.write("running");

    const auto samples = pco::data::generate_synthetic(spec);
    pco::data::write_dataset(out_path, samples);
    manifest.dataset_digest = file_digest(out_path);
    manifest.write("complete");
    std::cout << "wrote " << samples.size() << " utterances to " << out_path << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

std::string report_csv_rows(std::uint64_t seed, const pco::metrics::EvalReport& eval,
                            const pco::metrics::GeometryReport& geom) {
  std::string out;
  auto emit = [&out, seed](const std::vector<std::pair<std::string, double>>& rows) {
    for (const auto& [key, value] : rows) {
      out += std::to_string(seed);
      out += ',';
      out += key;
      out += ',';
      out += pco::util::fmt_double(value);
      out += '\n';
    }
  };
  emit(pco::metrics::report_rows(eval));
  emit(pco::metrics::report_rows(geom));
  return out;
}

struct TrainCmd {
  std::string data_path;
  std::string eval_path;
  std::string run_dir;
  ModelFlags model_flags;
  TrainFlags train_flags;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data_path, "training dataset (JSON Lines)");
    cmd->add_option("--eval-data", eval_path, "held-out dataset (default: --data)");
    cmd->add_option("--run-dir", run_dir, "artifact directory");
    model_flags.attach(cmd);
    train_flags.attach(cmd);
  }

  int run() {
    if (data_path.empty()) throw UsageError("train: --data is required");
    train_flags.resolve();
    if (eval_path.empty()) eval_path = data_path;
    if (run_dir.empty()) run_dir = (fs::path(default_run_root()) / "train").string();
    fs::create_directories(run_dir);

    const auto& config = train_flags.config;
    config.validate();
    model_flags.config.validate();

    RunManifest manifest;
    manifest.command = "train";
    manifest.config = json{{"data", data_path},
                           {"eval_data", eval_path},
                           {"model", model_config_json(model_flags.config)},
                           {"train", train_config_json(config)}};
    manifest.seeds = config.seeds;
    manifest.dataset_digest = file_digest(data_path);
    manifest.path = (fs::path(run_dir) / "manifest.json").string();
    for (std::uint64_t seed : config.seeds) {
      const std::string stem = (fs::path(run_dir) / ("seed" + std::to_string(seed))).string();
      manifest.artifacts.push_back(stem + ".ckpt");
      manifest.artifacts.push_back(stem + ".log.csv");
      manifest.artifacts.push_back(stem + ".report.txt");
      manifest.artifacts.push_back(stem + ".report.csv");
    }
    manifest.write("running");

    const auto train_set = pco::data::load_dataset_auto(data_path);
    const auto eval_set = pco::data::load_dataset_auto(eval_path);
    const auto results = pco::train::train(train_set, eval_set, model_flags.config, config);

    pco::metrics::EvalReport mean_eval;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& r = results[i];
      const std::string stem = (fs::path(run_dir) / ("seed" + std::to_string(r.seed))).string();
      pco::model::save_checkpoint(stem + ".ckpt", r.params);
      std::string log = std::string(pco::train::kLogCsvHeader) + "\n";
      for (const auto& row : r.log) log += pco::train::log_row_csv(row) + "\n";
      write_text_file(stem + ".log.csv", log);
      const std::string table = pco::metrics::format_table(pco::metrics::report_rows(r.eval)) +
                                pco::metrics::format_table(pco::metrics::report_rows(r.geometry));
      write_text_file(stem + ".report.txt", table);
      write_text_file(stem + ".report.csv", "seed,key,value\n" + report_csv_rows(r.seed, r.eval, r.geometry));

      mean_eval.phone_mse += r.eval.phone_mse;
      mean_eval.phone_pcc += r.eval.phone_pcc;
      for (std::size_t a = 0; a < r.eval.word_pcc.size(); ++a) mean_eval.word_pcc[a] += r.eval.word_pcc[a];
      for (std::size_t a = 0; a < r.eval.utt_pcc.size(); ++a) mean_eval.utt_pcc[a] += r.eval.utt_pcc[a];

      std::cout << "== seed " << r.seed << "\n" << table;
    }
    const double inv = 1.0 / static_cast<double>(results.size());
    mean_eval.phone_mse *= inv;
    mean_eval.phone_pcc *= inv;
    for (auto& v : mean_eval.word_pcc) v *= inv;
    for (auto& v : mean_eval.utt_pcc) v *= inv;
    const std::string mean_table = pco::metrics::format_table(pco::metrics::report_rows(mean_eval));
    write_text_file((fs::path(run_dir) / "mean.report.txt").string(), mean_table);
    std::cout << "== mean over " << results.size() << " seeds\n" << mean_table;

    manifest.write("complete");
    return 0;
  }
};

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepCmd {
  std::string data_path;
  std::string eval_path;
  std::string run_dir;
  std::string parameter;
  std::vector<double> values;
  ModelFlags model_flags;
  TrainFlags train_flags;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data_path, "training dataset (JSON Lines)");
    cmd->add_option("--eval-data", eval_path, "held-out dataset (default: --data)");
    cmd->add_option("--run-dir", run_dir, "artifact directory");
    cmd->add_option("--param", parameter, "lambda_d or lambda_o");
    cmd->add_option("--values", values, "values to sweep")->delimiter(',');
    model_flags.attach(cmd);
    train_flags.attach(cmd);
  }

  int run() {
    if (data_path.empty()) throw UsageError("sweep: --data is required");
    if (parameter.empty()) throw UsageError("sweep: --param is required");
    train_flags.resolve();
    if (eval_path.empty()) eval_path = data_path;
    if (values.empty()) throw UsageError("sweep: --values must be non-empty");
    pco::train::SweepParameter param;
    if (parameter == "lambda_d") {
      param = pco::train::SweepParameter::kLambdaD;
    } else if (parameter == "lambda_o") {
      param = pco::train::SweepParameter::kLambdaO;
    } else {
      throw UsageError("sweep: --param must be lambda_d or lambda_o");
    }
    if (run_dir.empty()) run_dir = (fs::path(default_run_root()) / "sweep").string();
    fs::create_directories(run_dir);

    const auto& config = train_flags.config;
    config.validate();
    model_flags.config.validate();

    const std::string csv_path = (fs::path(run_dir) / "sweep.csv").string();
    RunManifest manifest;
    manifest.command = "sweep";
    manifest.config = json{{"data", data_path},       {"eval_data", eval_path},
                           {"parameter", parameter},  {"values", values},
                           {"model", model_config_json(model_flags.config)},
                           {"train", train_config_json(config)}};
    manifest.seeds = config.seeds;
    manifest.dataset_digest = file_digest(data_path);
    manifest.artifacts = {csv_path};
    manifest.path = (fs::path(run_dir) / "manifest.json").string();
    manifest.write("running");

    const auto train_set = pco::data::load_dataset_auto(data_path);
    const auto eval_set = pco::data::load_dataset_auto(eval_path);
    const auto rows =
        pco::train::sweep(param, values, train_set, eval_set, model_flags.config, config);

    std::string csv =
        "value,seed,phone_pcc,word_acc_pcc,utt_acc_pcc,inter_center_dist,score_weighted_scatter\n";
    for (const auto& row : rows) {
      csv += pco::util::fmt_double(row.value);
      csv += ',';
      csv += std::to_string(row.seed);
      csv += ',';
      csv += pco::util::fmt_double(row.eval.phone_pcc);
      csv += ',';
      csv += pco::util::fmt_double(row.eval.word_pcc[0]);
      csv += ',';
      csv += pco::util::fmt_double(row.eval.utt_pcc[0]);
      csv += ',';
      csv += pco::util::fmt_double(row.geometry.mean_inter_center_distance);
      csv += ',';
      csv += pco::util::fmt_double(row.geometry.score_weighted_scatter);
      csv += '\n';
    }
    write_text_file(csv_path, csv);
    std::cout << csv;
    manifest.write("complete");
    return 0;
  }
};

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

struct ExportCmd {
  std::string checkpoint_path;
  std::string data_path;
  std::string out_path;
  std::string run_dir;

  void attach(CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint");
    cmd->add_option("--data", data_path, "dataset (JSON Lines)");
    cmd->add_option("-o,--out", out_path, "output CSV path");
    cmd->add_option("--run-dir", run_dir, "manifest directory (default: next to output)");
  }

  int run() {
    if (checkpoint_path.empty() || data_path.empty() || out_path.empty()) {
      throw UsageError("export-embeddings: --checkpoint, --data and -o/--out are required");
    }
    RunManifest manifest;
    manifest.command = "export-embeddings";
    manifest.config = json{{"checkpoint", checkpoint_path}, {"data", data_path}};
    manifest.dataset_digest = file_digest(data_path);
    manifest.artifacts = {out_path};
    if (run_dir.empty()) {
      manifest.path = out_path + ".manifest.json";
    } else {
      fs::create_directories(run_dir);
      manifest.path = (fs::path(run_dir) / "manifest.json").string();
    }
    manifest.write("running");

    const auto params = pco::model::load_checkpoint(checkpoint_path);
    const auto samples = pco::data::load_dataset_auto(data_path);

    std::string csv = "utt_id,position,phoneme_id,phone_score";
    for (int j = 0; j < params.config.d_model; ++j) csv += ",e" + std::to_string(j);
    csv += '\n';
    const auto batches =
        pco::data::make_batches(samples, 32, params.config.max_len, std::nullopt);
    for (const auto& batch : batches) {
      for (const auto& rec : pco::model::extract_phone_embeddings(params, batch)) {
        csv += rec.utt_id;
        csv += ',';
        csv += std::to_string(rec.position);
        csv += ',';
        csv += std::to_string(rec.phoneme_id);
        csv += ',';
        csv += pco::util::fmt_double(rec.score);
        for (double v : rec.embedding) {
          csv += ',';
          csv += pco::util::fmt_double(v);
        }
        csv += '\n';
      }
    }
    write_text_file(out_path, csv);
    manifest.write("complete");
    return 0;
  }
};

}  // namespace

namespace {

// Config files use the same key=value names as the long flags. Returns the
// extra argv tokens for keys the command line did not already set; flags win
// on conflict.
std::vector<std::string> config_file_args(const CLI::App* cmd, const std::string& path) {
  std::istringstream in(pco::util::read_file(path));
  std::vector<std::string> tokens;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    const CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": unknown option \"" + key + "\"");
    }
    if (opt->count() > 0) continue;  // explicit flag wins
    if (opt->get_expected_min() == 0) {
      if (value == "true" || value == "1" || value == "yes" || value == "on") {
        tokens.push_back("--" + key);
      }
    } else {
      tokens.push_back("--" + key);
      tokens.push_back(value);
    }
  }
  return tokens;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-granularity pronunciation-score regression lab"};
  app.set_version_flag("--version", pco::kToolVersion);
  app.require_subcommand(1);

  GenCmd gen;
  TrainCmd train;
  SweepCmd sweep;
  ExportCmd exp;
  std::string config_path;

  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset");
  gen.attach(gen_cmd);
  CLI::App* train_cmd = app.add_subcommand("train", "train and evaluate per seed");
  train.attach(train_cmd);
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "sweep lambda_d or lambda_o");
  sweep.attach(sweep_cmd);
  CLI::App* export_cmd = app.add_subcommand("export-embeddings", "dump phone embeddings as CSV");
  exp.attach(export_cmd);
  for (CLI::App* cmd : {gen_cmd, train_cmd, sweep_cmd, export_cmd}) {
    cmd->add_option("--config", config_path, "key=value file supplying unset flags");
  }

  auto parse = [&app](std::vector<std::string> args) -> int {
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
      return -1;
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return kExitUsage;
    }
  };

  const std::vector<std::string> raw(argv + 1, argv + argc);
  try {
    if (const int code = parse(raw); code >= 0) return code;

    if (!config_path.empty()) {
      // merge the file-provided values and parse once more
      CLI::App* active = nullptr;
      for (CLI::App* cmd : {gen_cmd, train_cmd, sweep_cmd, export_cmd}) {
        if (cmd->parsed()) active = cmd;
      }
      std::vector<std::string> merged{active->get_name()};
      for (std::string& tok : config_file_args(active, config_path)) {
        merged.push_back(std::move(tok));
      }
      merged.insert(merged.end(), raw.begin() + 1, raw.end());
      if (const int code = parse(merged); code >= 0) return code;
    }

    if (gen_cmd->parsed()) return gen.run();
    if (train_cmd->parsed()) return train.run();
    if (sweep_cmd->parsed()) return sweep.run();
    if (export_cmd->parsed()) return exp.run();
    return kExitUsage;
  } catch (const pco::train::TrainAbort& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const pco::ad::NonFiniteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
