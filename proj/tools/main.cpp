// Command-line entry point: synthetic data generation, training, evaluation,
// profiling, ablation comparison, and a gradient self-check. Every command
// writes its artifacts atomically and records a run manifest sufficient to
// reproduce the run.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trouspi/training.hpp"

using namespace trouspi;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

bool verbose() {
  const char* v = std::getenv("TROUSPI_VERBOSE");
  return v != nullptr && std::string(v) != "0";
}

void info(const std::string& msg) {
  if (verbose()) std::cerr << "[trouspi] " << msg << "\n";
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config file: ", path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(path, ": ", e.what());
  }
}

// Run manifest: everything needed to reproduce the command byte-for-byte.
struct ManifestWriter {
  json m;
  Clock::time_point start = Clock::now();

  ManifestWriter(const std::string& command, const json& config,
                 std::uint64_t seed) {
    m["command"] = command;
    m["config"] = config;
    m["seed"] = seed;
    m["library_version"] = kVersion;
    m["artifacts"] = json::array();
  }

  void artifact(const std::string& path) { m["artifacts"].push_back(path); }

  void write(const std::string& path) {
    m["wall_clock_s"] =
        std::chrono::duration<double>(Clock::now() - start).count();
    write_text_atomic(path, m.dump(2) + "\n");
  }
};

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

int cmd_gen(const std::string& config_path, const std::string& out,
            std::optional<std::uint64_t> seed,
            std::optional<std::size_t> tracks) {
  SyntheticConfig cfg;
  if (!config_path.empty())
    cfg = synthetic_config_from_json(load_json_file(config_path));
  if (seed) cfg.seed = *seed;
  if (tracks) cfg.n_tracks = *tracks;
  validate_synthetic_config(cfg);

  ManifestWriter manifest("gen", synthetic_config_to_json(cfg), cfg.seed);
  info(fmt("generating ", cfg.n_tracks, " tracks (seed ", cfg.seed, ")"));
  auto data = synth_generate(cfg);
  save_tracks(out, data);
  manifest.artifact(out);
  manifest.write(out + ".manifest.json");
  std::cout << "wrote " << data.size() << " tracks to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

// Train config files hold {"model": {...}, "train": {...}}; both blocks are
// optional and every key inside them is an explicit field.
std::pair<ModelConfig, TrainConfig> parse_train_file(const std::string& path) {
  ModelConfig mc;
  TrainConfig tc;
  if (!path.empty()) {
    json j = load_json_file(path);
    if (j.contains("model")) mc = model_config_from_json(j["model"]);
    if (j.contains("train")) tc = train_config_from_json(j["train"]);
  }
  return {mc, tc};
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out, std::optional<std::uint64_t> seed) {
  auto [mc, tc] = parse_train_file(config_path);
  if (seed) {
    mc.seed = *seed;
    tc.seed = *seed;
  }
  validate_model_config(mc);
  validate_train_config(tc);

  info(fmt("loading tracks from ", data_path));
  auto tracks = load_tracks(data_path);

  json config_snapshot{{"model", model_config_to_json(mc)},
                       {"train", train_config_to_json(tc)}};
  ManifestWriter manifest("train", config_snapshot, tc.seed);

  TrouSPINet net = build(mc);
  info(fmt("model built: ", param_count(net), " parameters"));

  // Epoch log: one JSON record per line; metrics are measured on the
  // Lookahead slow weights (the weights that end up in the checkpoint).
  std::string log_lines;
  TrainResult result = train(net, tracks, tc, [&](const EpochLog& log) {
    json row{{"epoch", log.epoch}, {"train_loss", log.train_loss}};
    if (std::isfinite(log.val_acc)) {
      row["val_acc"] = log.val_acc;
      row["val_f1"] = log.val_f1;
      row["val_auc"] = log.val_auc;
    }
    log_lines += row.dump() + "\n";
    info(fmt("epoch ", log.epoch, ": loss ", log.train_loss, " val_f1 ",
             log.val_f1));
    return true;
  });

  save_checkpoint(net, out);
  manifest.artifact(out);
  std::string log_path = out + ".log.jsonl";
  write_text_atomic(log_path, log_lines);
  manifest.artifact(log_path);
  manifest.write(out + ".manifest.json");

  std::cout << "trained " << result.logs.size() << " epochs on "
            << result.train_windows << " windows; checkpoint " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::string& metrics_out, const std::string& config_path) {
  WindowSpec spec;
  if (!config_path.empty()) {
    json j = load_json_file(config_path);
    if (j.contains("window")) spec = window_spec_from_json(j["window"]);
    else if (j.contains("train") && j["train"].contains("window"))
      spec = window_spec_from_json(j["train"]["window"]);
  }

  TrouSPINet net = load_checkpoint(ckpt);
  info(fmt("checkpoint loaded: ", param_count(net), " parameters"));
  auto tracks = load_tracks(data_path);

  json config_snapshot{{"checkpoint", ckpt},
                       {"window", window_spec_to_json(spec)}};
  ManifestWriter manifest("eval", config_snapshot, net.config.seed);

  Metrics m = evaluate(net, tracks, spec);
  json mj = metrics_to_json(m);
  write_text_atomic(metrics_out, mj.dump(2) + "\n");
  manifest.artifact(metrics_out);
  manifest.write(metrics_out + ".manifest.json");

  std::cout << mj.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

int cmd_profile(const std::string& config_path, const std::string& out) {
  ModelConfig mc;
  if (!config_path.empty()) {
    json j = load_json_file(config_path);
    mc = model_config_from_json(j.contains("model") ? j["model"] : j);
  }
  ManifestWriter manifest("profile", model_config_to_json(mc), mc.seed);
  TrouSPINet net = build(mc);
  ProfileReport report = profile(net);
  write_text_atomic(out, report.to_csv());
  manifest.artifact(out);
  manifest.write(out + ".manifest.json");
  std::cout << "params " << report.total_params << ", flops "
            << report.total_flops << ", weight bytes " << report.weight_bytes
            << "; report " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

int cmd_ablate(const std::string& suite, const std::string& config_path,
               const std::string& data_path, const std::string& out) {
  require(suite == "standard",
          "unknown ablation suite '", suite, "' (available: standard)");
  auto [mc, tc] = parse_train_file(config_path);
  validate_model_config(mc);
  validate_train_config(tc);

  auto tracks = load_tracks(data_path);
  json config_snapshot{{"suite", suite},
                       {"model", model_config_to_json(mc)},
                       {"train", train_config_to_json(tc)}};
  ManifestWriter manifest("ablate", config_snapshot, tc.seed);

  AblationTable table =
      ablate(tracks, mc, tc, [&](const std::string& name, const EpochLog& log) {
        info(fmt(name, " epoch ", log.epoch, ": loss ", log.train_loss));
      });
  write_text_atomic(out, table.to_csv());
  manifest.artifact(out);
  manifest.write(out + ".manifest.json");
  std::cout << "ablation table (" << table.rows.size() << " variants) written to "
            << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck: every layer's reverse-mode gradient against central finite
// differences; exits nonzero if any layer misses the 1e-4 bound.
// ---------------------------------------------------------------------------

std::vector<double> random_vec(std::size_t n, Rng& rng, double lo = -1.0,
                               double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

int cmd_gradcheck() {
  struct Row {
    std::string name;
    double err;
  };
  std::vector<Row> rows;
  auto run = [&](const std::string& name, const std::function<Tensor()>& f,
                 const std::vector<std::pair<std::string, Tensor>>& params) {
    auto report = gradient_check(f, params);
    rows.push_back({name, report.max_relative_error});
  };

  // Atrous convolution at each branch dilation, through its activation.
  for (std::size_t r1 : {1u, 2u, 3u}) {
    // Keep pre-activations away from the activation kink, where central
    // differences are invalid.
    for (std::uint64_t seed = 300 + r1;; ++seed) {
      ParamStore store;
      Rng rng(seed);
      auto conv = make_conv(store, "conv", 2, 2, 3, 3, r1, 1, rng);
      Tensor x = Tensor::leaf({2, 5, 6}, random_vec(60, rng));
      Tensor pre = atrous_conv2d(x, conv, Activation::identity);
      double closest = 1e300;
      for (double v : pre.data()) closest = std::min(closest, std::fabs(v));
      if (closest < 1e-3) continue;
      run(fmt("atrous_conv r1=", r1),
          [&]() {
            return mean_all(atrous_conv2d(x, conv, Activation::leaky_relu));
          },
          {{"w", conv.w}, {"b", conv.b}, {"x", x}});
      break;
    }
  }

  {
    ParamStore store;
    Rng rng(7);
    auto p = make_cbam(store, "cbam", 4, rng);
    Tensor x = Tensor::leaf({4, 3, 3}, random_vec(36, rng, 0.1, 1.0));
    run("cbam", [&]() { return mean_all(cbam(x, p)); }, {{"x", x}});
  }
  {
    ParamStore store;
    Rng rng(8);
    auto se = make_se(store, "se", 4, rng);
    Tensor x = Tensor::leaf({4, 3, 3}, random_vec(36, rng, 0.1, 1.0));
    run("se", [&]() { return mean_all(se_block(x, se)); }, {{"x", x}});
  }
  {
    ParamStore store;
    Rng rng(9);
    auto gru = make_gru(store, "gru", 3, 4, rng);
    Tensor x = Tensor::leaf({5, 3}, random_vec(15, rng));
    run("gru",
        [&]() { return mean_all(gru_layer(x, gru, Direction::forward)); },
        {{"Wz", gru.Wz}, {"Uz", gru.Uz}, {"x", x}});
  }
  {
    ParamStore store;
    Rng rng(10);
    auto ugru = make_ugru(store, "ugru", 3, 4, rng);
    Tensor x = Tensor::leaf({5, 3}, random_vec(15, rng));
    run("ugru", [&]() { return mean_all(ugru_block(x, ugru)); }, {{"x", x}});
  }
  {
    ParamStore store;
    Rng rng(11);
    auto bigru = make_bigru(store, "bigru", 3, 4, rng);
    Tensor x = Tensor::leaf({5, 3}, random_vec(15, rng));
    run("bigru", [&]() { return mean_all(bigru_block(x, bigru)); }, {{"x", x}});
  }
  {
    ParamStore store;
    Rng rng(12);
    auto att = make_temporal_attention(store, "ta", 4, 3, rng);
    Tensor h = Tensor::leaf({5, 4}, random_vec(20, rng));
    run("temporal_attention",
        [&]() { return mean_all(temporal_attention(h, att)); },
        {{"w1", att.w1}, {"w2", att.w2}, {"v", att.v}, {"h", h}});
  }
  {
    ParamStore store;
    Rng rng(13);
    auto att = make_modality_attention(store, "ma", 4, 3, rng);
    Tensor a = Tensor::leaf({4}, random_vec(4, rng));
    Tensor b = Tensor::leaf({4}, random_vec(4, rng));
    run("modality_attention",
        [&]() { return mean_all(modality_attention({a, b}, att)); },
        {{"a", a}, {"b", b}, {"w", att.w}});
  }
  {
    ParamStore store;
    Rng rng(14);
    auto d = make_dense(store, "dense", 4, 2, rng);
    Tensor x = Tensor::leaf({3, 4}, random_vec(12, rng));
    run("dense",
        [&]() { return mean_all(dense(x, d, Activation::sigmoid_act)); },
        {{"w", d.w}, {"b", d.b}, {"x", x}});
  }
  {
    ParamStore store;
    Rng rng(15);
    auto bn = make_batch_norm(store, "bn", 3);
    Tensor x = Tensor::leaf({4, 3, 2, 2}, random_vec(48, rng, -2.0, 2.0));
    run("batch_norm",
        [&]() { return mean_all(batch_norm(x, bn, Mode::train)); },
        {{"gamma", bn.gamma}, {"beta", bn.beta}, {"x", x}});
  }
  {
    Rng rng(16);
    Tensor z = Tensor::leaf({6}, random_vec(6, rng, -1.5, 1.5));
    std::vector<double> labels = {1, 0, 1, 1, 0, 0};
    run("weighted_bce",
        [&]() { return weighted_bce(sigmoid(z), labels, ClassWeights{0.8, 1.4}); },
        {{"z", z}});
  }

  bool ok = true;
  for (const auto& r : rows) {
    bool pass = r.err < 1e-4;
    ok = ok && pass;
    std::printf("%-22s max_rel_err %.3e  %s\n", r.name.c_str(), r.err,
                pass ? "ok" : "FAIL");
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TrouSPI-Net pedestrian-crossing predictor"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic track dataset");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_tracks;
  gen->add_option("--config", gen_config, "Generator config JSON");
  gen->add_option("--out", gen_out, "Output track file (JSONL)")->required();
  gen->add_option("--seed", gen_seed, "Override the generator seed");
  gen->add_option("--tracks", gen_tracks, "Override the number of tracks");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a track file");
  std::string train_config, train_data, train_out;
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("--config", train_config,
                        "Config JSON with 'model' and 'train' blocks");
  train_cmd->add_option("--data", train_data, "Track file (JSONL)")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint output path")->required();
  train_cmd->add_option("--seed", train_seed, "Override model and train seeds");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_metrics, eval_config;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", eval_data, "Track file (JSONL)")->required();
  eval_cmd->add_option("--metrics-out", eval_metrics, "Metrics JSON output")
      ->required();
  eval_cmd->add_option("--config", eval_config,
                       "Optional config JSON with a 'window' block");

  // profile
  auto* prof = app.add_subcommand("profile", "Report parameters, FLOPs, memory");
  std::string prof_config, prof_out;
  prof->add_option("--config", prof_config, "Model config JSON");
  prof->add_option("--out", prof_out, "CSV output path")->required();

  // ablate
  auto* abl = app.add_subcommand("ablate",
                                 "Train and compare architecture variants");
  std::string abl_suite = "standard", abl_config, abl_data, abl_out;
  abl->add_option("--suite", abl_suite, "Variant suite name (standard)");
  abl->add_option("--config", abl_config,
                  "Config JSON with 'model' and 'train' blocks");
  abl->add_option("--data", abl_data, "Track file (JSONL)")->required();
  abl->add_option("--out", abl_out, "CSV output path")->required();

  // gradcheck
  app.add_subcommand("gradcheck",
                     "Check every layer's gradients against finite differences");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    // CLI11 maps --help/--version to 0; any genuine parse error is usage (2).
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_config, gen_out, gen_seed, gen_tracks);
    if (train_cmd->parsed())
      return cmd_train(train_config, train_data, train_out, train_seed);
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_metrics, eval_config);
    if (prof->parsed()) return cmd_profile(prof_config, prof_out);
    if (abl->parsed()) return cmd_ablate(abl_suite, abl_config, abl_data, abl_out);
    return cmd_gradcheck();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
