// Batch experiment driver: train, attack, sweep, generate, boundary, export,
// report and replay, each writing its artifacts plus a JSON manifest.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "robustbench/robustbench.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace robustbench;

namespace {

constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kBadConfig = 2,
  kBadData = 3,
  kBadCheckpoint = 4,
  kDiverged = 5,
  kReplayMismatch = 6,
};

class ReplayMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string build_id() {
#if defined(__clang__)
  const std::string compiler = "clang " __clang_version__;
#elif defined(__GNUC__)
  const std::string compiler = "gcc " __VERSION__;
#else
  const std::string compiler = "unknown compiler";
#endif
  return std::string("robustbench ") + kVersion + " (" + compiler + ")";
}

/// One subcommand invocation: resolved configuration, inputs and the
/// artifacts it produced.
struct Run {
  std::string command;
  Config config;
  std::set<std::string> explicit_keys;
  fs::path out;
  fs::path checkpoint;
  fs::path report_dir;
  json inputs = json::object();
  json outputs = json::object();
  json metrics = json::object();

  void emit(const std::string& name, std::string_view bytes) {
    write_file(out / name, bytes);
    outputs[name] = sha256_hex(bytes);
  }

  json manifest() const {
    json m;
    m["command"] = command;
    m["build"] = build_id();
    m["seed"] = config.u64("run.seed");
    m["config"] = json::object();
    for (const auto& [k, v] : config.values()) m["config"][k] = v;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["metrics"] = metrics;
    return m;
  }
};

bool uses_checkpoint(const std::string& command) {
  return command == "attack" || command == "sweep-offset" || command == "generate" || command == "boundary" ||
         command == "export-weights";
}

struct TrainedModel {
  ModelConfig model;
  ParamSet<float> params;
  Dataset test;
};

TrainedModel load_trained(Run& r) {
  if (r.checkpoint.empty()) throw ConfigError(r.command + ": --checkpoint is required");
  if (!fs::is_regular_file(r.checkpoint)) throw CheckpointError("cannot read checkpoint " + r.checkpoint.string());
  const std::string bytes = read_text_file(r.checkpoint);
  Checkpoint ck = decode_checkpoint(bytes);
  adopt_checkpoint_config(r.config, ck, r.explicit_keys);
  r.inputs["checkpoint"] = {{"path", r.checkpoint.string()}, {"sha256", sha256_hex(bytes)}};
  TrainedModel m;
  m.test = load_split(r.config, false);
  m.model = model_config_for(r.config, m.test);
  check_checkpoint_params(m.model, ck.params);
  m.params = std::move(ck.params);
  return m;
}

void run_train(Run& r) {
  const Dataset train_split = load_split(r.config, true);
  const ModelConfig model = model_config_for(r.config, train_split);
  const TrainConfig tc = train_config(r.config);
  auto progress = [](const TrainLogEntry& e) {
    std::cerr << "step " << e.step << "  loss " << e.loss << "  batch acc " << e.clean_acc << '\n';
  };
  TrainResult result = train(model, initial_params(r.config, model, train_split), train_split, tc, progress);

  Checkpoint ck;
  ck.config_text = model_text(r.config);
  ck.params = result.params;
  ck.rng_state = result.rng_state;
  r.emit("model.rbckpt", encode_checkpoint(ck));

  CsvWriter log({"step", "loss", "clean_accuracy", "adversarial_accuracy"});
  for (const auto& e : result.log.entries) log.add(e.step, e.loss, e.clean_acc, e.adv_acc);
  r.emit("train_log.csv", log.str());

  const Dataset test = load_split(r.config, false);
  r.metrics["final_loss"] = result.log.final_loss;
  r.metrics["test_accuracy"] = accuracy(model, result.params, test);
}

void run_attack(Run& r) {
  const TrainedModel m = load_trained(r);
  const AttackConfig attack = attack_config(r.config, m.test.pixel_lo, m.test.pixel_hi);
  const auto epsilons = r.config.reals("attack.epsilons");
  for (double eps : epsilons) {
    AttackConfig a = attack;
    a.epsilon = eps;
    if (a.underpowered()) {
      std::cerr << "warning: pgd with " << a.iterations << " steps of " << a.step_size << " cannot reach epsilon "
                << eps << '\n';
      r.metrics["underpowered"] = true;
    }
  }
  RobustnessCurve curve = robustness_curve(m.model, m.params, m.test, attack, epsilons);
  curve.model = r.config.str("run.name");
  r.emit("robustness.csv", curve_csv({&curve}));
  r.metrics["epsilons"] = curve.epsilons;
  r.metrics["accuracies"] = curve.accuracies;
}

void run_sweep(Run& r) {
  const TrainedModel m = load_trained(r);
  const auto offsets = r.config.list("sweep.offsets").empty() ? default_offsets(m.test.pixel_hi - m.test.pixel_lo)
                                                               : r.config.reals("sweep.offsets");
  OffsetSweep sweep = offset_sweep(m.model, m.params, m.test, offsets);
  sweep.added.model = sweep.subtracted.model = r.config.str("run.name");
  r.emit("offset_sweep.csv", curve_csv({&sweep.added, &sweep.subtracted}));
  r.metrics["auc_added"] = sweep.added.auc();
  r.metrics["auc_subtracted"] = sweep.subtracted.auc();
}

void run_generate(Run& r) {
  const TrainedModel m = load_trained(r);
  if (m.model.input_shape.size() != 3) throw ConfigError("generate: the model does not take images");
  const AttackConfig a = generate_config(r.config, m.test.pixel_lo, m.test.pixel_hi);
  std::vector<int> targets = r.config.ints("generate.targets");
  if (targets.empty()) {
    const int classes = m.model.kind == ModelKind::logistic_regression ? 2 : m.model.class_count;
    for (int t = 0; t < classes; ++t) targets.push_back(t);
  }
  const auto examples = nonexample_ascent(m.model, m.params, targets, a);
  const std::string ext = m.model.input_shape.back() == 3 ? ".ppm" : ".pgm";
  for (const auto& e : examples) {
    r.emit("nonexample_" + std::to_string(e.target) + ext, example_pnm(e.image, m.test.pixel_lo, m.test.pixel_hi));
  }
  r.emit("confidence.csv", confidence_csv(examples));
  r.metrics["mean_confidence"] = mean_confidence(examples);
}

void run_boundary(Run& r) {
  const TrainedModel m = load_trained(r);
  const auto box = r.config.reals("boundary.bbox");
  if (box.size() != 4) throw ConfigError("boundary.bbox: expected x0_lo,x0_hi,x1_lo,x1_hi");
  const auto grid = boundary_grid(m.model, m.params, BoundingBox{box[0], box[1], box[2], box[3]},
                                  r.config.count("boundary.resolution"));
  r.emit("grid.csv", grid_csv(grid));
  const auto stats = boundary_radius_stats(m.model, m.params, quadrant_angles(r.config.count("boundary.angles_per_quadrant")),
                                           r.config.real("boundary.r_lo"), r.config.real("boundary.r_hi"),
                                           parse_quadrants(r.config.list("spheres.removed_quadrants")));
  r.emit("radius.csv", radius_csv(stats));
  r.metrics["test_accuracy"] = accuracy(m.model, m.params, m.test);
  r.metrics["held_out_spread"] = stats.held_out.spread();
  r.metrics["held_out_mean_radius"] = stats.held_out.mean;
  r.metrics["trained_spread"] = stats.trained.spread();
  r.metrics["trained_mean_radius"] = stats.trained.mean;
}

void run_export(Run& r) {
  const TrainedModel m = load_trained(r);
  if (m.model.kind == ModelKind::logistic_regression) {
    r.emit("weights.pgm", encode_pnm(weight_image_bytes(m.params.at("linear.w")), 28, 28, 1));
    return;
  }
  if (m.model.kind != ModelKind::vanilla_cnn) throw ConfigError("export-weights: needs a logistic or CNN model");
  CsvWriter csv({"layer", "dead_fraction", "survivors", "survivor_max"});
  for (const auto& k : kernel_sparsity_report(m.params)) {
    std::string maxima;
    for (double v : k.survivor_max) maxima += (maxima.empty() ? "" : ";") + format_number(v);
    csv.add(k.layer, k.dead_fraction, k.survivor_max.size(), maxima);
    r.metrics["dead_fraction_" + k.layer] = k.dead_fraction;
  }
  r.emit("kernel_sparsity.csv", csv.str());
}

void run_report(Run& r) {
  if (r.report_dir.empty()) throw ConfigError("report: --dir is required");
  if (!fs::is_directory(r.report_dir)) throw DataError(DataError::Kind::missing_file, "no directory " + r.report_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(r.report_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".rbckpt") files.push_back(entry.path());
  }
  const auto epsilons = r.config.reals("attack.epsilons");
  if (epsilons.empty()) throw ConfigError("attack.epsilons: empty");
  const double eps = *std::max_element(epsilons.begin(), epsilons.end());

  struct Row {
    std::string name, path, sha;
    int weight_bits = 0, activation_bits = 0;
    double clean = 0, adversarial = 0;
  };
  std::vector<Row> rows;
  for (const auto& file : files) {
    Run one = r;
    one.checkpoint = file;
    one.explicit_keys.clear();
    const TrainedModel m = load_trained(one);
    AttackConfig a = attack_config(one.config, m.test.pixel_lo, m.test.pixel_hi);
    a.epsilon = eps;
    Row row;
    row.name = one.config.str("run.name");
    row.path = fs::relative(file, r.report_dir).generic_string();
    row.sha = one.inputs["checkpoint"]["sha256"];
    row.weight_bits = m.model.quant.weight_bits;
    row.activation_bits = m.model.quant.activation_bits;
    row.clean = accuracy(m.model, m.params, m.test);
    row.adversarial = adversarial_accuracy(m.model, m.params, m.test, a);
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return std::tie(a.name, a.path) < std::tie(b.name, b.path); });

  CsvWriter csv({"model", "checkpoint", "weight_bits", "activation_bits", "clean_accuracy", "attack", "epsilon",
                 "adversarial_accuracy"});
  r.inputs["dir"] = r.report_dir.string();
  r.inputs["checkpoints"] = json::array();
  for (const auto& row : rows) {
    csv.add(row.name, row.path, row.weight_bits, row.activation_bits, row.clean, r.config.str("attack.kind"), eps,
            row.adversarial);
    r.inputs["checkpoints"].push_back({{"path", row.path}, {"sha256", row.sha}});
  }
  r.emit("report.csv", csv.str());
  r.metrics["rows"] = rows.size();
}

void execute(Run& r) {
  fs::create_directories(r.out);
  if (r.command == "train") {
    run_train(r);
  } else if (r.command == "attack") {
    run_attack(r);
  } else if (r.command == "sweep-offset") {
    run_sweep(r);
  } else if (r.command == "generate") {
    run_generate(r);
  } else if (r.command == "boundary") {
    run_boundary(r);
  } else if (r.command == "export-weights") {
    run_export(r);
  } else if (r.command == "report") {
    run_report(r);
  } else {
    throw ConfigError("unknown command '" + r.command + "'");
  }
  write_file(r.out / "manifest.json", r.manifest().dump(2) + "\n");
}

/// Re-runs a manifest into `out` and compares every output hash.
void replay(const fs::path& manifest_path, const fs::path& out) {
  const json m = json::parse(read_text_file(manifest_path));
  Run r;
  r.command = m.at("command").get<std::string>();
  r.out = out;
  for (const auto& [k, v] : m.at("config").items()) {
    r.config.set(k, v.get<std::string>());
    r.explicit_keys.insert(k);
  }
  const json& inputs = m.at("inputs");
  if (uses_checkpoint(r.command)) {
    r.checkpoint = inputs.at("checkpoint").at("path").get<std::string>();
    if (fs::is_regular_file(r.checkpoint) &&
        sha256_file(r.checkpoint) != inputs.at("checkpoint").at("sha256").get<std::string>()) {
      throw ReplayMismatch("input checkpoint " + r.checkpoint.string() + " changed since the recorded run");
    }
  }
  if (r.command == "report") r.report_dir = inputs.at("dir").get<std::string>();
  if (m.at("build").get<std::string>() != build_id()) {
    std::cerr << "note: recorded build '" << m.at("build").get<std::string>() << "' differs from '" << build_id() << "'\n";
  }
  execute(r);

  bool same = true;
  for (const auto& [name, hash] : m.at("outputs").items()) {
    const bool match = r.outputs.contains(name) && r.outputs[name] == hash;
    std::cout << (match ? "match     " : "MISMATCH  ") << name << '\n';
    same = same && match;
  }
  if (r.outputs.size() != m.at("outputs").size()) same = false;
  if (!same) throw ReplayMismatch("replay produced different outputs");
}

/// Flags shared by every experiment subcommand.
struct CommonFlags {
  std::string config_file;
  std::string out = "out";
  std::string data_dir;
  std::string checkpoint;
  std::string dir;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::map<std::string, std::string> keys;
  std::map<std::string, CLI::Option*> key_opts;
};

void add_common_flags(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config_file, "key=value configuration file");
  sub->add_option("--out", f.out, "output directory")->capture_default_str();
  sub->add_option("--data-dir", f.data_dir, "dataset directory (overrides data.dir)");
  f.seed_opt = sub->add_option("--seed", f.seed, "master seed (overrides run.seed)");
  if (uses_checkpoint(sub->get_name())) sub->add_option("--checkpoint", f.checkpoint, "trained model checkpoint");
  if (sub->get_name() == "report") sub->add_option("--dir", f.dir, "directory searched for .rbckpt files");
  for (const auto& k : kConfigKeys) {
    const std::string name(k.name);
    f.key_opts[name] =
        sub->add_option("--" + name, f.keys[name], std::string(k.help) + " [" + std::string(k.default_value) + "]")
            ->group("Configuration keys");
  }
}

Run resolve(const std::string& command, const CommonFlags& f) {
  Run r;
  r.command = command;
  r.out = f.out;
  if (!f.config_file.empty()) {
    if (!fs::is_regular_file(f.config_file)) throw ConfigError("cannot read config file " + f.config_file);
    r.explicit_keys = r.config.merge_text(read_text_file(f.config_file), f.config_file);
  }
  for (const auto& [name, opt] : f.key_opts) {
    if (opt->count() == 0) continue;
    r.config.set(name, f.keys.at(name));
    r.explicit_keys.insert(name);
  }
  if (f.seed_opt->count() > 0) {
    r.config.set("run.seed", std::to_string(f.seed));
    r.explicit_keys.insert("run.seed");
  }
  if (!f.data_dir.empty()) r.config.set("data.dir", f.data_dir);
  // Record where the data came from so the manifest replays without the environment.
  if (r.config.str("data.dir").empty() && r.config.str("data.dataset") != "spheres") {
    if (const auto dir = resolve_data_dir(r.config); !dir.empty()) r.config.set("data.dir", fs::absolute(dir).string());
  }
  if (!f.checkpoint.empty()) r.checkpoint = fs::absolute(f.checkpoint);
  if (!f.dir.empty()) r.report_dir = fs::absolute(f.dir);
  return r;
}

int run_main(int argc, char** argv) {
  CLI::App app{"Adversarial robustness experiments for quantized and regularized models"};
  app.set_version_flag("--version", build_id());
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train a model and write model.rbckpt and train_log.csv"},
      {"attack", "robustness curve of a checkpoint under FGSM or PGD"},
      {"sweep-offset", "accuracy under added and subtracted constant offsets"},
      {"generate", "non-examples by gradient ascent from noise, with confidences"},
      {"boundary", "decision-boundary grid and radius statistics of a 2-D model"},
      {"export-weights", "weight image of a logistic model or kernel sparsity of a CNN"},
      {"report", "accuracy summary over a directory of checkpoints"},
  };
  std::map<std::string, CommonFlags> flags;
  for (const auto& [name, help] : commands) add_common_flags(app.add_subcommand(name, help), flags[name]);

  std::string manifest_path, replay_out;
  CLI::App* replay_cmd = app.add_subcommand("replay", "re-run a manifest and verify its output hashes");
  replay_cmd->add_option("manifest", manifest_path, "manifest.json of an earlier run")->required();
  replay_cmd->add_option("--out", replay_out, "output directory (default: <manifest dir>/replay)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadConfig;
  }

  enable_flush_to_zero();
  if (replay_cmd->parsed()) {
    const fs::path out = replay_out.empty() ? fs::path(manifest_path).parent_path() / "replay" : fs::path(replay_out);
    replay(manifest_path, out);
    std::cout << "replay reproduced every output\n";
    return kOk;
  }
  for (auto& [name, f] : flags) {
    if (!app.got_subcommand(name)) continue;
    Run r = resolve(name, f);
    execute(r);
    std::cout << r.manifest()["metrics"].dump() << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const ReplayMismatch& e) {
    std::cerr << "replay mismatch: " << e.what() << '\n';
    return kReplayMismatch;
  } catch (const ArchitectureMismatch& e) {
    std::cerr << "architecture mismatch: " << e.what() << '\n';
    return kBadCheckpoint;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kBadCheckpoint;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kBadData;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged at step " << e.step() << ": " << e.what() << '\n';
    return kDiverged;
  } catch (const std::invalid_argument& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
