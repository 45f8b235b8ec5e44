// scm: command-line entry points for data generation, supervised warm start,
// GRPO training with soft concept mixing, evaluation, generation and the
// representation-shift report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "scm/config.hpp"
#include "scm/errors.hpp"
#include "scm/grpo.hpp"
#include "scm/latent.hpp"
#include "scm/model.hpp"
#include "scm/reward.hpp"
#include "scm/rollout.hpp"
#include "scm/tasks.hpp"

namespace fs = std::filesystem;
using namespace scm;

namespace {

struct ControlFlags {
  std::optional<double> temperature;
  std::optional<int> top_k;
  std::optional<double> top_p;
  std::optional<int> max_new_tokens;
  bool greedy = false;

  void attach(CLI::App* app) {
    app->add_option("--temperature", temperature, "sampling temperature (default 0.6)");
    app->add_option("--top-k", top_k, "top-k filter, 0 disables (default 30)");
    app->add_option("--top-p", top_p, "nucleus mass (default 0.95)");
    app->add_option("--max-new-tokens", max_new_tokens, "generation cap (default 48)");
    app->add_flag("--greedy", greedy, "argmax decoding (top-k 1)");
  }

  DecodeControls apply(DecodeControls c, std::uint64_t seed) const {
    if (temperature) c.temperature = *temperature;
    if (top_k) c.top_k = *top_k;
    if (top_p) c.top_p = *top_p;
    if (max_new_tokens) c.max_new_tokens = *max_new_tokens;
    if (greedy) c.top_k = 1;
    c.seed = seed;
    if (!(c.temperature > 0.0)) throw ConfigError("--temperature must be positive");
    if (!(c.top_p > 0.0 && c.top_p <= 1.0)) throw ConfigError("--top-p must lie in (0, 1]");
    return c;
  }
};

RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig rc = run_config_from(path.empty() ? IniConfig::parse("") : IniConfig::load(path));
  if (seed) {
    rc.seed = *seed;
    rc.pretrain.seed = *seed;
    rc.train.seed = *seed;
    rc.decode.seed = *seed;
    rc.train.controls.seed = *seed;
  }
  return rc;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
  const auto probe = fs::path(dir) / ".write_probe";
  std::ofstream out(probe);
  if (!out) throw IoError("output directory '" + dir + "' is not writable");
  out.close();
  fs::remove(probe, ec);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " '" + path + "' not found");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

std::vector<TaskInstance> load_tasks(const std::string& path) {
  require_file(path, "data file");
  auto tasks = read_dataset(path);
  if (tasks.empty()) throw IoError("data file '" + path + "' contains no tasks");
  return tasks;
}

// ---------------------------------------------------------------------------

int cmd_make_data(const std::string& tier_name, std::size_t count, std::size_t eval_count, std::uint64_t seed,
                  const std::string& out_dir) {
  const Tier tier = parse_tier(tier_name);
  ensure_dir(out_dir);
  const auto splits = make_splits(tier, count, eval_count, seed);
  for (const auto* split : {&splits.train, &splits.eval}) {
    for (const auto& t : *split) {
      if (evaluate_prompt(t.prompt) != t.gold) {
        throw ContractError("generated gold " + std::to_string(t.gold) + " disagrees with " + t.prompt);
      }
    }
  }
  write_dataset((fs::path(out_dir) / "train.tsv").string(), splits.train);
  write_dataset((fs::path(out_dir) / "eval.tsv").string(), splits.eval);
  std::cout << "wrote " << splits.train.size() << " train and " << splits.eval.size() << " eval tasks to "
            << out_dir << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& data, const std::string& heldout_path,
                 const std::string& out_dir, std::optional<std::uint64_t> seed) {
  const RunConfig rc = load_config(config_path, seed);
  std::vector<TaskInstance> corpus, heldout;
  if (!data.empty()) {
    corpus = load_tasks(data);
  } else {
    corpus = make_splits(rc.tier, rc.pretrain_count, 0, rc.seed).train;
  }
  if (!heldout_path.empty()) {
    heldout = load_tasks(heldout_path);
  } else {
    heldout = make_splits(rc.tier, 0, rc.heldout_count, rc.seed).eval;
  }
  ensure_dir(out_dir);

  const ModelParams init = init_params(rc.model, rc.init_seed);
  const PretrainResult result = pretrain_supervised(init, corpus, rc.pretrain, heldout, rc.decode);

  auto metrics = open_out(fs::path(out_dir) / "pretrain_metrics.jsonl");
  for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
    nlohmann::ordered_json j;
    j["epoch"] = e;
    j["loss"] = result.epoch_losses[e];
    metrics << j.dump() << '\n';
  }
  nlohmann::ordered_json summary;
  summary["heldout_format"] = result.heldout_format;
  summary["heldout_accuracy"] = result.heldout_accuracy;
  summary["reached_threshold"] = result.reached_threshold;
  metrics << summary.dump() << '\n';

  const auto ckpt = (fs::path(out_dir) / "model.ckpt").string();
  save_checkpoint(ckpt, result.params);
  std::cout << "held-out format reward " << result.heldout_format << " (accuracy " << result.heldout_accuracy
            << ")\n";
  if (!result.reached_threshold) {
    std::cout << "warning: held-out format reward below threshold " << rc.pretrain.format_threshold << "\n";
  }
  std::cout << "checkpoint " << ckpt << "\n";
  return 0;
}

int cmd_train_rl(const std::string& config_path, const std::string& checkpoint, const std::string& mode_name,
                 const std::string& data, const std::string& out_dir, std::optional<std::uint64_t> seed,
                 std::optional<int> steps, bool dump_rollouts) {
  RunConfig rc = load_config(config_path, seed);
  if (!mode_name.empty()) rc.train.mode = parse_mixing_mode(mode_name);
  if (steps) rc.train.total_steps = *steps;
  require_file(checkpoint, "checkpoint");
  const std::vector<TaskInstance> tasks =
      data.empty() ? make_splits(rc.tier, rc.pretrain_count, 0, rc.seed).train : load_tasks(data);
  ensure_dir(out_dir);
  ModelParams params = load_checkpoint(checkpoint);

  auto metrics = open_out(fs::path(out_dir) / "metrics.jsonl");
  std::ofstream rollouts;
  if (dump_rollouts) rollouts = open_out(fs::path(out_dir) / "rollouts.jsonl");
  const Vocab& vocab = Vocab::standard();
  TrainCallbacks callbacks;
  callbacks.on_step = [&](const StepMetrics& m) {
    metrics << metrics_json_line(m) << '\n' << std::flush;
    if (m.step % 10 == 0) {
      std::cout << "step " << m.step << " reward " << m.mean_reward << " acc " << m.mean_accuracy << "\n"
                << std::flush;
    }
  };
  if (dump_rollouts) {
    callbacks.on_group = [&](int, const ScoredGroup& g) {
      for (std::size_t k = 0; k < g.group.records.size(); ++k) {
        rollouts << rollout_json_line(g.group.records[k], vocab, g.rewards[k]) << '\n';
      }
    };
  }
  const TrainResult result = train_rl(std::move(params), tasks, rc.train, callbacks);
  const auto ckpt = (fs::path(out_dir) / "model.ckpt").string();
  save_checkpoint(ckpt, result.params);
  std::cout << "mode " << to_string(rc.train.mode) << ", " << result.metrics.size() << " steps, checkpoint "
            << ckpt << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& mode_name,
             const ControlFlags& flags, std::uint64_t seed, const std::string& out_path) {
  require_file(checkpoint, "checkpoint");
  const auto tasks = load_tasks(data);
  const ModelParams params = load_checkpoint(checkpoint);
  const MixingMode mode = parse_mixing_mode(mode_name);
  const DecodeControls controls = flags.apply(DecodeControls{}, seed);
  const EvalReport report = evaluate(params, tasks, controls, mode);
  nlohmann::ordered_json j;
  j["checkpoint"] = checkpoint;
  j["mode"] = std::string(to_string(mode));
  j["count"] = report.count;
  j["pass_at_1"] = report.accuracy;
  j["mean_reward"] = report.mean_reward;
  j["mean_fmt"] = report.mean_format;
  std::cout << j.dump() << "\n";
  if (!out_path.empty()) open_out(out_path) << j.dump() << '\n';
  return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& prompt, const std::string& mode_name,
                 const ControlFlags& flags, std::uint64_t seed, std::optional<long> gold) {
  require_file(checkpoint, "checkpoint");
  const ModelParams params = load_checkpoint(checkpoint);
  const Vocab& vocab = Vocab::standard();
  const auto ids = vocab.encode("<bos>" + prompt);
  const RolloutRecord rec = generate(params, ids, flags.apply(DecodeControls{}, seed), parse_mixing_mode(mode_name));
  const std::string text = completion_text(rec, vocab);
  std::cout << text << "\n";
  const long target = gold ? *gold : evaluate_prompt(prompt);
  const RewardBreakdown r = score_text(text, target);
  nlohmann::ordered_json j;
  j["gold"] = target;
  j["r_acc"] = r.accuracy;
  j["r_fmt"] = r.format;
  j["reward"] = r.total;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_pca_shift(const std::string& ckpt_a, const std::string& ckpt_b, const std::string& data,
                  const std::string& out_dir, const std::string& mode_name, const std::string& center,
                  const std::string& tag_a, const std::string& tag_b) {
  require_file(ckpt_a, "checkpoint");
  require_file(ckpt_b, "checkpoint");
  const auto corpus = load_tasks(data);
  ensure_dir(out_dir);
  CenterMode center_mode;
  if (center == "per-layer") {
    center_mode = CenterMode::PerLayer;
  } else if (center == "pooled") {
    center_mode = CenterMode::Pooled;
  } else {
    throw ConfigError("--center must be 'per-layer' or 'pooled'");
  }
  const MixingMode mode = parse_mixing_mode(mode_name);
  const StateDump a = collect_states(load_checkpoint(ckpt_a), corpus, mode, tag_a);
  const StateDump b = collect_states(load_checkpoint(ckpt_b), corpus, mode, tag_b);
  const PcaReport report = shift_report(a, b, center_mode);
  open_out(fs::path(out_dir) / "pca_report.jsonl") << report_to_jsonl(report);
  open_out(fs::path(out_dir) / "pca_scatter.jsonl") << scatter_to_jsonl(report);
  for (const auto& s : report.layers) std::cout << "layer " << s.layer << " d " << s.distance << "\n";
  std::cout << "aggregate " << report.aggregate << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft concept mixing: tiny transformer, GRPO training and latent-shift analysis"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;

  // make-data
  auto* make_data = app.add_subcommand("make-data", "write train/eval task splits");
  std::string tier = "1-digit", data_out;
  std::size_t count = 1000, eval_count = 200;
  std::uint64_t data_seed = 0;
  make_data->add_option("--tier", tier, "1-digit, 2-digit or mixed-op");
  make_data->add_option("--count", count, "train tasks");
  make_data->add_option("--eval-count", eval_count, "held-out tasks");
  make_data->add_option("--seed", data_seed, "generator seed");
  make_data->add_option("--out", data_out, "output directory")->required();

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "supervised warm start on rendered exemplars");
  std::string config_path, data_path, heldout_path, out_dir;
  pretrain->add_option("--config", config_path, "run config (key=value with sections)");
  pretrain->add_option("--data", data_path, "training tasks (default: generated from [data])");
  pretrain->add_option("--heldout", heldout_path, "held-out tasks for the format check");
  pretrain->add_option("--out", out_dir, "output directory")->required();
  pretrain->add_option("--seed", seed, "global seed override");

  // train-rl
  auto* train = app.add_subcommand("train-rl", "GRPO training under a mixing mode");
  std::string checkpoint, mode = "";
  std::optional<int> steps;
  bool dump_rollouts = false;
  train->add_option("--config", config_path, "run config");
  train->add_option("--checkpoint", checkpoint, "starting checkpoint")->required();
  train->add_option("--mode", mode, "scm, grpo or no-hidden-fusion (default from config)");
  train->add_option("--data", data_path, "task file (default: generated from [data])");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--steps", steps, "override [rl] steps");
  train->add_option("--seed", seed, "global seed override");
  train->add_flag("--dump-rollouts", dump_rollouts, "write rollouts.jsonl");

  // eval
  auto* eval = app.add_subcommand("eval", "pass@1 accuracy and mean reward");
  std::string eval_out, eval_mode = "scm";
  std::uint64_t eval_seed = 0;
  ControlFlags eval_flags;
  eval->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  eval->add_option("--data", data_path, "task file")->required();
  eval->add_option("--mode", eval_mode, "scm, grpo or no-hidden-fusion");
  eval->add_option("--seed", eval_seed, "decode seed");
  eval->add_option("--out", eval_out, "write the report record here");
  eval_flags.attach(eval);

  // generate
  auto* gen = app.add_subcommand("generate", "decode one prompt and score it");
  std::string prompt, gen_mode = "scm";
  std::uint64_t gen_seed = 0;
  std::optional<long> gold;
  ControlFlags gen_flags;
  gen->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  gen->add_option("--prompt", prompt, "task prompt, e.g. 7+8=")->required();
  gen->add_option("--mode", gen_mode, "scm, grpo or no-hidden-fusion");
  gen->add_option("--seed", gen_seed, "decode seed");
  gen->add_option("--gold", gold, "expected answer (default: evaluated from the prompt)");
  gen_flags.attach(gen);

  // pca-shift
  auto* pca = app.add_subcommand("pca-shift", "per-layer PCA center shift between two checkpoints");
  std::string ckpt_a, ckpt_b, pca_mode = "scm", center = "per-layer", tag_a = "orig", tag_b = "post";
  pca->add_option("--checkpoint-a", ckpt_a, "reference checkpoint")->required();
  pca->add_option("--checkpoint-b", ckpt_b, "trained checkpoint")->required();
  pca->add_option("--data", data_path, "task file for teacher-forced states")->required();
  pca->add_option("--out", out_dir, "output directory")->required();
  pca->add_option("--mode", pca_mode, "mode tag recorded with the dumps");
  pca->add_option("--center", center, "per-layer or pooled");
  pca->add_option("--tag-a", tag_a, "label for checkpoint a");
  pca->add_option("--tag-b", tag_b, "label for checkpoint b");
  pca->add_option("--seed", seed, "accepted for uniformity; the report is deterministic");

  auto* show_config = app.add_subcommand("default-config", "print the default run configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << "\n";
    return 64;
  }

  try {
    if (*make_data) return cmd_make_data(tier, count, eval_count, data_seed, data_out);
    if (*pretrain) return cmd_pretrain(config_path, data_path, heldout_path, out_dir, seed);
    if (*train) {
      return cmd_train_rl(config_path, checkpoint, mode, data_path, out_dir, seed, steps, dump_rollouts);
    }
    if (*eval) return cmd_eval(checkpoint, data_path, eval_mode, eval_flags, eval_seed, eval_out);
    if (*gen) return cmd_generate(checkpoint, prompt, gen_mode, gen_flags, gen_seed, gold);
    if (*pca) return cmd_pca_shift(ckpt_a, ckpt_b, data_path, out_dir, pca_mode, center, tag_a, tag_b);
    if (*show_config) {
      std::cout << default_config_text();
      return 0;
    }
  } catch (const scm::Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
