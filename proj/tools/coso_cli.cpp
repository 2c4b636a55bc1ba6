// Command-line front end for training, ablations, reports and verification.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "coso/coso.hpp"

namespace {

int cmd_train(const std::string& path) {
  coso::RunConfig cfg = coso::load_config(path);
  cfg.arms = {cfg.arm};
  const auto summary = coso::run_experiment(cfg);
  for (const auto& r : summary.seeds) {
    std::cout << "seed " << r.seed << " final_success=" << coso::format_double(r.final_success)
              << " steps_to_threshold="
              << (r.steps_to_threshold ? std::to_string(*r.steps_to_threshold) : "not reached")
              << "\n";
  }
  std::cout << "artifacts: " << cfg.output_dir << "\n";
  return 0;
}

int cmd_ablate(const std::string& path) {
  const coso::RunConfig cfg = coso::load_config(path);
  const auto res = coso::ablation_matrix(cfg);
  std::cout << res.table_csv;
  std::cout << "artifacts: " << cfg.output_dir << "\n";
  return 0;
}

int cmd_cf_report(const std::string& ckpt_path, const std::string& env_id, std::size_t episodes,
                  std::uint64_t seed, bool greedy, const std::string& out) {
  const auto ckpt = coso::load_checkpoint(ckpt_path);
  const auto env = coso::make_env(env_id);
  const auto rep = coso::cf_report(ckpt, *env, episodes, seed,
                                   greedy ? coso::Decoding::greedy : coso::Decoding::sample);
  const std::string text = coso::cf_report_jsonl(rep, *env);
  if (out.empty()) {
    std::cout << text;
  } else {
    coso::write_text_atomic(out, text);
    std::cout << "steps=" << rep.records.size()
              << " kind_max_fraction=" << coso::format_double(rep.kind_max_fraction)
              << " action_raw_mean=" << coso::format_double(rep.action_raw_mean)
              << " filler_raw_mean=" << coso::format_double(rep.filler_raw_mean)
              << " low_weight_fraction=" << coso::format_double(rep.histogram.low_fraction())
              << "\n";
  }
  return 0;
}

int cmd_probe(const std::string& ckpt_path, const std::string& state_spec, std::size_t k,
              std::uint64_t seed) {
  const auto ckpt = coso::load_checkpoint(ckpt_path);
  const auto env = coso::make_env(ckpt.env_id);
  const coso::EnvState state = env->parse_state(state_spec);
  const auto res = coso::repeated_sampling_probe(ckpt.policy, *env, state, k, seed);
  for (std::size_t i = 0; i < res.actions.size(); ++i) std::cout << i << " " << res.actions[i] << "\n";
  std::cout << "distinct=" << res.distinct << " invalid=" << res.invalid << "\n";
  for (const auto& [name, count] : res.counts) std::cout << name << " " << count << "\n";
  return 0;
}

int cmd_theory(std::size_t instances, double tol) {
  coso::TheorySpec spec;
  spec.instances = instances;
  spec.decomposition_instances = 2 * instances;
  if (tol > 0.0) {
    spec.fixed_point_tol = tol;
    spec.improvement_tol = tol;
  }
  const auto rep = coso::theory_check(spec);
  std::cout << coso::format_theory_report(rep);
  return rep.passed() ? 0 : 1;
}

int cmd_envs(const std::string& id) {
  if (id.empty()) {
    for (const auto& e : coso::env_ids()) std::cout << e << "\n";
    return 0;
  }
  std::cout << coso::make_env(id)->describe_grammar();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual soft RL on text-action environments"};
  app.require_subcommand(1);

  std::string config;
  auto* train = app.add_subcommand("train", "Train one arm over the configured seeds");
  train->add_option("--config", config, "Config file")->required()->check(CLI::ExistingFile);

  auto* ablate = app.add_subcommand("ablate", "Run the rl / rl_h / coso ablation");
  ablate->add_option("--config", config, "Config file")->required()->check(CLI::ExistingFile);

  std::string ckpt, env_id, out, state;
  std::size_t episodes = 20, k = 10;
  std::uint64_t seed = 7;
  bool greedy = false;
  auto* cf = app.add_subcommand("cf-report", "Per-token causal weights of a checkpoint");
  cf->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cf->add_option("--env", env_id, "Environment id")->required();
  cf->add_option("--episodes", episodes, "Episodes to roll out")->check(CLI::PositiveNumber);
  cf->add_option("--seed", seed, "Sampling seed");
  cf->add_flag("--greedy", greedy, "Decode greedily instead of sampling");
  cf->add_option("--out", out, "Write JSONL here instead of stdout");

  auto* probe = app.add_subcommand("probe", "Sample k utterances at a fixed state");
  probe->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  probe->add_option("--state", state, "State spec, e.g. screen=share,typed=0")->required();
  probe->add_option("-k", k, "Number of samples")->check(CLI::PositiveNumber);
  probe->add_option("--seed", seed, "Sampling seed");

  std::size_t instances = 50;
  double tol = 0.0;
  auto* theory = app.add_subcommand("theory-check", "Verify the tabular soft-RL theory");
  theory->add_option("--instances", instances, "Random MDP instances")->check(CLI::PositiveNumber);
  theory->add_option("--tol", tol, "Override fixed-point and improvement tolerance");

  std::string dump;
  auto* envs = app.add_subcommand("envs", "List environments or dump a grammar");
  envs->add_option("--dump-grammar", dump, "Environment id");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config);
    if (*ablate) return cmd_ablate(config);
    if (*cf) return cmd_cf_report(ckpt, env_id, episodes, seed, greedy, out);
    if (*probe) return cmd_probe(ckpt, state, k, seed);
    if (*theory) return cmd_theory(instances, tol);
    if (*envs) return cmd_envs(dump);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
