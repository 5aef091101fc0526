// rlhf_lab: runs one experiment kind and writes metrics.csv, plots/ and
// manifest.json to the output directory.

#include <charconv>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "rlhf/exp.hpp"

namespace {

std::uint64_t parse_seed(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw rlhf::InvalidArgument("--seed-set: bad seed '" + s + "'");
  return v;
}

// "0,1,7" or "0-4" or a mix: "0-2,9".
std::vector<std::uint64_t> parse_seed_set(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      seeds.push_back(parse_seed(item));
      continue;
    }
    const auto lo = parse_seed(item.substr(0, dash));
    const auto hi = parse_seed(item.substr(dash + 1));
    if (hi < lo) throw rlhf::InvalidArgument("--seed-set: empty range '" + item + "'");
    for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
  }
  if (seeds.empty()) throw rlhf::InvalidArgument("--seed-set: no seeds given");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw rlhf::InvalidArgument("--seed-set: seeds must be distinct");
  return seeds;
}

struct Flags {
  std::string config;
  std::string seed_set;
  std::string out;
  bool oracle_reward = false;
  bool resume = false;
  bool serial = false;
  bool quiet = false;
};

int run(rlhf::ExperimentKind kind, const Flags& f) {
  rlhf::ExperimentConfig cfg = f.config.empty() ? rlhf::default_experiment_config(kind)
                                                : rlhf::load_experiment_config(f.config);
  if (cfg.kind != kind)
    throw rlhf::InvalidArgument("config is for " + rlhf::to_string(cfg.kind) + ", not " +
                                rlhf::to_string(kind));
  if (!f.seed_set.empty()) cfg.seeds = parse_seed_set(f.seed_set);
  if (f.oracle_reward) cfg.oracle_reward = true;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (cfg.output_dir.empty()) cfg.output_dir = "runs/" + rlhf::to_string(kind);
  cfg.validate();

  rlhf::RunOptions opts;
  opts.exec = f.serial ? rlhf::Exec::serial : rlhf::Exec::parallel;
  opts.resume = f.resume;
  if (!f.quiet) opts.progress = [](const std::string& msg) { std::cerr << msg << "\n"; };

  const auto res = rlhf::run_and_save(cfg, opts);
  std::cout << "wrote " << res.table.size() << " rows to " << cfg.output_dir << " (" << res.jobs_run
            << " jobs run, " << res.jobs_resumed << " resumed)\n";
  if (kind == rlhf::ExperimentKind::ppo_vs_grpo)
    for (const auto& c : rlhf::paired_ppo_grpo(res.table))
      std::cout << "M=" << c.group_size << " ppo-grpo final accuracy: " << c.mean_difference
                << " [" << c.ci_low << ", " << c.ci_high << "] n=" << c.n << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale RLHF experiments"};
  app.require_subcommand(1);
  Flags flags;
  std::optional<rlhf::ExperimentKind> chosen;

  for (auto kind : rlhf::all_experiment_kinds()) {
    auto* sub = app.add_subcommand(rlhf::to_string(kind), "Run the " + rlhf::to_string(kind) + " experiment");
    sub->add_option("--config", flags.config, "JSON config; missing keys keep the defaults")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed-set", flags.seed_set, "Seeds, e.g. 0-4 or 0,3,9");
    sub->add_option("--out", flags.out, "Output directory");
    sub->add_flag("--oracle-reward", flags.oracle_reward, "Reward the policy with the verifier");
    sub->add_flag("--resume", flags.resume, "Reuse finished jobs in <out>/jobs");
    sub->add_flag("--serial", flags.serial, "Use the serial reference kernels");
    sub->add_flag("-q,--quiet", flags.quiet, "No progress output");
    sub->callback([&chosen, kind] { chosen = kind; });
  }

  std::string config_kind;
  auto* show = app.add_subcommand("config", "Print the default config of an experiment kind");
  show->add_option("kind", config_kind, "Experiment kind")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (show->parsed()) {
      std::cout << rlhf::experiment_config_to_json(
                       rlhf::default_experiment_config(rlhf::experiment_kind_from_string(config_kind)))
                << "\n";
      return 0;
    }
    return run(*chosen, flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
