#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "spectralrank/harness.hpp"

namespace {

std::string schema_help() {
  return R"(CSV schemas (one row per step/state unless noted):
  rf1, rf2            step,loss_gd,loss_spec,nr_gd,nr_spec,st_A
  rf_gated            n,st_A,loss_gd,loss_spec,gd_wins          (one row per swept n)
  mlp_sparse          step,loss,nr_l,...,st_l,...,ratio_l,...,favored_l,...,grad_frob_l,...,predicted_decrease
  propagation         stage,name,frob,op_norm,nuclear,stable_rank,nuclear_rank,effective_rank,min_col_sq,max_col_sq
  transformer_block   tensor,rows,cols,frob,op_norm,nuclear,stable_rank,nuclear_rank,effective_rank
  shardwise           step,loss_global,loss_shard,nr_global,nr_shard,st_A
  polar_bench         index,rows,cols,cond,frob_err,ns_iters
  cost_table          method,shard_rows,shard_cols,devices,flops_per_device,bytes_per_device

--trials N prepends a 'trial' column and runs seeds seed..seed+N-1.
Step traces include the initial state: steps=300 emits rows 0..300.
A sidecar <out>.meta.json records the full config, seed, library version and wall time.)";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spectral vs Euclidean descent experiments"};
  app.footer(schema_help());

  std::string experiment;
  std::string config_path;
  std::string seed_text;
  std::string out_path;
  std::string trials_text;
  std::vector<std::string> override_tokens;
  app.add_option("experiment", experiment,
                 "one of: rf1 rf2 rf_gated mlp_sparse propagation transformer_block "
                 "shardwise polar_bench cost_table")
      ->required();
  app.add_option("--config", config_path, "flat JSON config file");
  app.add_option("--seed", seed_text, "base RNG seed (u64)");
  app.add_option("--out", out_path, "output CSV path (default <experiment>.csv)");
  app.add_option("--trials", trials_text, "run N seeds in parallel, deterministic row order");
  app.add_option("overrides", override_tokens, "key=value overrides; win over the config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      return app.exit(e);  // --help
    }
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    const auto kind = spectralrank::parse_experiment_kind(experiment);
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& token : override_tokens) {
      const auto eq = token.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw spectralrank::ConfigError("override '" + token + "' is not key=value");
      }
      overrides.emplace_back(token.substr(0, eq), token.substr(eq + 1));
    }
    // The explicit flags are just sugar for the same overrides, applied last.
    if (!seed_text.empty()) {
      overrides.emplace_back("seed", seed_text);
    }
    if (!trials_text.empty()) {
      overrides.emplace_back("trials", trials_text);
    }
    if (!out_path.empty()) {
      overrides.emplace_back("output_path", out_path);
    }
    const auto cfg = spectralrank::load_config(kind, config_path, overrides);
    spectralrank::run_experiment(cfg);
    return 0;
  } catch (const spectralrank::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
