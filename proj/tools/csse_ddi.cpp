/*
 * Copyright 2026 The CSSE-DDI Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// csse-ddi: stage-by-stage driver for the scope and encoding search.
//
// Exit status: 0 success, 1 usage or configuration error, 2 stage failure,
// 3 numerical failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "csse/gradcheck.hpp"
#include "csse/pipeline.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitStage = 2;
constexpr int kExitNumerical = 3;

struct GlobalOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

csse::RunConfig resolve_config(const GlobalOptions& g) {
  csse::RunConfig c = csse::load_run_config(g.config, g.overrides);
  if (!g.out.empty()) c.output_dir = std::filesystem::absolute(g.out).lexically_normal();
  return c;
}

int run_gradcheck(const std::vector<std::uint64_t>& seeds, const std::vector<std::size_t>& dims, double eps,
                  double tolerance, bool verbose) {
  const auto results = csse::run_gradcheck(seeds, dims, eps);
  if (verbose) {
    for (const auto& r : results) {
      std::printf("%-24s seed=%-4llu d=%-3zu error=%.3e\n", r.name.c_str(), static_cast<unsigned long long>(r.seed),
                  r.dim, r.error);
    }
  }
  const double worst = csse::max_error(results);
  std::printf("gradcheck: %zu checks, max relative error %.3e (tolerance %.1e)\n", results.size(), worst, tolerance);
  return worst <= tolerance ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint scope and encoding search for drug-drug interaction graphs", "csse-ddi"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GlobalOptions g;
  app.add_option("-c,--config", g.config, "JSON run configuration (defaults apply when omitted)")
      ->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a scalar field, e.g. --set search.dim=32 (repeatable)")
      ->take_all()
      ->allow_extra_args(false);
  app.add_option("-o,--out", g.out,
                 std::string("Output directory (default: $") + csse::kOutputRootEnv + "/run-<digest>, else runs/)");

  std::vector<CLI::App*> stage_cmds;
  const std::vector<std::pair<std::string, std::string>> stages{
      {"ingest", "Validate a triple file and copy it into the run"},
      {"synth", "Generate the synthetic dataset and its planted-rule sidecar"},
      {"split", "Split triples into train/valid/test (and sample negatives)"},
      {"supernet", "Train the weight-sharing supernet"},
      {"partition", "Split the supernet into one child per message operator"},
      {"subtrain", "Continue training each child with its pin"},
      {"search", "Natural-gradient search for each child's genotype"},
      {"scopes", "Select a scope per query and write the histogram"},
      {"finetune", "Train the winning genotype from scratch"},
      {"eval", "Compute validation and test metrics"},
      {"report", "Aggregate the run report"},
  };
  for (const auto& [name, help] : stages) stage_cmds.push_back(app.add_subcommand(name, help));
  CLI::App* run_cmd = app.add_subcommand("run", "Run every stage in order");

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operator");
  std::vector<std::uint64_t> grad_seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<std::size_t> grad_dims{2, 4, 8, 16};
  double grad_eps = 1e-5;
  double grad_tol = 1e-6;
  bool grad_verbose = false;
  grad_cmd->add_option("--seeds", grad_seeds, "Seeds to draw inputs from")->capture_default_str();
  grad_cmd->add_option("--dims", grad_dims, "Feature widths (even)")->capture_default_str();
  grad_cmd->add_option("--eps", grad_eps, "Central-difference step")->capture_default_str();
  grad_cmd->add_option("--tolerance", grad_tol, "Largest acceptable relative error")->capture_default_str();
  grad_cmd->add_flag("-v,--verbose", grad_verbose, "Print every check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (grad_cmd->parsed()) {
      for (auto d : grad_dims) {
        if (d == 0 || d % 2 != 0) throw csse::ConfigError("gradcheck: --dims must be even and positive");
      }
      return run_gradcheck(grad_seeds, grad_dims, grad_eps, grad_tol, grad_verbose);
    }
    const csse::RunConfig cfg = resolve_config(g);
    const csse::Workspace ws(cfg);
    csse::DirLock lock(ws.root());
    if (run_cmd->parsed()) {
      csse::run_all(cfg, ws);
      std::printf("report: %s\n", ws.path("report.json").string().c_str());
      return 0;
    }
    for (auto* cmd : stage_cmds) {
      if (!cmd->parsed()) continue;
      csse::run_stage(cmd->get_name(), cfg, ws);
      std::printf("%s: done (%s)\n", cmd->get_name().c_str(), ws.root().string().c_str());
    }
    return 0;
  } catch (const csse::ConfigError& e) {
    std::fprintf(stderr, "csse-ddi: configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const csse::NumericalError& e) {
    std::fprintf(stderr, "csse-ddi: numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "csse-ddi: %s\n", e.what());
    return kExitStage;
  }
}
