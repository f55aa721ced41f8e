// Copyright 2026 The distilprune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// distilprune: generate a teacher, compress it, sweep targets, extract,
// report and verify.
//
// Exit codes: 0 success, 2 config or usage error, 3 numeric abort or failed
// verification, 4 I/O error, 1 anything else.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "distilprune/commands.hpp"

namespace dp = distilprune;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "overrides io.seed");
  cmd->add_option("--out", c.out, out_help);
}

dp::RunConfig resolve(const Common& c) {
  dp::RunConfig cfg = c.config.empty() ? dp::RunConfig{} : dp::load_config(c.config);
  if (c.seed) {
    cfg.io.seed = *c.seed;
    cfg.recipe.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.io.out_dir = c.out;
  cfg.validate();
  return cfg;
}

std::string require(const std::string& value, const char* what) {
  if (value.empty()) throw dp::ConfigError(std::string("missing ") + what);
  return value;
}

void print_summary(const dp::CompressSummary& s) {
  std::cout << s.to_json().dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint distillation and structured pruning of a toy speech encoder"};
  app.require_subcommand(1);

  Common gen_c, comp_c, sweep_c, ext_c, rep_c, ver_c;

  auto* gen = app.add_subcommand("gen-teacher", "write a seeded random teacher checkpoint");
  add_common(gen, gen_c, "output checkpoint path");

  std::string comp_teacher, comp_mode;
  std::optional<double> comp_target;
  auto* comp = app.add_subcommand("compress", "Step 1, Step 2, extraction");
  add_common(comp, comp_c, "output directory");
  comp->add_option("--teacher", comp_teacher, "teacher checkpoint (default: io.teacher, or a fresh seeded teacher)");
  comp->add_option("--distill-mode", comp_mode, "layer_to_layer or prediction_layer");
  comp->add_option("--t-final", comp_target, "target sparsity");

  std::string sweep_teacher;
  std::vector<double> sweep_targets;
  auto* sweep = app.add_subcommand("sweep", "compress once per target sparsity");
  add_common(sweep, sweep_c, "output directory");
  sweep->add_option("--teacher", sweep_teacher, "teacher checkpoint");
  sweep->add_option("--targets", sweep_targets, "target sparsities")->delimiter(',');

  std::string ext_student;
  auto* ext = app.add_subcommand("extract", "extract the dense model from a student checkpoint");
  add_common(ext, ext_c, "output directory");
  ext->add_option("--student", ext_student, "student checkpoint")->required();

  std::string rep_in, rep_format = "text";
  auto* rep = app.add_subcommand("report", "print surviving architecture");
  add_common(rep, rep_c, "write the report here instead of stdout");
  rep->add_option("--in", rep_in, "pruned checkpoint or architecture CSV")->required();
  rep->add_option("--format", rep_format, "text or csv")
      ->check(CLI::IsMember({"text", "csv"}));

  std::string ver_student, ver_pruned;
  std::size_t ver_inputs = 100;
  double ver_tol = 1e-5;
  auto* ver = app.add_subcommand("verify", "compare masked student and pruned model");
  add_common(ver, ver_c, "unused");
  ver->add_option("--student", ver_student, "student checkpoint")->required();
  ver->add_option("--pruned", ver_pruned, "pruned checkpoint")->required();
  ver->add_option("--inputs", ver_inputs, "number of seeded inputs");
  ver->add_option("--tol", ver_tol, "max absolute discrepancy");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      const auto cfg = resolve(gen_c);
      dp::cmd_gen_teacher(cfg, require(gen_c.out, "--out"));
      std::cout << "teacher written to " << gen_c.out << " (config hash "
                << dp::config_hash(cfg.encoder) << ")\n";
    } else if (*comp) {
      auto cfg = resolve(comp_c);
      if (!comp_mode.empty()) cfg.recipe.distill_mode = dp::parse_distill_mode(comp_mode);
      if (comp_target) cfg.recipe.step1.t_final = *comp_target;
      cfg.validate();
      const std::string out = require(cfg.io.out_dir, "--out or io.out_dir");
      const std::string teacher = comp_teacher.empty() ? cfg.io.teacher : comp_teacher;
      print_summary(teacher.empty()
                        ? dp::cmd_compress(cfg, dp::make_teacher(cfg), out)
                        : dp::cmd_compress(cfg, teacher, out));
    } else if (*sweep) {
      const auto cfg = resolve(sweep_c);
      const std::string out = require(cfg.io.out_dir, "--out or io.out_dir");
      const std::string path = sweep_teacher.empty() ? cfg.io.teacher : sweep_teacher;
      const auto teacher = path.empty() ? dp::make_teacher(cfg) : dp::load_teacher(path, cfg);
      const auto rows = dp::cmd_sweep(cfg, teacher, sweep_targets, out);
      std::cout << dp::format_sweep_csv(rows);
      for (const auto& r : rows) {
        if (!r.error.empty()) return 1;
      }
    } else if (*ext) {
      const auto ex = dp::cmd_extract(ext_student, require(ext_c.out, "--out"));
      std::cout << dp::report_architecture(ex.arch, dp::ReportFormat::kText);
    } else if (*rep) {
      const auto format = rep_format == "csv" ? dp::ReportFormat::kCsv : dp::ReportFormat::kText;
      const std::string text = dp::cmd_report(rep_in, format);
      if (rep_c.out.empty()) {
        std::cout << text;
      } else {
        dp::detail::write_text(rep_c.out, text);
      }
    } else if (*ver) {
      const auto cfg = resolve(ver_c);
      const auto r = dp::cmd_verify(ver_student, ver_pruned, ver_inputs, ver_tol,
                                    cfg.io.seed, cfg.recipe.seq_len);
      std::cout << "max_abs " << r.max_abs << " max_rel " << r.max_rel << " over "
                << r.inputs << " inputs: " << (r.passed ? "PASS" : "FAIL") << "\n";
      if (!r.passed) return kExitNumeric;
    }
  } catch (const dp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dp::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const dp::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
