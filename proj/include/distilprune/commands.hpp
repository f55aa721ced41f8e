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

// End-to-end workflow behind the command-line tool. A compress run writes
//
//   step1.ckpt        gated student, gates, projections, multipliers after Step 1
//   student.ckpt      the same after Step 2, plus the frozen masks
//   pruned.ckpt       the extracted dense model
//   metrics.csv       one row per training step
//   architecture.csv  surviving vs original sizes
//   summary.json      losses, sparsity, parameter counts, equivalence check

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distilprune/checkpoint.hpp"
#include "distilprune/config.hpp"
#include "distilprune/encoder.hpp"
#include "distilprune/errors.hpp"
#include "distilprune/extractor.hpp"
#include "distilprune/trainer.hpp"

namespace distilprune {

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

inline void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create directory '" + dir.string() + "'");
  }
}

inline Tensor<float> mask_tensor(const std::vector<double>& m) {
  Tensor<float> t(Shape{m.size()});
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = static_cast<float>(m[i]);
  return t;
}

inline std::vector<double> mask_values(const Checkpoint& ckpt,
                                       const std::string& name) {
  const Tensor<float>* t = ckpt.find(name);
  if (!t) throw IoError("checkpoint: missing tensor '" + name + "'");
  return std::vector<double>(t->data.begin(), t->data.end());
}

}  // namespace detail

inline Checkpoint model_checkpoint(const Encoder<float>& model,
                                   const std::string& hash,
                                   const std::string& phase, std::size_t step) {
  Checkpoint c;
  add_parameters(c, model);
  c.metadata["config_hash"] = hash;
  c.metadata["phase"] = phase;
  c.metadata["step"] = std::to_string(step);
  c.metadata["arch"] = arch_to_json(model.arch()).dump();
  return c;
}

/// Any checkpoint written here, rebuilt from its own architecture record.
inline Encoder<float> load_model(const Checkpoint& ckpt) {
  return load_encoder<float>(ckpt, arch_from_json(ckpt.meta("arch")));
}

/// A teacher that must match `cfg`'s encoder block.
inline Encoder<float> load_teacher(const std::string& path, const RunConfig& cfg) {
  const Checkpoint ckpt = load_checkpoint(path);
  const std::string want = config_hash(cfg.encoder);
  if (ckpt.meta("config_hash") != want) {
    throw ConfigError("refusing '" + path + "': config hash " +
                      ckpt.meta("config_hash") + " does not match " + want);
  }
  return load_encoder<float>(ckpt, EncoderArch::from_config(cfg.encoder));
}

inline Encoder<float> make_teacher(const RunConfig& cfg) {
  return Encoder<float>::random(cfg.encoder, cfg.io.seed);
}

/// Writes a seeded random teacher; returns it as well.
inline Encoder<float> cmd_gen_teacher(const RunConfig& cfg,
                                      const std::string& out_path) {
  cfg.validate();
  Encoder<float> teacher = make_teacher(cfg);
  save_checkpoint(out_path,
                  model_checkpoint(teacher, config_hash(cfg.encoder), "teacher", 0));
  return teacher;
}

/// Gated student with its gates, masks, projections and multipliers.
inline Checkpoint student_checkpoint(Trainer<float>& tr, const std::string& hash,
                                     const std::string& phase, std::size_t step) {
  Checkpoint c = model_checkpoint(tr.student().model, hash, phase, step);
  tr.student().visit_gates([&](HardConcreteGateSet<float>& g) {
    add_parameter(c, g.log_alpha.name, g.log_alpha.value);
  });
  for (const auto& w : tr.spec().projections) add_parameter(c, w.name, w.value);
  add_parameter(c, "lambda1", tr.controller().lambda1.value);
  add_parameter(c, "lambda2", tr.controller().lambda2.value);
  const GroupMasks m = tr.inference_masks();
  for (std::size_t k = 0; k < m.conv.size(); ++k) {
    add_parameter(c, "mask.conv." + std::to_string(k), detail::mask_tensor(m.conv[k]));
  }
  for (std::size_t i = 0; i < m.heads.size(); ++i) {
    add_parameter(c, "mask.heads." + std::to_string(i), detail::mask_tensor(m.heads[i]));
    add_parameter(c, "mask.ffn." + std::to_string(i), detail::mask_tensor(m.ffn[i]));
  }
  return c;
}

/// Masks stored by student_checkpoint, in the precision the forward uses.
inline GroupMasks load_masks(const Checkpoint& ckpt, const EncoderArch& arch) {
  GroupMasks m;
  for (std::size_t k = 0; k < arch.conv.size(); ++k) {
    m.conv.push_back(detail::mask_values(ckpt, "mask.conv." + std::to_string(k)));
  }
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    m.heads.push_back(detail::mask_values(ckpt, "mask.heads." + std::to_string(i)));
    m.ffn.push_back(detail::mask_values(ckpt, "mask.ffn." + std::to_string(i)));
  }
  detail::check_layout(m, arch.layout(), "load_masks");
  return m;
}

struct CompressSummary {
  double t_final = 0.0;
  double achieved_sparsity = 0.0;   // deterministic masks, gated parameters
  double expected_sparsity = 0.0;   // last Step-1 log row
  double step1_tail_loss = 0.0;     // mean over the last 10% of Step 1
  double final_distill_loss = 0.0;  // mean over the last 10% of Step 2
  std::uint64_t discrete_count = 0;
  PrunedArchitecture arch;
  EquivalenceReport equivalence;

  nlohmann::json to_json() const {
    return {{"t_final", t_final},
            {"achieved_sparsity", achieved_sparsity},
            {"expected_sparsity", expected_sparsity},
            {"step1_tail_loss", step1_tail_loss},
            {"final_distill_loss", final_distill_loss},
            {"discrete_param_count", discrete_count},
            {"params_gated", arch.params_gated},
            {"params_gated_original", arch.params_gated_original},
            {"params_total", arch.params_total},
            {"params_total_original", arch.params_total_original},
            {"equivalence_max_abs", equivalence.max_abs},
            {"equivalence_passed", equivalence.passed}};
  }
};

struct CompressOptions {
  std::size_t verify_inputs = 100;
  double verify_tol = 1e-5;
};

/// Step 1, Step 2, extraction and verification, writing every artifact into
/// `out_dir`. A non-finite loss leaves the metrics so far on disk and
/// rethrows.
inline CompressSummary cmd_compress(const RunConfig& cfg,
                                    const Encoder<float>& teacher,
                                    const std::string& out_dir,
                                    const CompressOptions& opt = {}) {
  cfg.validate();
  if (!(teacher.arch() == EncoderArch::from_config(cfg.encoder))) {
    throw ConfigError("compress: teacher architecture does not match config");
  }
  const std::filesystem::path dir(out_dir);
  detail::make_dir(dir);
  const std::string hash = config_hash(cfg.encoder);
  TrainRecipe recipe = cfg.recipe;
  recipe.seed = cfg.io.seed;
  Trainer<float> tr(recipe, teacher, cfg.gates, cfg.distill_layers,
                    cfg.l1_weight, cfg.cos_weight);
  auto write_metrics = [&] {
    detail::write_text(dir / "metrics.csv", format_metrics_csv(tr.log()));
  };
  try {
    tr.run_step1();
    tr.freeze_masks();
    write_metrics();
    save_checkpoint((dir / "step1.ckpt").string(),
                    student_checkpoint(tr, hash, "step1", recipe.step1.total_steps));
    tr.run_step2();
  } catch (const NumericError&) {
    write_metrics();
    throw;
  }
  write_metrics();
  Checkpoint student = student_checkpoint(tr, hash, "step2", recipe.step2.total_steps);
  save_checkpoint((dir / "student.ckpt").string(), student);

  const GroupMasks masks = load_masks(student, tr.student().model.arch());
  Extraction<float> ex = extract(tr.student().model, masks);
  Checkpoint pruned = model_checkpoint(ex.model, hash, "pruned", 0);
  pruned.metadata["architecture"] = report_architecture(ex.arch, ReportFormat::kCsv);
  save_checkpoint((dir / "pruned.ckpt").string(), pruned);
  detail::write_text(dir / "architecture.csv",
                     report_architecture(ex.arch, ReportFormat::kCsv));

  CompressSummary s;
  s.t_final = recipe.step1.t_final;
  s.achieved_sparsity = tr.deterministic_sparsity();
  for (auto it = tr.log().rbegin(); it != tr.log().rend(); ++it) {
    if (it->phase == "step1") {
      s.expected_sparsity = it->sparsity;
      break;
    }
  }
  s.step1_tail_loss = tail_mean_loss(tr.log(), "step1");
  s.final_distill_loss = tail_mean_loss(tr.log(), "step2");
  s.discrete_count = discrete_param_count(binarize(masks),
                                          tr.student().model.arch().layout());
  s.arch = ex.arch;
  s.equivalence = verify_equivalence(tr.student().model, masks, ex.model,
                                     opt.verify_inputs, opt.verify_tol,
                                     cfg.io.seed, recipe.seq_len);
  detail::write_text(dir / "summary.json", s.to_json().dump(2) + "\n");
  return s;
}

inline CompressSummary cmd_compress(const RunConfig& cfg,
                                    const std::string& teacher_path,
                                    const std::string& out_dir,
                                    const CompressOptions& opt = {}) {
  cfg.validate();
  return cmd_compress(cfg, load_teacher(teacher_path, cfg), out_dir, opt);
}

inline constexpr const char* kSweepHeader =
    "t_final,achieved_sparsity,final_distill_loss,param_count";

struct SweepRow {
  double t_final = 0.0;
  double achieved_sparsity = std::numeric_limits<double>::quiet_NaN();
  double final_distill_loss = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t param_count = 0;
  std::string error;  // empty on success
};

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%llu\n", r.t_final,
                  r.achieved_sparsity, r.final_distill_loss,
                  static_cast<unsigned long long>(r.param_count));
    out += buf;
  }
  return out;
}

/// One compress run per target, run i seeded with seed + i, each in its own
/// subdirectory. A failed run is recorded and the sweep continues.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& cfg,
                                       const Encoder<float>& teacher,
                                       const std::vector<double>& targets,
                                       const std::string& out_dir,
                                       const CompressOptions& opt = {}) {
  cfg.validate();
  for (double t : targets) {
    if (!(t >= 0.0 && t < 1.0)) {
      throw ConfigError("sweep: target " + std::to_string(t) + " outside [0, 1)");
    }
  }
  const std::filesystem::path dir(out_dir);
  detail::make_dir(dir);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    RunConfig run = cfg;
    run.recipe.step1.t_final = targets[i];
    run.io.seed = cfg.io.seed + i;
    run.recipe.seed = run.io.seed;
    SweepRow row;
    row.t_final = targets[i];
    try {
      const auto s = cmd_compress(run, teacher,
                                  (dir / ("run_" + std::to_string(i))).string(), opt);
      row.achieved_sparsity = s.achieved_sparsity;
      row.final_distill_loss = s.final_distill_loss;
      row.param_count = s.arch.params_gated;
    } catch (const std::exception& e) {
      row.error = e.what();
      std::cerr << "sweep: run " << i << " (t_final " << targets[i]
                << ") failed: " << e.what() << "\n";
    }
    rows.push_back(row);
  }
  detail::write_text(dir / "sweep.csv", format_sweep_csv(rows));
  return rows;
}

/// Re-extracts a pruned model from a student checkpoint.
inline Extraction<float> cmd_extract(const std::string& student_path,
                                     const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(student_path);
  Encoder<float> model = load_model(ckpt);
  const GroupMasks masks = load_masks(ckpt, model.arch());
  Extraction<float> ex = extract(model, masks);
  const std::filesystem::path dir(out_dir);
  detail::make_dir(dir);
  Checkpoint pruned = model_checkpoint(ex.model, ckpt.meta("config_hash"), "pruned", 0);
  pruned.metadata["architecture"] = report_architecture(ex.arch, ReportFormat::kCsv);
  save_checkpoint((dir / "pruned.ckpt").string(), pruned);
  detail::write_text(dir / "architecture.csv",
                     report_architecture(ex.arch, ReportFormat::kCsv));
  return ex;
}

/// Architecture of a pruned checkpoint or an architecture CSV.
inline PrunedArchitecture load_architecture(const std::string& path) {
  const std::string text = detail::read_text(path);
  if (text.rfind(kArchitectureHeader, 0) == 0) return parse_architecture_csv(text);
  Checkpoint ckpt;
  try {
    ckpt = decode_checkpoint(text);
  } catch (const IoError& e) {
    throw IoError(path + ": neither an architecture CSV nor a checkpoint (" +
                  e.what() + ")");
  }
  return parse_architecture_csv(ckpt.meta("architecture"));
}

inline std::string cmd_report(const std::string& path, ReportFormat format) {
  return report_architecture(load_architecture(path), format);
}

/// Masked student vs pruned model on seeded inputs.
inline EquivalenceReport cmd_verify(const std::string& student_path,
                                    const std::string& pruned_path,
                                    std::size_t inputs, double tol,
                                    std::uint64_t seed, std::size_t seq_len) {
  const Checkpoint sc = load_checkpoint(student_path);
  Encoder<float> student = load_model(sc);
  const GroupMasks masks = load_masks(sc, student.arch());
  const Encoder<float> pruned = load_model(load_checkpoint(pruned_path));
  return verify_equivalence(student, masks, pruned, inputs, tol, seed, seq_len);
}

}  // namespace distilprune
