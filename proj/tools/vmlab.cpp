// Command-line front door: convert, synth, run, null, corr, report.
// Exit codes: 0 ok, 1 partial failure (some attributes failed), 2 bad input
// (config, spec, or replay parse errors), 3 I/O failure.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vmlab/engine.hpp"
#include "vmlab/replay.hpp"
#include "vmlab/stats.hpp"

namespace {

using vmlab::engine::CliOverrides;
using vmlab::engine::EngineError;

int run_action(const std::function<int()>& action) {
  try {
    return action();
  } catch (const EngineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == EngineError::Kind::IoError ? 3 : 2;
  } catch (const vmlab::synth::SynthError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == vmlab::synth::SynthError::Kind::IoError ? 3 : 2;
  } catch (const vmlab::dataset::DatasetError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const vmlab::stats::StatsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const vmlab::ModelError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const vmlab::ReplayError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}

void print_report_table(const vmlab::engine::RunOutcome& outcome) {
  for (const auto& a : outcome.attributes) {
    if (!a.ok) {
      std::cout << "  " << a.attribute << ": FAILED (" << a.error << ")\n";
      continue;
    }
    std::cout << "  " << a.attribute << ": user accuracy "
              << a.eval.user_correct << "/" << a.eval.user_total << " (p "
              << vmlab::stats::significance_text(a.eval.user_p)
              << "), sequence accuracy " << a.eval.seq_correct << "/"
              << a.eval.seq_total << " (p "
              << vmlab::stats::significance_text(a.eval.seq_p) << ")\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vmlab: what head-and-hand VR telemetry reveals about its wearer"};
  app.require_subcommand(1);
  app.fallthrough();  // inherited: global flags may follow the subcommand
  app.set_version_flag("--version", std::string("vmlab ") + "1.0.0");

  std::uint64_t g_seed = 0;
  std::string g_preset, g_out;
  std::size_t g_jobs = 1;
  auto* seed_opt = app.add_option("--seed", g_seed, "Master seed override");
  auto* preset_opt = app.add_option("--preset", g_preset, "Config preset (paper|desk)")
                         ->check(CLI::IsMember({"paper", "desk"}));
  auto* jobs_opt = app.add_option("--jobs", g_jobs, "Worker pool width");
  auto* out_opt = app.add_option("--out", g_out, "Output directory override");

  auto overrides = [&]() {
    CliOverrides o;
    if (seed_opt->count()) o.seed = g_seed;
    if (preset_opt->count()) o.preset = g_preset;
    if (jobs_opt->count()) o.jobs = g_jobs;
    if (out_opt->count()) o.out = g_out;
    return o;
  };

  std::function<int()> action;

  // convert
  std::string conv_in, conv_out, conv_from = "bsor", conv_to = "canonical";
  bool keep_going = false;
  auto* conv = app.add_subcommand("convert", "Convert replay files between formats");
  conv->add_option("input", conv_in, "Input file or directory")->required();
  conv->add_option("output", conv_out, "Output file or directory")->required();
  conv->add_option("--from", conv_from, "Input format")
      ->check(CLI::IsMember({"bsor", "canonical"}));
  conv->add_option("--to", conv_to, "Output format")
      ->check(CLI::IsMember({"bsor", "canonical"}));
  conv->add_flag("--keep-going", keep_going, "Continue past files that fail to parse");
  conv->callback([&] {
    action = [&]() {
      const auto from = vmlab::engine::replay_format_from_string(conv_from);
      const auto to = vmlab::engine::replay_format_from_string(conv_to);
      const auto rep =
          vmlab::engine::convert_path(conv_in, conv_out, *from, *to, keep_going);
      for (const auto& [path, msg] : rep.failures)
        std::cerr << "failed: " << path << ": " << msg << "\n";
      std::cout << "converted " << rep.converted << " file(s)";
      if (!rep.failures.empty()) std::cout << ", " << rep.failures.size() << " failed";
      if (rep.stopped_early) std::cout << " (stopped at first failure)";
      std::cout << "\n";
      if (rep.io_error) return 3;
      return rep.failures.empty() ? 0 : 2;
    };
  });

  // synth
  std::string synth_spec, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  synth->add_option("spec", synth_spec, "Cohort spec JSON")->required();
  synth->add_option("output", synth_out, "Output directory (or use --out)");
  synth->callback([&] {
    action = [&]() {
      auto file = vmlab::engine::load_cohort_spec(synth_spec);
      if (seed_opt->count()) file.spec.seed = g_seed;
      std::string out_dir = !synth_out.empty() ? synth_out : g_out;
      if (out_dir.empty())
        throw EngineError(EngineError::Kind::InvalidConfig,
                          "synth needs an output directory (positional or --out)");
      const auto cohort = file.null_cohort
                              ? vmlab::synth::generate_null_cohort(file.spec, out_dir)
                              : vmlab::synth::generate_cohort(file.spec, out_dir);
      std::cout << "cohort: " << cohort.root << "\n"
                << "  users: " << cohort.n_users << "\n"
                << "  recordings: " << cohort.n_recordings << "\n"
                << "  manifest: " << cohort.manifest_path << "\n"
                << "  survey: " << cohort.survey_path << "\n";
      return 0;
    };
  });

  // run
  std::string run_config;
  auto* run = app.add_subcommand("run", "Run an experiment config");
  run->add_option("config", run_config, "Experiment config JSON")->required();
  run->callback([&] {
    action = [&]() {
      const auto cfg = vmlab::engine::load_experiment_config(run_config, overrides());
      const auto outcome = vmlab::engine::run_experiment(
          cfg, [](const std::string& line) { std::cout << line << "\n"; });
      print_report_table(outcome);
      std::cout << "report: " << (outcome.out_dir / "report.tsv").string() << "\n";
      return outcome.all_ok ? 0 : 1;
    };
  });

  // null
  std::string null_dir;
  auto* null_cmd =
      app.add_subcommand("null", "Score a completed run on fictitious inputs");
  null_cmd->add_option("results_dir", null_dir, "Run output directory")->required();
  null_cmd->callback([&] {
    action = [&]() {
      const std::uint64_t seed = seed_opt->count() ? g_seed : 1;
      const auto outcome = vmlab::engine::run_null(
          null_dir, seed, [](const std::string& line) { std::cout << line << "\n"; });
      for (const auto& a : outcome.attributes)
        std::cout << "  " << a.attribute << ": real "
                  << vmlab::format_double(a.real_mean) << " vs fictitious "
                  << vmlab::format_double(a.null_mean) << "\n";
      if (std::isnan(outcome.wilcoxon_p))
        std::cout << "wilcoxon p undefined (" << outcome.note << ") over "
                  << outcome.pairs.size() << " attribute-fold pairs\n";
      else
        std::cout << "wilcoxon p = " << vmlab::format_double(outcome.wilcoxon_p)
                  << " over " << outcome.pairs.size() << " attribute-fold pairs\n";
      return 0;
    };
  });

  // corr
  std::string corr_survey;
  std::vector<std::string> corr_specs;
  auto* corr = app.add_subcommand("corr", "Pairwise label R^2 across attribute specs");
  corr->add_option("survey", corr_survey, "Survey TSV")->required();
  corr->add_option("specs", corr_specs, "Attribute spec JSON files")->required();
  corr->callback([&] {
    action = [&]() {
      const std::string out_dir = out_opt->count() ? g_out : "corr";
      const auto outcome = vmlab::engine::run_corr(corr_survey, corr_specs, out_dir);
      std::cout << "matrix: " << outcome.matrix_path.string() << "\n"
                << "pairs: " << outcome.long_path.string() << "\n";
      return 0;
    };
  });

  // report
  std::string report_dir;
  auto* report = app.add_subcommand("report", "Rebuild report.tsv from results.json");
  report->add_option("results_dir", report_dir, "Run output directory")->required();
  report->callback([&] {
    action = [&]() {
      const auto path = vmlab::engine::write_report_files(report_dir);
      std::cout << "report: " << path.string() << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad arguments are reported as bad input
  }
  return run_action(action);
}
