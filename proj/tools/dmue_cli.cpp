// dmue: data generation, training, evaluation and experiment reports.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "dmue/checkpoint.hpp"
#include "dmue/config.hpp"
#include "dmue/format.hpp"
#include "dmue/harness.hpp"

namespace {

using namespace dmue;

std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& ch : s) {
    if (ch == '_') ch = '-';
  }
  return "--" + s;
}

// Config keys exposed as flags on one subcommand. Values are applied on top
// of the --config file, in key order.
struct Settings {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::vector<std::string> order;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value configuration file");
    for (const auto& key : config_keys()) {
      order.push_back(key);
      cmd->add_option(flag_name(key), values[key], "config key " + key);
    }
  }

  RunConfig resolve(CLI::App* cmd) const {
    RunConfig rc;
    if (!config_path.empty()) apply_settings(rc, read_key_values(config_path));
    for (const auto& key : order) {
      if (cmd->count(flag_name(key)) > 0) apply_setting(rc, key, values.at(key));
    }
    return rc;
  }
};

void require_seed(const RunConfig& rc, const std::string& command) {
  if (!rc.seed_given) throw ConfigError(command + ": --seed is required");
}

// Experiment commands accept --seeds, or a single --seed.
void require_seeds(RunConfig& rc, const std::string& command) {
  if (rc.seeds_given) return;
  if (!rc.seed_given) throw ConfigError(command + ": --seed or --seeds is required");
  rc.experiment.seeds = {rc.train.seed};
}

Dataset dataset_for(const RunConfig& rc, const std::string& path) {
  if (!path.empty()) return load_dataset(path);
  return make_dataset(rc.data, rc.train.seed, rc.data.noise_ratio);
}

std::string header_for(const std::string& command, const RunConfig& rc) {
  return "# dmue " + command + "\n" + render_config(rc);
}

int run(int argc, char** argv) {
  CLI::App app{"Ambiguity-aware training on synthetic noisy-label data"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset with optional label noise");
  Settings gen_s;
  gen_s.attach(gen);
  std::string gen_out;
  gen->add_option("--out", gen_out, "dataset file to write")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  Settings tr_s;
  tr_s.attach(tr);
  std::string tr_data, tr_out, tr_log;
  tr->add_option("--data", tr_data, "dataset file (default: generate from data keys)");
  tr->add_option("--out", tr_out, "checkpoint to write")->required();
  tr->add_option("--log", tr_log, "metric log to write");

  // eval
  auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint's target head");
  Settings ev_s;
  ev_s.attach(ev);
  std::string ev_model, ev_data, ev_split = "test", ev_labels = "true";
  ev->add_option("--model", ev_model, "checkpoint (full or stripped)")->required();
  ev->add_option("--data", ev_data, "dataset file (default: generate from data keys)");
  ev->add_option("--split", ev_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--labels", ev_labels, "compare against true classes or annotations")
      ->check(CLI::IsMember({"true", "annotation"}));

  // noise-bench
  auto* nb = app.add_subcommand("noise-bench", "baseline vs full model across noise ratios and seeds");
  Settings nb_s;
  nb_s.attach(nb);

  // ablate
  auto* ab = app.add_subcommand("ablate", "all eight component combinations at one noise ratio");
  Settings ab_s;
  ab_s.attach(ab);

  // inspect
  auto* in = app.add_subcommand("inspect", "mined latent distributions against the oracle");
  Settings in_s;
  in_s.attach(in);
  std::string in_model, in_data, in_split = "train";
  in->add_option("--model", in_model, "full checkpoint")->required();
  in->add_option("--data", in_data, "dataset file (default: generate from data keys)");
  in->add_option("--split", in_split, "train or test")->check(CLI::IsMember({"train", "test"}));

  // confidence
  auto* cf = app.add_subcommand("confidence", "per-sample confidence and rank within batches");
  Settings cf_s;
  cf_s.attach(cf);
  std::string cf_model, cf_data;
  std::size_t cf_batches = 10;
  cf->add_option("--model", cf_model, "full checkpoint")->required();
  cf->add_option("--data", cf_data, "dataset file (default: generate from data keys)");
  cf->add_option("--batches", cf_batches, "number of batches to score")->check(CLI::PositiveNumber);

  // mc-verify
  auto* mc = app.add_subcommand("mc-verify", "Monte Carlo check of the expected class similarity");
  MCSimilaritySpec mc_spec;
  std::string mc_out;
  mc->add_option("--alpha", mc_spec.alpha, "angle between feature and class center (radians)")->required();
  mc->add_option("--sigma", mc_spec.sigma, "angular spread")->required();
  mc->add_option("--dim", mc_spec.dim, "feature dimension");
  mc->add_option("--samples", mc_spec.samples, "number of class members");
  mc->add_option("--seed", mc_spec.seed, "random seed")->required();
  mc->add_option("--out", mc_out, "report file");

  // strip
  auto* st = app.add_subcommand("strip", "keep only the trunk and target head");
  std::string st_in, st_out;
  st->add_option("--in", st_in, "full checkpoint")->required();
  st->add_option("--out", st_out, "stripped checkpoint to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  if (gen->parsed()) {
    RunConfig rc = gen_s.resolve(gen);
    require_seed(rc, "gen-data");
    save_dataset(gen_out, dataset_for(rc, ""));
    std::cout << "wrote " << gen_out << "\n";
  } else if (tr->parsed()) {
    RunConfig rc = tr_s.resolve(tr);
    require_seed(rc, "train");
    const Dataset data = dataset_for(rc, tr_data);
    TrainResult result = train(data, rc.train);
    save_checkpoint(tr_out, result.model);
    if (!tr_log.empty()) {
      std::ofstream log(tr_log);
      if (!log) throw std::runtime_error("cannot write metric log '" + tr_log + "'");
      log << header_for("train", rc);
      write_metric_log(log, result.log);
    }
    std::cout << format_metric(result.log.back()) << "\n";
  } else if (ev->parsed()) {
    RunConfig rc = ev_s.resolve(ev);
    if (ev_data.empty()) require_seed(rc, "eval");
    const Dataset data = dataset_for(rc, ev_data);
    const TargetModel model = load_target_model(ev_model);
    const auto& split = ev_split == "train" ? data.train : data.test;
    const double acc =
        evaluate(model, split, ev_labels == "true" ? LabelSource::TrueClass : LabelSource::Annotation);
    std::cout << "accuracy=" << format_double(acc) << "\n";
  } else if (nb->parsed()) {
    RunConfig rc = nb_s.resolve(nb);
    require_seeds(rc, "noise-bench");
    const ExperimentSpec spec = ExperimentSpec::from(rc);
    const NoiseBenchResult result = run_noise_benchmark(spec);
    const std::string header = header_for("noise-bench", rc);
    write_report(spec.output_dir, "noise_bench", noise_bench_table(result), header);
    write_report(spec.output_dir, "noise_bench_cells", cells_table(result.cells), header);
    write_cell_logs(spec.output_dir, result.cells);
    write_text(std::cout, noise_bench_table(result), "");
    for (const auto& c : result.cells) {
      if (!c.ok) std::cerr << "cell " << cell_name(c) << " failed: " << c.error << "\n";
    }
  } else if (ab->parsed()) {
    RunConfig rc = ab_s.resolve(ab);
    require_seeds(rc, "ablate");
    const ExperimentSpec spec = ExperimentSpec::from(rc);
    const AblationResult result = run_ablation(spec, rc.experiment.ablation_ratio);
    const std::string header = header_for("ablate", rc);
    write_report(spec.output_dir, "ablation", ablation_table(result), header);
    write_report(spec.output_dir, "ablation_cells", cells_table(result.cells), header);
    write_cell_logs(spec.output_dir, result.cells);
    write_text(std::cout, ablation_table(result), "");
    for (const auto& c : result.cells) {
      if (!c.ok) std::cerr << "cell " << cell_name(c) << " failed: " << c.error << "\n";
    }
  } else if (in->parsed()) {
    RunConfig rc = in_s.resolve(in);
    require_seed(rc, "inspect");
    const Dataset data = dataset_for(rc, in_data);
    const DmueModel model = load_full_model(in_model);
    const auto& split = in_split == "train" ? data.train : data.test;
    const LatentReport report = inspect_latent(model.branches, split);
    std::string header = header_for("inspect", rc);
    header += "# mean_kl = " + format_double(report.mean_kl) + "\n";
    header += "# degenerate = " + std::to_string(report.degenerate) + "\n";
    header += "# flipped = " + std::to_string(report.flipped) + "\n";
    header += "# flipped_recovery = " + format_double(report.flipped_recovery) + "\n";
    header += "# argmax_agreement = " + format_double(report.argmax_agreement) + "\n";
    write_report(rc.experiment.output_dir, "latent", latent_table(report), header);
    std::cout << "mean_kl=" << format_double(report.mean_kl) << " degenerate=" << report.degenerate
              << " flipped=" << report.flipped << " flipped_recovery=" << format_double(report.flipped_recovery)
              << " argmax_agreement=" << format_double(report.argmax_agreement) << "\n";
  } else if (cf->parsed()) {
    RunConfig rc = cf_s.resolve(cf);
    require_seed(rc, "confidence");
    const Dataset data = dataset_for(rc, cf_data);
    const DmueModel model = load_full_model(cf_model);
    const auto batches = report_batches(data, rc.train.batch_size, cf_batches, rc.train.seed);
    const ConfidenceReport report = confidence_report(model, batches);
    std::string header = header_for("confidence", rc);
    header += "# mean_alpha_flipped = " + format_double(report.mean_alpha_flipped) + "\n";
    header += "# mean_alpha_clean = " + format_double(report.mean_alpha_clean) + "\n";
    write_report(rc.experiment.output_dir, "confidence", confidence_table(report), header);
    std::cout << "mean_alpha_flipped=" << format_double(report.mean_alpha_flipped)
              << " mean_alpha_clean=" << format_double(report.mean_alpha_clean) << " flipped=" << report.flipped
              << " clean=" << report.clean << "\n";
  } else if (mc->parsed()) {
    const MCResult r = mc_verify_similarity(mc_spec);
    std::string line = "empirical=" + format_double(r.empirical) + " predicted=" + format_double(r.predicted) +
                       " mean_cos_theta=" + format_double(r.mean_cos_theta) + " gap=" + format_double(r.gap);
    std::cout << line << "\n";
    if (!mc_out.empty()) {
      std::ofstream out(mc_out);
      if (!out) throw std::runtime_error("cannot write '" + mc_out + "'");
      out << "# dmue mc-verify\n# alpha = " << format_double(mc_spec.alpha)
          << "\n# sigma = " << format_double(mc_spec.sigma) << "\n# dim = " << mc_spec.dim
          << "\n# samples = " << mc_spec.samples << "\n# seed = " << mc_spec.seed << "\n"
          << line << "\n";
    }
  } else if (st->parsed()) {
    const TargetModel target = load_target_model(st_in);
    save_checkpoint(st_out, target);
    std::cout << "wrote " << st_out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
