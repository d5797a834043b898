#pragma once

// Experiment drivers, inspection reports and the similarity Monte Carlo
// check. Every routine is deterministic given its seeds.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dmue/config.hpp"
#include "dmue/model.hpp"
#include "dmue/trainer.hpp"

namespace dmue {

struct ExperimentSpec {
  DataConfig data;
  TrainConfig train;
  std::vector<double> ratios = {0.1, 0.2, 0.3};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string output_dir;  // empty: keep results in memory only
  int jobs = 1;

  static ExperimentSpec from(const RunConfig& config);
  void validate() const;
};

struct Switches {
  bool latent = true;
  bool sp = true;
  bool confidence = true;

  std::string name() const;  // "baseline" or e.g. "latent+sp"
};

/// The eight switch combinations in reporting order.
const std::vector<Switches>& ablation_order();

struct CellResult {
  double ratio = 0.0;
  std::uint64_t seed = 0;
  Switches switches;
  bool ok = false;
  std::string error;
  double test_accuracy = 0.0;
  double flipped_recovery = 0.0;
  std::vector<MetricRecord> log;
};

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
  std::size_t failures = 0;
};

Summary summarize(std::span<const double> values, std::size_t failures = 0);

struct NoiseBenchRow {
  double ratio = 0.0;
  Summary baseline;
  Summary dmue;
};

struct NoiseBenchResult {
  std::vector<NoiseBenchRow> rows;
  std::vector<CellResult> cells;  // ratio-major, then seed, baseline before DMUE
};

/// Trains one cell on make_dataset(data, seed, ratio). Never throws for a
/// training failure; the message lands in CellResult::error.
CellResult run_cell(const ExperimentSpec& spec, double ratio, std::uint64_t seed, Switches switches);

NoiseBenchResult run_noise_benchmark(const ExperimentSpec& spec);

struct AblationRow {
  Switches switches;
  Summary accuracy;
};

struct AblationResult {
  double ratio = 0.0;
  std::vector<AblationRow> rows;
  std::vector<CellResult> cells;
};

AblationResult run_ablation(const ExperimentSpec& spec, double ratio);

// Latent inspection -------------------------------------------------------------

/// KL(p || q) with q entries floored at eps; zero entries of p contribute 0.
double kl_divergence(std::span<const double> p, std::span<const double> q, double eps = 1e-12);

struct LatentRecord {
  std::size_t index = 0;
  int annotation = 0;
  int true_class = 0;
  bool flipped = false;
  bool degenerate = false;
  std::vector<double> mined;   // over the classes other than the annotation
  std::vector<double> oracle;  // same positions
  double kl = 0.0;
  bool argmax_agrees = false;  // argmax mined == argmax oracle
  bool recovered = false;      // flipped and argmax mined == true class
};

struct LatentReport {
  std::vector<LatentRecord> records;
  double mean_kl = 0.0;  // over non-degenerate samples
  std::size_t degenerate = 0;
  std::size_t flipped = 0;
  double flipped_recovery = 0.0;
  double argmax_agreement = 0.0;  // over non-degenerate samples
};

LatentReport inspect_latent(const BranchSet& model, std::span<const Sample> samples);

// Confidence report ---------------------------------------------------------------

/// Ranks 1..N by descending value, ties broken by lower index first.
std::vector<std::size_t> rank_descending(std::span<const double> values);

struct ConfidenceRecord {
  std::size_t batch = 0;
  std::size_t position = 0;
  double alpha = 0.0;
  std::size_t rank = 0;
  bool flipped = false;
};

struct ConfidenceReport {
  std::vector<ConfidenceRecord> records;
  double mean_alpha_flipped = 0.0;
  double mean_alpha_clean = 0.0;
  std::size_t flipped = 0;
  std::size_t clean = 0;
};

ConfidenceReport confidence_report(const DmueModel& model, std::span<const Batch> batches);

/// Batches drawn with sample_batch from a seed derived for reporting.
std::vector<Batch> report_batches(const Dataset& data, std::size_t batch_size, std::size_t count,
                                  std::uint64_t seed);

// Monte Carlo ---------------------------------------------------------------------

struct MCSimilaritySpec {
  double alpha = 1.5707963267948966;
  double sigma = 0.5;
  int dim = 32;
  std::size_t samples = 100000;
  std::uint64_t seed = 1;

  void validate() const;
};

struct MCResult {
  double empirical = 0.0;       // mean <x, f>
  double mean_cos_theta = 0.0;  // Monte Carlo E[cos theta]
  double predicted = 0.0;       // cos(alpha) * mean_cos_theta
  double gap = 0.0;             // |empirical - predicted|
};

MCResult mc_verify_similarity(const MCSimilaritySpec& spec);

// Tables ---------------------------------------------------------------------------

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

Table noise_bench_table(const NoiseBenchResult& result);
Table ablation_table(const AblationResult& result);
Table cells_table(std::span<const CellResult> cells);
Table latent_table(const LatentReport& report);
Table confidence_table(const ConfidenceReport& report);

void write_tsv(std::ostream& out, const Table& table, const std::string& header);
void write_text(std::ostream& out, const Table& table, const std::string& header);

/// Writes <dir>/<stem>.tsv and <dir>/<stem>.txt, creating dir if needed.
void write_report(const std::string& dir, const std::string& stem, const Table& table, const std::string& header);

/// Writes one metric log per successful cell under <dir>/logs.
void write_cell_logs(const std::string& dir, std::span<const CellResult> cells);

std::string cell_name(const CellResult& cell);

}  // namespace dmue
