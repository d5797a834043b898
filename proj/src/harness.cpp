#include "dmue/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dmue/format.hpp"

namespace dmue {

namespace {

void fail(const std::string& what) { throw std::invalid_argument(what); }

// Runs task(i) for i in [0, n) on up to `jobs` threads. Results go into
// caller-owned slots, so the output does not depend on scheduling.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) task(i);
    });
  }
  for (auto& t : pool) t.join();
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] > v[best]) best = k;
  }
  return best;
}

std::string percent(const Summary& s) {
  if (s.count == 0) return "failed";
  return format_fixed(100.0 * s.mean, 2) + " +- " + format_fixed(100.0 * s.stddev, 2);
}

std::string ratio_text(double r) { return format_double(r); }

Summary summarize_cells(std::span<const CellResult> cells) {
  std::vector<double> acc;
  std::size_t failures = 0;
  for (const auto& c : cells) {
    if (c.ok) {
      acc.push_back(c.test_accuracy);
    } else {
      ++failures;
    }
  }
  return summarize(acc, failures);
}

}  // namespace

// Spec -------------------------------------------------------------------------------

ExperimentSpec ExperimentSpec::from(const RunConfig& config) {
  ExperimentSpec spec;
  spec.data = config.data;
  spec.train = config.train;
  spec.ratios = config.experiment.ratios;
  spec.seeds = config.experiment.seeds;
  spec.output_dir = config.experiment.output_dir;
  spec.jobs = config.experiment.jobs;
  return spec;
}

void ExperimentSpec::validate() const {
  if (ratios.empty()) fail("experiment needs at least one noise ratio");
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) fail("noise ratios must lie in [0, 1]");
  }
  if (seeds.empty()) fail("experiment needs at least one seed");
  if (jobs < 1) fail("jobs must be >= 1");
  train.validate(data.classes);
  data.to_spec(seeds.front());
}

std::string Switches::name() const {
  if (!latent && !sp && !confidence) return "baseline";
  std::string s;
  auto add = [&](bool on, const char* part) {
    if (!on) return;
    if (!s.empty()) s += '+';
    s += part;
  };
  add(latent, "latent");
  add(sp, "sp");
  add(confidence, "confidence");
  return s;
}

const std::vector<Switches>& ablation_order() {
  static const std::vector<Switches> order = {
      {false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
      {true, true, false},   {false, true, true},  {true, false, true},  {true, true, true},
  };
  return order;
}

Summary summarize(std::span<const double> values, std::size_t failures) {
  Summary s;
  s.count = values.size();
  s.failures = failures;
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

// Cells ---------------------------------------------------------------------------------

CellResult run_cell(const ExperimentSpec& spec, double ratio, std::uint64_t seed, Switches switches) {
  CellResult cell;
  cell.ratio = ratio;
  cell.seed = seed;
  cell.switches = switches;
  try {
    const Dataset data = make_dataset(spec.data, seed, ratio);
    TrainConfig config = spec.train;
    config.seed = seed;
    config.use_latent = switches.latent;
    config.use_sp = switches.sp;
    config.use_confidence = switches.confidence;
    TrainResult result = train(data, config);
    cell.log = std::move(result.log);
    cell.test_accuracy = cell.log.back().test_accuracy;
    cell.flipped_recovery = cell.log.back().flipped_recovery;
    cell.ok = true;
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error = e.what();
  }
  return cell;
}

NoiseBenchResult run_noise_benchmark(const ExperimentSpec& spec) {
  spec.validate();
  const Switches base{false, false, false};
  const Switches full{true, true, true};
  struct Job {
    double ratio;
    std::uint64_t seed;
    Switches switches;
  };
  std::vector<Job> jobs;
  for (double r : spec.ratios) {
    for (auto s : spec.seeds) {
      jobs.push_back({r, s, base});
      jobs.push_back({r, s, full});
    }
  }
  NoiseBenchResult out;
  out.cells.resize(jobs.size());
  parallel_for(jobs.size(), spec.jobs, [&](std::size_t i) {
    out.cells[i] = run_cell(spec, jobs[i].ratio, jobs[i].seed, jobs[i].switches);
  });
  const std::size_t per_ratio = 2 * spec.seeds.size();
  for (std::size_t r = 0; r < spec.ratios.size(); ++r) {
    std::vector<CellResult> b, d;
    for (std::size_t k = 0; k < per_ratio; ++k) {
      const auto& cell = out.cells[r * per_ratio + k];
      (k % 2 == 0 ? b : d).push_back(cell);
    }
    out.rows.push_back({spec.ratios[r], summarize_cells(b), summarize_cells(d)});
  }
  return out;
}

AblationResult run_ablation(const ExperimentSpec& spec, double ratio) {
  spec.validate();
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail("ablation ratio must lie in [0, 1]");
  const auto& order = ablation_order();
  AblationResult out;
  out.ratio = ratio;
  const std::size_t n_seeds = spec.seeds.size();
  out.cells.resize(order.size() * n_seeds);
  parallel_for(out.cells.size(), spec.jobs, [&](std::size_t i) {
    out.cells[i] = run_cell(spec, ratio, spec.seeds[i % n_seeds], order[i / n_seeds]);
  });
  for (std::size_t v = 0; v < order.size(); ++v) {
    std::span<const CellResult> group(out.cells.data() + v * n_seeds, n_seeds);
    out.rows.push_back({order[v], summarize_cells(group)});
  }
  return out;
}

// Latent inspection ----------------------------------------------------------------------

double kl_divergence(std::span<const double> p, std::span<const double> q, double eps) {
  if (p.size() != q.size()) fail("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * std::log(p[i] / std::max(q[i], eps));
  }
  return kl;
}

LatentReport inspect_latent(const BranchSet& model, std::span<const Sample> samples) {
  if (samples.empty()) fail("inspect_latent: no samples");
  for (const auto& s : samples) {
    if (s.true_posterior.size() != static_cast<std::size_t>(model.num_classes())) {
      fail("inspect_latent: samples must carry true posteriors over every class");
    }
  }
  const auto mined = predict_latent_distribution(model, samples);
  LatentReport report;
  double kl_sum = 0.0, agree = 0.0, recovered = 0.0;
  std::size_t scored = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    const OracleLatent oracle = oracle_latent(s);
    const ClassIndexMap map(model.num_classes(), s.annotation);
    LatentRecord rec;
    rec.index = i;
    rec.annotation = s.annotation;
    rec.true_class = s.true_class;
    rec.flipped = s.flipped;
    rec.degenerate = oracle.degenerate;
    rec.mined = mined[i].probs;
    rec.oracle = oracle.latent.probs;
    const std::size_t best = argmax(rec.mined);
    rec.argmax_agrees = best == argmax(rec.oracle);
    rec.recovered = s.flipped && map.class_at(best) == s.true_class;
    if (rec.degenerate) {
      ++report.degenerate;
    } else {
      rec.kl = kl_divergence(rec.oracle, rec.mined);
      kl_sum += rec.kl;
      agree += rec.argmax_agrees ? 1.0 : 0.0;
      ++scored;
    }
    if (s.flipped) {
      ++report.flipped;
      recovered += rec.recovered ? 1.0 : 0.0;
    }
    report.records.push_back(std::move(rec));
  }
  if (scored > 0) {
    report.mean_kl = kl_sum / static_cast<double>(scored);
    report.argmax_agreement = agree / static_cast<double>(scored);
  }
  if (report.flipped > 0) report.flipped_recovery = recovered / static_cast<double>(report.flipped);
  return report;
}

// Confidence ---------------------------------------------------------------------------------

std::vector<std::size_t> rank_descending(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<std::size_t> rank(values.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;
  return rank;
}

ConfidenceReport confidence_report(const DmueModel& model, std::span<const Batch> batches) {
  NoGradScope no_grad;
  ConfidenceReport report;
  double flipped_sum = 0.0, clean_sum = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Batch& batch = batches[b];
    const auto labels = batch.annotations();
    const Tensor shared = model.branches.trunk_forward(feature_matrix(batch.samples));
    const Tensor features = model.branches.target_forward(shared).features;
    const Tensor alpha = estimate_confidence(features, labels, model.uncertainty);
    std::vector<double> a(alpha.values().begin(), alpha.values().end());
    const auto ranks = rank_descending(a);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const bool flipped = batch.samples[i].flipped;
      report.records.push_back({b, i, a[i], ranks[i], flipped});
      if (flipped) {
        flipped_sum += a[i];
        ++report.flipped;
      } else {
        clean_sum += a[i];
        ++report.clean;
      }
    }
  }
  if (report.flipped > 0) report.mean_alpha_flipped = flipped_sum / static_cast<double>(report.flipped);
  if (report.clean > 0) report.mean_alpha_clean = clean_sum / static_cast<double>(report.clean);
  return report;
}

std::vector<Batch> report_batches(const Dataset& data, std::size_t batch_size, std::size_t count,
                                  std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0xC0F1));
  std::vector<Batch> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_batch(data, batch_size, rng));
  return out;
}

// Monte Carlo -----------------------------------------------------------------------------------

void MCSimilaritySpec::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail("sigma must be positive");
  if (samples < 1) fail("sample count must be >= 1");
  if (dim < 2) fail("dimension must be >= 2");
  if (!std::isfinite(alpha)) fail("alpha must be finite");
}

namespace {

std::vector<double> random_unit(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (!(norm > 0.0));
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Random unit vector orthogonal to the unit vector c.
std::vector<double> random_orthogonal(Rng& rng, const std::vector<double>& c) {
  for (;;) {
    std::vector<double> w = random_unit(rng, c.size());
    const double proj = dot(w, c);
    double norm = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= proj * c[i];
      norm += w[i] * w[i];
    }
    if (norm > 1e-12) {
      norm = std::sqrt(norm);
      for (auto& x : w) x /= norm;
      return w;
    }
  }
}

}  // namespace

MCResult mc_verify_similarity(const MCSimilaritySpec& spec) {
  spec.validate();
  const auto n = static_cast<std::size_t>(spec.dim);
  Rng rng(Rng::derive(spec.seed, 0x3C5));
  const std::vector<double> c = random_unit(rng, n);
  const std::vector<double> u = random_orthogonal(rng, c);
  std::vector<double> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = std::cos(spec.alpha) * c[i] + std::sin(spec.alpha) * u[i];

  const double pi = std::acos(-1.0);
  double inner_sum = 0.0, cos_sum = 0.0;
  std::vector<double> x(n);
  for (std::size_t m = 0; m < spec.samples; ++m) {
    double theta = 0.0;
    do {
      theta = spec.sigma * rng.normal();
    } while (std::abs(theta) > pi);
    const std::vector<double> w = random_orthogonal(rng, c);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t i = 0; i < n; ++i) x[i] = ct * c[i] + st * w[i];
    inner_sum += dot(x, f);
    cos_sum += ct;
  }
  MCResult r;
  const double m = static_cast<double>(spec.samples);
  r.empirical = inner_sum / m;
  r.mean_cos_theta = cos_sum / m;
  r.predicted = std::cos(spec.alpha) * r.mean_cos_theta;
  r.gap = std::abs(r.empirical - r.predicted);
  return r;
}

// Tables ------------------------------------------------------------------------------------------

Table noise_bench_table(const NoiseBenchResult& result) {
  Table t;
  t.columns = {"ratio", "baseline_mean", "baseline_std", "dmue_mean", "dmue_std", "runs", "failures", "baseline_pct",
               "dmue_pct"};
  for (const auto& row : result.rows) {
    t.rows.push_back({ratio_text(row.ratio), format_double(row.baseline.mean), format_double(row.baseline.stddev),
                      format_double(row.dmue.mean), format_double(row.dmue.stddev),
                      std::to_string(row.baseline.count + row.dmue.count),
                      std::to_string(row.baseline.failures + row.dmue.failures), percent(row.baseline),
                      percent(row.dmue)});
  }
  return t;
}

Table ablation_table(const AblationResult& result) {
  Table t;
  t.columns = {"latent", "sp", "confidence", "mean", "std", "runs", "failures", "pct"};
  auto mark = [](bool b) { return std::string(b ? "on" : "off"); };
  for (const auto& row : result.rows) {
    t.rows.push_back({mark(row.switches.latent), mark(row.switches.sp), mark(row.switches.confidence),
                      format_double(row.accuracy.mean), format_double(row.accuracy.stddev),
                      std::to_string(row.accuracy.count), std::to_string(row.accuracy.failures),
                      percent(row.accuracy)});
  }
  return t;
}

Table cells_table(std::span<const CellResult> cells) {
  Table t;
  t.columns = {"ratio", "seed", "variant", "status", "test_accuracy", "flipped_recovery", "error"};
  for (const auto& c : cells) {
    t.rows.push_back({ratio_text(c.ratio), std::to_string(c.seed), c.switches.name(), c.ok ? "ok" : "failed",
                      c.ok ? format_double(c.test_accuracy) : "-", c.ok ? format_double(c.flipped_recovery) : "-",
                      c.ok ? "-" : c.error});
  }
  return t;
}

Table latent_table(const LatentReport& report) {
  Table t;
  t.columns = {"index", "annotation", "true_class", "flipped", "degenerate", "mined", "oracle", "kl", "agree",
               "recovered"};
  auto list = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += format_fixed(v[i], 6);
    }
    return s;
  };
  for (const auto& r : report.records) {
    t.rows.push_back({std::to_string(r.index), std::to_string(r.annotation), std::to_string(r.true_class),
                      r.flipped ? "1" : "0", r.degenerate ? "1" : "0", list(r.mined), list(r.oracle),
                      r.degenerate ? "-" : format_double(r.kl), r.argmax_agrees ? "1" : "0",
                      r.recovered ? "1" : "0"});
  }
  return t;
}

Table confidence_table(const ConfidenceReport& report) {
  Table t;
  t.columns = {"batch", "position", "alpha", "rank", "flipped"};
  for (const auto& r : report.records) {
    t.rows.push_back({std::to_string(r.batch), std::to_string(r.position), format_double(r.alpha),
                      std::to_string(r.rank), r.flipped ? "1" : "0"});
  }
  return t;
}

void write_tsv(std::ostream& out, const Table& table, const std::string& header) {
  out << header;
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "\t" : "") << table.columns[i];
  out << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "\t" : "") << row[i];
    out << '\n';
  }
}

void write_text(std::ostream& out, const Table& table, const std::string& header) {
  std::vector<std::size_t> width(table.columns.size(), 0);
  for (std::size_t i = 0; i < table.columns.size(); ++i) width[i] = table.columns[i].size();
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size() && i < width.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += "  ";
      s += cells[i];
      if (i + 1 < cells.size()) s.append(width[i] - cells[i].size(), ' ');
    }
    out << s << '\n';
  };
  out << header;
  line(table.columns);
  for (const auto& row : table.rows) line(row);
}

void write_report(const std::string& dir, const std::string& stem, const Table& table, const std::string& header) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base = fs::path(dir) / stem;
  std::ofstream tsv(base.string() + ".tsv");
  std::ofstream txt(base.string() + ".txt");
  if (!tsv || !txt) throw std::runtime_error("cannot write report files under '" + dir + "'");
  write_tsv(tsv, table, header);
  write_text(txt, table, header);
}

std::string cell_name(const CellResult& cell) {
  return cell.switches.name() + "_r" + ratio_text(cell.ratio) + "_s" + std::to_string(cell.seed);
}

void write_cell_logs(const std::string& dir, std::span<const CellResult> cells) {
  namespace fs = std::filesystem;
  const fs::path logs = fs::path(dir) / "logs";
  fs::create_directories(logs);
  for (const auto& c : cells) {
    if (!c.ok) continue;
    std::ofstream out(logs / (cell_name(c) + ".log"));
    if (!out) throw std::runtime_error("cannot write metric log for " + cell_name(c));
    write_metric_log(out, c.log);
  }
}

}  // namespace dmue
