// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "dmue/checkpoint.hpp"
#include "dmue/harness.hpp"
#include "oracles.hpp"

using namespace dmue;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " | " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

Outcome guarded(const std::function<Outcome()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

LatentDistribution random_latent(int c, int owner, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(c - 1));
  double s = 0.0;
  for (auto& v : p) s += (v = rng.uniform(0.05, 1.0));
  for (auto& v : p) v /= s;
  return {p, owner};
}

std::vector<int> covering_labels(std::size_t n, int c, Rng& rng) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i < static_cast<std::size_t>(c) ? static_cast<int>(i) : static_cast<int>(rng.index(static_cast<std::size_t>(c)));
  }
  return y;
}

// 1 -------------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int instances = 0;
  for (int c : {2, 3, 4, 7}) {
    Rng rng(4000 + static_cast<std::uint64_t>(c));
    for (int trial = 0; trial < 6; ++trial, ++instances) {
      const std::size_t n = static_cast<std::size_t>(c) + rng.index(9 - static_cast<std::size_t>(c));
      const auto y = covering_labels(n, c, rng);
      const auto cs = static_cast<std::size_t>(c);
      auto track = [&](double e) { worst = std::max(worst, e); };

      std::vector<Tensor> aux;
      for (int k = 0; k < c; ++k) aux.push_back(oracle::random_tensor({n, cs - 1}, rng, -2.0, 2.0));
      auto aux_fn = [&] { return aux_ce(route_negatives(aux, y), c); };
      for (auto& a : aux) track(oracle::gradient_error(aux_fn, a));

      Tensor z = oracle::random_tensor({n, cs}, rng, -2.0, 2.0);
      std::vector<LatentDistribution> sharpened;
      for (int lab : y) sharpened.push_back(sharpen(random_latent(c, lab, rng), 1.2));
      track(oracle::gradient_error([&] { return soft_l2(row_softmax(z), sharpened); }, z));

      Tensor ft = oracle::random_tensor({n, 6}, rng, 0.05, 1.0);
      std::vector<Tensor> fa;
      for (int k = 0; k < c; ++k) fa.push_back(oracle::random_tensor({n, 6}, rng, 0.05, 1.0));
      auto msp_fn = [&] {
        std::vector<Tensor> sims;
        for (const auto& f : fa) sims.push_back(similarity_matrix(f));
        return msp_loss(similarity_matrix(ft), sims, y);
      };
      track(oracle::gradient_error(msp_fn, ft));
      for (auto& f : fa) track(oracle::gradient_error(msp_fn, f));

      Tensor alpha = oracle::random_tensor({n, 1}, rng, 0.1, 1.0);
      auto wce_fn = [&] { return weighted_ce(z, alpha, y); };
      track(oracle::gradient_error(wce_fn, z));
      track(oracle::gradient_error(wce_fn, alpha));

      const int epoch = 1 + static_cast<int>(rng.index(12));
      auto total_fn = [&] {
        std::vector<Tensor> sims;
        for (const auto& f : fa) sims.push_back(similarity_matrix(f));
        LossTerms t{weighted_ce(z, alpha, y), soft_l2(row_softmax(z), sharpened),
                    msp_loss(similarity_matrix(ft), sims, y), aux_ce(route_negatives(aux, y), c)};
        return total_loss(t, epoch, 6, 0.5, 1000.0);
      };
      for (Tensor* x : {&z, &alpha, &ft, &fa[0], &aux[0]}) track(oracle::gradient_error(total_fn, *x));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && instances >= 20 && secs < 60.0,
          std::to_string(instances) + " instances, max rel err " + fmt(worst) + ", " + fmt(secs) + " s"};
}

// 2 -------------------------------------------------------------------------------

Outcome spot_values() {
  std::vector<std::string> bad;
  const auto s = sharpen(std::vector<double>{0.8, 0.2}, 0.5);
  if (std::abs(s[0] - 0.941176) > 1e-6 || std::abs(s[1] - 0.058824) > 1e-6) bad.push_back("sharpen");
  if (std::abs(ramp_up(3, 6) - std::exp(-0.25)) > 1e-12) bad.push_back("w_u(3,6)");
  if (std::abs(ramp_down(12, 6) - std::exp(-0.25)) > 1e-12) bad.push_back("w_d(12,6)");
  for (int b : {1, 6, 10}) {
    if (ramp_up(b, b) != 1.0 || ramp_down(b, b) != 1.0) bad.push_back("ramps at beta");
  }
  Rng rng(2);
  for (int c : {2, 3, 4, 7}) {
    const auto cs = static_cast<std::size_t>(c);
    const Tensor z = oracle::random_tensor({8, cs}, rng, -3.0, 3.0, false);
    const auto y = covering_labels(8, c, rng);
    if (std::abs(weighted_ce(z, Tensor::full({8, 1}, 1.0), y).item() - cross_entropy(z, y).item()) > 1e-12) {
      bad.push_back("wce C=" + std::to_string(c));
    }
    std::vector<Tensor> zero;
    for (int k = 0; k < c; ++k) zero.push_back(Tensor::zeros({8, cs - 1}));
    if (std::abs(aux_ce(route_negatives(zero, y), c).item() - std::log(static_cast<double>(c - 1))) > 1e-12) {
      bad.push_back("aux CE C=" + std::to_string(c));
    }
  }
  std::string detail = bad.empty() ? "all spot values within tolerance" : "mismatch:";
  for (const auto& b : bad) detail += " " + b;
  return {bad.empty(), detail};
}

// 3 -------------------------------------------------------------------------------

Outcome stop_gradient_check() {
  double aux_norm = 0.0, target_norm = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Dataset d = make_dataset(DataConfig{}, seed, 0.3);
    TrainConfig cfg;
    cfg.seed = seed;
    const DmueModel m = DmueModel::create(model_config(d, cfg), seed);
    const StepOutput out = forward_step(m, sample_batch(d, 72, seed), cfg, 1);
    backward(out.terms.soft);
    for (const auto& p : m.branches.parameters()) {
      double sq = 0.0;
      for (double g : p.value.grad()) sq += g * g;
      (p.name.rfind("aux", 0) == 0 ? aux_norm : target_norm) += sq;
    }
  }
  return {aux_norm == 0.0 && target_norm > 0.0,
          "aux-head grad norm " + fmt(std::sqrt(aux_norm)) + ", target-side grad norm " + fmt(std::sqrt(target_norm))};
}

// 4 -------------------------------------------------------------------------------

Outcome deployment_equivalence() {
  const ModelConfig mc{4, 16, 32, 16};
  const DmueModel full = DmueModel::create(mc, 77);
  const fs::path file = fs::temp_directory_path() / "dmue_acceptance_stripped.ckpt";
  save_checkpoint(file.string(), strip_for_deployment(full.branches));
  const TargetModel stripped = load_target_model(file.string());
  fs::remove(file);

  Rng rng(1234);
  std::vector<double> v(1000 * 16);
  for (auto& x : v) x = rng.normal() * 3.0;
  const Tensor x = Tensor::from({1000, 16}, v);
  NoGradScope ng;
  const Tensor a = full.branches.target_forward(full.branches.trunk_forward(x)).logits;
  const Tensor b = stripped.logits(x);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.values().size(); ++i) diff += a.values()[i] != b.values()[i] ? 1 : 0;
  return {diff == 0, "1000 inputs, " + std::to_string(diff) + " differing logits (via saved stripped checkpoint)"};
}

// 5 -------------------------------------------------------------------------------

Outcome sp_identities() {
  Rng rng(55);
  double worst_zero = 0.0, worst_scale = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const int c = 2 + static_cast<int>(rng.index(6));
    const std::size_t n = static_cast<std::size_t>(c) + rng.index(5);
    const auto y = covering_labels(n, c, rng);
    const Tensor f = oracle::random_tensor({n, 8}, rng, -1.0, 1.0, false);
    const Tensor a = similarity_matrix(f);
    std::vector<Tensor> same(static_cast<std::size_t>(c), a);
    worst_zero = std::max(worst_zero, std::abs(msp_loss(a, same, y).item()));

    std::vector<Tensor> fa;
    for (int k = 0; k < c; ++k) fa.push_back(oracle::random_tensor({n, 8}, rng, -1.0, 1.0, false));
    std::vector<double> scales;
    for (int k = 0; k <= c; ++k) scales.push_back(rng.uniform(0.01, 100.0));
    auto value = [&](bool scaled) {
      std::vector<Tensor> sims;
      for (std::size_t k = 0; k < fa.size(); ++k) sims.push_back(similarity_matrix(scaled ? scale(fa[k], scales[k + 1]) : fa[k]));
      return msp_loss(similarity_matrix(scaled ? scale(f, scales[0]) : f), sims, y).item();
    };
    worst_scale = std::max(worst_scale, std::abs(value(true) - value(false)));
  }

  std::size_t checked = 0, mismatched = 0;
  for (int c = 2; c <= 3; ++c) {
    for (std::size_t n = 1; n <= 4; ++n) {
      std::size_t combos = 1;
      for (std::size_t i = 0; i < n; ++i) combos *= static_cast<std::size_t>(c);
      for (std::size_t code = 0; code < combos; ++code) {
        std::vector<int> y(n);
        std::size_t rest = code;
        for (auto& v : y) {
          v = static_cast<int>(rest % static_cast<std::size_t>(c));
          rest /= static_cast<std::size_t>(c);
        }
        for (int cls = 0; cls < c; ++cls) {
          const Tensor m = sp_mask(y, cls);
          for (std::size_t q = 0; q < n; ++q) {
            for (std::size_t p = 0; p < n; ++p) {
              const double expected = (y[p] == cls || y[q] == cls) ? 0.0 : 1.0;
              mismatched += m.at(q, p) != expected ? 1 : 0;
              ++checked;
            }
          }
        }
      }
    }
  }
  return {worst_zero == 0.0 && worst_scale <= 1e-12 && mismatched == 0,
          "coincident " + fmt(worst_zero) + ", scaling gap " + fmt(worst_scale) + ", mask entries " +
              std::to_string(checked) + " checked, " + std::to_string(mismatched) + " mismatched"};
}

// 6 -------------------------------------------------------------------------------

Outcome monte_carlo() {
  const auto t0 = Clock::now();
  MCSimilaritySpec right;
  right.alpha = std::numbers::pi / 2;
  right.sigma = 0.5;
  right.dim = 32;
  right.samples = 100000;
  right.seed = 7;
  const MCResult r1 = mc_verify_similarity(right);
  MCSimilaritySpec sixty = right;
  sixty.alpha = std::numbers::pi / 3;
  const MCResult r2 = mc_verify_similarity(sixty);
  const double secs = seconds_since(t0);
  const double bound = 3.0 / std::sqrt(static_cast<double>(right.samples));
  return {std::abs(r1.empirical) < bound && r2.gap < 0.02 && secs < 10.0,
          "pi/2: |S| " + fmt(std::abs(r1.empirical)) + " (bound " + fmt(bound) + "); pi/3: S " + fmt(r2.empirical) +
              " vs " + fmt(r2.predicted) + ", gap " + fmt(r2.gap) + "; " + fmt(secs) + " s"};
}

// 7-9 ------------------------------------------------------------------------------

struct ReferenceRun {
  std::vector<double> baseline_acc, dmue_acc;
  double max_cell_seconds = 0.0;
  std::size_t flipped = 0, recovered = 0;
  double alpha_flipped_sum = 0.0, alpha_clean_sum = 0.0;
  std::size_t n_flipped = 0, n_clean = 0;
};

ReferenceRun reference_run() {
  ReferenceRun out;
  const DataConfig dc;  // C=4, d=16, 400 + 100 per class, pairs 0-1 and 2-3
  for (std::uint64_t seed : {1, 2, 3}) {
    const Dataset data = make_dataset(dc, seed, 0.3);
    for (bool full : {false, true}) {
      TrainConfig cfg;
      cfg.max_epoch = 30;
      cfg.seed = seed;
      cfg.use_latent = cfg.use_sp = cfg.use_confidence = full;
      const auto t0 = Clock::now();
      TrainResult r = train(data, cfg);
      out.max_cell_seconds = std::max(out.max_cell_seconds, seconds_since(t0));
      const double acc = r.log.back().test_accuracy;
      std::cout << "  seed " << seed << (full ? " full    " : " baseline") << " test accuracy " << fmt(acc)
                << std::endl;
      if (!full) {
        out.baseline_acc.push_back(acc);
        continue;
      }
      out.dmue_acc.push_back(acc);
      const LatentReport lat = inspect_latent(r.model.branches, data.train);
      for (const auto& rec : lat.records) {
        if (!rec.flipped) continue;
        ++out.flipped;
        out.recovered += rec.recovered ? 1 : 0;
      }
      const std::size_t count = (data.train.size() + 71) / 72;
      const ConfidenceReport conf = confidence_report(r.model, report_batches(data, 72, count, seed));
      out.alpha_flipped_sum += conf.mean_alpha_flipped * static_cast<double>(conf.flipped);
      out.alpha_clean_sum += conf.mean_alpha_clean * static_cast<double>(conf.clean);
      out.n_flipped += conf.flipped;
      out.n_clean += conf.clean;
    }
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// 10 ------------------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DMUE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Every regular file under dir, keyed by relative path, concatenated.
std::string tree_contents(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& f : files) out += fs::relative(f, dir).string() + "\n" + slurp(f);
  return out;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "dmue_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string small =
      " --samples-per-class 60 --test-per-class 20 --max-epoch 3 --iters-per-epoch 3 --batch-size 24";
  std::vector<std::string> bench, logs;
  std::size_t files = 0;
  const fs::path data = root / "data.ds";
  if (run_cli("gen-data --seed 5 --noise-ratio 0.3" + small + " --out " + data.string()) != 0) {
    return {false, "gen-data failed"};
  }
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = root / "bench";
    if (run_cli("noise-bench --seeds 1,2 --ratios 0.1,0.3 --jobs 2" + small + " --output-dir " + dir.string()) != 0) {
      return {false, "noise-bench failed"};
    }
    bench.push_back(tree_contents(dir));
    for (const auto& e : fs::recursive_directory_iterator(dir)) files += (run == 0 && e.is_regular_file()) ? 1 : 0;
    fs::remove_all(dir);
    const fs::path log = root / ("train" + std::to_string(run) + ".log");
    if (run_cli("train --seed 5" + small + " --data " + data.string() + " --out " + (root / "m.ckpt").string() +
                " --log " + log.string()) != 0) {
      return {false, "train failed"};
    }
    logs.push_back(slurp(log));
  }
  fs::remove_all(root);
  const bool same = bench[0] == bench[1] && logs[0] == logs[1] && !logs[0].empty();
  return {same, "noise-bench " + std::to_string(files) + " files " + (bench[0] == bench[1] ? "identical" : "DIFFER") +
                    "; train metric log " + (logs[0] == logs[1] ? "identical" : "DIFFERS")};
}

}  // namespace

int main() {
  report(1, "gradient correctness", guarded(gradient_correctness));
  report(2, "closed-form spot values", guarded(spot_values));
  report(3, "stop-gradient on the mined latent distribution", guarded(stop_gradient_check));
  report(4, "deployment equivalence", guarded(deployment_equivalence));
  report(5, "similarity-preserving identities", guarded(sp_identities));
  report(6, "similarity Monte Carlo", guarded(monte_carlo));

  std::cout << "  reference run: C=4, d=16, 400+100 per class, rho=0.3, seeds 1-3, 30 epochs" << std::endl;
  ReferenceRun ref;
  std::string ref_error;
  try {
    ref = reference_run();
  } catch (const std::exception& e) {
    ref_error = e.what();
  }
  if (!ref_error.empty()) {
    for (int id : {7, 8, 9}) report(id, "reference run", {false, "exception: " + ref_error});
  } else {
    const double base = mean_of(ref.baseline_acc), dmue = mean_of(ref.dmue_acc);
    const double margin = dmue - base;
    report(7, "desk-scale noise benchmark",
           {margin >= 0.02 && ref.max_cell_seconds < 300.0,
            "baseline " + fmt(base) + ", full " + fmt(dmue) + ", margin " + fmt(100.0 * margin) +
                " points (need >= 2), slowest cell " + fmt(ref.max_cell_seconds) + " s"});
    const double recovery = ref.flipped ? static_cast<double>(ref.recovered) / static_cast<double>(ref.flipped) : 0.0;
    report(8, "latent-truth recovery",
           {recovery > 2.0 / 3.0, "recovered " + std::to_string(ref.recovered) + "/" + std::to_string(ref.flipped) +
                                      " = " + fmt(recovery) + " (need > " + fmt(2.0 / 3.0) + ")"});
    const double af = ref.n_flipped ? ref.alpha_flipped_sum / static_cast<double>(ref.n_flipped) : 0.0;
    const double ac = ref.n_clean ? ref.alpha_clean_sum / static_cast<double>(ref.n_clean) : 0.0;
    report(9, "confidence separation",
           {ref.n_flipped > 0 && af < ac, "mean alpha flipped " + fmt(af) + " (" + std::to_string(ref.n_flipped) +
                                              ") vs clean " + fmt(ac) + " (" + std::to_string(ref.n_clean) + ")"});
  }

  report(10, "CLI determinism", guarded(cli_determinism));
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
