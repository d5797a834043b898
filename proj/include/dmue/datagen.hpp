#pragma once

// Synthetic ambiguous classification data with exact class posteriors.
//
// Classes are Gaussian blobs with equal priors. Placing some centers close
// together ("confusable pairs") gives samples whose true posterior spreads
// over more than one class, which is the oracle for mined latent
// distributions. Class indices are 0-based throughout.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dmue/latent.hpp"
#include "dmue/random.hpp"

namespace dmue {

struct SyntheticSpec {
  int num_classes = 4;
  int feature_dim = 16;
  std::vector<std::vector<double>> class_centers;  // num_classes x feature_dim
  std::vector<double> spread;                      // per-class standard deviation
  std::size_t samples_per_class = 400;
  std::size_t test_per_class = 100;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
};

struct CenterLayout {
  double separation = 4.0;          // distance between ordinary centers
  double confusable_distance = 1.5; // distance inside a confusable pair
  std::vector<std::pair<int, int>> confusable_pairs;
};

/// Fills class_centers from a layout. Ordinary centers sit on scaled basis
/// directions (random unit directions when feature_dim < num_classes); the
/// second member of each confusable pair is pulled toward the first.
void place_centers(SyntheticSpec& spec, const CenterLayout& layout);

/// C=4, d=16, 400 train + 100 test per class, pairs (0,1) and (2,3).
SyntheticSpec reference_spec(std::uint64_t seed);

struct Sample {
  std::vector<double> features;
  int annotation = 0;
  int true_class = 0;
  std::vector<double> true_posterior;
  bool flipped = false;
};

struct Dataset {
  int num_classes = 0;
  int feature_dim = 0;
  std::uint64_t seed = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct Batch {
  std::vector<Sample> samples;
  /// class_index_sets[j]: positions in samples whose annotation is j.
  std::vector<std::vector<std::size_t>> class_index_sets;

  std::size_t size() const { return samples.size(); }
  std::size_t count(int cls) const { return class_index_sets.at(static_cast<std::size_t>(cls)).size(); }
  std::vector<int> annotations() const;
};

/// Exact class posterior of x under the equal-prior mixture described by `spec`.
std::vector<double> class_posterior(const SyntheticSpec& spec, const std::vector<double>& x);

Dataset generate(const SyntheticSpec& spec);

/// Flips exactly floor(ratio * train size) training labels, chosen
/// uniformly, each to a uniform class other than its true one.
Dataset inject_noise(const Dataset& data, double ratio, std::uint64_t seed);

/// Stratified draw: one sample from every annotated class, the rest
/// uniform without replacement, then shuffled.
Batch sample_batch(const Dataset& data, std::size_t batch_size, Rng& rng);
Batch sample_batch(const Dataset& data, std::size_t batch_size, std::uint64_t seed);
Batch make_batch(std::vector<Sample> samples, int num_classes);

struct OracleLatent {
  LatentDistribution latent;
  bool degenerate = false;  // posterior entirely on the annotation; latent is uniform
};

OracleLatent oracle_latent(const Sample& sample);

// Line-oriented text format. Header:
//   dmue-dataset 1 classes=C dim=d train=N test=M seed=S
// then N train lines and M test lines, each
//   x_1 .. x_d annotation true_class p_1 .. p_C flipped
void write_dataset(std::ostream& out, const Dataset& data);
Dataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

}  // namespace dmue
