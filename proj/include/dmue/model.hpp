#pragma once

// Multi-branch classifier: a shared trunk, one C-way target head and C
// auxiliary (C-1)-way heads, plus the pairwise uncertainty module.
//
// Branch numbering: branch 0 is the target head; branch k+1 is the
// auxiliary head that never sees class k (0-based classes).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmue/datagen.hpp"
#include "dmue/diffcore.hpp"
#include "dmue/latent.hpp"
#include "dmue/random.hpp"

namespace dmue {

struct ModelConfig {
  int num_classes = 4;
  int feature_dim = 16;
  int trunk_width = 32;
  int head_width = 16;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

class MissingHeadsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedParam {
  std::string name;
  Tensor value;
};

/// Maps logit positions of an auxiliary head to class indices: the classes
/// other than the excluded one, ascending.
class ClassIndexMap {
 public:
  ClassIndexMap(int num_classes, int excluded);
  /// Identity map of the target head (no excluded class; excluded() is -1).
  static ClassIndexMap all(int num_classes);

  int excluded() const { return excluded_; }
  std::size_t width() const { return classes_.size(); }
  const std::vector<int>& classes() const { return classes_; }
  int class_at(std::size_t position) const;
  /// Throws std::invalid_argument for the excluded class.
  std::size_t position_of(int cls) const;

 private:
  int excluded_;
  std::vector<int> classes_;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear glorot(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const { return affine(x, weight, bias); }
};

struct Head {
  Linear hidden;  // trunk_width -> head_width, relu
  Linear output;  // head_width -> logits

  struct Output {
    Tensor features;  // semantic features before the classifier
    Tensor logits;
  };
  Output forward(const Tensor& shared) const;
};

class BranchSet {
 public:
  static BranchSet create(const ModelConfig& config, Rng& rng);
  /// Rebuilds from named tensors as produced by parameters(); throws
  /// MissingHeadsError if auxiliary heads are absent.
  static BranchSet from_parameters(const ModelConfig& config, std::span<const NamedParam> params);

  const ModelConfig& config() const { return config_; }
  int num_classes() const { return config_.num_classes; }

  Tensor trunk_forward(const Tensor& x) const;
  /// j = 0 for the target head, j = k + 1 for the head excluding class k.
  Head::Output branch_forward(std::size_t j, const Tensor& shared) const;
  Head::Output target_forward(const Tensor& shared) const { return branch_forward(0, shared); }
  Head::Output aux_forward(int excluded_class, const Tensor& shared) const;
  ClassIndexMap index_map(std::size_t j) const;

  std::vector<NamedParam> parameters() const;
  std::vector<NamedParam> target_parameters() const;

 private:
  ModelConfig config_;
  Linear trunk_;
  Head target_;
  std::vector<Head> aux_;
};

/// Two affine layers with a PReLU between and a sigmoid on top:
/// 2C -> C -> 1.
struct UncertaintyModule {
  Tensor w1;     // 2C x C
  Tensor b1;     // 1 x C
  Tensor slope;  // 1 x 1
  Tensor w2;     // C x 1
  Tensor b2;     // 1 x 1

  static UncertaintyModule create(int num_classes, Rng& rng);
  static UncertaintyModule zeros(int num_classes);
  static UncertaintyModule from_parameters(int num_classes, std::span<const NamedParam> params);
  int num_classes() const { return static_cast<int>(b1.cols()); }
  /// sv: N x 2C; returns N x 1 confidences in (0, 1).
  Tensor forward(const Tensor& sv) const;
  std::vector<NamedParam> parameters() const;
};

/// Everything trained together.
struct DmueModel {
  BranchSet branches;
  UncertaintyModule uncertainty;

  static DmueModel create(const ModelConfig& config, std::uint64_t seed);
  std::vector<NamedParam> parameters() const;
};

/// Deployment model: trunk and target head only.
class TargetModel {
 public:
  TargetModel(ModelConfig config, Linear trunk, Head target);
  static TargetModel from_parameters(const ModelConfig& config, std::span<const NamedParam> params);

  const ModelConfig& config() const { return config_; }
  Tensor logits(const Tensor& x) const;
  /// argmax per row, ties to the lowest class index.
  std::vector<int> predict(const Tensor& x) const;
  /// Always throws: auxiliary heads are not part of a deployed model.
  Head::Output aux_forward(int excluded_class, const Tensor& shared) const;
  std::vector<NamedParam> parameters() const;

 private:
  ModelConfig config_;
  Linear trunk_;
  Head target_;
};

TargetModel strip_for_deployment(const BranchSet& branches);

/// Row-stacks sample features into an N x d tensor.
Tensor feature_matrix(std::span<const Sample> samples);

/// Row-wise argmax with ties to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

/// Latent distribution of sample p from the head excluding its own
/// annotation: row p of softmax(aux_logits[y_p]) behind a gradient barrier.
/// aux_logits[k] holds the full-batch logits of the head excluding class k.
std::vector<LatentDistribution> latent_from_logits(std::span<const Tensor> aux_logits,
                                                   std::span<const int> annotations);

std::vector<LatentDistribution> predict_latent_distribution(const BranchSet& branches,
                                                            std::span<const Sample> samples);

/// S (N x C): S(a, j) is the mean cosine similarity between feature row a
/// and every row annotated j, the anchor included. Every class must occur.
Tensor class_similarity(const Tensor& features, std::span<const int> annotations, int num_classes);

/// One-hot rows (N x C), constant.
Tensor one_hot(std::span<const int> annotations, int num_classes);

/// Confidence per sample (N x 1) from concat(S, one_hot(y)).
Tensor estimate_confidence(const Tensor& features, std::span<const int> annotations,
                           const UncertaintyModule& module);

}  // namespace dmue
