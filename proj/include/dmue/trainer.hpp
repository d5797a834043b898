#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dmue/datagen.hpp"
#include "dmue/losses.hpp"
#include "dmue/model.hpp"

namespace dmue {

/// Step decay: initial * factor^(number of decay epochs <= epoch).
struct LrSchedule {
  double initial = 1e-3;
  std::vector<int> decay_epochs = {10, 20};
  double factor = 0.1;

  double at(int epoch) const;
};

struct TrainConfig {
  double sharpen_t = 1.2;
  double omega = 0.5;
  double gamma = 1000.0;
  int beta = 6;

  int max_epoch = 40;
  int iters_per_epoch = 0;  // 0: ceil(train size / batch size)
  std::size_t batch_size = 72;
  LrSchedule lr;

  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  bool decay_uncertainty = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int trunk_width = 32;
  int head_width = 16;

  std::uint64_t seed = 1;
  bool checked = false;

  // Component switches. All three off trains the target head alone with
  // plain cross-entropy.
  bool use_latent = true;
  bool use_sp = true;
  bool use_confidence = true;

  bool confidence_grad_to_features = true;
  bool renormalize_soft = false;
  bool aux_drop_empty_heads = false;

  bool baseline() const { return !use_latent && !use_sp && !use_confidence; }
  void validate(int num_classes) const;
};

/// Adam over a fixed parameter list, with coupled (L2 added to the
/// gradient) or decoupled weight decay.
class Adam {
 public:
  Adam(std::vector<NamedParam> params, double beta1, double beta2, double eps, double weight_decay,
       bool decoupled, std::vector<bool> decay_mask = {});

  void zero_grad();
  void step(double lr);
  std::size_t steps() const { return steps_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<bool> decay_mask_;
  double beta1_, beta2_, eps_, weight_decay_;
  bool decoupled_;
  std::size_t steps_ = 0;
};

struct StepOutput {
  LossTerms terms;
  Tensor total;
  Tensor alpha;                            // N x 1 (ones when confidence is off)
  Tensor target_logits;                    // N x C
  std::vector<LatentDistribution> latent;  // unsharpened, empty in baseline mode
};

/// Forward pass of one training iteration at the given epoch.
StepOutput forward_step(const DmueModel& model, const Batch& batch, const TrainConfig& config, int epoch);

struct MetricRecord {
  int epoch = 0;
  int iteration = 0;  // global iteration count at the end of the epoch
  double weighted_ce = 0.0;
  double soft = 0.0;
  double similarity = 0.0;
  double aux_ce = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double mean_alpha = 0.0;
  double flipped_recovery = 0.0;
};

struct TrainResult {
  DmueModel model;
  std::vector<MetricRecord> log;
};

/// Runs max_epoch epochs (epoch counter starting at 1), one record per epoch.
TrainResult train(const Dataset& data, const TrainConfig& config);
/// Same, starting from the given model (its tensors are updated in place).
TrainResult train(const Dataset& data, const TrainConfig& config, DmueModel model);

enum class LabelSource { Annotation, TrueClass };

double evaluate(const TargetModel& model, std::span<const Sample> split, LabelSource source = LabelSource::Annotation);
double evaluate(const BranchSet& model, std::span<const Sample> split, LabelSource source = LabelSource::Annotation);

/// key=value pairs separated by spaces, one record per line.
std::string format_metric(const MetricRecord& r);
MetricRecord parse_metric(const std::string& line);
void write_metric_log(std::ostream& out, std::span<const MetricRecord> log);
/// Skips blank lines and '#' comment lines.
std::vector<MetricRecord> read_metric_log(std::istream& in);

ModelConfig model_config(const Dataset& data, const TrainConfig& config);

}  // namespace dmue
