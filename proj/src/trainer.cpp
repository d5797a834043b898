#include "dmue/trainer.hpp"

#include <cmath>
#include <map>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "dmue/format.hpp"

namespace dmue {

namespace {

void fail(const std::string& what) { throw std::invalid_argument(what); }

void require_finite(const Tensor& t, const char* component) {
  if (!t.defined()) return;
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + component + " loss");
  }
}

// Runs a loss computation, renaming any numeric failure after the component.
template <class F>
Tensor component(const char* name, bool checked, F&& compute) {
  try {
    Tensor t = compute();
    if (checked) require_finite(t, name);
    return t;
  } catch (const NumericError& e) {
    throw NumericError(std::string(name) + " loss: " + e.what());
  }
}

}  // namespace

double LrSchedule::at(int epoch) const {
  double lr = initial;
  for (int d : decay_epochs) {
    if (epoch >= d) lr *= factor;
  }
  return lr;
}

void TrainConfig::validate(int num_classes) const {
  if (!(sharpen_t > 0.0)) fail("sharpen temperature must be positive");
  if (beta < 1) fail("beta must be >= 1");
  if (max_epoch < 1) fail("max_epoch must be >= 1");
  if (iters_per_epoch < 0) fail("iters_per_epoch must be non-negative");
  if (batch_size < static_cast<std::size_t>(num_classes)) fail("batch size must be at least the number of classes");
  if (!(lr.initial >= 0.0)) fail("learning rate must be non-negative");
  if (weight_decay < 0.0) fail("weight decay must be non-negative");
  if (trunk_width < 1 || head_width < 1) fail("layer widths must be positive");
}

ModelConfig model_config(const Dataset& data, const TrainConfig& config) {
  return ModelConfig{data.num_classes, data.feature_dim, config.trunk_width, config.head_width};
}

// Adam ------------------------------------------------------------------------

Adam::Adam(std::vector<NamedParam> params, double beta1, double beta2, double eps, double weight_decay,
           bool decoupled, std::vector<bool> decay_mask)
    : params_(std::move(params)),
      decay_mask_(std::move(decay_mask)),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay),
      decoupled_(decoupled) {
  if (decay_mask_.empty()) decay_mask_.assign(params_.size(), true);
  if (decay_mask_.size() != params_.size()) throw std::invalid_argument("Adam: decay mask size mismatch");
  for (const auto& p : params_) {
    m_.emplace_back(p.value.values().size(), 0.0);
    v_.emplace_back(p.value.values().size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void Adam::step(double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(beta1_, t);
  const double c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k].value;
    auto theta = p.mutable_values();
    auto grad = p.grad();
    const double wd = decay_mask_[k] ? weight_decay_ : 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad.empty() ? 0.0 : grad[i];
      if (!decoupled_) g += wd * theta[i];
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
      const double mhat = m_[k][i] / c1;
      const double vhat = v_[k][i] / c2;
      double update = mhat / (std::sqrt(vhat) + eps_);
      if (decoupled_) update += wd * theta[i];
      theta[i] -= lr * update;
    }
  }
}

// Forward step -----------------------------------------------------------------

StepOutput forward_step(const DmueModel& model, const Batch& batch, const TrainConfig& config, int epoch) {
  const BranchSet& net = model.branches;
  const int c = net.num_classes();
  const std::vector<int> labels = batch.annotations();
  const bool checked = config.checked;

  StepOutput out;
  Tensor shared = net.trunk_forward(feature_matrix(batch.samples));
  Head::Output target = net.target_forward(shared);
  out.target_logits = target.logits;

  if (config.baseline()) {
    out.terms.weighted_ce = component("weighted_ce", checked, [&] { return cross_entropy(target.logits, labels); });
    out.alpha = Tensor::full({batch.size(), 1}, 1.0);
    out.total = out.terms.weighted_ce;
    return out;
  }

  std::vector<Head::Output> aux;
  std::vector<Tensor> aux_logits;
  for (int k = 0; k < c; ++k) {
    aux.push_back(net.aux_forward(k, shared));
    aux_logits.push_back(aux.back().logits);
  }

  out.terms.aux_ce = component("aux_ce", checked, [&] {
    auto routes = route_negatives(aux_logits, labels);
    return aux_ce(routes, c, config.aux_drop_empty_heads);
  });

  out.latent = latent_from_logits(aux_logits, labels);
  if (config.use_latent) {
    out.terms.soft = component("soft", checked, [&] {
      std::vector<LatentDistribution> sharpened;
      sharpened.reserve(out.latent.size());
      for (const auto& l : out.latent) sharpened.push_back(sharpen(l, config.sharpen_t));
      return config.renormalize_soft ? soft_l2_renormalized(target.logits, sharpened)
                                     : soft_l2(row_softmax(target.logits), sharpened);
    });
  }

  if (config.use_sp) {
    out.terms.similarity = component("similarity", checked, [&] {
      std::vector<Tensor> aux_sim;
      for (const auto& a : aux) aux_sim.push_back(similarity_matrix(a.features));
      return msp_loss(similarity_matrix(target.features), aux_sim, labels);
    });
  }

  if (config.use_confidence) {
    out.alpha = component("confidence", checked, [&] {
      const Tensor f = config.confidence_grad_to_features ? target.features : stop_gradient(target.features);
      return estimate_confidence(f, labels, model.uncertainty);
    });
  } else {
    out.alpha = Tensor::full({batch.size(), 1}, 1.0);
  }
  out.terms.weighted_ce =
      component("weighted_ce", checked, [&] { return weighted_ce(target.logits, out.alpha, labels); });

  out.total = component("total", checked,
                        [&] { return total_loss(out.terms, epoch, config.beta, config.omega, config.gamma); });
  return out;
}

// Training loop -------------------------------------------------------------------

TrainResult train(const Dataset& data, const TrainConfig& config) {
  return train(data, config, DmueModel::create(model_config(data, config), Rng::derive(config.seed, 0x1A17)));
}

TrainResult train(const Dataset& data, const TrainConfig& config, DmueModel model) {
  config.validate(data.num_classes);
  if (data.train.empty()) fail("training split is empty");
  if (model.branches.config() != model_config(data, config)) fail("model does not match data and config");
  CheckedScope checked_scope(config.checked);

  const int iters = config.iters_per_epoch > 0
                        ? config.iters_per_epoch
                        : static_cast<int>((data.train.size() + config.batch_size - 1) / config.batch_size);

  std::vector<NamedParam> params = model.parameters();
  std::vector<bool> decay_mask;
  for (const auto& p : params) {
    decay_mask.push_back(config.decay_uncertainty || p.name.rfind("uncertainty.", 0) != 0);
  }
  Adam opt(params, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay,
           config.decoupled_weight_decay, decay_mask);

  Rng batch_rng(Rng::derive(config.seed, 0xBA7C));
  std::vector<MetricRecord> log;
  int global_iter = 0;
  for (int epoch = 1; epoch <= config.max_epoch; ++epoch) {
    const double lr = config.lr.at(epoch);
    MetricRecord rec;
    rec.epoch = epoch;
    double correct = 0.0, seen = 0.0, alpha_sum = 0.0;
    double flipped = 0.0, recovered = 0.0;
    for (int it = 0; it < iters; ++it) {
      Batch batch = sample_batch(data, config.batch_size, batch_rng);
      StepOutput step = forward_step(model, batch, config, epoch);
      opt.zero_grad();
      backward(step.total);
      opt.step(lr);
      ++global_iter;

      auto value = [](const Tensor& t) { return t.defined() ? t.item() : 0.0; };
      rec.weighted_ce += value(step.terms.weighted_ce);
      rec.soft += value(step.terms.soft);
      rec.similarity += value(step.terms.similarity);
      rec.aux_ce += value(step.terms.aux_ce);
      rec.total += step.total.item();

      const auto pred = argmax_rows(step.target_logits);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const Sample& s = batch.samples[i];
        correct += pred[i] == s.annotation ? 1.0 : 0.0;
        seen += 1.0;
        alpha_sum += step.alpha.at(i, 0);
        if (s.flipped && !step.latent.empty()) {
          flipped += 1.0;
          const auto& probs = step.latent[i].probs;
          std::size_t best = 0;
          for (std::size_t k = 1; k < probs.size(); ++k) {
            if (probs[k] > probs[best]) best = k;
          }
          const ClassIndexMap map(data.num_classes, s.annotation);
          recovered += map.class_at(best) == s.true_class ? 1.0 : 0.0;
        }
      }
    }
    const double n_it = static_cast<double>(iters);
    rec.iteration = global_iter;
    rec.weighted_ce /= n_it;
    rec.soft /= n_it;
    rec.similarity /= n_it;
    rec.aux_ce /= n_it;
    rec.total /= n_it;
    rec.train_accuracy = correct / seen;
    rec.mean_alpha = alpha_sum / seen;
    rec.flipped_recovery = flipped > 0.0 ? recovered / flipped : 0.0;
    rec.test_accuracy = data.test.empty() ? 0.0 : evaluate(model.branches, data.test, LabelSource::TrueClass);
    if (config.checked && !std::isfinite(rec.total)) throw NumericError("non-finite total loss");
    log.push_back(rec);
  }
  return TrainResult{std::move(model), std::move(log)};
}

// Evaluation ------------------------------------------------------------------------

namespace {

double accuracy(const std::vector<int>& pred, std::span<const Sample> split, LabelSource source) {
  double correct = 0.0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const int label = source == LabelSource::Annotation ? split[i].annotation : split[i].true_class;
    correct += pred[i] == label ? 1.0 : 0.0;
  }
  return correct / static_cast<double>(split.size());
}

}  // namespace

double evaluate(const TargetModel& model, std::span<const Sample> split, LabelSource source) {
  if (split.empty()) fail("evaluate: empty split");
  return accuracy(model.predict(feature_matrix(split)), split, source);
}

double evaluate(const BranchSet& model, std::span<const Sample> split, LabelSource source) {
  if (split.empty()) fail("evaluate: empty split");
  NoGradScope no_grad;
  Tensor logits = model.target_forward(model.trunk_forward(feature_matrix(split))).logits;
  return accuracy(argmax_rows(logits), split, source);
}

// Metric log ------------------------------------------------------------------------

std::string format_metric(const MetricRecord& r) {
  std::string s;
  s += "epoch=" + std::to_string(r.epoch);
  s += " iteration=" + std::to_string(r.iteration);
  s += " weighted_ce=" + format_double(r.weighted_ce);
  s += " soft=" + format_double(r.soft);
  s += " similarity=" + format_double(r.similarity);
  s += " aux_ce=" + format_double(r.aux_ce);
  s += " total=" + format_double(r.total);
  s += " train_accuracy=" + format_double(r.train_accuracy);
  s += " test_accuracy=" + format_double(r.test_accuracy);
  s += " mean_alpha=" + format_double(r.mean_alpha);
  s += " flipped_recovery=" + format_double(r.flipped_recovery);
  return s;
}

MetricRecord parse_metric(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream in(line);
  for (std::string tok; in >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("metric token without '=': " + tok);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("metric record missing ") + key);
    return it->second;
  };
  MetricRecord r;
  r.epoch = static_cast<int>(parse_int(get("epoch")));
  r.iteration = static_cast<int>(parse_int(get("iteration")));
  r.weighted_ce = parse_double(get("weighted_ce"));
  r.soft = parse_double(get("soft"));
  r.similarity = parse_double(get("similarity"));
  r.aux_ce = parse_double(get("aux_ce"));
  r.total = parse_double(get("total"));
  r.train_accuracy = parse_double(get("train_accuracy"));
  r.test_accuracy = parse_double(get("test_accuracy"));
  r.mean_alpha = parse_double(get("mean_alpha"));
  r.flipped_recovery = parse_double(get("flipped_recovery"));
  return r;
}

void write_metric_log(std::ostream& out, std::span<const MetricRecord> log) {
  for (const auto& r : log) out << format_metric(r) << '\n';
}

std::vector<MetricRecord> read_metric_log(std::istream& in) {
  std::vector<MetricRecord> out;
  for (std::string line; std::getline(in, line);) {
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    out.push_back(parse_metric(std::string(body)));
  }
  return out;
}

}  // namespace dmue
