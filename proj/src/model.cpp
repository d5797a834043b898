#include "dmue/model.hpp"

#include <cmath>
#include <map>

namespace dmue {

namespace {

std::size_t as_size(int v) { return static_cast<std::size_t>(v); }

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  std::vector<double> v(shape.size());
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from(shape, std::move(v), true);
}

class ParamLookup {
 public:
  explicit ParamLookup(std::span<const NamedParam> params) {
    for (const auto& p : params) by_name_[p.name] = p.value;
  }
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  Tensor take(const std::string& name, Shape expected) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::runtime_error("missing parameter '" + name + "'");
    if (it->second.shape() != expected) {
      throw std::runtime_error("parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                               ", configuration expects " + to_string(expected));
    }
    return it->second.detach_copy(true);
  }
  Linear linear(const std::string& prefix, std::size_t in, std::size_t out) const {
    return Linear{take(prefix + ".weight", {in, out}), take(prefix + ".bias", {1, out})};
  }
  Head head(const std::string& prefix, std::size_t in, std::size_t width, std::size_t out) const {
    return Head{linear(prefix + ".hidden", in, width), linear(prefix + ".output", width, out)};
  }

 private:
  std::map<std::string, Tensor> by_name_;
};

void push_linear(std::vector<NamedParam>& out, const std::string& prefix, const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

void push_head(std::vector<NamedParam>& out, const std::string& prefix, const Head& h) {
  push_linear(out, prefix + ".hidden", h.hidden);
  push_linear(out, prefix + ".output", h.output);
}

std::string aux_name(std::size_t k) { return "aux" + std::to_string(k); }

}  // namespace

void ModelConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
  if (trunk_width < 1 || head_width < 1) throw std::invalid_argument("layer widths must be positive");
}

// ClassIndexMap -----------------------------------------------------------

ClassIndexMap::ClassIndexMap(int num_classes, int excluded) : excluded_(excluded) {
  if (excluded < 0 || excluded >= num_classes) {
    throw std::invalid_argument("excluded class " + std::to_string(excluded) + " out of range");
  }
  for (int k = 0; k < num_classes; ++k) {
    if (k != excluded) classes_.push_back(k);
  }
}

ClassIndexMap ClassIndexMap::all(int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  ClassIndexMap m(num_classes, 0);
  m.excluded_ = -1;
  m.classes_.insert(m.classes_.begin(), 0);
  return m;
}

int ClassIndexMap::class_at(std::size_t position) const {
  if (position >= classes_.size()) throw std::invalid_argument("logit position out of range");
  return classes_[position];
}

std::size_t ClassIndexMap::position_of(int cls) const {
  if (cls == excluded_) {
    throw std::invalid_argument("class " + std::to_string(cls) + " is excluded from this branch");
  }
  const int limit = static_cast<int>(classes_.size()) + (excluded_ < 0 ? 0 : 1);
  if (cls < 0 || cls >= limit) throw std::invalid_argument("class out of range");
  return static_cast<std::size_t>(excluded_ < 0 || cls < excluded_ ? cls : cls - 1);
}

// Layers --------------------------------------------------------------------

Linear Linear::glorot(std::size_t in, std::size_t out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w = uniform_tensor({in, out}, limit, rng);
  return Linear{w, Tensor::zeros({1, out}, true)};
}

Head::Output Head::forward(const Tensor& shared) const {
  Tensor features = relu(hidden.forward(shared));
  return {features, output.forward(features)};
}

// BranchSet -------------------------------------------------------------------

BranchSet BranchSet::create(const ModelConfig& config, Rng& rng) {
  config.validate();
  BranchSet b;
  b.config_ = config;
  const auto d = as_size(config.feature_dim);
  const auto h = as_size(config.trunk_width);
  const auto f = as_size(config.head_width);
  const auto c = as_size(config.num_classes);
  b.trunk_ = Linear::glorot(d, h, rng);
  b.target_.hidden = Linear::glorot(h, f, rng);
  b.target_.output = Linear::glorot(f, c, rng);
  for (std::size_t k = 0; k < c; ++k) {
    Head head;
    head.hidden = Linear::glorot(h, f, rng);
    head.output = Linear::glorot(f, c - 1, rng);
    b.aux_.push_back(std::move(head));
  }
  return b;
}

BranchSet BranchSet::from_parameters(const ModelConfig& config, std::span<const NamedParam> params) {
  config.validate();
  ParamLookup lookup(params);
  const auto d = as_size(config.feature_dim);
  const auto h = as_size(config.trunk_width);
  const auto f = as_size(config.head_width);
  const auto c = as_size(config.num_classes);
  for (std::size_t k = 0; k < c; ++k) {
    if (!lookup.has(aux_name(k) + ".hidden.weight")) {
      throw MissingHeadsError("checkpoint has no auxiliary heads (stripped deployment model?)");
    }
  }
  BranchSet b;
  b.config_ = config;
  b.trunk_ = lookup.linear("trunk", d, h);
  b.target_ = lookup.head("target", h, f, c);
  for (std::size_t k = 0; k < c; ++k) b.aux_.push_back(lookup.head(aux_name(k), h, f, c - 1));
  return b;
}

Tensor BranchSet::trunk_forward(const Tensor& x) const {
  if (x.cols() != as_size(config_.feature_dim)) {
    throw std::invalid_argument("input has " + std::to_string(x.cols()) + " columns, model expects " +
                                std::to_string(config_.feature_dim));
  }
  return relu(trunk_.forward(x));
}

Head::Output BranchSet::branch_forward(std::size_t j, const Tensor& shared) const {
  if (j == 0) return target_.forward(shared);
  if (j > aux_.size()) throw std::invalid_argument("branch index " + std::to_string(j) + " out of range");
  return aux_[j - 1].forward(shared);
}

Head::Output BranchSet::aux_forward(int excluded_class, const Tensor& shared) const {
  if (excluded_class < 0 || excluded_class >= config_.num_classes) {
    throw std::invalid_argument("auxiliary head index out of range");
  }
  return branch_forward(static_cast<std::size_t>(excluded_class) + 1, shared);
}

ClassIndexMap BranchSet::index_map(std::size_t j) const {
  if (j > aux_.size()) throw std::invalid_argument("branch index " + std::to_string(j) + " out of range");
  if (j == 0) return ClassIndexMap::all(config_.num_classes);
  return ClassIndexMap(config_.num_classes, static_cast<int>(j - 1));
}

std::vector<NamedParam> BranchSet::target_parameters() const {
  std::vector<NamedParam> out;
  push_linear(out, "trunk", trunk_);
  push_head(out, "target", target_);
  return out;
}

std::vector<NamedParam> BranchSet::parameters() const {
  std::vector<NamedParam> out = target_parameters();
  for (std::size_t k = 0; k < aux_.size(); ++k) push_head(out, aux_name(k), aux_[k]);
  return out;
}

// UncertaintyModule -----------------------------------------------------------

UncertaintyModule UncertaintyModule::create(int num_classes, Rng& rng) {
  const auto c = as_size(num_classes);
  Linear first = Linear::glorot(2 * c, c, rng);
  Linear second = Linear::glorot(c, 1, rng);
  return UncertaintyModule{first.weight, first.bias, Tensor::scalar(0.25, true), second.weight, second.bias};
}

UncertaintyModule UncertaintyModule::zeros(int num_classes) {
  const auto c = as_size(num_classes);
  return UncertaintyModule{Tensor::zeros({2 * c, c}, true), Tensor::zeros({1, c}, true),
                           Tensor::scalar(0.25, true), Tensor::zeros({c, 1}, true),
                           Tensor::zeros({1, 1}, true)};
}

UncertaintyModule UncertaintyModule::from_parameters(int num_classes, std::span<const NamedParam> params) {
  ParamLookup lookup(params);
  const auto c = as_size(num_classes);
  return UncertaintyModule{lookup.take("uncertainty.w1", {2 * c, c}), lookup.take("uncertainty.b1", {1, c}),
                           lookup.take("uncertainty.slope", {1, 1}), lookup.take("uncertainty.w2", {c, 1}),
                           lookup.take("uncertainty.b2", {1, 1})};
}

Tensor UncertaintyModule::forward(const Tensor& sv) const {
  if (sv.cols() != w1.rows()) throw std::invalid_argument("uncertainty input must have 2C columns");
  return sigmoid(affine(prelu(affine(sv, w1, b1), slope), w2, b2));
}

std::vector<NamedParam> UncertaintyModule::parameters() const {
  return {{"uncertainty.w1", w1}, {"uncertainty.b1", b1}, {"uncertainty.slope", slope},
          {"uncertainty.w2", w2}, {"uncertainty.b2", b2}};
}

// DmueModel -------------------------------------------------------------------

DmueModel DmueModel::create(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x1417));
  BranchSet branches = BranchSet::create(config, rng);
  UncertaintyModule unc = UncertaintyModule::create(config.num_classes, rng);
  return DmueModel{std::move(branches), std::move(unc)};
}

std::vector<NamedParam> DmueModel::parameters() const {
  auto out = branches.parameters();
  for (auto& p : uncertainty.parameters()) out.push_back(std::move(p));
  return out;
}

// TargetModel -----------------------------------------------------------------

TargetModel::TargetModel(ModelConfig config, Linear trunk, Head target)
    : config_(config), trunk_(std::move(trunk)), target_(std::move(target)) {}

TargetModel TargetModel::from_parameters(const ModelConfig& config, std::span<const NamedParam> params) {
  config.validate();
  ParamLookup lookup(params);
  const auto h = as_size(config.trunk_width);
  return TargetModel(config, lookup.linear("trunk", as_size(config.feature_dim), h),
                     lookup.head("target", h, as_size(config.head_width), as_size(config.num_classes)));
}

Tensor TargetModel::logits(const Tensor& x) const {
  if (x.cols() != as_size(config_.feature_dim)) throw std::invalid_argument("input dimension mismatch");
  NoGradScope no_grad;
  return target_.forward(relu(trunk_.forward(x))).logits;
}

std::vector<int> TargetModel::predict(const Tensor& x) const { return argmax_rows(logits(x)); }

Head::Output TargetModel::aux_forward(int, const Tensor&) const {
  throw MissingHeadsError("deployment model has no auxiliary heads");
}

std::vector<NamedParam> TargetModel::parameters() const {
  std::vector<NamedParam> out;
  push_linear(out, "trunk", trunk_);
  push_head(out, "target", target_);
  return out;
}

TargetModel strip_for_deployment(const BranchSet& branches) {
  return TargetModel::from_parameters(branches.config(), branches.target_parameters());
}

// Free functions ----------------------------------------------------------------

Tensor feature_matrix(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("feature_matrix: no samples");
  const std::size_t d = samples[0].features.size();
  std::vector<double> v;
  v.reserve(samples.size() * d);
  for (const auto& s : samples) {
    if (s.features.size() != d) throw std::invalid_argument("feature_matrix: ragged features");
    v.insert(v.end(), s.features.begin(), s.features.end());
  }
  return Tensor::from({samples.size(), d}, std::move(v));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.rows(), c = logits.cols();
  auto v = logits.values();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<LatentDistribution> latent_from_logits(std::span<const Tensor> aux_logits,
                                                   std::span<const int> annotations) {
  const std::size_t c = aux_logits.size();
  std::vector<Tensor> probs;
  probs.reserve(c);
  for (const auto& l : aux_logits) {
    if (l.rows() != annotations.size() || l.cols() + 1 != c) {
      throw std::invalid_argument("latent_from_logits: auxiliary logits have the wrong shape");
    }
    probs.push_back(stop_gradient(row_softmax(l)));
  }
  std::vector<LatentDistribution> out;
  out.reserve(annotations.size());
  for (std::size_t p = 0; p < annotations.size(); ++p) {
    const int y = annotations[p];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw std::invalid_argument("annotation out of range");
    const Tensor& pr = probs[static_cast<std::size_t>(y)];
    auto row = pr.values().subspan(p * (c - 1), c - 1);
    out.push_back(LatentDistribution{std::vector<double>(row.begin(), row.end()), y});
  }
  return out;
}

std::vector<LatentDistribution> predict_latent_distribution(const BranchSet& branches,
                                                            std::span<const Sample> samples) {
  NoGradScope no_grad;
  Tensor shared = branches.trunk_forward(feature_matrix(samples));
  std::vector<Tensor> logits;
  for (int k = 0; k < branches.num_classes(); ++k) logits.push_back(branches.aux_forward(k, shared).logits);
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.annotation);
  return latent_from_logits(logits, labels);
}

Tensor one_hot(std::span<const int> annotations, int num_classes) {
  const auto c = as_size(num_classes);
  std::vector<double> v(annotations.size() * c, 0.0);
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const int y = annotations[i];
    if (y < 0 || y >= num_classes) throw std::invalid_argument("annotation out of range");
    v[i * c + static_cast<std::size_t>(y)] = 1.0;
  }
  return Tensor::from({annotations.size(), c}, std::move(v));
}

Tensor class_similarity(const Tensor& features, std::span<const int> annotations, int num_classes) {
  const std::size_t n = features.rows();
  if (annotations.size() != n) throw std::invalid_argument("class_similarity: one annotation per row");
  const auto c = as_size(num_classes);
  std::vector<double> counts(c, 0.0);
  for (int y : annotations) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("annotation out of range");
    counts[static_cast<std::size_t>(y)] += 1.0;
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] == 0.0) throw std::invalid_argument("class " + std::to_string(k) + " absent from batch");
  }
  // averaging[i][j] = 1/N_j when row i is annotated j.
  std::vector<double> avg(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(annotations[i]);
    avg[i * c + y] = 1.0 / counts[y];
  }
  Tensor unit = row_l2_normalize(features);
  Tensor cosines = matmul(unit, transpose(unit));
  return matmul(cosines, Tensor::from({n, c}, std::move(avg)));
}

Tensor estimate_confidence(const Tensor& features, std::span<const int> annotations,
                           const UncertaintyModule& module) {
  const int c = module.num_classes();
  const Tensor parts[] = {class_similarity(features, annotations, c), one_hot(annotations, c)};
  return module.forward(concat_cols(parts));
}

}  // namespace dmue
