#include "dmue/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dmue/model.hpp"

namespace dmue {

namespace {

void fail(const std::string& what) { throw std::invalid_argument(what); }

// -(sum of log-probabilities at the labelled positions); mask picks them.
Tensor picked_log_prob_sum(const Tensor& log_probs, const Tensor& pick_mask) {
  return sum(masked_select(log_probs, pick_mask));
}

Tensor label_mask(std::size_t rows, std::size_t cols, const std::vector<std::size_t>& positions) {
  std::vector<double> m(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) m[i * cols + positions[i]] = 1.0;
  return Tensor::from({rows, cols}, std::move(m));
}

}  // namespace

// Auxiliary CE ------------------------------------------------------------------

std::vector<BranchRoute> route_negatives(std::span<const Tensor> aux_logits, std::span<const int> annotations) {
  const int c = static_cast<int>(aux_logits.size());
  std::vector<BranchRoute> routes;
  routes.reserve(aux_logits.size());
  for (int k = 0; k < c; ++k) {
    const Tensor& logits = aux_logits[static_cast<std::size_t>(k)];
    if (logits.rows() != annotations.size()) fail("route_negatives: logits rows must match annotations");
    std::vector<std::size_t> rows;
    BranchRoute route;
    route.excluded_class = k;
    for (std::size_t p = 0; p < annotations.size(); ++p) {
      if (annotations[p] != k) {
        rows.push_back(p);
        route.labels.push_back(annotations[p]);
      }
    }
    if (!rows.empty()) route.logits = select_rows(logits, rows);
    routes.push_back(std::move(route));
  }
  return routes;
}

Tensor aux_ce(std::span<const BranchRoute> routes, int num_classes, bool drop_empty_heads) {
  if (routes.size() != static_cast<std::size_t>(num_classes)) fail("aux_ce: need one route per class");
  std::vector<Tensor> per_head;
  std::size_t non_empty = 0;
  for (const auto& route : routes) {
    if (route.labels.empty()) continue;
    ++non_empty;
    ClassIndexMap map(num_classes, route.excluded_class);
    if (route.logits.rows() != route.labels.size() || route.logits.cols() != map.width()) {
      fail("aux_ce: logits for head " + std::to_string(route.excluded_class) + " have the wrong shape");
    }
    std::vector<std::size_t> positions;
    for (int y : route.labels) {
      if (y == route.excluded_class) {
        fail("aux_ce: a sample annotated " + std::to_string(y) + " was routed to the head excluding it");
      }
      positions.push_back(map.position_of(y));
    }
    Tensor mask = label_mask(route.labels.size(), map.width(), positions);
    const double n = static_cast<double>(route.labels.size());
    per_head.push_back(scale(picked_log_prob_sum(row_log_softmax(route.logits), mask), -1.0 / n));
  }
  if (per_head.empty()) return Tensor::scalar(0.0);
  const double denom = drop_empty_heads ? static_cast<double>(non_empty) : static_cast<double>(num_classes);
  Tensor total = per_head[0];
  for (std::size_t i = 1; i < per_head.size(); ++i) total = add(total, per_head[i]);
  return scale(total, 1.0 / denom);
}

// Sharpen -----------------------------------------------------------------------

std::vector<double> sharpen(std::span<const double> probs, double temperature) {
  if (!(temperature > 0.0)) fail("sharpen temperature must be positive");
  if (probs.empty()) fail("sharpen: empty distribution");
  const double inv_t = 1.0 / temperature;
  std::vector<double> out(probs.size());
  double z = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] < 0.0) fail("sharpen: negative probability");
    out[i] = std::pow(probs[i], inv_t);
    z += out[i];
  }
  if (!(z > 0.0)) fail("sharpen: all-zero distribution");
  for (auto& v : out) v /= z;
  return out;
}

LatentDistribution sharpen(const LatentDistribution& latent, double temperature) {
  return LatentDistribution{sharpen(latent.probs, temperature), latent.owner_class};
}

// Soft L2 -----------------------------------------------------------------------

namespace {

// Mask selecting negative-class positions row by row, and the latent
// targets flattened in the same order.
std::pair<Tensor, Tensor> negative_targets(Shape shape, std::span<const LatentDistribution> latents) {
  const std::size_t n = shape.rows, c = shape.cols;
  if (latents.size() != n) fail("soft loss: one latent distribution per row is required");
  if (c < 2) fail("soft loss: needs at least two classes");
  std::vector<double> mask(n * c, 1.0);
  std::vector<double> target;
  target.reserve(n * (c - 1));
  for (std::size_t p = 0; p < n; ++p) {
    const auto& lat = latents[p];
    if (lat.probs.size() != c - 1) fail("soft loss: latent distribution must have C-1 entries");
    if (lat.owner_class < 0 || static_cast<std::size_t>(lat.owner_class) >= c) fail("soft loss: bad owner class");
    mask[p * c + static_cast<std::size_t>(lat.owner_class)] = 0.0;
    target.insert(target.end(), lat.probs.begin(), lat.probs.end());
  }
  return {Tensor::from(shape, std::move(mask)), Tensor::row(std::move(target))};
}

}  // namespace

Tensor soft_l2(const Tensor& target_probs, std::span<const LatentDistribution> latents) {
  auto [mask, target] = negative_targets(target_probs.shape(), latents);
  const double count = static_cast<double>(target.cols());
  return scale(frobenius_norm_sq(sub(masked_select(target_probs, mask), target)), 1.0 / count);
}

Tensor soft_l2_renormalized(const Tensor& target_logits, std::span<const LatentDistribution> latents) {
  auto [mask, target] = negative_targets(target_logits.shape(), latents);
  const std::size_t n = target_logits.rows(), c = target_logits.cols();
  Tensor negatives = reshape(masked_select(target_logits, mask), {n, c - 1});
  Tensor probs = reshape(row_softmax(negatives), {1, n * (c - 1)});
  return scale(frobenius_norm_sq(sub(probs, target)), 1.0 / static_cast<double>(n * (c - 1)));
}

// Similarity preserving -----------------------------------------------------------

Tensor similarity_matrix(const Tensor& features) {
  return row_l2_normalize(matmul(features, transpose(features)));
}

Tensor sp_mask(std::span<const int> annotations, int cls) {
  const std::size_t n = annotations.size();
  if (n == 0) fail("sp_mask: empty batch");
  std::vector<double> m(n * n, 1.0);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t p = 0; p < n; ++p) {
      if (annotations[p] == cls || annotations[q] == cls) m[q * n + p] = 0.0;
    }
  }
  return Tensor::from({n, n}, std::move(m));
}

Tensor msp_loss(const Tensor& target_similarity, std::span<const Tensor> aux_similarity,
                std::span<const Tensor> masks, std::span<const std::size_t> counts) {
  const std::size_t c = aux_similarity.size();
  if (c == 0 || masks.size() != c || counts.size() != c) fail("msp_loss: need one matrix, mask and count per class");
  const Shape shape = target_similarity.shape();
  if (shape.rows != shape.cols) fail("msp_loss: similarity matrices must be square");
  Tensor total;
  for (std::size_t i = 0; i < c; ++i) {
    if (aux_similarity[i].shape() != shape || masks[i].shape() != shape) fail("msp_loss: matrix shape mismatch");
    if (counts[i] == 0) fail("msp_loss: class " + std::to_string(i) + " leaves no eligible samples (N_i = 0)");
    Tensor diff = sub(mul(masks[i], target_similarity), mul(masks[i], aux_similarity[i]));
    const double ni = static_cast<double>(counts[i]);
    Tensor term = scale(frobenius_norm_sq(diff), 1.0 / (ni * ni));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(c));
}

Tensor msp_loss(const Tensor& target_similarity, std::span<const Tensor> aux_similarity,
                std::span<const int> annotations) {
  std::vector<Tensor> masks;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < aux_similarity.size(); ++i) {
    const int cls = static_cast<int>(i);
    masks.push_back(sp_mask(annotations, cls));
    std::size_t n = 0;
    for (int y : annotations) n += (y != cls) ? 1 : 0;
    counts.push_back(n);
  }
  return msp_loss(target_similarity, aux_similarity, masks, counts);
}

// Weighted CE -----------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> annotations) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (annotations.size() != n) fail("cross_entropy: one annotation per row");
  std::vector<std::size_t> positions;
  for (int y : annotations) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) fail("cross_entropy: annotation out of range");
    positions.push_back(static_cast<std::size_t>(y));
  }
  Tensor mask = label_mask(n, c, positions);
  return scale(picked_log_prob_sum(row_log_softmax(logits), mask), -1.0 / static_cast<double>(n));
}

Tensor weighted_ce(const Tensor& logits, const Tensor& alpha, std::span<const int> annotations) {
  if (alpha.rows() != logits.rows() || alpha.cols() != 1) fail("weighted_ce: alpha must be N x 1");
  return cross_entropy(scale_rows(logits, alpha), annotations);
}

// Ramps ---------------------------------------------------------------------------

double ramp_up(int epoch, int beta) {
  if (beta < 1) fail("ramp threshold beta must be >= 1");
  if (epoch < 0) fail("epoch must be non-negative");
  if (epoch > beta) return 1.0;
  const double t = 1.0 - static_cast<double>(epoch) / static_cast<double>(beta);
  return std::exp(-t * t);
}

double ramp_down(int epoch, int beta) {
  if (beta < 1) fail("ramp threshold beta must be >= 1");
  if (epoch < 0) fail("epoch must be non-negative");
  if (epoch <= beta) return 1.0;
  const double t = 1.0 - static_cast<double>(beta) / static_cast<double>(epoch);
  return std::exp(-t * t);
}

Tensor total_loss(const LossTerms& terms, int epoch, int beta, double omega, double gamma) {
  const double wu = ramp_up(epoch, beta);
  const double wd = ramp_down(epoch, beta);
  auto plus = [](Tensor acc, const Tensor& term, double weight) {
    if (!term.defined()) return acc;
    Tensor t = weight == 1.0 ? term : scale(term, weight);
    return acc.defined() ? add(acc, t) : t;
  };
  Tensor target_side = plus(plus(plus(Tensor{}, terms.weighted_ce, 1.0), terms.soft, omega), terms.similarity, gamma);
  Tensor total = plus(Tensor{}, target_side, wu);
  total = plus(total, terms.aux_ce, wd);
  return total.defined() ? total : Tensor::scalar(0.0);
}

}  // namespace dmue
