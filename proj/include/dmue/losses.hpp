#pragma once

// Loss terms of the multi-branch objective and the epoch ramps that
// combine them. All functions are pure in their inputs.

#include <cstddef>
#include <span>
#include <vector>

#include "dmue/diffcore.hpp"
#include "dmue/latent.hpp"

namespace dmue {

// Auxiliary cross-entropy -------------------------------------------------------

/// Rows routed to one auxiliary head: logits (n x (C-1)) and the class
/// annotation of every row. No row may carry the excluded class.
struct BranchRoute {
  int excluded_class = 0;
  Tensor logits;
  std::vector<int> labels;
};

/// Splits full-batch auxiliary logits (aux_logits[k] for the head excluding
/// class k) into per-head routes holding the rows not annotated k.
std::vector<BranchRoute> route_negatives(std::span<const Tensor> aux_logits, std::span<const int> annotations);

/// (1/C) sum over heads of the head's mean cross-entropy. A head with no
/// rows contributes 0; with drop_empty_heads the divisor counts only
/// non-empty heads.
Tensor aux_ce(std::span<const BranchRoute> routes, int num_classes, bool drop_empty_heads = false);

// Latent distributions ----------------------------------------------------------

/// p_i^(1/T) / sum_j p_j^(1/T).
std::vector<double> sharpen(std::span<const double> probs, double temperature);
LatentDistribution sharpen(const LatentDistribution& latent, double temperature);

/// Squared deviation between target-head probabilities (N x C softmax) at
/// each sample's negative classes and its latent distribution, averaged
/// over N(C-1) entries. Target probabilities are used as-is.
Tensor soft_l2(const Tensor& target_probs, std::span<const LatentDistribution> latents);

/// Variant comparing against the target head's distribution renormalized
/// over the negative classes (softmax of the negative-class logits).
Tensor soft_l2_renormalized(const Tensor& target_logits, std::span<const LatentDistribution> latents);

// Similarity preserving -----------------------------------------------------------

/// Row j = (f_j f^T) / ||f_j f^T||.
Tensor similarity_matrix(const Tensor& features);

/// m(q, p) = 0 when y_p == cls or y_q == cls, else 1.
Tensor sp_mask(std::span<const int> annotations, int cls);

/// (1/C) sum_i ||M_i * A_target - M_i * A_aux_i||_F^2 / N_i^2, with N_i the
/// number of rows not annotated i.
Tensor msp_loss(const Tensor& target_similarity, std::span<const Tensor> aux_similarity,
                std::span<const Tensor> masks, std::span<const std::size_t> counts);
/// Builds masks and counts from annotations.
Tensor msp_loss(const Tensor& target_similarity, std::span<const Tensor> aux_similarity,
                std::span<const int> annotations);

// Weighted cross-entropy ------------------------------------------------------------

/// -(1/N) sum_i log softmax(alpha_i z_i)[y_i]; alpha is N x 1.
Tensor weighted_ce(const Tensor& logits, const Tensor& alpha, std::span<const int> annotations);
/// Plain mean cross-entropy.
Tensor cross_entropy(const Tensor& logits, std::span<const int> annotations);

// Ramps and total ---------------------------------------------------------------------

/// exp(-(1 - e/beta)^2) for e <= beta, else 1.
double ramp_up(int epoch, int beta);
/// 1 for e <= beta, else exp(-(1 - beta/e)^2).
double ramp_down(int epoch, int beta);

struct LossTerms {
  Tensor weighted_ce;  // undefined tensors count as zero
  Tensor soft;
  Tensor similarity;
  Tensor aux_ce;
};

/// w_u(e) (L_wce + omega L_soft + gamma L_sp) + w_d(e) L_aux.
Tensor total_loss(const LossTerms& terms, int epoch, int beta, double omega, double gamma);

}  // namespace dmue
