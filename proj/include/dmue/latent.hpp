#pragma once

#include <vector>

namespace dmue {

/// Probability vector over the C-1 classes other than the annotated one,
/// in ascending class order (see ClassIndexMap).
struct LatentDistribution {
  std::vector<double> probs;
  int owner_class = 0;
};

}  // namespace dmue
