#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "longiseg/network.hpp"

namespace longiseg {

/// Spatial indices sampled per tapped layer; the same plan is applied to
/// every timepoint of a pair.
struct PatchIndexPlan {
  std::map<int, std::vector<Index3>> indices;
  std::uint64_t rng_seed = 0;

  const std::vector<Index3>& at(int layer_id) const;
};

/// M indices per layer, uniform without replacement when the extent holds at
/// least M locations and with replacement otherwise. Each layer draws from its
/// own stream derived from (seed, layer id).
PatchIndexPlan make_plan(const std::map<int, Index3>& extents, int M, std::uint64_t rng_seed);

/// Batch positions of `indices` inside item `batch_item`.
std::vector<Position> plan_positions(const std::vector<Index3>& indices, int batch_item);

/// [M, C_l] feature rows of one batch item at the plan's indices for layer_id.
Var gather(const FeatureTapSet& feats, const PatchIndexPlan& plan, int layer_id, int batch_item = 0);

}  // namespace longiseg
