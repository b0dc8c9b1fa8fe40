#include "longiseg/sampling.hpp"

#include <numeric>

#include "longiseg/rng.hpp"

namespace longiseg {

const std::vector<Index3>& PatchIndexPlan::at(int layer_id) const {
  auto it = indices.find(layer_id);
  require(it != indices.end(), ErrorKind::invalid, "plan has no layer " + std::to_string(layer_id));
  return it->second;
}

PatchIndexPlan make_plan(const std::map<int, Index3>& extents, int M, std::uint64_t rng_seed) {
  require(!extents.empty(), ErrorKind::invalid, "make_plan: no layers");
  require(M >= 1, ErrorKind::invalid, "make_plan: M must be >= 1");
  PatchIndexPlan plan;
  plan.rng_seed = rng_seed;
  for (const auto& [layer, e] : extents) {
    require(e[0] >= 1 && e[1] >= 1 && e[2] >= 1, ErrorKind::shape, "make_plan: empty layer extent");
    const std::size_t total = static_cast<std::size_t>(e[0]) * e[1] * e[2];
    Rng rng(derive_seed({rng_seed, static_cast<std::uint64_t>(layer)}));
    std::vector<std::size_t> flat(static_cast<std::size_t>(M));
    if (total >= static_cast<std::size_t>(M)) {
      // Partial Fisher-Yates.
      std::vector<std::size_t> pool(total);
      std::iota(pool.begin(), pool.end(), std::size_t{0});
      for (int m = 0; m < M; ++m) {
        const std::size_t j = m + rng.below(total - m);
        std::swap(pool[m], pool[j]);
        flat[m] = pool[m];
      }
    } else {
      for (auto& f : flat) f = rng.below(total);
    }
    auto& out = plan.indices[layer];
    out.reserve(flat.size());
    for (std::size_t f : flat) {
      const int d = static_cast<int>(f % e[2]);
      const int h = static_cast<int>((f / e[2]) % e[1]);
      const int w = static_cast<int>(f / (static_cast<std::size_t>(e[2]) * e[1]));
      out.push_back({w, h, d});
    }
  }
  return plan;
}

std::vector<Position> plan_positions(const std::vector<Index3>& indices, int batch_item) {
  std::vector<Position> pos;
  pos.reserve(indices.size());
  for (const auto& i : indices) pos.push_back({batch_item, i[0], i[1], i[2]});
  return pos;
}

Var gather(const FeatureTapSet& feats, const PatchIndexPlan& plan, int layer_id, int batch_item) {
  auto it = feats.find(layer_id);
  require(it != feats.end(), ErrorKind::invalid, "gather: layer " + std::to_string(layer_id) + " not tapped");
  return ops::gather_positions(it->second, plan_positions(plan.at(layer_id), batch_item));
}

}  // namespace longiseg
