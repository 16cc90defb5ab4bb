#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "patchstorm/ensemble.hpp"

namespace patchstorm::testing {

// Exhaustive search over size-k subsets: maximize the summed row average
// subject to covering min(k, #distinct) patch sizes; ties go to the subset
// whose members come earliest in (-row average, id) order.
inline std::vector<std::string> brute_force_pe_plus(const TransferMatrix& tm, std::size_t k) {
  const std::size_t n = tm.size();
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    if (tm.row_average[a] != tm.row_average[b]) return tm.row_average[a] > tm.row_average[b];
    return tm.ids[a] < tm.ids[b];
  });
  std::vector<std::size_t> pos(n);
  for (std::size_t r = 0; r < n; ++r) pos[rank[r]] = r;
  const std::size_t distinct = std::set<std::size_t>(tm.patch_sizes.begin(), tm.patch_sizes.end()).size();
  const std::size_t required = std::min(k, distinct);

  double best_score = -1e300;
  std::vector<std::size_t> best_key;
  std::uint32_t best_mask = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != k) continue;
    std::set<std::size_t> sizes;
    std::vector<std::size_t> key;
    for (std::size_t r = 0; r < n; ++r) {
      if (mask & (1u << rank[r])) {
        sizes.insert(tm.patch_sizes[rank[r]]);
        key.push_back(r);
      }
    }
    if (sizes.size() < required) continue;
    double score = 0.0;
    for (std::size_t r : key) score += tm.row_average[rank[r]];
    const bool better = score > best_score + 1e-12 || (std::abs(score - best_score) <= 1e-12 && key < best_key);
    if (best_key.empty() || better) {
      best_score = score;
      best_key = key;
      best_mask = mask;
    }
  }
  std::vector<std::string> out;
  for (std::size_t r = 0; r < n; ++r)
    if (best_mask & (1u << rank[r])) out.push_back(tm.ids[rank[r]]);
  return out;
}

}  // namespace patchstorm::testing
