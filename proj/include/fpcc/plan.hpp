// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace fpcc {

/// One CFS/PRO pair. The pattern constraint reads the features exported at
/// `pro_site`; the selection mask is applied to the input of the `gap`-th
/// parametric layer (dense or conv) counting back from that site.
struct PlanEntry {
  std::string pro_site;
  std::size_t gap = 1;
  std::optional<double> gamma;  ///< overrides the run-wide drop probability
};

/// Ordered CFS/PRO pairs attached to a network's hook sites.
struct InsertionPlan {
  std::vector<PlanEntry> entries;

  bool empty() const { return entries.empty(); }
  std::vector<std::string> pro_sites() const;

  /// Plan pairing every listed site with gap 1.
  static InsertionPlan at_sites(const std::vector<std::string>& sites);
};

}  // namespace fpcc
