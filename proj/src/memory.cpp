#include "cil/memory.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cil/error.hpp"

namespace cil {

namespace {
constexpr double kTieTolerance = 1e-12;
}

std::size_t per_class_budget(const BudgetPolicy& policy, std::size_t seen_classes) {
  if (seen_classes == 0) throw ContractError("per_class_budget: no classes seen");
  if (policy.kind == BudgetPolicy::Kind::per_class) return policy.amount;
  return policy.amount / seen_classes;
}

std::vector<std::size_t> herding_select(const Tensor& features, std::size_t budget) {
  if (features.rank() != 2) throw DimensionError("herding_select: features must be [n, d]");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (n == 0) throw ContractError("herding_select: empty feature list");
  if (budget == 0) throw ContractError("herding_select: budget must be at least 1");

  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += features[i * d + j];
  for (double& v : mu) v /= static_cast<double>(n);

  const std::size_t steps = std::min(budget, n);
  std::vector<double> running(d, 0.0);
  std::vector<bool> taken(n, false);
  std::vector<std::size_t> order;
  order.reserve(steps);
  for (std::size_t k = 1; k <= steps; ++k) {
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mu[j] - (running[j] + features[i * d + j]) / static_cast<double>(k);
        dist += diff * diff;
      }
      // Near-equal distances (exact ties up to roundoff) go to the lower index.
      if (best == n || dist < best_dist - kTieTolerance) {
        best_dist = dist;
        best = i;
      }
    }
    taken[best] = true;
    order.push_back(best);
    for (std::size_t j = 0; j < d; ++j) running[j] += features[best * d + j];
  }
  return order;
}

void ExemplarStore::add_and_trim(std::map<std::uint16_t, std::vector<Pixels>> new_classes,
                                 std::size_t seen_classes) {
  for (const auto& [id, _] : new_classes) {
    if (classes_.count(id)) {
      throw ContractError("exemplar store already holds class " + std::to_string(id));
    }
  }
  for (auto& [id, list] : new_classes) classes_.emplace(id, std::move(list));
  const std::size_t budget = per_class_budget(policy_, seen_classes);
  for (auto& [_, list] : classes_)
    if (list.size() > budget) list.resize(budget);
}

void ExemplarStore::restore(std::uint16_t class_id, std::vector<Pixels> exemplars) {
  if (classes_.count(class_id)) {
    throw ContractError("exemplar store already holds class " + std::to_string(class_id));
  }
  classes_.emplace(class_id, std::move(exemplars));
}

const std::vector<Pixels>& ExemplarStore::exemplars(std::uint16_t class_id) const {
  auto it = classes_.find(class_id);
  if (it == classes_.end()) throw ContractError("no exemplars for class " + std::to_string(class_id));
  return it->second;
}

std::size_t ExemplarStore::count(std::uint16_t class_id) const {
  auto it = classes_.find(class_id);
  return it == classes_.end() ? 0 : it->second.size();
}

std::size_t ExemplarStore::total() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, list] : classes_) n += list.size();
  return n;
}

bool ExemplarStore::balanced() const noexcept {
  if (classes_.empty()) return true;
  const std::size_t first = classes_.begin()->second.size();
  for (const auto& [_, list] : classes_)
    if (list.size() != first) return false;
  return true;
}

}  // namespace cil
