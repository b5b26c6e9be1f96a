#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "cil/tensor.hpp"

namespace cil {

/// Raw CHW image bytes as stored in a dataset record.
using Pixels = std::vector<std::uint8_t>;

struct BudgetPolicy {
  enum class Kind { per_class, total };
  Kind kind = Kind::per_class;
  std::size_t amount = 20;

  static BudgetPolicy per_class(std::size_t r) { return {Kind::per_class, r}; }
  static BudgetPolicy total(std::size_t r) { return {Kind::total, r}; }
  bool operator==(const BudgetPolicy&) const = default;
};

/// PerClass(r) -> r; Total(r) -> floor(r / seen_classes). The remainder is dropped.
std::size_t per_class_budget(const BudgetPolicy& policy, std::size_t seen_classes);

/// Greedy mean matching: step k picks the unchosen row minimizing
/// ||mu - (sum_chosen + f) / k||, ties to the lowest index. `features` is
/// [n, d] and expected L2-normalized per row.
std::vector<std::size_t> herding_select(const Tensor& features, std::size_t budget);

class ExemplarStore {
 public:
  explicit ExemplarStore(BudgetPolicy policy = {}) : policy_(policy) {}

  /// Inserts the herded lists of new classes, then trims every class tail to
  /// per_class_budget(policy, seen_classes). Throws ContractError if a class is
  /// already stored.
  void add_and_trim(std::map<std::uint16_t, std::vector<Pixels>> new_classes,
                    std::size_t seen_classes);

  /// Restores a class list verbatim (checkpoint loading).
  void restore(std::uint16_t class_id, std::vector<Pixels> exemplars);

  const BudgetPolicy& policy() const noexcept { return policy_; }
  const std::map<std::uint16_t, std::vector<Pixels>>& classes() const noexcept { return classes_; }
  const std::vector<Pixels>& exemplars(std::uint16_t class_id) const;
  std::size_t count(std::uint16_t class_id) const;
  std::size_t total() const noexcept;
  bool empty() const noexcept { return classes_.empty(); }
  /// True when every stored class holds the same number of exemplars.
  bool balanced() const noexcept;

  bool operator==(const ExemplarStore&) const = default;

 private:
  BudgetPolicy policy_;
  std::map<std::uint16_t, std::vector<Pixels>> classes_;
};

}  // namespace cil
