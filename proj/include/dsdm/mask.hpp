#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace dsdm {

/// Characteristic vector 1_S of a subset S of the candidate pool.
class SubsetMask {
 public:
  SubsetMask() = default;
  explicit SubsetMask(std::size_t pool_size, bool value = false)
      : bits_(pool_size, value ? 1 : 0) {}

  static SubsetMask full(std::size_t pool_size) { return SubsetMask(pool_size, true); }
  static SubsetMask from_indices(std::size_t pool_size, std::span<const std::size_t> indices);

  std::size_t size() const { return bits_.size(); }
  bool test(std::size_t i) const { return bits_.at(i) != 0; }
  void set(std::size_t i, bool value = true) { bits_.at(i) = value ? 1 : 0; }
  std::size_t popcount() const;

  /// Selected positions in ascending order.
  std::vector<std::size_t> indices() const;
  /// 0/1 vector, for regressions and inner products.
  Eigen::VectorXd as_vector() const;

  bool operator==(const SubsetMask&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

}  // namespace dsdm
