#include "dsdm/mask.hpp"

#include <numeric>
#include <stdexcept>

#include "dsdm/common.hpp"

namespace dsdm {

SubsetMask SubsetMask::from_indices(std::size_t pool_size,
                                    std::span<const std::size_t> indices) {
  SubsetMask mask(pool_size);
  for (std::size_t i : indices) {
    if (i >= pool_size) throw Error("mask index out of range: " + std::to_string(i));
    mask.bits_[i] = 1;
  }
  return mask;
}

std::size_t SubsetMask::popcount() const {
  return static_cast<std::size_t>(std::accumulate(bits_.begin(), bits_.end(), std::size_t{0}));
}

std::vector<std::size_t> SubsetMask::indices() const {
  std::vector<std::size_t> out;
  out.reserve(bits_.size());
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i]) out.push_back(i);
  }
  return out;
}

Eigen::VectorXd SubsetMask::as_vector() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(bits_.size()));
  for (std::size_t i = 0; i < bits_.size(); ++i) v[static_cast<Eigen::Index>(i)] = bits_[i];
  return v;
}

}  // namespace dsdm
