// Finite-difference sweep over every autodiff op and every composed loss.

#ifndef DEINFOREG_GRADCHECK_HPP
#define DEINFOREG_GRADCHECK_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace deinforeg {

struct GradcheckResult {
  std::string name;  // op name, or "loss:<which>[:<divisor modes>]"
  std::size_t rows = 0;
  std::size_t cols = 0;
  double error = 0.0;  // max relative error over all checked leaves
};

/// One pass over all ops and losses with shapes N, C drawn from [2, 8]
/// using `seed`. Detach is checked for an exactly-zero adjoint instead
/// (error 0 or 1).
std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed);

}  // namespace deinforeg

#endif  // DEINFOREG_GRADCHECK_HPP
