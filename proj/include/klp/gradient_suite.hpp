#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace klp {

/// One registered analytic gradient: run(seed) builds a random instance
/// and returns the grad_check max relative error at eps = 1e-5.
struct GradCheckCase {
    std::string name;
    std::function<double(std::uint64_t seed)> run;
};

/// Every analytic gradient in the repo: CIoU, kd_loss confidence/offset,
/// KL, the matched link loss through each encoder layer and head, and the
/// CSFA mixing matrices.
const std::vector<GradCheckCase>& gradient_suite();

/// Deliberately corrupted gradient (2x scale); grad_check must flag it.
double run_fault_injection(std::uint64_t seed);

} // namespace klp
