#include "klp/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace klp {

double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                  const Tensor& analytic_grad, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
    if (!x.same_shape(analytic_grad))
        throw std::invalid_argument("shape error: gradient shape " + analytic_grad.shape_str() +
                                    " does not match input " + x.shape_str());
    Tensor probe = x;
    double max_err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite function evaluation");
        const double fd = (fp - fm) / (2.0 * eps);
        const double an = analytic_grad[i];
        const double denom = std::max(1.0, std::max(std::fabs(fd), std::fabs(an)));
        max_err = std::max(max_err, std::fabs(fd - an) / denom);
    }
    return max_err;
}

} // namespace klp
