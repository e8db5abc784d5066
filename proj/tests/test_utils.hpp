#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

#include "boxcal/rng.hpp"
#include "boxcal/tensor.hpp"

namespace boxcal::testutil {

/// Uniformly distributed random rotation (quaternion method).
inline Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Vector4d q;
    do {
        q = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    } while (q.squaredNorm() > 1.0 || q.squaredNorm() < 1e-8);
    q.normalize();
    return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

inline Eigen::Vector3d random_vector(Rng& rng, double scale = 1.0) {
    return {rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)};
}

/// Central finite differences of a scalar function w.r.t. a flat buffer.
/// Returns the max violation of |analytic - fd| <= atol + rtol*max(|a|,|f|),
/// normalized so values <= 1 pass.
struct GradCheckResult {
    double max_violation = 0.0;  // max (|a-f| / (atol + rtol*scale))
    double worst_analytic = 0.0;
    double worst_fd = 0.0;
    size_t worst_index = 0;
};

inline GradCheckResult gradient_check(std::vector<double>& x,
                                      const std::function<double()>& eval,
                                      const std::vector<double>& analytic, double eps = 1e-5,
                                      double rtol = 1e-5, double atol = 1e-9) {
    GradCheckResult r;
    for (size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + eps;
        const double fp = eval();
        x[i] = saved - eps;
        const double fm = eval();
        x[i] = saved;
        const double fd = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        const double tol = atol + rtol * std::max(std::abs(a), std::abs(fd));
        const double violation = std::abs(a - fd) / tol;
        if (violation > r.max_violation) {
            r.max_violation = violation;
            r.worst_analytic = a;
            r.worst_fd = fd;
            r.worst_index = i;
        }
    }
    return r;
}

inline void fill_uniform(nn::Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

}  // namespace boxcal::testutil
