#include "talk3d/optim.hpp"

#include <cmath>

namespace talk3d::ad {

void Adam::step(const std::vector<Tensor>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& p : params) {
        T3D_REQUIRE(p.defined(), "adam: undefined parameter");
        auto& mom = state_[p.raw()];
        const auto n = static_cast<std::size_t>(p.numel());
        if (mom.m.empty()) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
        }
        T3D_REQUIRE(mom.m.size() == n, "adam: parameter shape changed between steps");
        const bool has_g = p.has_grad();
        const double* g = has_g ? p.grad().data() : nullptr;
        double* m = mom.m.data();
        double* v = mom.v.data();
        double* w = const_cast<double*>(p.ptr());
        parallel_for(static_cast<std::int64_t>(n), [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                const double gi = has_g ? g[i] : 0.0;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        });
        check_finite(p, "adam-updated parameter");
    }
}

}  // namespace talk3d::ad
