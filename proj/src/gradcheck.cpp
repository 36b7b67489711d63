#include "talk3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace talk3d::ad {

GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor>>& params,
                          const GradCheckOptions& opt) {
    GradCheckResult res;

    for (auto& [name, p] : params) p.zero_grad();
    Tensor loss = loss_fn();
    backward(loss);

    Rng rng(opt.probe_seed);
    for (const auto& [name, p] : params) {
        const std::int64_t n = p.numel();
        std::vector<std::int64_t> probes;
        if (opt.probes_per_tensor <= 0 || opt.probes_per_tensor >= n) {
            probes.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) probes[static_cast<std::size_t>(i)] = i;
        } else {
            for (int i = 0; i < opt.probes_per_tensor; ++i) probes.push_back(rng.index(n));
            std::sort(probes.begin(), probes.end());
            probes.erase(std::unique(probes.begin(), probes.end()), probes.end());
        }

        auto& data = const_cast<Tensor&>(p).data();
        for (std::int64_t idx : probes) {
            const double saved = data[static_cast<std::size_t>(idx)];
            GradGuard no_grad(false);
            data[static_cast<std::size_t>(idx)] = saved + opt.h;
            const double fp = loss_fn().value();
            data[static_cast<std::size_t>(idx)] = saved - opt.h;
            const double fm = loss_fn().value();
            data[static_cast<std::size_t>(idx)] = saved;
            const double fd = (fp - fm) / (2.0 * opt.h);
            const double an = p.grad_at(idx);
            const double abs_err = std::abs(an - fd);
            const double rel_err = abs_err / std::max({std::abs(an), std::abs(fd), 1e-12});
            if (abs_err > res.max_abs_err) res.max_abs_err = abs_err;
            const bool pass = abs_err <= opt.atol + opt.rtol * std::max(std::abs(an), std::abs(fd));
            if (!pass || rel_err > res.max_rel_err) {
                if (rel_err > res.max_rel_err) {
                    res.max_rel_err = rel_err;
                    res.worst = name + "[" + std::to_string(idx) + "]";
                }
                if (!pass) res.ok = false;
            }
        }
    }
    return res;
}

}  // namespace talk3d::ad
