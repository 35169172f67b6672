#include "mlecg/adam.hpp"

#include <cmath>

namespace mlecg::num {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size()) throw DimensionError("adam_step: params/grads length mismatch");
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size())
        throw DimensionError("adam_step: moment buffers do not match parameter count");
    if (!(state.beta1 > 0.0 && state.beta1 < 1.0 && state.beta2 > 0.0 && state.beta2 < 1.0))
        throw ConfigError("adam_step: betas must lie in (0,1)");
    if (state.epsilon <= 0.0) throw ConfigError("adam_step: epsilon must be > 0");

    state.step_count += 1;
    const double b1 = state.beta1;
    const double b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        const double mhat = m / c1;
        const double vhat = v / c2;
        params[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

}  // namespace mlecg::num
