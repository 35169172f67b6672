#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mlecg/errors.hpp"

namespace mlecg::num {

// Adam with bias correction. Momentum defaults follow the training recipe
// (0.9 / 0.99); epsilon is the conventional 1e-8.
struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    long long step_count = 0;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-8;
    double learning_rate = 1e-3;

    static AdamState init(std::size_t num_params, double lr) {
        AdamState s;
        s.first_moment.assign(num_params, 0.0);
        s.second_moment.assign(num_params, 0.0);
        s.learning_rate = lr;
        return s;
    }
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

}  // namespace mlecg::num
