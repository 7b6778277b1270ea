#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unidistill/error.hpp"
#include "unidistill/nn.hpp"

namespace unidistill {

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::int64_t step_count = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(const ParamStore& params, double lr = 1e-3) {
        AdamState s;
        s.first_moment.assign(params.total_len(), 0.0);
        s.second_moment.assign(params.total_len(), 0.0);
        s.learning_rate = lr;
        return s;
    }

    void validate(std::size_t total_len) const {
        if (first_moment.size() != total_len || second_moment.size() != total_len)
            throw ShapeError("adam: moment vectors do not match parameter length");
        if (step_count < 0 || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || epsilon <= 0.0)
            throw ContractError("adam: invalid hyperparameters");
    }
};

inline void adam_step(ParamStore& params, std::span<const double> grads, AdamState& state) {
    if (grads.size() != params.total_len())
        throw ShapeError("adam_step: gradient length " + std::to_string(grads.size()) + " != " +
                         std::to_string(params.total_len()));
    state.validate(params.total_len());
    for (const auto& seg : params.segments())
        for (std::size_t i = seg.offset; i < seg.offset + seg.size(); ++i)
            if (!std::isfinite(grads[i]))
                throw NumericError("adam_step: non-finite gradient in segment '" + seg.name + "'");

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    auto p = params.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
        v = state.beta2 * v + (1.0 - state.beta2) * grads[i] * grads[i];
        p[i] -= state.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + state.epsilon);
    }
}

}  // namespace unidistill
