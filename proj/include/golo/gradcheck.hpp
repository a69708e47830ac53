#pragma once

#include <functional>
#include <vector>

#include "golo/rng.hpp"
#include "golo/tensor.hpp"

namespace golo {

// Central-difference gradient verification. Rebuilds the graph via `f` (a
// scalar-valued function of the given parameters), takes the tape gradient
// once, then perturbs coordinates by +/-eps and compares. Returns
// max |g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|) over checked coords.
//
// Meant to run with T = double; float lacks the headroom for eps = 1e-4.
// When max_coords > 0 a deterministic random subset of coordinates per
// parameter is checked instead of all of them.
template <class T>
double finite_diff_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                         double eps = 1e-4, int64_t max_coords = -1,
                         uint64_t subset_seed = 0x9d5af7) {
    for (auto& p : params) p.zero_grad();
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> loss = f();
        if (!std::isfinite(double(loss.item())))
            throw NumericError("finite_diff_check: non-finite loss");
        tape.backward(loss);
    }
    std::vector<std::vector<T>> tape_grads;
    tape_grads.reserve(params.size());
    for (auto& p : params) tape_grads.push_back(p.grad());

    Rng rng(subset_seed);
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        int64_t n = p.size();
        std::vector<int64_t> coords;
        if (max_coords <= 0 || n <= max_coords) {
            coords.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
        } else {
            for (int64_t i = 0; i < max_coords; ++i) coords.push_back(rng.uniform_int(0, n - 1));
        }
        for (int64_t c : coords) {
            T saved = p.data()[size_t(c)];
            p.data()[size_t(c)] = saved + T(eps);
            double fp = double(f().item());
            p.data()[size_t(c)] = saved - T(eps);
            double fm = double(f().item());
            p.data()[size_t(c)] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_diff_check: non-finite loss under perturbation");
            double g_fd = (fp - fm) / (2.0 * eps);
            double g_tape = double(tape_grads[pi][size_t(c)]);
            double err = std::abs(g_tape - g_fd) /
                         std::max(1e-8, std::abs(g_tape) + std::abs(g_fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Moves values away from non-differentiable kinks (relu/abs at 0, clamp
// edges) so central differences stay valid.
template <class T>
void nudge_away_from(std::vector<T>& data, T kink, T margin) {
    for (auto& v : data)
        if (std::abs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin);
}

}  // namespace golo
