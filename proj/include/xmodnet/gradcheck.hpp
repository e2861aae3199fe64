#ifndef XMODNET_GRADCHECK_HPP
#define XMODNET_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xmodnet/tape.hpp"
#include "xmodnet/tensor.hpp"

namespace xmodnet {

/// Scalar-valued tensor function under test. The tape passed in is recording;
/// the function must route all differentiable work through it.
template <typename T>
using ScalarFn = std::function<Tensor<T>(Tape<T>&, Tensor<T>&)>;

/// Compares reverse-mode gradients against central differences
/// (f(x+eps) - f(x-eps)) / 2eps, elementwise over `input`.
/// Returns max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `element_subset` restricts the finite-difference probes to those flat
/// indices; empty means every element. `probe_top_k`, when nonzero and no
/// subset is given, probes only the k elements with the largest |analytic|
/// gradient: float32 forward noise (~ulp(f)/2eps) swamps near-zero gradients,
/// so 32-bit checks are only informative on the gradient-carrying elements.
template <typename T>
double grad_check(const ScalarFn<T>& fn, Tensor<T>& input, double eps = 1e-3,
                  const std::vector<std::size_t>& element_subset = {},
                  std::size_t probe_top_k = 0) {
    input.set_requires_grad(true);
    input.zero_grad();
    std::vector<double> analytic(input.size(), 0.0);
    {
        Tape<T> tape;
        Tensor<T> loss = fn(tape, input);
        if (loss.size() != 1)
            throw ShapeError("grad_check: fn must be scalar-valued, got " + shape_str(loss.shape()));
        backward(loss, tape);
        auto g = input.grad();
        for (std::size_t i = 0; i < g.size(); ++i) analytic[i] = double(g[i]);
        input.zero_grad();
    }

    std::vector<std::size_t> idx = element_subset;
    if (idx.empty()) {
        idx.resize(input.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (probe_top_k > 0 && probe_top_k < idx.size()) {
            std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                return std::abs(analytic[a]) > std::abs(analytic[b]);
            });
            idx.resize(probe_top_k);
        }
    }

    double worst = 0.0;
    for (std::size_t i : idx) {
        const T saved = input[i];
        input[i] = T(double(saved) + eps);
        Tape<T> t_plus(false);
        const double f_plus = double(fn(t_plus, input).item());
        input[i] = T(double(saved) - eps);
        Tape<T> t_minus(false);
        const double f_minus = double(fn(t_minus, input).item());
        input[i] = saved;
        const double numeric = (f_plus - f_minus) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

} // namespace xmodnet

#endif // XMODNET_GRADCHECK_HPP
