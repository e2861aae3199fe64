#ifndef XMODNET_GRADCHECK_SUITE_HPP
#define XMODNET_GRADCHECK_SUITE_HPP

#include <string>
#include <vector>

#include "xmodnet/gradcheck.hpp"
#include "xmodnet/train.hpp"

namespace xmodnet {

struct GradCheckItem {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

struct GradCheckSummary {
    std::vector<GradCheckItem> items;
    double tolerance = 0;
    bool all_pass() const {
        for (const auto& i : items)
            if (!i.pass) return false;
        return !items.empty();
    }
    double worst() const {
        double w = 0;
        for (const auto& i : items) w = std::max(w, i.max_rel_err);
        return w;
    }
};

namespace detail {

template <typename T>
Tensor<T> rnd(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = T(rng.uniform(lo, hi));
    return t;
}

// readout weights with |w| in [0.5, 1.5]: keeps every probed gradient well
// above the float32 finite-difference noise floor
template <typename T>
Tensor<T> rnd_weights(Rng& rng, Shape shape) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) {
        const double mag = rng.uniform(0.5, 1.5);
        v = T(rng.uniform() < 0.5 ? -mag : mag);
    }
    return t;
}

// indices of the k largest |grad| entries, optionally padded with k random
// ones; float-mode finite differences need healthy gradient magnitudes
template <typename T>
std::vector<std::size_t> probe_indices(Tensor<T>& param, std::size_t k, Rng& rng,
                                       bool add_random) {
    std::vector<std::size_t> order(param.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto g = param.grad_view();
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ga = g.empty() ? 0 : std::abs(double(g[a]));
        const double gb = g.empty() ? 0 : std::abs(double(g[b]));
        return ga > gb;
    });
    std::vector<std::size_t> idx(order.begin(), order.begin() + std::min(k, order.size()));
    if (add_random)
        for (std::size_t i = 0; i < k && param.size() > 0; ++i)
            idx.push_back(rng.uniform_index(param.size()));
    return idx;
}

} // namespace detail

/// Central-difference verification of every differentiable op on random
/// tensors (dims <= 6), plus the full episode loss w.r.t. sampled slices of
/// conv kernels, generator W and the post-multipliers.
///
/// Epsilon policy: per-op checks use the 1e-3 default. The full-model probes
/// use a smaller step (1e-4) because a 1e-3 nudge of a high-gradient kernel
/// element shifts whole activation maps and can flip relu/pool kinks, which
/// invalidates the central difference, not the gradient. In 32-bit mode only
/// the top-|gradient| elements are probed (see grad_check).
template <typename T>
GradCheckSummary run_gradcheck_suite(double tolerance, std::uint64_t seed = 17) {
    constexpr bool is_float32 = std::is_same_v<T, float>;
    const double op_eps = 1e-3;
    const double kernel_eps = is_float32 ? 3e-4 : 1e-5;  // conv kernels move whole maps
    const double gen_eps = is_float32 ? 3e-3 : 3e-4;     // generator params barely move them
    const double genb_eps = is_float32 ? 1e-3 : 3e-4;    // generator bias shifts FiLM directly
    const double bn_eps = is_float32 ? 1e-3 : 3e-4;      // batch-stat curvature
    const double head_eps = is_float32 ? 1e-2 : 1e-3;    // softmax head, noise-limited in float
    const std::size_t top_k = is_float32 ? 8 : 0;        // 0 = probe everything

    GradCheckSummary summary;
    summary.tolerance = tolerance;
    Rng rng(seed);

    const auto check = [&](const std::string& name, const ScalarFn<T>& fn, Tensor<T>& input,
                           const std::vector<std::size_t>& subset = {}, double eps = 0.0) {
        GradCheckItem item;
        item.name = name;
        item.max_rel_err = grad_check<T>(fn, input, eps > 0 ? eps : op_eps, subset, top_k);
        item.pass = item.max_rel_err < tolerance;
        summary.items.push_back(item);
    };
    const auto wsum = [](Tape<T>& t, const Tensor<T>& out, const Tensor<T>& w) {
        return sum_all(t, mul(t, out, w));
    };

    {
        auto in = detail::rnd<T>(rng, {2, 4, 5, 3});
        auto k = detail::rnd<T>(rng, {3, 3, 3, 4});
        auto bias = detail::rnd<T>(rng, {4});
        auto w = detail::rnd_weights<T>(rng, {2, 4, 5, 4});
        check("conv2d/input", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, conv2d(t, v, k, bias), w); }, in);
        check("conv2d/kernels", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, conv2d(t, in, v, bias), w); }, k);
        check("conv2d/bias", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, conv2d(t, in, k, v), w); }, bias);
    }
    {
        auto in = detail::rnd<T>(rng, {2, 3, 3, 2});
        auto gamma = detail::rnd<T>(rng, {2}, 0.5, 1.5);
        auto beta = detail::rnd<T>(rng, {2});
        auto w = detail::rnd_weights<T>(rng, {2, 3, 3, 2});
        check("batch_norm/input",
              [&](Tape<T>& t, Tensor<T>& v) {
                  RunningStats<T> s(2);
                  return wsum(t, batch_norm(t, v, gamma, beta, BnMode::Batch, s), w);
              },
              in, {}, bn_eps);
        check("batch_norm/gamma",
              [&](Tape<T>& t, Tensor<T>& v) {
                  RunningStats<T> s(2);
                  return wsum(t, batch_norm(t, in, v, beta, BnMode::Batch, s), w);
              },
              gamma);
        check("batch_norm/beta",
              [&](Tape<T>& t, Tensor<T>& v) {
                  RunningStats<T> s(2);
                  return wsum(t, batch_norm(t, in, gamma, v, BnMode::Batch, s), w);
              },
              beta);
        RunningStats<T> frozen(2);
        frozen.mean = {T(0.2), T(-0.1)};
        frozen.var = {T(0.9), T(1.4)};
        frozen.update_count = 1;
        check("batch_norm/eval_input",
              [&](Tape<T>& t, Tensor<T>& v) {
                  return wsum(t, batch_norm(t, v, gamma, beta, BnMode::Eval, frozen), w);
              },
              in);
    }
    {
        auto in = detail::rnd<T>(rng, {3, 4});
        for (auto& v : in.values())
            if (std::abs(double(v)) < 0.05) v += T(0.1);
        auto w = detail::rnd_weights<T>(rng, {3, 4});
        check("relu", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, relu(t, v), w); }, in);
    }
    {
        Tensor<T> in({1, 4, 4, 2});
        for (std::size_t i = 0; i < in.size(); ++i) in[i] = T(double(i % 7) + 0.01 * double(i));
        auto w = detail::rnd_weights<T>(rng, {1, 2, 2, 2});
        check("max_pool_2x2", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, max_pool_2x2(t, v), w); }, in);
    }
    {
        auto in = detail::rnd<T>(rng, {2, 3, 3, 2});
        auto w = detail::rnd_weights<T>(rng, {2, 2});
        check("global_avg_pool",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, global_avg_pool(t, v), w); }, in);
    }
    {
        auto a = detail::rnd<T>(rng, {2, 3});
        auto b = detail::rnd<T>(rng, {2, 2});
        auto w = detail::rnd_weights<T>(rng, {2, 5});
        check("concat_channels",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, concat_channels(t, v, b), w); }, a);
    }
    {
        auto x = detail::rnd<T>(rng, {3, 4});
        auto wm = detail::rnd<T>(rng, {4, 5});
        auto b = detail::rnd<T>(rng, {5});
        auto w = detail::rnd_weights<T>(rng, {3, 5});
        check("affine/input", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, affine(t, v, wm, b), w); }, x);
        check("affine/W", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, affine(t, x, v, b), w); }, wm);
        check("affine/b", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, affine(t, x, wm, v), w); }, b);
    }
    {
        auto in = detail::rnd<T>(rng, {3, 5}, -2.0, 2.0);
        auto w = detail::rnd_weights<T>(rng, {3, 5});
        check("softmax", [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, softmax(t, v), w); }, in);
    }
    {
        auto x = detail::rnd<T>(rng, {2, 2, 3, 4}, 0.2, 1.0);
        auto gz = detail::rnd<T>(rng, {2, 4}, 0.2, 0.8);
        auto bz = detail::rnd<T>(rng, {2, 4}, 0.2, 0.8);
        auto g0 = detail::rnd<T>(rng, {4}, 0.2, 0.8);
        auto b0 = detail::rnd<T>(rng, {4}, 0.2, 0.8);
        auto w = detail::rnd<T>(rng, {2, 2, 3, 4}, 0.5, 1.5);
        check("film_apply/x",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, film_apply(t, v, gz, bz, g0, b0), w); }, x);
        check("film_apply/gamma_z",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, film_apply(t, x, v, bz, g0, b0), w); }, gz);
        check("film_apply/beta_z",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, film_apply(t, x, gz, v, g0, b0), w); }, bz);
        check("film_apply/gamma0",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, film_apply(t, x, gz, bz, v, b0), w); }, g0);
        check("film_apply/beta0",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, film_apply(t, x, gz, bz, g0, v), w); }, b0);
    }
    {
        auto q = detail::rnd<T>(rng, {3, 5}, 0.5, 1.5);  // norms well above the floor
        auto s = detail::rnd<T>(rng, {3, 5});
        auto w = detail::rnd_weights<T>(rng, {3});
        check("cosine_u/query",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, cosine_u_rows(t, v, s), w); }, q);
        check("cosine_u/support",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, cosine_u_rows(t, q, v), w); }, s);
        auto qm = detail::rnd<T>(rng, {2, 4}, 0.5, 1.5);
        auto sm = detail::rnd<T>(rng, {3, 4});
        auto wm = detail::rnd_weights<T>(rng, {2, 3});
        check("cosine_u_matrix/query",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, cosine_u_matrix(t, v, sm), wm); }, qm);
        check("cosine_u_matrix/support",
              [&](Tape<T>& t, Tensor<T>& v) { return wsum(t, cosine_u_matrix(t, qm, v), wm); }, sm);
    }
    {
        auto sims = detail::rnd<T>(rng, {2, 4}, -1.5, 1.5);
        const std::vector<std::size_t> labels = {0, 1, 0, 2};
        auto w = detail::rnd_weights<T>(rng, {2, 3});
        check("matching_probabilities",
              [&](Tape<T>& t, Tensor<T>& v) {
                  return wsum(t, matching_probabilities(t, v, labels, 3), w);
              },
              sims, {}, head_eps);
    }
    {
        // probabilities comfortably inside (clamp, 1)
        auto probs = detail::rnd<T>(rng, {3, 4}, 0.05, 0.95);
        const std::vector<std::size_t> labels = {1, 0, 3};
        check("nll_loss", [&](Tape<T>& t, Tensor<T>& v) { return nll_loss(t, v, labels); }, probs);
    }
    {
        auto x = detail::rnd<T>(rng, {6});
        for (auto& v : x.values())
            if (std::abs(double(v)) < 0.05) v += T(0.1);
        check("l1_norm", [&](Tape<T>& t, Tensor<T>& v) { return l1_norm(t, v); }, x);
    }

    // full episode loss through the cross-modulated model, sampled slices
    {
        auto split = synthetic_dataset(3, 3, 16, SyntheticMode::Separable, seed ^ 0x51ce);
        Rng ep_rng(seed ^ 0xe9);
        Episode ep = sample_episode(split, 2, 1, 1, ep_rng);
        auto net = make_network<T>(ModelKind::CrossMod, seed ^ 0x3317);
        Rng g_rng(seed ^ 0x77);
        for (auto& gen : net.generators) {
            for (auto& v : gen.gamma0.values()) v = T(g_rng.uniform(0.5, 1.0));
            for (auto& v : gen.beta0.values()) v = T(g_rng.uniform(0.5, 1.0));
        }
        auto fn = [&](Tape<T>& t, Tensor<T>&) {
            return episode_loss(t, net, ep, 0.001, BnMode::Batch);
        };
        const auto probe = [&](const std::string& name, Tensor<T>& param, double eps) {
            // one backward pass to rank elements by |grad|
            param.zero_grad();
            Tape<T> t;
            auto loss = fn(t, param);
            backward(loss, t);
            auto idx = detail::probe_indices(param, 6, rng, !is_float32);
            for (auto& [n, p] : net.parameters()) p.zero_grad();
            check("episode_loss/" + name, fn, param, idx, eps);
        };
        probe("gen2.W", net.generators[0].W, gen_eps);
        probe("gen2.b", net.generators[0].b, genb_eps);
        probe("gen2.gamma0", net.generators[0].gamma0, gen_eps);
        probe("gen3.beta0", net.generators[1].beta0, gen_eps);
        probe("block2.kernels", net.blocks[1].kernels, kernel_eps);
        probe("block1.kernels", net.blocks[0].kernels, kernel_eps);
    }

    return summary;
}

} // namespace xmodnet

#endif // XMODNET_GRADCHECK_SUITE_HPP
