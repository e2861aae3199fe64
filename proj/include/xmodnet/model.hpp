#ifndef XMODNET_MODEL_HPP
#define XMODNET_MODEL_HPP

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xmodnet/data.hpp"
#include "xmodnet/ops.hpp"
#include "xmodnet/rng.hpp"
#include "xmodnet/tape.hpp"
#include "xmodnet/tensor.hpp"

namespace xmodnet {

inline constexpr std::size_t kFilters = 64;
inline constexpr double kCosineNormFloor = 1e-8;

enum class ModelKind { Baseline, CrossMod };

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "baseline") return ModelKind::Baseline;
    if (s == "crossmod") return ModelKind::CrossMod;
    throw std::invalid_argument("unknown model kind: " + s);
}

inline const char* to_string(ModelKind k) {
    return k == ModelKind::Baseline ? "baseline" : "crossmod";
}

/// One conv block: 3x3/64 conv -> batch norm -> relu -> 2x2 max pool.
template <typename T>
struct ConvBlockParams {
    Tensor<T> kernels;    // [3,3,Cin,64]
    Tensor<T> conv_bias;  // [64]
    Tensor<T> bn_gamma;   // [64]
    Tensor<T> bn_beta;    // [64]
    RunningStats<T> bn_stats{kFilters};
};

/// FiLM generator for one cross-modulated block: G(x1,x2) = phi([x1,x2])W + b
/// with learned per-channel post-multipliers gating the modulation.
template <typename T>
struct FilmGeneratorParams {
    Tensor<T> W;       // [2C,2C]
    Tensor<T> b;       // [2C]
    Tensor<T> gamma0;  // [C]
    Tensor<T> beta0;   // [C]
};

/// Four shared conv blocks; cross-modulation variants add one generator per
/// block 2..4 (block 1 is never modulated). Both branches reference the same
/// parameters.
template <typename T>
struct Network {
    ModelKind kind = ModelKind::Baseline;
    std::array<ConvBlockParams<T>, 4> blocks;
    std::vector<FilmGeneratorParams<T>> generators;  // size 3 for crossmod, indices 0..2 = blocks 2..4

    std::vector<std::pair<std::string, Tensor<T>>> parameters() {
        std::vector<std::pair<std::string, Tensor<T>>> ps;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string p = "block" + std::to_string(i + 1) + ".";
            ps.emplace_back(p + "kernels", blocks[i].kernels);
            ps.emplace_back(p + "conv_bias", blocks[i].conv_bias);
            ps.emplace_back(p + "bn_gamma", blocks[i].bn_gamma);
            ps.emplace_back(p + "bn_beta", blocks[i].bn_beta);
        }
        for (std::size_t g = 0; g < generators.size(); ++g) {
            const std::string p = "gen" + std::to_string(g + 2) + ".";
            ps.emplace_back(p + "W", generators[g].W);
            ps.emplace_back(p + "b", generators[g].b);
            ps.emplace_back(p + "gamma0", generators[g].gamma0);
            ps.emplace_back(p + "beta0", generators[g].beta0);
        }
        return ps;
    }
};

namespace detail {

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double bound) {
    for (auto& v : t.values()) v = T(rng.uniform(-bound, bound));
}

} // namespace detail

/// Fresh network. Conv kernels and generator W/b get fan-in-scaled uniform
/// init; post-multipliers start at zero so a cross-modulation network begins
/// exactly at the baseline.
template <typename T>
Network<T> make_network(ModelKind kind, std::uint64_t seed) {
    Network<T> net;
    net.kind = kind;
    std::uint64_t stream = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t cin = i == 0 ? 3 : kFilters;
        auto& blk = net.blocks[i];
        blk.kernels = Tensor<T>({3, 3, cin, kFilters}, true);
        Rng rng = Rng::for_stream(seed, stream++);
        detail::fill_uniform(blk.kernels, rng, std::sqrt(6.0 / double(9 * cin)));
        blk.conv_bias = Tensor<T>({kFilters}, true);
        blk.bn_gamma = Tensor<T>::full({kFilters}, T(1), true);
        blk.bn_beta = Tensor<T>({kFilters}, true);
        blk.bn_stats = RunningStats<T>(kFilters);
    }
    if (kind == ModelKind::CrossMod) {
        const std::size_t c2 = 2 * kFilters;
        for (std::size_t g = 0; g < 3; ++g) {
            FilmGeneratorParams<T> gen;
            gen.W = Tensor<T>({c2, c2}, true);
            Rng rng = Rng::for_stream(seed, stream++);
            detail::fill_uniform(gen.W, rng, std::sqrt(6.0 / double(c2)));
            gen.b = Tensor<T>({c2}, true);
            Rng rngb = Rng::for_stream(seed, stream++);
            detail::fill_uniform(gen.b, rngb, 1.0 / std::sqrt(double(c2)));
            gen.gamma0 = Tensor<T>({kFilters}, true);
            gen.beta0 = Tensor<T>({kFilters}, true);
            net.generators.push_back(std::move(gen));
        }
    }
    return net;
}

// ---------------------------------------------------------------------------
// forward pieces
// ---------------------------------------------------------------------------

// Square input of at least 16 pixels survives the four floor-halving pools
// (odd intermediate sizes drop their trailing row/column, e.g. 84->42->21->10->5).
template <typename T>
void check_embed_input(const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(3) != 3)
        throw ShapeError("embed: images must be [B,H,W,3], got " + shape_str(images.shape()));
    if (images.dim(1) != images.dim(2) || images.dim(1) < 16)
        throw ShapeError("embed: spatial dims must be square and >= 16, got " +
                         shape_str(images.shape()));
}

template <typename T>
Tensor<T> conv_block_forward(Tape<T>& tape, ConvBlockParams<T>& blk, const Tensor<T>& x,
                             BnMode bn_mode) {
    auto c = conv2d(tape, x, blk.kernels, blk.conv_bias);
    auto n = batch_norm(tape, c, blk.bn_gamma, blk.bn_beta, bn_mode, blk.bn_stats);
    auto r = relu(tape, n);
    return max_pool_2x2(tape, r, PoolOdd::Discard);
}

template <typename T>
Tensor<T> flatten_rows(Tape<T>& tape, const Tensor<T>& x) {
    return reshape(tape, x, {x.dim(0), x.size() / x.dim(0)});
}

/// Baseline four-block embedding: [B,H,W,3] -> [B,D] with D = (H/16)^2 * 64
/// (floor-pooled through the spatial chain), row-major flatten.
template <typename T>
Tensor<T> embed_baseline(Tape<T>& tape, Network<T>& net, const Tensor<T>& images, BnMode bn_mode) {
    check_embed_input(images);
    Tensor<T> x = images;
    for (auto& blk : net.blocks) x = conv_block_forward(tape, blk, x, bn_mode);
    return flatten_rows(tape, x);
}

/// FiLM parameters for one branch: gamma_z, beta_z = split(phi([self, other]) W + b)
/// where phi is global average pooling followed by ReLU. Argument order makes
/// the generator non-commutative: G(a,b) != G(b,a) in general.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> film_generate(Tape<T>& tape, FilmGeneratorParams<T>& gen,
                                              const Tensor<T>& x_self, const Tensor<T>& x_other) {
    check_same_shape(x_self, x_other, "film_generate");
    auto pooled_self = relu(tape, global_avg_pool(tape, x_self));
    auto pooled_other = relu(tape, global_avg_pool(tape, x_other));
    auto z = concat_channels(tape, pooled_self, pooled_other);
    auto out = affine(tape, z, gen.W, gen.b);
    const std::size_t c = x_self.dim(3);
    if (gen.W.dim(0) != 2 * c)
        throw ShapeError("film_generate: generator built for " + std::to_string(gen.W.dim(0) / 2) +
                         " channels, activations have " + std::to_string(c));
    return {slice_cols(tape, out, 0, c), slice_cols(tape, out, c, 2 * c)};
}

/// FiLM(x) = (1 + gamma0 * gamma_z) .* x + beta0 * beta_z, per channel,
/// broadcast over the spatial axes. Fused op with a hand-derived backward.
template <typename T>
Tensor<T> film_apply(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma_z,
                     const Tensor<T>& beta_z, const Tensor<T>& gamma0, const Tensor<T>& beta0) {
    if (x.rank() != 4)
        throw ShapeError("film_apply: x must be [B,H,W,C], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (gamma_z.shape() != Shape{b, c} || beta_z.shape() != Shape{b, c})
        throw ShapeError("film_apply: gamma_z/beta_z must be [B,C]");
    if (gamma0.size() != c || beta0.size() != c)
        throw ShapeError("film_apply: gamma0/beta0 must have C channels");

    const std::size_t hw = h * w;
    Tensor<T> out(x.shape());
    {
        const T* px = x.data();
        const T* pgz = gamma_z.data();
        const T* pbz = beta_z.data();
        const T* pg0 = gamma0.data();
        const T* pb0 = beta0.data();
        T* po = out.data();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < hw; ++j)
                for (std::size_t k = 0; k < c; ++k) {
                    const std::size_t idx = (i * hw + j) * c + k;
                    po[idx] = (T(1) + pg0[k] * pgz[i * c + k]) * px[idx] + pb0[k] * pbz[i * c + k];
                }
    }

    const bool needs_grad = x.requires_grad() || gamma_z.requires_grad() ||
                            beta_z.requires_grad() || gamma0.requires_grad() ||
                            beta0.requires_grad();
    if (tape.recording() && needs_grad) {
        out.set_requires_grad(true);
        Tensor<T> xc = x, gzc = gamma_z, bzc = beta_z, g0c = gamma0, b0c = beta0, oc = out;
        tape.record(out, [xc, gzc, bzc, g0c, b0c, oc, b, hw, c]() mutable {
            const T* px = xc.data();
            const T* pgz = gzc.data();
            const T* pbz = bzc.data();
            const T* pg0 = g0c.data();
            const T* pb0 = b0c.data();
            const T* go = oc.grad().data();
            // per (row, channel) reductions of dout and dout*x
            std::vector<double> s_g(b * c, 0.0), s_gx(b * c, 0.0);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < hw; ++j)
                    for (std::size_t k = 0; k < c; ++k) {
                        const std::size_t idx = (i * hw + j) * c + k;
                        s_g[i * c + k] += double(go[idx]);
                        s_gx[i * c + k] += double(go[idx]) * double(px[idx]);
                    }
            if (xc.requires_grad()) {
                auto gx = xc.grad();
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t j = 0; j < hw; ++j)
                        for (std::size_t k = 0; k < c; ++k) {
                            const std::size_t idx = (i * hw + j) * c + k;
                            gx[idx] += go[idx] * (T(1) + pg0[k] * pgz[i * c + k]);
                        }
            }
            if (gzc.requires_grad()) {
                auto g = gzc.grad();
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t k = 0; k < c; ++k)
                        g[i * c + k] += T(double(pg0[k]) * s_gx[i * c + k]);
            }
            if (bzc.requires_grad()) {
                auto g = bzc.grad();
                for (std::size_t i = 0; i < b; ++i)
                    for (std::size_t k = 0; k < c; ++k)
                        g[i * c + k] += T(double(pb0[k]) * s_g[i * c + k]);
            }
            if (g0c.requires_grad()) {
                auto g = g0c.grad();
                for (std::size_t k = 0; k < c; ++k) {
                    double acc = 0;
                    for (std::size_t i = 0; i < b; ++i)
                        acc += double(pgz[i * c + k]) * s_gx[i * c + k];
                    g[k] += T(acc);
                }
            }
            if (b0c.requires_grad()) {
                auto g = b0c.grad();
                for (std::size_t k = 0; k < c; ++k) {
                    double acc = 0;
                    for (std::size_t i = 0; i < b; ++i)
                        acc += double(pbz[i * c + k]) * s_g[i * c + k];
                    g[k] += T(acc);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// similarity and matching head
// ---------------------------------------------------------------------------

/// Row-paired unnormalized cosine: u_p = q_p . s_p / max(||q_p||, 1e-8).
/// Normalized by the query norm only. `clamp_count`, when given, counts rows
/// whose query norm hit the floor.
template <typename T>
Tensor<T> cosine_u_rows(Tape<T>& tape, const Tensor<T>& query, const Tensor<T>& support,
                        std::size_t* clamp_count = nullptr) {
    check_same_shape(query, support, "cosine_u_rows");
    if (query.rank() != 2)
        throw ShapeError("cosine_u_rows: need [P,D], got " + shape_str(query.shape()));
    const std::size_t p = query.dim(0), d = query.dim(1);
    Tensor<T> out({p});
    std::vector<T> inv_norm(p), dots(p);
    std::vector<char> clamped(p, 0);
    for (std::size_t i = 0; i < p; ++i) {
        double dot = 0, nq = 0;
        const T* q = query.data() + i * d;
        const T* s = support.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            dot += double(q[j]) * double(s[j]);
            nq += double(q[j]) * double(q[j]);
        }
        const double norm = std::sqrt(nq);
        const double denom = std::max(norm, kCosineNormFloor);
        clamped[i] = norm < kCosineNormFloor;
        if (clamped[i] && clamp_count) ++*clamp_count;
        inv_norm[i] = T(1.0 / denom);
        dots[i] = T(dot);
        out[i] = T(dot / denom);
    }
    if (tape.recording() && (query.requires_grad() || support.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> qc = query, sc = support, oc = out;
        tape.record(out, [qc, sc, oc, inv_norm, dots, clamped, p, d]() mutable {
            const T* go = oc.grad().data();
            for (std::size_t i = 0; i < p; ++i) {
                const T g = go[i];
                if (g == T(0)) continue;
                const T* q = qc.data() + i * d;
                const T* s = sc.data() + i * d;
                if (sc.requires_grad()) {
                    auto gs = sc.grad();
                    for (std::size_t j = 0; j < d; ++j) gs[i * d + j] += g * q[j] * inv_norm[i];
                }
                if (qc.requires_grad()) {
                    auto gq = qc.grad();
                    // d/dq [q.s / ||q||] = s/||q|| - (q.s) q / ||q||^3
                    // when clamped the denominator is constant
                    const T coef = clamped[i] ? T(0)
                                              : g * dots[i] * inv_norm[i] * inv_norm[i] * inv_norm[i];
                    for (std::size_t j = 0; j < d; ++j)
                        gq[i * d + j] += g * s[j] * inv_norm[i] - coef * q[j];
                }
            }
        });
    }
    return out;
}

/// All-pairs unnormalized cosine: out[t,i] = q_t . s_i / max(||q_t||, 1e-8).
template <typename T>
Tensor<T> cosine_u_matrix(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& supports,
                          std::size_t* clamp_count = nullptr) {
    if (queries.rank() != 2 || supports.rank() != 2 || queries.dim(1) != supports.dim(1))
        throw ShapeError("cosine_u_matrix: need [T,D] and [M,D], got " + shape_str(queries.shape()) +
                         " and " + shape_str(supports.shape()));
    const std::size_t t = queries.dim(0), m = supports.dim(0), d = queries.dim(1);
    std::vector<T> inv_norm(t);
    std::vector<double> denom(t);
    std::vector<char> clamped(t, 0);
    for (std::size_t i = 0; i < t; ++i) {
        double nq = 0;
        const T* q = queries.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) nq += double(q[j]) * double(q[j]);
        const double norm = std::sqrt(nq);
        clamped[i] = norm < kCosineNormFloor;
        if (clamped[i] && clamp_count) ++*clamp_count;
        denom[i] = std::max(norm, kCosineNormFloor);
        inv_norm[i] = T(1.0 / denom[i]);
    }
    // dots and the division accumulated in double so the all-pairs route
    // lands on the same bits as the row-paired route (cosine_u_rows)
    Tensor<T> out({t, m});
    for (std::size_t i = 0; i < t; ++i) {
        const T* q = queries.data() + i * d;
        for (std::size_t j = 0; j < m; ++j) {
            const T* s = supports.data() + j * d;
            double dot = 0;
            for (std::size_t k = 0; k < d; ++k) dot += double(q[k]) * double(s[k]);
            out[i * m + j] = T(dot / denom[i]);
        }
    }
    if (tape.recording() && (queries.requires_grad() || supports.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> qc = queries, sc = supports, oc = out;
        tape.record(out, [qc, sc, oc, inv_norm, clamped, t, m, d]() mutable {
            ConstMapRM<T> go(oc.grad().data(), t, m);
            ConstMapRM<T> qm(qc.data(), t, d);
            ConstMapRM<T> sm(sc.data(), m, d);
            ConstMapRM<T> um(oc.data(), t, m);
            if (sc.requires_grad()) {
                // dS += G^T . diag(inv_norm) . Q
                MatrixRM<T> scaled_q = qm;
                for (std::size_t i = 0; i < t; ++i) scaled_q.row(i) *= inv_norm[i];
                MapRM<T> gs(sc.grad().data(), m, d);
                gs.noalias() += go.transpose() * scaled_q;
            }
            if (qc.requires_grad()) {
                // dQ_t = inv_norm_t * (G S)_t - (sum_i G_ti U_ti) inv_norm_t^2 * q_t
                MatrixRM<T> gs = go * sm;  // [t,d]
                MapRM<T> gq(qc.grad().data(), t, d);
                for (std::size_t i = 0; i < t; ++i) {
                    const T r = clamped[i] ? T(0) : go.row(i).dot(um.row(i));
                    gq.row(i) += inv_norm[i] * gs.row(i) - r * inv_norm[i] * inv_norm[i] * qm.row(i);
                }
            }
        });
    }
    return out;
}

/// Scalar unnormalized cosine between two embedding vectors.
template <typename T>
Tensor<T> cosine_u(Tape<T>& tape, const Tensor<T>& query_emb, const Tensor<T>& support_emb,
                   bool* clamped = nullptr) {
    if (query_emb.rank() != 1 || support_emb.rank() != 1)
        throw ShapeError("cosine_u: need rank-1 embeddings");
    auto q2 = reshape(tape, query_emb, {1, query_emb.size()});
    auto s2 = reshape(tape, support_emb, {1, support_emb.size()});
    std::size_t count = 0;
    auto rows = cosine_u_rows(tape, q2, s2, &count);
    if (clamped) *clamped = count > 0;
    return reshape(tape, rows, {1});
}

/// Weighted vote: h = softmax(similarities) over the support axis, then class
/// c collects the h mass of supports labeled c. Rows sum to 1.
template <typename T>
Tensor<T> matching_probabilities(Tape<T>& tape, const Tensor<T>& similarities,
                                 const std::vector<std::size_t>& support_labels, std::size_t way) {
    Tensor<T> sims = similarities.rank() == 1
                         ? reshape(tape, similarities, {1, similarities.size()})
                         : similarities;
    if (sims.rank() != 2 || sims.dim(1) != support_labels.size())
        throw ShapeError("matching_probabilities: similarities " + shape_str(similarities.shape()) +
                         " vs " + std::to_string(support_labels.size()) + " support labels");
    for (std::size_t l : support_labels)
        if (l >= way)
            throw std::invalid_argument("matching_probabilities: label " + std::to_string(l) +
                                        " outside 0.." + std::to_string(way - 1));
    const std::size_t t = sims.dim(0), m = sims.dim(1);
    auto h = softmax(tape, sims);
    Tensor<T> out({t, way});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < m; ++j)
            out[i * way + support_labels[j]] += h[i * m + j];
    if (tape.recording() && h.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> hc = h, oc = out;
        tape.record(out, [hc, oc, support_labels, t, m, way]() mutable {
            auto gh = hc.grad();
            const T* go = oc.grad().data();
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t j = 0; j < m; ++j)
                    gh[i * m + j] += go[i * way + support_labels[j]];
        });
    }
    if (similarities.rank() == 1) return reshape(tape, out, {way});
    return out;
}

// ---------------------------------------------------------------------------
// cross-modulated embedding and episode classification
// ---------------------------------------------------------------------------

/// Per-channel multipliers for gamma0/beta0 of blocks 2..4, used by the noise
/// ablation. Empty vectors leave a block untouched.
struct FilmNoiseDraw {
    std::array<std::vector<float>, 3> gamma_mul;
    std::array<std::vector<float>, 3> beta_mul;
    bool any() const {
        for (const auto& v : gamma_mul)
            if (!v.empty()) return true;
        return false;
    }
};

namespace detail {

template <typename T>
Tensor<T> multiplied_copy(const Tensor<T>& base, const std::vector<float>& mul) {
    Tensor<T> out = base.clone();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = base[i] * T(mul[i]);
    return out;
}

// Cross-modulated blocks 2..4 on paired branches. x_s/x_q are block-1 outputs
// of the unique support/query images; pair p couples support row s_idx[p] with
// query row q_idx[p]. Block 2's conv+bn depend only on the image, so they run
// on the unique rows before pair expansion; later blocks see pair-specific
// inputs and run at pair granularity.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> crossmod_tail(Tape<T>& tape, Network<T>& net, Tensor<T> x_s,
                                              Tensor<T> x_q, const std::vector<std::size_t>& s_idx,
                                              const std::vector<std::size_t>& q_idx, BnMode bn_mode,
                                              const FilmNoiseDraw* noise) {
    for (std::size_t i = 1; i < 4; ++i) {
        auto& blk = net.blocks[i];
        auto& gen = net.generators[i - 1];
        Tensor<T> a_s, a_q;
        if (i == 1) {
            auto c_s = batch_norm(tape, conv2d(tape, x_s, blk.kernels, blk.conv_bias), blk.bn_gamma,
                                  blk.bn_beta, bn_mode, blk.bn_stats);
            auto c_q = batch_norm(tape, conv2d(tape, x_q, blk.kernels, blk.conv_bias), blk.bn_gamma,
                                  blk.bn_beta, bn_mode, blk.bn_stats);
            a_s = gather_rows(tape, c_s, s_idx);
            a_q = gather_rows(tape, c_q, q_idx);
        } else {
            a_s = batch_norm(tape, conv2d(tape, x_s, blk.kernels, blk.conv_bias), blk.bn_gamma,
                             blk.bn_beta, bn_mode, blk.bn_stats);
            a_q = batch_norm(tape, conv2d(tape, x_q, blk.kernels, blk.conv_bias), blk.bn_gamma,
                             blk.bn_beta, bn_mode, blk.bn_stats);
        }
        auto [gz_s, bz_s] = film_generate(tape, gen, a_s, a_q);
        auto [gz_q, bz_q] = film_generate(tape, gen, a_q, a_s);
        Tensor<T> g0 = gen.gamma0, b0 = gen.beta0;
        if (noise && !noise->gamma_mul[i - 1].empty()) {
            g0 = multiplied_copy(gen.gamma0, noise->gamma_mul[i - 1]);
            b0 = multiplied_copy(gen.beta0, noise->beta_mul[i - 1]);
        }
        auto m_s = film_apply(tape, a_s, gz_s, bz_s, g0, b0);
        auto m_q = film_apply(tape, a_q, gz_q, bz_q, g0, b0);
        x_s = max_pool_2x2(tape, relu(tape, m_s), PoolOdd::Discard);
        x_q = max_pool_2x2(tape, relu(tape, m_q), PoolOdd::Discard);
    }
    return {flatten_rows(tape, x_s), flatten_rows(tape, x_q)};
}

} // namespace detail

/// Pairwise embedding of one support/query image pair through the
/// cross-modulated pipeline. Block 1 runs unmodulated on each image; blocks
/// 2..4 exchange FiLM parameters, the same generator applied with swapped
/// argument order for the two branches.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> embed_crossmod(Tape<T>& tape, Network<T>& net,
                                               const Tensor<T>& support_img,
                                               const Tensor<T>& query_img, BnMode bn_mode) {
    if (net.kind != ModelKind::CrossMod)
        throw std::invalid_argument("embed_crossmod: model has no generators");
    check_embed_input(support_img);
    check_embed_input(query_img);
    auto x_s = conv_block_forward(tape, net.blocks[0], support_img, bn_mode);
    auto x_q = conv_block_forward(tape, net.blocks[0], query_img, bn_mode);
    std::vector<std::size_t> idx(support_img.dim(0), 0);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return detail::crossmod_tail(tape, net, x_s, x_q, idx, idx, bn_mode, nullptr);
}

/// Similarities of every (query, support) pair of an episode, [T, N*K].
/// Baseline embeds each image once; crossmod runs the Cartesian product of
/// pairs with block-1 activations computed once per image and reused.
template <typename T>
Tensor<T> episode_similarities(Tape<T>& tape, Network<T>& net, const Episode& episode,
                               BnMode bn_mode, const FilmNoiseDraw* noise = nullptr,
                               std::size_t* clamp_count = nullptr) {
    const std::size_t nk = episode.support.size(), t = episode.query.size();
    auto support_imgs = stack_images<T>(episode.support, episode.resolution);
    auto query_imgs = stack_images<T>(episode.query, episode.resolution);
    if (net.kind == ModelKind::Baseline) {
        auto s_emb = embed_baseline(tape, net, support_imgs, bn_mode);
        auto q_emb = embed_baseline(tape, net, query_imgs, bn_mode);
        return cosine_u_matrix(tape, q_emb, s_emb, clamp_count);
    }
    check_embed_input(support_imgs);
    auto x_s = conv_block_forward(tape, net.blocks[0], support_imgs, bn_mode);
    auto x_q = conv_block_forward(tape, net.blocks[0], query_imgs, bn_mode);
    // pair p = j*NK + i couples support i with query j, so the pair axis
    // reshapes to [T, NK] rows
    std::vector<std::size_t> s_idx(nk * t), q_idx(nk * t);
    for (std::size_t j = 0; j < t; ++j)
        for (std::size_t i = 0; i < nk; ++i) {
            s_idx[j * nk + i] = i;
            q_idx[j * nk + i] = j;
        }
    auto [f_s, f_q] = detail::crossmod_tail(tape, net, x_s, x_q, s_idx, q_idx, bn_mode, noise);
    auto u = cosine_u_rows(tape, f_q, f_s, clamp_count);
    return reshape(tape, u, {t, nk});
}

/// Per-query class distributions [T, N] for one episode.
template <typename T>
Tensor<T> classify_episode(Tape<T>& tape, Network<T>& net, const Episode& episode, BnMode bn_mode,
                           const FilmNoiseDraw* noise = nullptr) {
    auto sims = episode_similarities(tape, net, episode, bn_mode, noise);
    std::vector<std::size_t> labels(episode.support.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = episode.support[i].label;
    return matching_probabilities(tape, sims, labels, episode.way);
}

} // namespace xmodnet

#endif // XMODNET_MODEL_HPP
