#ifndef XMODNET_OPS_HPP
#define XMODNET_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "xmodnet/tape.hpp"
#include "xmodnet/tensor.hpp"

namespace xmodnet {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape.record(out, [ac, bc, oc]() mutable {
            auto go = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape.record(out, [ac, bc, oc]() mutable {
            auto go = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad();
                const T* vb = bc.data();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad();
                const T* va = ac.data();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * factor;
    if (tape.recording() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape.record(out, [ac, oc, factor]() mutable {
            auto go = oc.grad();
            auto ga = ac.grad();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.values()) acc += v;
    Tensor<T> out = Tensor<T>::scalar_of(acc);
    if (tape.recording() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape.record(out, [ac, oc]() mutable {
            T g = oc.grad()[0];
            auto ga = ac.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

/// Sum of absolute values. Subgradient at 0 is 0.
template <typename T>
Tensor<T> l1_norm(Tape<T>& tape, const Tensor<T>& a) {
    T acc = 0;
    for (T v : a.values()) acc += std::abs(v);
    Tensor<T> out = Tensor<T>::scalar_of(acc);
    if (tape.recording() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape.record(out, [ac, oc]() mutable {
            T g = oc.grad()[0];
            auto ga = ac.grad();
            const T* va = ac.data();
            for (std::size_t i = 0; i < ga.size(); ++i) {
                if (va[i] > T(0)) ga[i] += g;
                else if (va[i] < T(0)) ga[i] -= g;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    if (tape.recording() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, oc = out;
        tape.record(out, [ac, oc]() mutable {
            auto go = oc.grad();
            auto ga = ac.grad();
            const T* vo = oc.data();
            for (std::size_t i = 0; i < go.size(); ++i)
                if (vo[i] > T(0)) ga[i] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d, 3x3, stride 1, "same" zero padding
// ---------------------------------------------------------------------------

namespace detail {

// Patch layout matches the row-major flatten of kernels [3,3,Cin,Cout]:
// column index (ky*3 + kx)*Cin + cin.
template <typename T>
void im2col_3x3(const T* img, std::size_t h, std::size_t w, std::size_t cin, T* col) {
    const std::size_t patch = 9 * cin;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            T* dst = col + (y * w + x) * patch;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t iy = y + ky;
                if (iy < 1 || iy > h) {  // padded row
                    std::fill(dst, dst + 3 * cin, T(0));
                    dst += 3 * cin;
                    continue;
                }
                const T* src_row = img + (iy - 1) * w * cin;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::size_t ix = x + kx;
                    if (ix < 1 || ix > w) {
                        std::fill(dst, dst + cin, T(0));
                    } else {
                        const T* src = src_row + (ix - 1) * cin;
                        std::copy(src, src + cin, dst);
                    }
                    dst += cin;
                }
            }
        }
    }
}

template <typename T>
void col2im_3x3_add(const T* col, std::size_t h, std::size_t w, std::size_t cin, T* img_grad) {
    const std::size_t patch = 9 * cin;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const T* src = col + (y * w + x) * patch;
            for (std::size_t ky = 0; ky < 3; ++ky) {
                const std::size_t iy = y + ky;
                if (iy < 1 || iy > h) {
                    src += 3 * cin;
                    continue;
                }
                T* dst_row = img_grad + (iy - 1) * w * cin;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::size_t ix = x + kx;
                    if (ix >= 1 && ix <= w) {
                        T* dst = dst_row + (ix - 1) * cin;
                        for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
                    }
                    src += cin;
                }
            }
        }
    }
}

} // namespace detail

/// 3x3 cross-correlation with stride 1 and "same" zero padding, plus bias.
/// input [B,H,W,Cin], kernels [3,3,Cin,Cout], bias [Cout] -> [B,H,W,Cout].
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 const Tensor<T>& bias) {
    if (input.rank() != 4)
        throw ShapeError("conv2d: input must be [B,H,W,Cin], got " + shape_str(input.shape()));
    if (kernels.rank() != 4 || kernels.dim(0) != 3 || kernels.dim(1) != 3)
        throw ShapeError("conv2d: kernels must be [3,3,Cin,Cout], got " + shape_str(kernels.shape()));
    const std::size_t b = input.dim(0), h = input.dim(1), w = input.dim(2), cin = input.dim(3);
    const std::size_t cout = kernels.dim(3);
    if (kernels.dim(2) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but kernels expect " +
                         std::to_string(kernels.dim(2)));
    if (bias.size() != cout)
        throw ShapeError("conv2d: bias size " + std::to_string(bias.size()) + " != Cout " +
                         std::to_string(cout));

    Tensor<T> out({b, h, w, cout});
    const std::size_t hw = h * w, patch = 9 * cin;
    std::vector<T> col(hw * patch);
    ConstMapRM<T> km(kernels.data(), patch, cout);
    Eigen::Map<const Eigen::RowVector<T, Eigen::Dynamic>> bv(bias.data(), cout);
    for (std::size_t i = 0; i < b; ++i) {
        detail::im2col_3x3(input.data() + i * hw * cin, h, w, cin, col.data());
        ConstMapRM<T> cm(col.data(), hw, patch);
        MapRM<T> om(out.data() + i * hw * cout, hw, cout);
        om.noalias() = cm * km;
        om.rowwise() += bv;
    }

    if (tape.recording() &&
        (input.requires_grad() || kernels.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, k_c = kernels, b_c = bias, o_c = out;
        tape.record(out, [in_c, k_c, b_c, o_c, b, h, w, cin, cout]() mutable {
            const std::size_t hw = h * w, patch = 9 * cin;
            std::vector<T> col(hw * patch);
            std::vector<T> dcol;
            if (in_c.requires_grad()) dcol.resize(hw * patch);
            ConstMapRM<T> km(k_c.data(), patch, cout);
            for (std::size_t i = 0; i < b; ++i) {
                ConstMapRM<T> dy(o_c.grad().data() + i * hw * cout, hw, cout);
                if (k_c.requires_grad() || in_c.requires_grad())
                    detail::im2col_3x3(in_c.data() + i * hw * cin, h, w, cin, col.data());
                if (k_c.requires_grad()) {
                    ConstMapRM<T> cm(col.data(), hw, patch);
                    MapRM<T> dk(k_c.grad().data(), patch, cout);
                    dk.noalias() += cm.transpose() * dy;
                }
                if (in_c.requires_grad()) {
                    MapRM<T> dc(dcol.data(), hw, patch);
                    dc.noalias() = dy * km.transpose();
                    detail::col2im_3x3_add(dcol.data(), h, w, cin,
                                           in_c.grad().data() + i * hw * cin);
                }
            }
            if (b_c.requires_grad()) {
                auto gb = b_c.grad();
                const T* go = o_c.grad().data();
                for (std::size_t i = 0; i < b * hw; ++i)
                    for (std::size_t c = 0; c < cout; ++c) gb[c] += go[i * cout + c];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

enum class BnMode {
    Train,  // batch statistics, running stats updated
    Eval,   // running statistics (error if never updated)
    Batch,  // batch statistics without touching running stats (transductive)
};

template <typename T>
struct RunningStats {
    std::vector<T> mean;
    std::vector<T> var;
    std::size_t update_count = 0;

    explicit RunningStats(std::size_t channels = 0)
        : mean(channels, T(0)), var(channels, T(1)) {}
    bool initialized() const { return update_count > 0; }
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.9;

/// Per-channel normalization over the B,H,W axes followed by gamma/beta.
/// Statistics are accumulated in double regardless of T.
template <typename T>
Tensor<T> batch_norm(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BnMode mode, RunningStats<T>& state) {
    if (input.rank() != 4)
        throw ShapeError("batch_norm: input must be [B,H,W,C], got " + shape_str(input.shape()));
    const std::size_t b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("batch_norm: gamma/beta must have " + std::to_string(c) + " channels");
    if (state.mean.size() != c)
        throw ShapeError("batch_norm: running stats hold " + std::to_string(state.mean.size()) +
                         " channels, input has " + std::to_string(c));
    if (mode == BnMode::Eval && !state.initialized())
        throw std::runtime_error("batch_norm: eval mode requested but running statistics were never updated");

    const std::size_t n = b * h * w;
    std::vector<T> mean(c), inv_std(c);
    if (mode == BnMode::Eval) {
        for (std::size_t k = 0; k < c; ++k) {
            mean[k] = state.mean[k];
            inv_std[k] = T(1.0 / std::sqrt(double(state.var[k]) + kBnEpsilon));
        }
    } else {
        std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
        const T* p = input.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < c; ++k) {
                const double v = p[i * c + k];
                sum[k] += v;
                sumsq[k] += v * v;
            }
        for (std::size_t k = 0; k < c; ++k) {
            const double m = sum[k] / double(n);
            double v = sumsq[k] / double(n) - m * m;
            if (v < 0) v = 0;  // float cancellation
            mean[k] = T(m);
            inv_std[k] = T(1.0 / std::sqrt(v + kBnEpsilon));
            if (mode == BnMode::Train) {
                state.mean[k] = T(kBnMomentum * double(state.mean[k]) + (1.0 - kBnMomentum) * m);
                state.var[k] = T(kBnMomentum * double(state.var[k]) + (1.0 - kBnMomentum) * v);
            }
        }
        if (mode == BnMode::Train) state.update_count++;
    }

    Tensor<T> out(input.shape());
    {
        const T* p = input.data();
        const T* pg = gamma.data();
        const T* pb = beta.data();
        T* po = out.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < c; ++k)
                po[i * c + k] = (p[i * c + k] - mean[k]) * inv_std[k] * pg[k] + pb[k];
    }

    if (tape.recording() &&
        (input.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        const bool batch_stats = mode != BnMode::Eval;
        Tensor<T> in_c = input, g_c = gamma, bt_c = beta, o_c = out;
        tape.record(out, [in_c, g_c, bt_c, o_c, mean, inv_std, n, c, batch_stats]() mutable {
            const T* x = in_c.data();
            const T* go = o_c.grad().data();
            // per-channel sums of dout and dout*xhat
            std::vector<double> s_go(c, 0.0), s_gox(c, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < c; ++k) {
                    const double g = go[i * c + k];
                    const double xh = (x[i * c + k] - mean[k]) * inv_std[k];
                    s_go[k] += g;
                    s_gox[k] += g * xh;
                }
            if (g_c.requires_grad()) {
                auto gg = g_c.grad();
                for (std::size_t k = 0; k < c; ++k) gg[k] += T(s_gox[k]);
            }
            if (bt_c.requires_grad()) {
                auto gb = bt_c.grad();
                for (std::size_t k = 0; k < c; ++k) gb[k] += T(s_go[k]);
            }
            if (in_c.requires_grad()) {
                auto gx = in_c.grad();
                const T* pg = g_c.data();
                if (batch_stats) {
                    const double inv_n = 1.0 / double(n);
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t k = 0; k < c; ++k) {
                            const double g = go[i * c + k];
                            const double xh = (x[i * c + k] - mean[k]) * inv_std[k];
                            gx[i * c + k] += T(double(pg[k]) * double(inv_std[k]) *
                                               (g - inv_n * s_go[k] - xh * inv_n * s_gox[k]));
                        }
                } else {
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t k = 0; k < c; ++k)
                            gx[i * c + k] += go[i * c + k] * pg[k] * inv_std[k];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

enum class PoolOdd {
    Error,    // odd spatial dims are a shape error
    Discard,  // pool the windows that fit, drop the trailing row/column
};

/// 2x2 max pooling, stride 2. Gradient goes to the argmax element,
/// first-index tie-break.
template <typename T>
Tensor<T> max_pool_2x2(Tape<T>& tape, const Tensor<T>& input, PoolOdd odd_policy = PoolOdd::Error) {
    if (input.rank() != 4)
        throw ShapeError("max_pool_2x2: input must be [B,H,W,C], got " + shape_str(input.shape()));
    const std::size_t b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
    if (odd_policy == PoolOdd::Error && (h % 2 != 0 || w % 2 != 0))
        throw ShapeError("max_pool_2x2: spatial dims must be even, got " + shape_str(input.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0)
        throw ShapeError("max_pool_2x2: input too small to pool, " + shape_str(input.shape()));

    Tensor<T> out({b, oh, ow, c});
    std::vector<std::uint32_t> argmax(out.size());
    const T* p = input.data();
    T* po = out.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x)
                for (std::size_t k = 0; k < c; ++k) {
                    std::size_t best = ((i * h + 2 * y) * w + 2 * x) * c + k;
                    T best_v = p[best];
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = ((i * h + 2 * y + dy) * w + 2 * x + dx) * c + k;
                            if (p[idx] > best_v) {
                                best_v = p[idx];
                                best = idx;
                            }
                        }
                    const std::size_t oidx = ((i * oh + y) * ow + x) * c + k;
                    po[oidx] = best_v;
                    argmax[oidx] = std::uint32_t(best);
                }

    if (tape.recording() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, o_c = out;
        tape.record(out, [in_c, o_c, argmax = std::move(argmax)]() mutable {
            auto gi = in_c.grad();
            auto go = o_c.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gi[argmax[i]] += go[i];
        });
    }
    return out;
}

/// Mean over the spatial axes: [B,H,W,C] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& input) {
    if (input.rank() != 4)
        throw ShapeError("global_avg_pool: input must be [B,H,W,C], got " + shape_str(input.shape()));
    const std::size_t b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
    const std::size_t hw = h * w;
    Tensor<T> out({b, c});
    const T* p = input.data();
    T* po = out.data();
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> acc(c, 0.0);
        for (std::size_t j = 0; j < hw; ++j)
            for (std::size_t k = 0; k < c; ++k) acc[k] += p[(i * hw + j) * c + k];
        for (std::size_t k = 0; k < c; ++k) po[i * c + k] = T(acc[k] / double(hw));
    }
    if (tape.recording() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, o_c = out;
        tape.record(out, [in_c, o_c, b, hw, c]() mutable {
            auto gi = in_c.grad();
            auto go = o_c.grad();
            const T inv = T(1) / T(hw);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t j = 0; j < hw; ++j)
                    for (std::size_t k = 0; k < c; ++k)
                        gi[(i * hw + j) * c + k] += go[i * c + k] * inv;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// dense / shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw ShapeError("concat_channels: need [B,C1],[B,C2] with equal B, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t rows = a.dim(0), c1 = a.dim(1), c2 = b.dim(1);
    Tensor<T> out({rows, c1 + c2});
    for (std::size_t i = 0; i < rows; ++i) {
        std::copy(a.data() + i * c1, a.data() + (i + 1) * c1, out.data() + i * (c1 + c2));
        std::copy(b.data() + i * c2, b.data() + (i + 1) * c2, out.data() + i * (c1 + c2) + c1);
    }
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ac = a, bc = b, oc = out;
        tape.record(out, [ac, bc, oc, rows, c1, c2]() mutable {
            auto go = oc.grad();
            if (ac.requires_grad()) {
                auto ga = ac.grad();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < c1; ++j) ga[i * c1 + j] += go[i * (c1 + c2) + j];
            }
            if (bc.requires_grad()) {
                auto gb = bc.grad();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < c2; ++j) gb[i * c2 + j] += go[i * (c1 + c2) + c1 + j];
            }
        });
    }
    return out;
}

/// out = input * W + b.  input [B,D], W [D,E], b [E].
template <typename T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weights,
                 const Tensor<T>& bias) {
    if (input.rank() != 2 || weights.rank() != 2 || input.dim(1) != weights.dim(0))
        throw ShapeError("affine: need [B,D]x[D,E], got " + shape_str(input.shape()) + " and " +
                         shape_str(weights.shape()));
    const std::size_t rows = input.dim(0), d = input.dim(1), e = weights.dim(1);
    if (bias.size() != e)
        throw ShapeError("affine: bias size " + std::to_string(bias.size()) + " != " + std::to_string(e));
    Tensor<T> out({rows, e});
    {
        ConstMapRM<T> xm(input.data(), rows, d);
        ConstMapRM<T> wm(weights.data(), d, e);
        MapRM<T> om(out.data(), rows, e);
        om.noalias() = xm * wm;
        Eigen::Map<const Eigen::RowVector<T, Eigen::Dynamic>> bv(bias.data(), e);
        om.rowwise() += bv;
    }
    if (tape.recording() &&
        (input.requires_grad() || weights.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> x_c = input, w_c = weights, b_c = bias, o_c = out;
        tape.record(out, [x_c, w_c, b_c, o_c, rows, d, e]() mutable {
            ConstMapRM<T> dy(o_c.grad().data(), rows, e);
            if (x_c.requires_grad()) {
                ConstMapRM<T> wm(w_c.data(), d, e);
                MapRM<T> dx(x_c.grad().data(), rows, d);
                dx.noalias() += dy * wm.transpose();
            }
            if (w_c.requires_grad()) {
                ConstMapRM<T> xm(x_c.data(), rows, d);
                MapRM<T> dw(w_c.grad().data(), d, e);
                dw.noalias() += xm.transpose() * dy;
            }
            if (b_c.requires_grad()) {
                auto gb = b_c.grad();
                const T* go = o_c.grad().data();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < e; ++j) gb[j] += go[i * e + j];
            }
        });
    }
    return out;
}

/// Row-wise softmax over the last axis of [B,D], max-subtracted for stability.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& input) {
    if (input.rank() != 2)
        throw ShapeError("softmax: input must be [B,D], got " + shape_str(input.shape()));
    const std::size_t rows = input.dim(0), d = input.dim(1);
    Tensor<T> out(input.shape());
    const T* p = input.data();
    T* po = out.data();
    for (std::size_t i = 0; i < rows; ++i) {
        T mx = p[i * d];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, p[i * d + j]);
        double denom = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T ev = T(std::exp(double(p[i * d + j] - mx)));
            po[i * d + j] = ev;
            denom += ev;
        }
        const T inv = T(1.0 / denom);
        for (std::size_t j = 0; j < d; ++j) po[i * d + j] *= inv;
    }
    if (tape.recording() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, o_c = out;
        tape.record(out, [in_c, o_c, rows, d]() mutable {
            auto gi = in_c.grad();
            const T* y = o_c.data();
            const T* go = o_c.grad().data();
            for (std::size_t i = 0; i < rows; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += double(go[i * d + j]) * double(y[i * d + j]);
                for (std::size_t j = 0; j < d; ++j)
                    gi[i * d + j] += T((double(go[i * d + j]) - dot) * double(y[i * d + j]));
            }
        });
    }
    return out;
}

/// Column slice [c0, c1) of a [B,D] tensor.
template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& input, std::size_t c0, std::size_t c1) {
    if (input.rank() != 2 || c1 > input.dim(1) || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") for " + shape_str(input.shape()));
    const std::size_t rows = input.dim(0), d = input.dim(1), sw = c1 - c0;
    Tensor<T> out({rows, sw});
    for (std::size_t i = 0; i < rows; ++i)
        std::copy(input.data() + i * d + c0, input.data() + i * d + c1, out.data() + i * sw);
    if (tape.recording() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, o_c = out;
        tape.record(out, [in_c, o_c, rows, d, c0, sw]() mutable {
            auto gi = in_c.grad();
            const T* go = o_c.grad().data();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < sw; ++j) gi[i * d + c0 + j] += go[i * sw + j];
        });
    }
    return out;
}

/// Select rows along axis 0; indices may repeat. Gradient scatter-adds.
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& input, const std::vector<std::size_t>& indices) {
    if (input.rank() < 1)
        throw ShapeError("gather_rows: input must have a leading axis");
    const std::size_t b = input.dim(0);
    const std::size_t row = input.size() / std::max<std::size_t>(b, 1);
    for (std::size_t idx : indices)
        if (idx >= b)
            throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range " +
                             std::to_string(b));
    Shape out_shape = input.shape();
    out_shape[0] = indices.size();
    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(input.data() + indices[i] * row, input.data() + (indices[i] + 1) * row,
                  out.data() + i * row);
    if (tape.recording() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, o_c = out;
        tape.record(out, [in_c, o_c, indices, row]() mutable {
            auto gi = in_c.grad();
            const T* go = o_c.grad().data();
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < row; ++j) gi[indices[i] * row + j] += go[i * row + j];
        });
    }
    return out;
}

/// Reshape without copying values (the node is shared, grads flow through).
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& input, Shape new_shape) {
    if (shape_numel(new_shape) != input.size())
        throw ShapeError("reshape: " + shape_str(input.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    Tensor<T> out = Tensor<T>::from_data(new_shape, std::vector<T>(input.values().begin(),
                                                                   input.values().end()));
    if (tape.recording() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, o_c = out;
        tape.record(out, [in_c, o_c]() mutable {
            auto gi = in_c.grad();
            auto go = o_c.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        });
    }
    return out;
}

} // namespace xmodnet

#endif // XMODNET_OPS_HPP
