#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kernels.hpp"
#include "tensor.hpp"

// Differentiable primitives. Every op validates shapes, checks that its
// output is finite, and records a backward closure when any input requires
// grad. Broadcasting is limited to leading axes: a binary op accepts two
// equal shapes, or one shape that is a trailing suffix of the other.
namespace rfm {

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline std::string shapes_msg(const char* op, const Shape& a, const Shape& b) {
    return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

inline std::size_t norm_axis(int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

struct BinaryLayout {
    Shape out;
    std::size_t na, nb;
};

inline BinaryLayout binary_layout(const char* op, const Shape& a, const Shape& b) {
    if (a == b || is_suffix(b, a)) return {a, numel(a), numel(b)};
    if (is_suffix(a, b)) return {b, numel(a), numel(b)};
    throw ShapeError(shapes_msg(op, a, b));
}

// Visits the output in runs over which both operands are contiguous: the
// broadcast operand repeats with period min(na, nb).
template <class F>
void for_runs(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
    const std::size_t m = std::min(na, nb);
    if (m == 0) return;
    for (std::size_t o = 0; o < n; o += m) f(o, na == n ? o : 0, nb == n ? o : 0, m);
}

}  // namespace detail

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const auto lay = detail::binary_layout("add", a.shape(), b.shape());
    const std::size_t n = numel(lay.out), na = lay.na, nb = lay.nb;
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t m) {
        for (std::size_t k = 0; k < m; ++k) out[o + k] = pa[ao + k] + pb[bo + k];
    });
    auto ia = a.impl(), ib = b.impl();
    return detail::make_result<T>("add", lay.out, std::move(out), {&a, &b}, [ia, ib, n, na, nb](std::span<const T> g) {
        if (T* ga = detail::grad_of(ia))
            detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t, std::size_t m) {
                for (std::size_t k = 0; k < m; ++k) ga[ao + k] += g[o + k];
            });
        if (T* gb = detail::grad_of(ib))
            detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t, std::size_t bo, std::size_t m) {
                for (std::size_t k = 0; k < m; ++k) gb[bo + k] += g[o + k];
            });
    });
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    const auto lay = detail::binary_layout("sub", a.shape(), b.shape());
    const std::size_t n = numel(lay.out), na = lay.na, nb = lay.nb;
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t m) {
        for (std::size_t k = 0; k < m; ++k) out[o + k] = pa[ao + k] - pb[bo + k];
    });
    auto ia = a.impl(), ib = b.impl();
    return detail::make_result<T>("sub", lay.out, std::move(out), {&a, &b}, [ia, ib, n, na, nb](std::span<const T> g) {
        if (T* ga = detail::grad_of(ia))
            detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t, std::size_t m) {
                for (std::size_t k = 0; k < m; ++k) ga[ao + k] += g[o + k];
            });
        if (T* gb = detail::grad_of(ib))
            detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t, std::size_t bo, std::size_t m) {
                for (std::size_t k = 0; k < m; ++k) gb[bo + k] -= g[o + k];
            });
    });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const auto lay = detail::binary_layout("mul", a.shape(), b.shape());
    const std::size_t n = numel(lay.out), na = lay.na, nb = lay.nb;
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t m) {
        for (std::size_t k = 0; k < m; ++k) out[o + k] = pa[ao + k] * pb[bo + k];
    });
    auto ia = a.impl(), ib = b.impl();
    return detail::make_result<T>("mul", lay.out, std::move(out), {&a, &b}, [ia, ib, n, na, nb](std::span<const T> g) {
        const T* pa = ia->data.data();
        const T* pb = ib->data.data();
        if (T* ga = detail::grad_of(ia))
            detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t m) {
                for (std::size_t k = 0; k < m; ++k) ga[ao + k] += g[o + k] * pb[bo + k];
            });
        if (T* gb = detail::grad_of(ib))
            detail::for_runs(n, na, nb, [&](std::size_t o, std::size_t ao, std::size_t bo, std::size_t m) {
                for (std::size_t k = 0; k < m; ++k) gb[bo + k] += g[o + k] * pa[ao + k];
            });
    });
}

template <Real T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (T& v : out) v += s;
    auto ia = a.impl();
    return detail::make_result<T>("add_scalar", a.shape(), std::move(out), {&a}, [ia](std::span<const T> g) {
        T* ga = detail::grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <Real T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (T& v : out) v *= s;
    auto ia = a.impl();
    return detail::make_result<T>("mul_scalar", a.shape(), std::move(out), {&a}, [ia, s](std::span<const T> g) {
        T* ga = detail::grad_of(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

/// Batched matrix product [..,i,k] x [..,k,j]; batch extents broadcast
/// numpy-style (equal, 1, or absent).
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.dim() < 2 || b.dim() < 2) throw ShapeError(detail::shapes_msg("matmul", a.shape(), b.shape()));
    const std::size_t ni = a.size(-2), nk = a.size(-1), nj = b.size(-1);
    if (b.size(-2) != nk) throw ShapeError(detail::shapes_msg("matmul", a.shape(), b.shape()));

    const Shape ba(a.shape().begin(), a.shape().end() - 2);
    const Shape bb(b.shape().begin(), b.shape().end() - 2);
    const std::size_t rank = std::max(ba.size(), bb.size());
    Shape batch(rank);
    std::vector<std::size_t> stride_a(rank, 0), stride_b(rank, 0);
    {
        std::size_t sa = ni * nk, sb = nk * nj;
        for (std::size_t r = 0; r < rank; ++r) {
            const std::size_t pos = rank - 1 - r;
            const std::size_t ea = r < ba.size() ? ba[ba.size() - 1 - r] : 1;
            const std::size_t eb = r < bb.size() ? bb[bb.size() - 1 - r] : 1;
            if (ea != eb && ea != 1 && eb != 1) throw ShapeError(detail::shapes_msg("matmul", a.shape(), b.shape()));
            batch[pos] = std::max(ea, eb);
            stride_a[pos] = ea == 1 ? 0 : sa;
            stride_b[pos] = eb == 1 ? 0 : sb;
            sa *= ea;
            sb *= eb;
        }
    }
    const std::size_t nbatch = numel(batch);
    std::vector<std::size_t> off_a(nbatch), off_b(nbatch);
    for (std::size_t idx = 0; idx < nbatch; ++idx) {
        std::size_t rem = idx, oa = 0, ob = 0;
        for (std::size_t p = rank; p-- > 0;) {
            const std::size_t coord = rem % batch[p];
            rem /= batch[p];
            oa += coord * stride_a[p];
            ob += coord * stride_b[p];
        }
        off_a[idx] = oa;
        off_b[idx] = ob;
    }

    Shape out_shape = batch;
    out_shape.push_back(ni);
    out_shape.push_back(nj);
    std::vector<T> out(nbatch * ni * nj, T(0));
    for (std::size_t idx = 0; idx < nbatch; ++idx)
        kernels::gemm_nn(ni, nk, nj, a.data().data() + off_a[idx], b.data().data() + off_b[idx], out.data() + idx * ni * nj);

    auto ia = a.impl(), ib = b.impl();
    return detail::make_result<T>(
        "matmul", std::move(out_shape), std::move(out), {&a, &b},
        [ia, ib, off_a, off_b, ni, nk, nj](std::span<const T> g) {
            T* ga = detail::grad_of(ia);
            T* gb = detail::grad_of(ib);
            for (std::size_t idx = 0; idx < off_a.size(); ++idx) {
                const T* gc = g.data() + idx * ni * nj;
                if (ga) kernels::gemm_nt(ni, nj, nk, gc, ib->data.data() + off_b[idx], ga + off_a[idx]);
                if (gb) kernels::gemm_tn(ni, nk, nj, ia->data.data() + off_a[idx], gc, gb + off_b[idx]);
            }
        });
}

/// x[.., in] * W[out, in]^T + b[out]. `bias` may be undefined.
template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    if (weight.dim() != 2 || x.size(-1) != weight.size(1))
        throw ShapeError(detail::shapes_msg("linear", x.shape(), weight.shape()));
    const std::size_t in = weight.size(1), outf = weight.size(0);
    if (bias.defined() && (bias.dim() != 1 || bias.size(0) != outf))
        throw ShapeError(detail::shapes_msg("linear(bias)", weight.shape(), bias.shape()));
    const std::size_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outf;
    std::vector<T> out(rows * outf, T(0));
    if (bias.defined()) {
        for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * outf);
    }
    kernels::gemm_nt(rows, in, outf, x.data().data(), weight.data().data(), out.data());

    auto ix = x.impl(), iw = weight.impl();
    auto ib = bias.defined() ? bias.impl() : nullptr;
    std::function<void(std::span<const T>)> bw = [ix, iw, ib, rows, in, outf](std::span<const T> g) {
        if (T* gx = detail::grad_of(ix)) kernels::gemm_nn(rows, outf, in, g.data(), iw->data.data(), gx);
        if (T* gw = detail::grad_of(iw)) kernels::gemm_tn(rows, outf, in, g.data(), ix->data.data(), gw);
        if (ib) {
            if (T* gb = detail::grad_of(ib))
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < outf; ++o) gb[o] += g[r * outf + o];
        }
    };
    if (bias.defined()) return detail::make_result<T>("linear", std::move(out_shape), std::move(out), {&x, &weight, &bias}, std::move(bw));
    return detail::make_result<T>("linear", std::move(out_shape), std::move(out), {&x, &weight}, std::move(bw));
}

/// Softmax along the last axis.
template <Real T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t d = x.size(-1), rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T* yr = out.data() + r * d;
        const T mx = *std::max_element(xr, xr + d);
        T s = 0;
        for (std::size_t j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < d; ++j) yr[j] /= s;
    }
    auto ix = x.impl();
    auto result = detail::make_result<T>("softmax", x.shape(), std::move(out), {&x}, nullptr);
    if (result.requires_grad()) {
        std::weak_ptr<detail::TensorImpl<T>> wy = result.impl();
        result.impl()->grad_fn->backward = [ix, wy, rows, d](std::span<const T> g) {
            const T* y = wy.lock()->data.data();
            T* gx = detail::grad_of(ix);
            for (std::size_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
            }
        };
    }
    return result;
}

template <Real T>
Tensor<T> silu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] / (T(1) + std::exp(-px[i]));
    auto ix = x.impl();
    return detail::make_result<T>("silu", x.shape(), std::move(out), {&x}, [ix](std::span<const T> g) {
        const T* px = ix->data.data();
        T* gx = detail::grad_of(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-px[i]));
            gx[i] += g[i] * s * (T(1) + px[i] * (T(1) - s));
        }
    });
}

/// GELU, tanh approximation.
template <Real T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kA = T(0.044715);
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = px[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
    }
    auto ix = x.impl();
    return detail::make_result<T>("gelu", x.shape(), std::move(out), {&x}, [ix](std::span<const T> g) {
        const T* px = ix->data.data();
        T* gx = detail::grad_of(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = px[i];
            const T th = std::tanh(kC * (v + kA * v * v * v));
            const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
            gx[i] += g[i] * d;
        }
    });
}

template <Real T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::validate_shape(shape);
    if (numel(shape) != x.numel()) throw ShapeError(detail::shapes_msg("reshape", x.shape(), shape));
    auto ix = x.impl();
    return detail::make_result<T>("reshape", std::move(shape), x.to_vector(), {&x}, [ix](std::span<const T> g) {
        T* gx = detail::grad_of(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <Real T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t rank = x.dim();
    if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + to_string(x.shape()));
    std::vector<bool> seen(rank, false);
    for (std::size_t p : perm) {
        if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation for " + to_string(x.shape()));
        seen[p] = true;
    }
    std::vector<std::size_t> in_stride(rank, 1);
    for (std::size_t i = rank - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.shape()[i + 1];
    Shape out_shape(rank);
    std::vector<std::size_t> src_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = x.shape()[perm[i]];
        src_stride[i] = in_stride[perm[i]];
    }
    const std::size_t n = x.numel();
    // index[j] = source offset of output element j
    std::vector<std::size_t> index(n);
    {
        std::vector<std::size_t> coord(rank, 0);
        std::size_t src = 0;
        for (std::size_t j = 0; j < n; ++j) {
            index[j] = src;
            for (std::size_t ax = rank; ax-- > 0;) {
                ++coord[ax];
                src += src_stride[ax];
                if (coord[ax] < out_shape[ax]) break;
                src -= src_stride[ax] * coord[ax];
                coord[ax] = 0;
            }
        }
    }
    std::vector<T> out(n);
    const T* px = x.data().data();
    for (std::size_t j = 0; j < n; ++j) out[j] = px[index[j]];
    auto ix = x.impl();
    return detail::make_result<T>("permute", std::move(out_shape), std::move(out), {&x},
                                  [ix, index = std::move(index)](std::span<const T> g) {
                                      T* gx = detail::grad_of(ix);
                                      for (std::size_t j = 0; j < g.size(); ++j) gx[index[j]] += g[j];
                                  });
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& x, int axis0, int axis1) {
    std::vector<std::size_t> perm(x.dim());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[detail::norm_axis(axis0, x.dim())], perm[detail::norm_axis(axis1, x.dim())]);
    return permute(x, perm);
}

template <Real T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t rank = parts[0].dim();
    const std::size_t ax = detail::norm_axis(axis, rank);
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != rank) throw ShapeError(detail::shapes_msg("concat", parts[0].shape(), s));
        for (std::size_t i = 0; i < rank; ++i)
            if (i != ax && s[i] != parts[0].shape()[i]) throw ShapeError(detail::shapes_msg("concat", parts[0].shape(), s));
        out_shape[ax] += s[ax];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
    for (std::size_t i = ax + 1; i < rank; ++i) inner *= out_shape[i];
    const std::size_t out_row = out_shape[ax] * inner;
    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t row = p.shape()[ax] * inner;
        offsets.push_back(off);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data().data() + o * row, row, out.data() + o * out_row + off);
        off += row;
    }
    std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return detail::make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                                  [impls, offsets, outer, out_row](std::span<const T> g) {
                                      for (std::size_t k = 0; k < impls.size(); ++k) {
                                          T* gp = detail::grad_of(impls[k]);
                                          if (!gp) continue;
                                          const std::size_t row = impls[k]->data.size() / outer;
                                          for (std::size_t o = 0; o < outer; ++o)
                                              for (std::size_t i = 0; i < row; ++i) gp[o * row + i] += g[o * out_row + offsets[k] + i];
                                      }
                                  });
}

/// Contiguous range [start, start+len) along `axis`.
template <Real T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t len) {
    const std::size_t ax = detail::norm_axis(axis, x.dim());
    if (len == 0 || start + len > x.shape()[ax])
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of range for " + to_string(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
    for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= x.shape()[i];
    const std::size_t in_row = x.shape()[ax] * inner, out_row = len * inner, off = start * inner;
    Shape out_shape = x.shape();
    out_shape[ax] = len;
    std::vector<T> out(outer * out_row);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * in_row + off, out_row, out.data() + o * out_row);
    auto ix = x.impl();
    return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {&x},
                                  [ix, outer, in_row, out_row, off](std::span<const T> g) {
                                      T* gx = detail::grad_of(ix);
                                      for (std::size_t o = 0; o < outer; ++o)
                                          for (std::size_t i = 0; i < out_row; ++i) gx[o * in_row + off + i] += g[o * out_row + i];
                                  });
}

template <Real T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::size_t>& sizes) {
    const std::size_t ax = detail::norm_axis(axis, x.dim());
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != x.shape()[ax])
        throw ShapeError("split sizes do not cover axis of " + to_string(x.shape()));
    std::vector<Tensor<T>> parts;
    std::size_t start = 0;
    for (std::size_t s : sizes) {
        parts.push_back(slice(x, axis, start, s));
        start += s;
    }
    return parts;
}

/// Inserts a new axis of extent n at `axis`, repeating x along it.
template <Real T>
Tensor<T> expand(const Tensor<T>& x, std::size_t axis, std::size_t n) {
    if (axis > x.dim() || n == 0) throw ShapeError("expand: invalid axis/extent for " + to_string(x.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (std::size_t i = axis; i < x.dim(); ++i) inner *= x.shape()[i];
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
    std::vector<T> out(outer * n * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < n; ++r) std::copy_n(x.data().data() + o * inner, inner, out.data() + (o * n + r) * inner);
    auto ix = x.impl();
    return detail::make_result<T>("expand", std::move(out_shape), std::move(out), {&x}, [ix, outer, n, inner](std::span<const T> g) {
        T* gx = detail::grad_of(ix);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t i = 0; i < inner; ++i) gx[o * inner + i] += g[(o * n + r) * inner + i];
    });
}

template <Real T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    auto ix = x.impl();
    return detail::make_result<T>("sum", {1}, {s}, {&x}, [ix](std::span<const T> g) {
        T* gx = detail::grad_of(ix);
        for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += g[0];
    });
}

template <Real T>
Tensor<T> mean(const Tensor<T>& x) {
    return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Reduces `axis` by summation; a rank-1 input yields shape [1].
template <Real T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
    const std::size_t ax = detail::norm_axis(axis, x.dim());
    std::size_t outer = 1, inner = 1;
    const std::size_t len = x.shape()[ax];
    for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
    for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= x.shape()[i];
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
    std::vector<T> out(outer * inner, T(0));
    const T* px = x.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < len; ++r)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += px[(o * len + r) * inner + i];
    auto ix = x.impl();
    return detail::make_result<T>("sum_axis", std::move(out_shape), std::move(out), {&x}, [ix, outer, len, inner](std::span<const T> g) {
        T* gx = detail::grad_of(ix);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t r = 0; r < len; ++r)
                for (std::size_t i = 0; i < inner; ++i) gx[(o * len + r) * inner + i] += g[o * inner + i];
    });
}

template <Real T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
    const std::size_t len = x.size(axis);
    return mul_scalar(sum_axis(x, axis), T(1) / static_cast<T>(len));
}

/// Mean squared error over all elements.
template <Real T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError(detail::shapes_msg("mse", a.shape(), b.shape()));
    const std::size_t n = a.numel();
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = a[i] - b[i];
        s += d * d;
    }
    auto ia = a.impl(), ib = b.impl();
    return detail::make_result<T>("mse", {1}, {s / static_cast<T>(n)}, {&a, &b}, [ia, ib, n](std::span<const T> g) {
        const T scale = T(2) * g[0] / static_cast<T>(n);
        T* ga = detail::grad_of(ia);
        T* gb = detail::grad_of(ib);
        for (std::size_t i = 0; i < n; ++i) {
            const T d = (ia->data[i] - ib->data[i]) * scale;
            if (ga) ga[i] += d;
            if (gb) gb[i] -= d;
        }
    });
}

/// x / sqrt(mean(x^2) + eps) * gain along the last axis.
template <Real T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
    if (!(eps > T(0))) throw ConfigError("rms_norm: eps must be positive");
    const std::size_t d = x.size(-1);
    if (gain.dim() != 1 || gain.size(0) != d) throw ShapeError(detail::shapes_msg("rms_norm", x.shape(), gain.shape()));
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel()), inv(rows);
    const T* px = x.data().data();
    const T* pg = gain.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        T ms = 0;
        for (std::size_t j = 0; j < d; ++j) ms += px[r * d + j] * px[r * d + j];
        inv[r] = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = px[r * d + j] * inv[r] * pg[j];
    }
    auto ix = x.impl(), ig = gain.impl();
    return detail::make_result<T>("rms_norm", x.shape(), std::move(out), {&x, &gain},
                                  [ix, ig, inv = std::move(inv), rows, d](std::span<const T> g) {
                                      const T* px = ix->data.data();
                                      const T* pg = ig->data.data();
                                      T* gx = detail::grad_of(ix);
                                      T* gg = detail::grad_of(ig);
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          const T* xr = px + r * d;
                                          const T* gr = g.data() + r * d;
                                          if (gg)
                                              for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xr[j] * inv[r];
                                          if (gx) {
                                              T dot = 0;
                                              for (std::size_t j = 0; j < d; ++j) dot += gr[j] * pg[j] * xr[j];
                                              const T c = dot * inv[r] * inv[r] / static_cast<T>(d);
                                              for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv[r] * (gr[j] * pg[j] - xr[j] * c);
                                          }
                                      }
                                  });
}

/// Scaled dot-product attention over [b, h, s, dh] operands.
/// `key_mask`, when given, has b*s entries (row-major [b][s]); keys with a
/// zero entry receive exactly zero attention weight. Every query row must
/// keep at least one key.
template <Real T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::uint8_t> key_mask = {}) {
    if (q.dim() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
        throw ShapeError("attention: q/k/v shapes differ: " + to_string(q.shape()) + " " + to_string(k.shape()) + " " +
                         to_string(v.shape()));
    }
    const std::size_t nb = q.size(0), nh = q.size(1), s = q.size(2), dh = q.size(3);
    if (!key_mask.empty() && key_mask.size() != nb * s) throw ShapeError("attention: key mask size mismatch");
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> probs(nb * nh * s * s, T(0));
    std::vector<T> out(q.numel(), T(0));
    std::vector<T> kt(dh * s);
    for (std::size_t b = 0; b < nb; ++b) {
        const std::uint8_t* mask = key_mask.empty() ? nullptr : key_mask.data() + b * s;
        if (mask && std::none_of(mask, mask + s, [](std::uint8_t m) { return m != 0; }))
            throw ContractError("attention: all keys masked");
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t base = (b * nh + h) * s * dh;
            T* p = probs.data() + (b * nh + h) * s * s;
            kernels::transpose(s, dh, k.data().data() + base, kt.data());
            kernels::gemm_nn(s, dh, s, q.data().data() + base, kt.data(), p);
            for (std::size_t i = 0; i < s; ++i) {
                T* row = p + i * s;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < s; ++j) {
                    row[j] *= scale;
                    if (!mask || mask[j]) mx = std::max(mx, row[j]);
                }
                T total = 0;
                for (std::size_t j = 0; j < s; ++j) {
                    row[j] = (!mask || mask[j]) ? std::exp(row[j] - mx) : T(0);
                    total += row[j];
                }
                for (std::size_t j = 0; j < s; ++j) row[j] /= total;
            }
            kernels::gemm_nn(s, s, dh, p, v.data().data() + base, out.data() + base);
        }
    }
    auto iq = q.impl(), ik = k.impl(), iv = v.impl();
    return detail::make_result<T>(
        "attention", q.shape(), std::move(out), {&q, &k, &v},
        [iq, ik, iv, probs = std::move(probs), nb, nh, s, dh, scale](std::span<const T> g) {
            T* gq = detail::grad_of(iq);
            T* gk = detail::grad_of(ik);
            T* gv = detail::grad_of(iv);
            std::vector<T> dp(s * s);
            for (std::size_t bh = 0; bh < nb * nh; ++bh) {
                const std::size_t base = bh * s * dh;
                const T* p = probs.data() + bh * s * s;
                const T* go = g.data() + base;
                if (gv) kernels::gemm_tn(s, s, dh, p, go, gv + base);
                if (!gq && !gk) continue;
                std::fill(dp.begin(), dp.end(), T(0));
                kernels::gemm_nt(s, dh, s, go, iv->data.data() + base, dp.data());
                for (std::size_t i = 0; i < s; ++i) {
                    T dot = 0;
                    for (std::size_t j = 0; j < s; ++j) dot += dp[i * s + j] * p[i * s + j];
                    for (std::size_t j = 0; j < s; ++j) dp[i * s + j] = p[i * s + j] * (dp[i * s + j] - dot) * scale;
                }
                if (gq) kernels::gemm_nn(s, s, dh, dp.data(), ik->data.data() + base, gq + base);
                if (gk) kernels::gemm_tn(s, s, dh, dp.data(), iq->data.data() + base, gk + base);
            }
        });
}

/// Rotates adjacent feature pairs of x[b, h, s, dh] by per-token angles.
/// `cos`/`sin` hold s*(dh/2) entries laid out [s][dh/2].
template <Real T>
Tensor<T> rotate_pairs(const Tensor<T>& x, std::span<const T> cos, std::span<const T> sin) {
    if (x.dim() != 4 || x.size(3) % 2 != 0) throw ShapeError("rotate_pairs: expected [b,h,s,dh] with even dh, got " + to_string(x.shape()));
    const std::size_t s = x.size(2), half = x.size(3) / 2, rows = x.size(0) * x.size(1);
    if (cos.size() != s * half || sin.size() != s * half) throw ShapeError("rotate_pairs: angle table size mismatch");
    std::vector<T> c(cos.begin(), cos.end()), sn(sin.begin(), sin.end());
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t t = 0; t < s; ++t)
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t o = (r * s + t) * 2 * half + 2 * i;
                const T cv = c[t * half + i], sv = sn[t * half + i];
                out[o] = px[o] * cv - px[o + 1] * sv;
                out[o + 1] = px[o] * sv + px[o + 1] * cv;
            }
    auto ix = x.impl();
    return detail::make_result<T>("rotate_pairs", x.shape(), std::move(out), {&x},
                                  [ix, c = std::move(c), sn = std::move(sn), rows, s, half](std::span<const T> g) {
                                      T* gx = detail::grad_of(ix);
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t t = 0; t < s; ++t)
                                              for (std::size_t i = 0; i < half; ++i) {
                                                  const std::size_t o = (r * s + t) * 2 * half + 2 * i;
                                                  const T cv = c[t * half + i], sv = sn[t * half + i];
                                                  gx[o] += g[o] * cv + g[o + 1] * sv;
                                                  gx[o + 1] += -g[o] * sv + g[o + 1] * cv;
                                              }
                                  });
}

}  // namespace rfm
