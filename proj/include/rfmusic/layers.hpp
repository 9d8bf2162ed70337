#pragma once

#include <functional>
#include <string>

#include "ops.hpp"
#include "rng.hpp"

namespace rfm {

enum class Init { kNormal, kZero };

template <Real T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& param)>;

/// Affine map x * W^T + b with W laid out [out, in].
template <Real T>
struct LinearWeights {
    Tensor<T> weight;
    Tensor<T> bias;

    static LinearWeights make(std::size_t in, std::size_t out, Rng& rng, Init init = Init::kNormal, double stddev = 0.02) {
        std::vector<T> w(in * out, T(0));
        if (init == Init::kNormal)
            for (T& v : w) v = static_cast<T>(rng.truncated_normal(stddev));
        return {Tensor<T>({out, in}, std::move(w), true), Tensor<T>::zeros({out}, true)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

    std::size_t in_features() const { return weight.size(1); }
    std::size_t out_features() const { return weight.size(0); }

    void visit(const std::string& prefix, const ParamVisitor<T>& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

/// Two-layer perceptron with a SiLU hidden activation.
template <Real T>
struct Mlp2Weights {
    LinearWeights<T> in;
    LinearWeights<T> out;

    static Mlp2Weights make(std::size_t in_dim, std::size_t width, Rng& rng) {
        auto a = LinearWeights<T>::make(in_dim, width, rng);
        auto b = LinearWeights<T>::make(width, width, rng);
        return {std::move(a), std::move(b)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return out(silu(in(x))); }

    void visit(const std::string& prefix, const ParamVisitor<T>& f) {
        in.visit(prefix + ".in", f);
        out.visit(prefix + ".out", f);
    }
};

template <Real T>
Tensor<T> ones_param(std::size_t n) {
    return Tensor<T>::full({n}, T(1), true);
}

}  // namespace rfm
