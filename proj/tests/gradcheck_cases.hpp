#pragma once

// Finite-difference cases for every differentiable primitive and the composite
// layers, shared by the unit tests and the acceptance binary. Each case returns
// the relative errors of its checks for one seed.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "refgen/autograd.hpp"
#include "test_util.hpp"

namespace refgen::testing {

struct GradCase {
    std::string name;
    std::function<std::vector<double>(std::uint64_t)> run;
};

// Values bounded away from zero so ReLU's kink is never straddled by +-h.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (auto& v : t.storage()) v = v >= 0 ? v + 0.05f : v - 0.05f;
    return t;
}

inline std::vector<GradCase> gradcheck_cases() {
    std::vector<GradCase> cases;
    auto add_case = [&](std::string name, std::function<void(std::uint64_t, std::mt19937_64&, std::vector<double>&)> f) {
        cases.push_back({std::move(name), [f](std::uint64_t seed) {
                             std::mt19937_64 rng{seed * 7919u + 1};
                             std::vector<double> out;
                             f(seed, rng, out);
                             return out;
                         }});
    };

    add_case("Elementwise", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var a = parameter(random_tensor({3, 4}, rng)), b = parameter(random_tensor({3, 4}, rng));
        out.push_back(gradcheck({a, b}, [&] { return add(a, b); }, seed));
        out.push_back(gradcheck({a, b}, [&] { return sub(a, b); }, seed));
        out.push_back(gradcheck({a, b}, [&] { return mul(a, b); }, seed));
        out.push_back(gradcheck({a}, [&] { return scale(a, -1.7f); }, seed));
        out.push_back(gradcheck({a}, [&] { return sum_sq(a); }, seed));
        out.push_back(gradcheck({a}, [&] { return mean(a); }, seed));
    });

    add_case("Activations", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var a = parameter(away_from_zero({5, 6}, rng));
        out.push_back(gradcheck({a}, [&] { return relu(a); }, seed));
        out.push_back(gradcheck({a}, [&] { return gelu(scale(a, 2.0f)); }, seed));
    });

    // Fixed mask per evaluation: the dropout rng is re-seeded inside f.
    add_case("Dropout", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var a = parameter(random_tensor({4, 6}, rng));
        out.push_back(gradcheck({a}, [&] {
            std::mt19937_64 mask(seed);
            return dropout(a, 0.3f, mask);
        }, seed));
    });

    add_case("ShapeOps", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var a = parameter(random_tensor({2, 3, 5}, rng));
        out.push_back(gradcheck({a}, [&] { return reshape(a, {6, 5}); }, seed));
        out.push_back(gradcheck({a}, [&] { return transpose_last2(a); }, seed));
        out.push_back(gradcheck({a}, [&] { return mean_last(a); }, seed));
        Var t = parameter(random_tensor({7, 4}, rng));
        out.push_back(gradcheck({t}, [&] { return slice_rows(t, 2, 6); }, seed));
        out.push_back(gradcheck({t}, [&] { return embedding(t, {3, 0, 3, 6, 1}); }, seed));
    });

    add_case("LinearAlgebra", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var a = parameter(random_tensor({4, 5}, rng)), b = parameter(random_tensor({5, 3}, rng));
        Var c = parameter(random_tensor({6, 5}, rng)), bias = parameter(random_tensor({3}, rng));
        out.push_back(gradcheck({a, b}, [&] { return matmul(a, b); }, seed));
        out.push_back(gradcheck({a, c}, [&] { return matmul_bt(a, c); }, seed));
        out.push_back(gradcheck({a, b, bias}, [&] { return affine(a, b, bias); }, seed));
    });

    add_case("Conv1d", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        const std::size_t stride = 1 + static_cast<int>(seed) % 2;
        Var x = parameter(random_tensor({2, 3, 11}, rng));
        Var w = parameter(random_tensor({4, 3, 3 + stride - 1}, rng));
        Var b = parameter(random_tensor({4}, rng));
        out.push_back(gradcheck({x, w, b}, [&] { return conv1d(x, w, b, stride, 1); }, seed));
    });

    add_case("Conv1dTranspose", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        const std::size_t stride = 1 + static_cast<int>(seed) % 2;
        Var x = parameter(random_tensor({2, 3, 7}, rng));
        Var w = parameter(random_tensor({3, 4, 2 + stride}, rng));
        Var b = parameter(random_tensor({4}, rng));
        out.push_back(gradcheck({x, w, b}, [&] { return conv1d_transpose(x, w, b, stride, 1); }, seed));
    });

    add_case("LayerNorm", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var x = parameter(random_tensor({4, 8}, rng, -2.0f, 2.0f));
        Var g = parameter(random_tensor({8}, rng, 0.5f, 1.5f));
        Var b = parameter(random_tensor({8}, rng));
        out.push_back(gradcheck({x, g, b}, [&] { return layer_norm(x, g, b); }, seed));
    });

    add_case("SoftmaxAndCrossEntropy", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var x = parameter(random_tensor({3, 6}, rng, -3.0f, 3.0f));
        out.push_back(gradcheck({x}, [&] { return softmax_rows(x); }, seed));
        out.push_back(gradcheck({x}, [&] { return softmax_cross_entropy(x, {1, -1, 5}); }, seed));
        out.push_back(gradcheck({x}, [&] { return kl_to_uniform(x); }, seed));
    });

    add_case("SquaredDistances", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var z = parameter(random_tensor({5, 4}, rng)), e = parameter(random_tensor({7, 4}, rng));
        out.push_back(gradcheck({z, e}, [&] { return sq_distances(z, e); }, seed));
        out.push_back(gradcheck({z, e}, [&] { return kl_to_uniform(scale(sq_distances(z, e), -1.0f)); }, seed));
    });

    add_case("CausalAttention", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        const std::size_t batch = 2, seq = 5, heads = 2, d = 4;
        Var qkv = parameter(random_tensor({batch * seq, 3 * d}, rng, -1.5f, 1.5f));
        out.push_back(gradcheck({qkv}, [&] { return causal_attention(qkv, batch, seq, heads); }, seed));
    });

    add_case("SphereProjection", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var x = parameter(random_tensor({4, 5}, rng, -2.0f, 2.0f));
        out.push_back(gradcheck({x}, [&] { return l2_normalize_rows(x, 3.0f); }, seed));
    });

    add_case("MarginalKl", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var x = parameter(random_tensor({6, 5}, rng, -3.0f, 3.0f));
        out.push_back(gradcheck({x}, [&] { return kl_marginal_to_uniform(x, 2); }, seed));
        out.push_back(gradcheck({x}, [&] { return kl_marginal_to_uniform(x, 1); }, seed));
    });

    // Composite: conv encoder -> sphere -> distances -> softmax-weighted codewords -> transposed-conv decoder.
    add_case("ConvAutoencoderChain", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        Var x = constant(random_tensor({2, 2, 8}, rng));
        Var w1 = parameter(random_tensor({3, 2, 4}, rng)), b1 = parameter(random_tensor({3}, rng));
        Var e = parameter(random_tensor({5, 3}, rng));
        Var w2 = parameter(random_tensor({3, 2, 4}, rng)), b2 = parameter(random_tensor({2}, rng));
        auto f = [&] {
            Var z = gelu(conv1d(x, w1, b1, 2, 1));  // [2,3,4]
            Var rows = l2_normalize_rows(reshape(transpose_last2(z), {8, 3}), 2.0f);
            Var soft = matmul(softmax_rows(scale(sq_distances(rows, e), -1.0f)), e);
            Var grid = transpose_last2(reshape(soft, {2, 4, 3}));
            return sum_sq(sub(conv1d_transpose(grid, w2, b2, 2, 1), x));
        };
        out.push_back(gradcheck({w1, b1, e, w2, b2}, f, seed));
    });

    // Composite: pre-norm attention block with residuals and a tied output head.
    add_case("TransformerBlockChain", [](std::uint64_t seed, std::mt19937_64& rng, std::vector<double>& out) {
        const std::size_t batch = 2, seq = 4, d = 4, heads = 2;
        Var emb = parameter(random_tensor({6, d}, rng));
        Var g = parameter(random_tensor({d}, rng, 0.5f, 1.5f)), bn = parameter(random_tensor({d}, rng));
        Var wq = parameter(random_tensor({d, 3 * d}, rng)), bq = parameter(random_tensor({3 * d}, rng));
        Var wo = parameter(random_tensor({d, d}, rng)), bo = parameter(random_tensor({d}, rng));
        const std::vector<int> ids{0, 3, 2, 5, 1, 1, 4, 0};
        auto f = [&] {
            Var x = embedding(emb, ids);
            Var qkv = affine(layer_norm(x, g, bn), wq, bq);
            x = add(x, affine(causal_attention(qkv, batch, seq, heads), wo, bo));
            return softmax_cross_entropy(matmul_bt(x, slice_rows(emb, 0, 4)), {-1, 1, 2, 3, -1, 0, 3, 2});
        };
        out.push_back(gradcheck({emb, g, bn, wq, bq, wo, bo}, f, seed));
    });
    return cases;
}

}  // namespace refgen::testing
