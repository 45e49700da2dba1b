#pragma once

// Raw loops behind the differentiable ops. Inner loops are written as
// contiguous axpy/dot forms so the compiler can vectorize them.

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

namespace refgen::kernels {

inline void axpy(std::size_t n, float a, const float* x, float* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline float dot(std::size_t n, const float* x, const float* y) {
    float s = 0.0f;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

inline void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    for (std::size_t i = 0; i < m; ++i) {
        float* ci = c + i * n;
        const float* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) axpy(n, ai[p], b + p * n, ci);
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        const float* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) axpy(n, ai[p], bi, c + p * n);
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
    std::vector<float> bt(k * n);
    transpose(n, k, b, bt.data());
    gemm_nn(m, n, k, a, bt.data(), c);
}

// Geometry of a 1-D cross-correlation: out[t] = sum_k w[k] * in[t*stride + k - pad].
//
// Strided rows are handled in polyphase form: the input row is split into
// `stride` contiguous phases, phase r holding in[m*stride + r]. Tap k then
// reads phase r = (k-pad) mod stride at offset q = floor((k-pad)/stride),
// which keeps every inner loop contiguous. For stride 1 the split is the
// identity and no copy is made.
struct ConvGeom {
    std::size_t in_len = 0;
    std::size_t out_len = 0;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t phase_len(std::size_t r) const { return r < in_len ? (in_len - r + stride - 1) / stride : 0; }
    std::size_t phase_offset(std::size_t r) const {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += phase_len(i);
        return off;
    }

    struct Tap {
        std::size_t phase_start;  // offset of the first read inside the split row
        std::size_t lo, hi;       // output range [lo, hi)
    };

    Tap tap(std::size_t k) const {
        const long s = static_cast<long>(stride);
        const long o = static_cast<long>(k) - static_cast<long>(pad);
        const long r = ((o % s) + s) % s;
        const long q = (o - r) / s;
        const long n = static_cast<long>(phase_len(static_cast<std::size_t>(r)));
        const long lo = std::max<long>(0, -q);
        const long hi = std::min<long>(static_cast<long>(out_len), n - q);
        if (hi <= lo) return {0, 0, 0};
        return {phase_offset(static_cast<std::size_t>(r)) + static_cast<std::size_t>(lo + q),
                static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
    }
};

// dst <- polyphase split of src (length g.in_len).
inline void split_phases(const ConvGeom& g, const float* src, float* dst) {
    std::size_t off = 0;
    for (std::size_t r = 0; r < g.stride; ++r) {
        const std::size_t n = g.phase_len(r);
        for (std::size_t m = 0; m < n; ++m) dst[off + m] = src[m * g.stride + r];
        off += n;
    }
}

// dst += un-split of a polyphase row.
inline void merge_phases_add(const ConvGeom& g, const float* split, float* dst) {
    std::size_t off = 0;
    for (std::size_t r = 0; r < g.stride; ++r) {
        const std::size_t n = g.phase_len(r);
        for (std::size_t m = 0; m < n; ++m) dst[m * g.stride + r] += split[off + m];
        off += n;
    }
}

// out[t] += w * in[t*stride + k - pad], in given in polyphase form
inline void conv_gather(const ConvGeom& g, std::size_t k, float w, const float* in_split, float* out) {
    const auto t = g.tap(k);
    if (t.lo < t.hi) axpy(t.hi - t.lo, w, in_split + t.phase_start, out + t.lo);
}

// in[t*stride + k - pad] += w * out[t], in given in polyphase form
inline void conv_scatter(const ConvGeom& g, std::size_t k, float w, const float* out, float* in_split) {
    const auto t = g.tap(k);
    if (t.lo < t.hi) axpy(t.hi - t.lo, w, out + t.lo, in_split + t.phase_start);
}

// sum_t out[t] * in[t*stride + k - pad], in given in polyphase form
inline float conv_tap_dot(const ConvGeom& g, std::size_t k, const float* in_split, const float* out) {
    const auto t = g.tap(k);
    return t.lo < t.hi ? dot(t.hi - t.lo, in_split + t.phase_start, out + t.lo) : 0.0f;
}

}  // namespace refgen::kernels
