#include "motionkit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace motionkit::kernels {

namespace {

constexpr std::size_t kParallelGemmWork = 1u << 16;

void check_gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmDims d) {
    if (a.size() != d.n * d.k || b.size() != d.k * d.m || c.size() != d.n * d.m) {
        throw std::invalid_argument("gemm operand sizes do not match dims");
    }
}

// One output row; the accumulation order depends only on (i, dims).
inline void gemm_row(const double* a, Trans ta, const double* b, Trans tb, double* c, GemmDims d, std::size_t i,
                     bool accumulate) {
    double* crow = c + i * d.m;
    if (!accumulate) std::fill(crow, crow + d.m, 0.0);
    if (tb == Trans::None) {
        for (std::size_t p = 0; p < d.k; ++p) {
            const double av = ta == Trans::None ? a[i * d.k + p] : a[p * d.n + i];
            const double* brow = b + p * d.m;
            for (std::size_t j = 0; j < d.m; ++j) crow[j] += av * brow[j];
        }
    } else {
        for (std::size_t j = 0; j < d.m; ++j) {
            const double* brow = b + j * d.k;
            double s = 0.0;
            if (ta == Trans::None) {
                const double* arow = a + i * d.k;
                for (std::size_t p = 0; p < d.k; ++p) s += arow[p] * brow[p];
            } else {
                for (std::size_t p = 0; p < d.k; ++p) s += a[p * d.n + i] * brow[p];
            }
            crow[j] += s;
        }
    }
}

inline void attention_head(const double* q, const double* k, const double* v, const std::uint8_t* mask,
                           double* probs, double* out, AttentionDims d, std::size_t h) {
    const std::size_t n = d.tokens;
    const std::size_t dh = d.head_dim;
    const std::size_t stride = d.heads * dh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    double* p = probs + h * n * n;
    for (std::size_t i = 0; i < n; ++i) {
        const double* qi = q + i * stride + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (mask && !mask[i * n + j]) {
                p[i * n + j] = -std::numeric_limits<double>::infinity();
                continue;
            }
            const double* kj = k + j * stride + h * dh;
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
            s *= scale;
            p[i * n + j] = s;
            mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double e = std::isinf(p[i * n + j]) ? 0.0 : std::exp(p[i * n + j] - mx);
            p[i * n + j] = e;
            z += e;
        }
        double* oi = out + i * stride + h * dh;
        std::fill(oi, oi + dh, 0.0);
        if (z == 0.0) continue;  // fully masked row
        for (std::size_t j = 0; j < n; ++j) {
            p[i * n + j] /= z;
            const double w = p[i * n + j];
            const double* vj = v + j * stride + h * dh;
            for (std::size_t e = 0; e < dh; ++e) oi[e] += w * vj[e];
        }
    }
}

void check_attention(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                     std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                     AttentionDims d) {
    const std::size_t width = d.tokens * d.heads * d.head_dim;
    if (q.size() != width || k.size() != width || v.size() != width || out.size() != width) {
        throw std::invalid_argument("attention operand sizes do not match dims");
    }
    if (probs.size() != d.heads * d.tokens * d.tokens) throw std::invalid_argument("attention probs buffer size");
    if (!mask.empty() && mask.size() != d.tokens * d.tokens) throw std::invalid_argument("attention mask size");
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    omp_set_num_threads(n < 1 ? 1 : n);
#else
    (void)n;
#endif
}

bool in_parallel() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

void gemm_serial(std::span<const double> a, Trans ta, std::span<const double> b, Trans tb, std::span<double> c,
                 GemmDims dims, bool accumulate) {
    check_gemm(a, b, c, dims);
    for (std::size_t i = 0; i < dims.n; ++i) gemm_row(a.data(), ta, b.data(), tb, c.data(), dims, i, accumulate);
}

void gemm_parallel(std::span<const double> a, Trans ta, std::span<const double> b, Trans tb, std::span<double> c,
                   GemmDims dims, bool accumulate) {
    check_gemm(a, b, c, dims);
    const auto n = static_cast<std::ptrdiff_t>(dims.n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        gemm_row(a.data(), ta, b.data(), tb, c.data(), dims, static_cast<std::size_t>(i), accumulate);
    }
}

void gemm(std::span<const double> a, Trans ta, std::span<const double> b, Trans tb, std::span<double> c,
          GemmDims dims, bool accumulate) {
    if (dims.n > 1 && dims.n * dims.k * dims.m >= kParallelGemmWork && max_threads() > 1 && !in_parallel()) {
        gemm_parallel(a, ta, b, tb, c, dims, accumulate);
    } else {
        gemm_serial(a, ta, b, tb, c, dims, accumulate);
    }
}

void attention_forward_serial(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                              std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                              AttentionDims dims) {
    check_attention(q, k, v, mask, probs, out, dims);
    const std::uint8_t* m = mask.empty() ? nullptr : mask.data();
    for (std::size_t h = 0; h < dims.heads; ++h) {
        attention_head(q.data(), k.data(), v.data(), m, probs.data(), out.data(), dims, h);
    }
}

void attention_forward_parallel(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                                std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                                AttentionDims dims) {
    check_attention(q, k, v, mask, probs, out, dims);
    const std::uint8_t* m = mask.empty() ? nullptr : mask.data();
    const auto heads = static_cast<std::ptrdiff_t>(dims.heads);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t h = 0; h < heads; ++h) {
        attention_head(q.data(), k.data(), v.data(), m, probs.data(), out.data(), dims, static_cast<std::size_t>(h));
    }
}

void attention_forward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                       std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                       AttentionDims dims) {
    if (dims.heads > 1 && max_threads() > 1 && !in_parallel()) {
        attention_forward_parallel(q, k, v, mask, probs, out, dims);
    } else {
        attention_forward_serial(q, k, v, mask, probs, out, dims);
    }
}

}  // namespace motionkit::kernels
