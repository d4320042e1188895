#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Dense inner loops. Every kernel has a serial reference and an OpenMP
// variant that splits work over output rows only, so both produce
// bit-identical results for any thread count.
namespace motionkit::kernels {

enum class Trans : std::uint8_t { None, Transpose };

struct GemmDims {
    std::size_t n = 0;  // rows of C
    std::size_t k = 0;  // contraction
    std::size_t m = 0;  // cols of C
};

// C (n x m) = op(A) * op(B), or C += ... when accumulate is set.
// op(A) is n x k: A is n x k (None) or k x n (Transpose).
// op(B) is k x m: B is k x m (None) or m x k (Transpose).
void gemm_serial(std::span<const double> a, Trans ta, std::span<const double> b, Trans tb, std::span<double> c,
                 GemmDims dims, bool accumulate = false);
void gemm_parallel(std::span<const double> a, Trans ta, std::span<const double> b, Trans tb, std::span<double> c,
                   GemmDims dims, bool accumulate = false);
// Picks the OpenMP variant for large products outside any parallel region.
void gemm(std::span<const double> a, Trans ta, std::span<const double> b, Trans tb, std::span<double> c,
          GemmDims dims, bool accumulate = false);

struct AttentionDims {
    std::size_t tokens = 0;
    std::size_t heads = 0;
    std::size_t head_dim = 0;
};

// q, k, v, out are tokens x (heads * head_dim). probs receives the softmax
// weights, heads x tokens x tokens. mask (tokens x tokens, nonzero = allowed)
// may be empty for full attention.
void attention_forward_serial(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                              std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                              AttentionDims dims);
void attention_forward_parallel(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                                std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                                AttentionDims dims);
void attention_forward(std::span<const double> q, std::span<const double> k, std::span<const double> v,
                       std::span<const std::uint8_t> mask, std::span<double> probs, std::span<double> out,
                       AttentionDims dims);

// Number of threads OpenMP would use; 1 when built without OpenMP.
int max_threads();
// No-op without OpenMP; n < 1 is treated as 1.
void set_threads(int n);
bool in_parallel();

}  // namespace motionkit::kernels
