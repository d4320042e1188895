#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "motionkit/tensor.hpp"

namespace motionkit {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class TapeError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

// Records operations in creation order, which is a topological order, so
// backward() walks node ids downward and visits each node once.
class Tape {
   public:
    using BackwardFn = std::function<void(Tape&, std::span<const double> out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value);
    // Borrows the tensor; it must outlive the tape and stay unmodified.
    Var param(const Tensor& value);

    Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

    const Tensor& value(Var v) const { return node(v).value(); }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    // Gradient of the loss w.r.t. v; zeros when v did not influence it.
    Tensor grad(Var v) const;
    std::span<const double> grad_data(Var v) const;

    // Buffer to accumulate into, or nullptr when v needs no gradient.
    double* grad_target(std::size_t id);

    // Loss must be a single element. A tape supports one backward pass.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

   private:
    struct Node {
        Tensor owned;
        const Tensor* borrowed = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
        std::vector<double> grad;

        const Tensor& value() const { return borrowed ? *borrowed : owned; }
    };

    const Node& node(Var v) const;

    std::deque<Node> nodes_;
    bool consumed_ = false;
};

// Differentiable operations. Row-vector operands of add_row / mul_row and
// the shift/scale of adaptive_layer_norm broadcast over leading rows; no
// other broadcasting exists.
namespace ad {

Var matmul(Var a, Var b);
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);

Var softmax(Var a);
Var layer_norm(Var a, double eps = 1e-6);
// layer_norm(x) * (1 + scale) + shift.
Var adaptive_layer_norm(Var x, Var shift, Var scale, double eps = 1e-6);

Var relu(Var a);
Var silu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);

Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);

Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);

// Multi-head scaled dot-product attention over tokens x (heads * head_dim)
// operands. mask is tokens x tokens (nonzero = may attend) or empty.
Var attention(Var q, Var k, Var v, std::size_t heads, std::span<const std::uint8_t> mask = {});

// Rotary encoding of each head's consecutive coordinate pairs by
// position * base^(-2i / head_dim).
Var rope(Var x, std::span<const double> positions, std::size_t heads, double base = 10000.0);

}  // namespace ad

// Plain-tensor rotary encoding, same convention as ad::rope.
Tensor rope_apply(const Tensor& x, std::span<const double> positions, std::size_t heads, double base = 10000.0);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;
};

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// One bias-corrected Adam update. Throws NumericError on non-finite
// gradients before touching any parameter.
void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr,
                    const AdamConfig& cfg = {});

}  // namespace motionkit
