#include "motionkit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "motionkit/kernels.hpp"

namespace motionkit {

using kernels::GemmDims;
using kernels::Trans;

const Tensor& Var::value() const {
    if (!tape) throw TapeError("Var is not bound to a tape");
    return tape->value(*this);
}

const Tape::Node& Tape::node(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw TapeError("Var belongs to a different tape");
    return nodes_[v.id];
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, false, {}, {}});
    return {this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, true, {}, {}});
    return {this, nodes_.size() - 1};
}

Var Tape::param(const Tensor& value) {
    nodes_.push_back(Node{Tensor{}, &value, true, {}, {}});
    return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
    if (consumed_) throw TapeError("tape already consumed by backward(); record a new tape");
    bool needs = false;
    for (const auto& p : parents) {
        needs = needs || node(p).requires_grad;
    }
    Node n{std::move(value), nullptr, needs, {}, {}};
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

double* Tape::grad_target(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value().size(), 0.0);
    return n.grad.data();
}

Tensor Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor(n.value().shape(), 0.0);
    return Tensor(n.value().shape(), n.grad);
}

std::span<const double> Tape::grad_data(Var v) const { return node(v).grad; }

void Tape::backward(Var loss) {
    const Node& ln = node(loss);
    if (ln.value().size() != 1) {
        throw TapeError("backward() needs a scalar loss, got shape " + shape_str(ln.value().shape()));
    }
    if (consumed_) throw TapeError("backward() already ran on this tape; record a new tape");
    consumed_ = true;
    if (!ln.requires_grad) return;
    grad_target(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.backward || n.grad.empty()) continue;
        n.backward(*this, n.grad);
    }
}

// ---------------------------------------------------------------- ops

namespace ad {

namespace {

void same_tape(Var a, Var b) {
    if (a.tape != b.tape || !a.tape) throw TapeError("operands are on different tapes");
}

void require_same_shape(const char* op, Var a, Var b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// Accepts (D) or (1, D) for a row operand against a tensor with D columns.
void require_row(const char* op, Var a, Var row) {
    const auto& rs = row.shape();
    const bool ok = (rs.size() == 1 && rs[0] == a.value().cols()) ||
                    (rs.size() == 2 && rs[0] == 1 && rs[1] == a.value().cols());
    if (!ok) {
        throw ShapeError(std::string(op) + ": row operand " + shape_str(rs) + " does not match columns of " +
                         shape_str(a.shape()));
    }
}

template <typename F, typename G>
Var unary(Var a, F&& fwd, G&& dfdx) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
    const std::size_t aid = a.id;
    return a.tape->record(std::move(y), {a}, [aid, dfdx](Tape& t, std::span<const double> g) {
        double* ga = t.grad_target(aid);
        if (!ga) return;
        const Tensor& x = t.value({&t, aid});
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i]);
    });
}

}  // namespace

Var matmul(Var a, Var b) {
    same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (bv.rank() != 2 || av.cols() != bv.dim(0)) {
        throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    const GemmDims d{av.rows(), av.cols(), bv.dim(1)};
    Shape out_shape = av.shape();
    out_shape.back() = d.m;
    Tensor c(out_shape);
    kernels::gemm(av.data(), Trans::None, bv.data(), Trans::None, c.data(), d);
    const std::size_t aid = a.id, bid = b.id;
    return a.tape->record(std::move(c), {a, b}, [aid, bid, d](Tape& t, std::span<const double> g) {
        const Tensor& av = t.value({&t, aid});
        const Tensor& bv = t.value({&t, bid});
        if (double* ga = t.grad_target(aid)) {
            // dA (n x k) += G (n x m) * B^T
            kernels::gemm(g, Trans::None, bv.data(), Trans::Transpose, {ga, d.n * d.k}, {d.n, d.m, d.k}, true);
        }
        if (double* gb = t.grad_target(bid)) {
            // dB (k x m) += A^T * G
            kernels::gemm(av.data(), Trans::Transpose, g, Trans::None, {gb, d.k * d.m}, {d.k, d.n, d.m}, true);
        }
    });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var add(Var a, Var b) {
    same_tape(a, b);
    require_same_shape("add", a, b);
    Tensor c = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += bv[i];
    const std::size_t aid = a.id, bid = b.id;
    return a.tape->record(std::move(c), {a, b}, [aid, bid](Tape& t, std::span<const double> g) {
        for (auto id : {aid, bid}) {
            if (double* gx = t.grad_target(id)) {
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
        }
    });
}

Var sub(Var a, Var b) {
    same_tape(a, b);
    require_same_shape("sub", a, b);
    Tensor c = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= bv[i];
    const std::size_t aid = a.id, bid = b.id;
    return a.tape->record(std::move(c), {a, b}, [aid, bid](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (double* gb = t.grad_target(bid)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    same_tape(a, b);
    require_same_shape("mul", a, b);
    Tensor c = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= bv[i];
    const std::size_t aid = a.id, bid = b.id;
    return a.tape->record(std::move(c), {a, b}, [aid, bid](Tape& t, std::span<const double> g) {
        const Tensor& av = t.value({&t, aid});
        const Tensor& bv = t.value({&t, bid});
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (double* gb = t.grad_target(bid)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(Var a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var add_row(Var a, Var row) {
    same_tape(a, row);
    require_row("add_row", a, row);
    Tensor c = a.value();
    const Tensor& r = row.value();
    const std::size_t cols = c.cols();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += r[i % cols];
    const std::size_t aid = a.id, rid = row.id;
    return a.tape->record(std::move(c), {a, row}, [aid, rid, cols](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (double* gr = t.grad_target(rid)) {
            for (std::size_t i = 0; i < g.size(); ++i) gr[i % cols] += g[i];
        }
    });
}

Var mul_row(Var a, Var row) {
    same_tape(a, row);
    require_row("mul_row", a, row);
    Tensor c = a.value();
    const Tensor& r = row.value();
    const std::size_t cols = c.cols();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= r[i % cols];
    const std::size_t aid = a.id, rid = row.id;
    return a.tape->record(std::move(c), {a, row}, [aid, rid, cols](Tape& t, std::span<const double> g) {
        const Tensor& av = t.value({&t, aid});
        const Tensor& rv = t.value({&t, rid});
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * rv[i % cols];
        }
        if (double* gr = t.grad_target(rid)) {
            for (std::size_t i = 0; i < g.size(); ++i) gr[i % cols] += g[i] * av[i];
        }
    });
}

Var softmax(Var a) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = x[r * cols];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += (y[r * cols + c] = std::exp(x[r * cols + c] - mx));
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= z;
    }
    auto saved = std::make_shared<Tensor>(y);
    const std::size_t aid = a.id;
    return a.tape->record(std::move(y), {a}, [aid, saved, rows, cols](Tape& t, std::span<const double> g) {
        double* ga = t.grad_target(aid);
        if (!ga) return;
        const Tensor& y = *saved;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
    });
}

namespace {

struct NormStats {
    std::vector<double> xhat;
    std::vector<double> rstd;
};

NormStats normalize_rows(const Tensor& x, double eps) {
    const std::size_t rows = x.rows(), cols = x.cols();
    NormStats s{std::vector<double>(x.size()), std::vector<double>(rows)};
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += x[r * cols + c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = x[r * cols + c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double rstd = 1.0 / std::sqrt(var + eps);
        s.rstd[r] = rstd;
        for (std::size_t c = 0; c < cols; ++c) s.xhat[r * cols + c] = (x[r * cols + c] - mu) * rstd;
    }
    return s;
}

// dx += rstd * (dn - mean(dn) - xhat * mean(dn * xhat)), row-wise.
void layer_norm_backward(const NormStats& s, std::span<const double> dn, double* dx, std::size_t rows,
                         std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            m1 += dn[r * cols + c];
            m2 += dn[r * cols + c] * s.xhat[r * cols + c];
        }
        m1 /= static_cast<double>(cols);
        m2 /= static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) {
            dx[r * cols + c] += s.rstd[r] * (dn[r * cols + c] - m1 - s.xhat[r * cols + c] * m2);
        }
    }
}

}  // namespace

Var layer_norm(Var a, double eps) {
    const Tensor& x = a.value();
    auto stats = std::make_shared<NormStats>(normalize_rows(x, eps));
    Tensor y(x.shape(), stats->xhat);
    const std::size_t aid = a.id, rows = x.rows(), cols = x.cols();
    return a.tape->record(std::move(y), {a}, [aid, stats, rows, cols](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) layer_norm_backward(*stats, g, ga, rows, cols);
    });
}

Var adaptive_layer_norm(Var x, Var shift, Var scale, double eps) {
    same_tape(x, shift);
    same_tape(x, scale);
    require_row("adaptive_layer_norm shift", x, shift);
    require_row("adaptive_layer_norm scale", x, scale);
    const Tensor& xv = x.value();
    const Tensor& sh = shift.value();
    const Tensor& sc = scale.value();
    auto stats = std::make_shared<NormStats>(normalize_rows(xv, eps));
    const std::size_t rows = xv.rows(), cols = xv.cols();
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = stats->xhat[i] * (1.0 + sc[i % cols]) + sh[i % cols];
    const std::size_t xid = x.id, shid = shift.id, scid = scale.id;
    return x.tape->record(std::move(y), {x, shift, scale},
                          [xid, shid, scid, stats, rows, cols](Tape& t, std::span<const double> g) {
                              const Tensor& sc = t.value({&t, scid});
                              if (double* gsh = t.grad_target(shid)) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gsh[i % cols] += g[i];
                              }
                              if (double* gsc = t.grad_target(scid)) {
                                  for (std::size_t i = 0; i < g.size(); ++i) gsc[i % cols] += g[i] * stats->xhat[i];
                              }
                              if (double* gx = t.grad_target(xid)) {
                                  std::vector<double> dn(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) dn[i] = g[i] * (1.0 + sc[i % cols]);
                                  layer_norm_backward(*stats, dn, gx, rows, cols);
                              }
                          });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var silu(Var a) {
    return unary(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var gelu(Var a) {
    // tanh approximation
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
        [](double x) {
            const double u = k * (x + c * x * x * x);
            const double th = std::tanh(u);
            const double du = k * (1.0 + 3.0 * c * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

Var sigmoid(Var a) {
    return unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        });
}

Var tanh(Var a) {
    return unary(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
            const double th = std::tanh(x);
            return 1.0 - th * th;
        });
}

Var sum(Var a) {
    Tensor s({1}, a.value().sum());
    const std::size_t aid = a.id;
    return a.tape->record(std::move(s), {a}, [aid](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) {
            const std::size_t n = t.value({&t, aid}).size();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
        }
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mse(Var a, Var b) {
    Var d = sub(a, b);
    return mean(mul(d, d));
}

Var reshape(Var a, Shape shape) {
    Tensor y = a.value().reshaped(std::move(shape));
    const std::size_t aid = a.id;
    return a.tape->record(std::move(y), {a}, [aid](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    if (x.rank() != 2 || begin >= end || end > x.dim(0)) {
        throw ShapeError("slice_rows: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
    }
    const std::size_t cols = x.cols();
    Tensor y({end - begin, cols});
    std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
              x.data().begin() + static_cast<std::ptrdiff_t>(end * cols), y.data().begin());
    const std::size_t aid = a.id;
    return a.tape->record(std::move(y), {a}, [aid, begin, cols](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[begin * cols + i] += g[i];
        }
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    if (x.rank() != 2 || begin >= end || end > x.dim(1)) {
        throw ShapeError("slice_cols: bad range [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), cols = x.dim(1), w = end - begin;
    Tensor y({rows, w});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < w; ++c) y[r * w + c] = x[r * cols + begin + c];
    }
    const std::size_t aid = a.id;
    return a.tape->record(std::move(y), {a}, [aid, begin, rows, cols, w](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_target(aid)) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < w; ++c) ga[r * cols + begin + c] += g[r * w + c];
            }
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    Tape* tape = parts.front().tape;
    const std::size_t cols = parts.front().value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.tape != tape) throw TapeError("concat_rows: operands are on different tapes");
        if (p.value().rank() != 2 || p.value().cols() != cols) {
            throw ShapeError("concat_rows: operand " + shape_str(p.shape()) + " has wrong width");
        }
        rows += p.value().dim(0);
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    std::vector<std::size_t> ids, offsets;
    for (const auto& p : parts) {
        ids.push_back(p.id);
        offsets.push_back(data.size());
        data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    }
    return tape->record(Tensor({rows, cols}, std::move(data)), std::vector<Var>(parts.begin(), parts.end()),
                        [ids, offsets](Tape& t, std::span<const double> g) {
                            for (std::size_t k = 0; k < ids.size(); ++k) {
                                double* gp = t.grad_target(ids[k]);
                                if (!gp) continue;
                                const std::size_t n = t.value({&t, ids[k]}).size();
                                for (std::size_t i = 0; i < n; ++i) gp[i] += g[offsets[k] + i];
                            }
                        });
}

Var attention(Var q, Var k, Var v, std::size_t heads, std::span<const std::uint8_t> mask) {
    same_tape(q, k);
    same_tape(q, v);
    const Tensor& qv = q.value();
    if (qv.rank() != 2 || k.shape() != qv.shape() || v.shape() != qv.shape()) {
        throw ShapeError("attention: q/k/v shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
    }
    if (heads == 0 || qv.cols() % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(qv.cols()) + " not divisible by heads");
    }
    const kernels::AttentionDims d{qv.dim(0), heads, qv.cols() / heads};
    if (!mask.empty() && mask.size() != d.tokens * d.tokens) {
        throw ShapeError("attention: mask size " + std::to_string(mask.size()) + " does not match " +
                         std::to_string(d.tokens) + " tokens");
    }
    auto probs = std::make_shared<std::vector<double>>(d.heads * d.tokens * d.tokens);
    Tensor out(qv.shape());
    kernels::attention_forward(qv.data(), k.value().data(), v.value().data(), mask, *probs, out.data(), d);
    const std::size_t qid = q.id, kid = k.id, vid = v.id;
    return q.tape->record(std::move(out), {q, k, v}, [qid, kid, vid, probs, d](Tape& t, std::span<const double> g) {
        const Tensor& qv = t.value({&t, qid});
        const Tensor& kv = t.value({&t, kid});
        const Tensor& vv = t.value({&t, vid});
        double* gq = t.grad_target(qid);
        double* gk = t.grad_target(kid);
        double* gv = t.grad_target(vid);
        const std::size_t n = d.tokens, dh = d.head_dim, stride = d.heads * dh;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> dp(n * n);
        for (std::size_t h = 0; h < d.heads; ++h) {
            const double* p = probs->data() + h * n * n;
            // dP = dO V^T ; dV = P^T dO
            for (std::size_t i = 0; i < n; ++i) {
                const double* gi = g.data() + i * stride + h * dh;
                for (std::size_t j = 0; j < n; ++j) {
                    const double* vj = vv.data().data() + j * stride + h * dh;
                    double s = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) s += gi[e] * vj[e];
                    dp[i * n + j] = s;
                    if (gv) {
                        double* gvj = gv + j * stride + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) gvj[e] += p[i * n + j] * gi[e];
                    }
                }
            }
            // dS = P * (dP - rowsum(dP * P))
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
                for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * sc;
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double ds = dp[i * n + j];
                    if (ds == 0.0) continue;
                    if (gq) {
                        const double* kj = kv.data().data() + j * stride + h * dh;
                        double* gqi = gq + i * stride + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds * kj[e];
                    }
                    if (gk) {
                        const double* qi = qv.data().data() + i * stride + h * dh;
                        double* gkj = gk + j * stride + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds * qi[e];
                    }
                }
            }
        }
    });
}

namespace {

void check_rope(const Tensor& x, std::span<const double> positions, std::size_t heads) {
    if (x.rank() != 2) throw ShapeError("rope: expected tokens x width, got " + shape_str(x.shape()));
    if (heads == 0 || x.cols() % heads != 0) throw ShapeError("rope: width not divisible by heads");
    if ((x.cols() / heads) % 2 != 0) throw ShapeError("rope: head_dim must be even");
    if (positions.size() != x.dim(0)) throw ShapeError("rope: one position per token required");
}

// Rotates every pair by sign * angle in place.
void rotate_pairs(std::span<double> data, std::size_t cols, std::span<const double> positions, std::size_t heads,
                  double base, double sign) {
    const std::size_t dh = cols / heads;
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < dh / 2; ++i) {
                const double theta =
                    positions[r] * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
                const double c = std::cos(theta), s = sign * std::sin(theta);
                double& a = data[r * cols + h * dh + 2 * i];
                double& b = data[r * cols + h * dh + 2 * i + 1];
                const double a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

}  // namespace

Var rope(Var x, std::span<const double> positions, std::size_t heads, double base) {
    Tensor y = rope_apply(x.value(), positions, heads, base);
    std::vector<double> pos(positions.begin(), positions.end());
    const std::size_t xid = x.id;
    return x.tape->record(std::move(y), {x}, [xid, pos, heads, base](Tape& t, std::span<const double> g) {
        double* gx = t.grad_target(xid);
        if (!gx) return;
        std::vector<double> back(g.begin(), g.end());
        const std::size_t cols = t.value({&t, xid}).cols();
        rotate_pairs(back, cols, pos, heads, base, -1.0);
        for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
    });
}

}  // namespace ad

Tensor rope_apply(const Tensor& x, std::span<const double> positions, std::size_t heads, double base) {
    ad::check_rope(x, positions, heads);
    Tensor y = x;
    ad::rotate_pairs(y.data(), y.cols(), positions, heads, base, 1.0);
    return y;
}

void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr,
                    const AdamConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: params/grads count mismatch");
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (params[p]->shape() != grads[p].shape()) {
            throw ShapeError("optimizer_step: gradient shape " + shape_str(grads[p].shape()) + " vs param " +
                             shape_str(params[p]->shape()));
        }
        for (double g : grads[p].data()) {
            if (!std::isfinite(g)) throw NumericError("optimizer_step: non-finite gradient in parameter " + std::to_string(p));
        }
    }
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->size(), 0.0);
            state.v.emplace_back(p->size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("optimizer_step: state does not match parameter list");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& m = state.m[p];
        auto& v = state.v[p];
        auto w = params[p]->data();
        const auto g = grads[p].data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace motionkit
