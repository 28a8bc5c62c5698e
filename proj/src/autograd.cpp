#include "sammed/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace sammed::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool t_grad_enabled = true;

void require(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

void accumulate(Node& node, const Tensor& g) {
    Tensor& buf = node.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i];
}

// Builds a result node. Parents and the backward closure are only kept when
// recording is enabled and some parent needs a gradient.
Var make_result(Tensor value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = false;
    if (t_grad_enabled) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Var(std::move(node));
}

ConstMapMat as_mat(const Tensor& t, int rows, int cols) { return ConstMapMat(t.data.data(), rows, cols); }
MapMat as_mat(Tensor& t, int rows, int cols) { return MapMat(t.data.data(), rows, cols); }

struct ConvGeom {
    int channels, in_h, in_w, k, stride, pad, out_h, out_w;
};

// cols: [channels * k * k, out_h * out_w]
void im2col(const double* src, const ConvGeom& g, double* cols) {
    const int plane = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * plane;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        row[oy * g.out_w + ox] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                                                     ? src[(static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w + ix]
                                                     : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, const ConvGeom& g, double* dst) {
    const int plane = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * plane;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.in_h) continue;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix < 0 || ix >= g.in_w) continue;
                        dst[(static_cast<std::size_t>(c) * g.in_h + iy) * g.in_w + ix] += row[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

struct Interp {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};

Interp interp_axis(int in, int out) {
    Interp it;
    it.lo.resize(out);
    it.hi.resize(out);
    it.frac.resize(out);
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        it.lo[o] = i0;
        it.hi[o] = std::min(i0 + 1, in - 1);
        it.frac[o] = src - i0;
    }
    return it;
}

} // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    require(data.size() == numel(shape), "tensor data size does not match shape " + shape_str(shape));
}

Tensor& Node::grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape, 0.0);
    return grad;
}

Var Var::constant(Tensor value) { return leaf(std::move(value), false); }

Var Var::leaf(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void backward(const Var& root) {
    require(root.defined() && root.value().size() == 1, "backward() needs a scalar root");
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
    }
    // Interior gradients are no longer needed; leaves keep theirs.
    for (Node* node : order) {
        if (node->backward_fn) node->grad = Tensor();
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    auto pa = a.ptr(), pb = b.ptr();
    return make_result(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) accumulate(*pa, self.grad);
        if (pb->requires_grad) accumulate(*pb, self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
    auto pa = a.ptr(), pb = b.ptr();
    return make_result(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) accumulate(*pa, self.grad);
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] -= self.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
    auto pa = a.ptr(), pb = b.ptr();
    return make_result(std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            Tensor& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * pb->value.data[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * pa->value.data[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa, s](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s * self.grad.data[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v += s;
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa](Node& self) { accumulate(*pa, self.grad); });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = v > 0 ? v : 0.0;
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pa->value.data[i] > 0) g.data[i] += self.grad.data[i];
    });
}

Var gelu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa](Node& self) {
        Tensor& g = pa->grad_buffer();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa->value.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            g.data[i] += self.grad.data[i] * (cdf + x * pdf);
        }
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = self.value.data[i];
            g.data[i] += self.grad.data[i] * s * (1.0 - s);
        }
    });
}

Var pointwise(const Var& a, const std::function<std::pair<double, double>(double, std::size_t)>& f) {
    Tensor out = a.value();
    auto deriv = std::make_shared<std::vector<double>>(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto [v, d] = f(out.data[i], i);
        out.data[i] = v;
        (*deriv)[i] = d;
    }
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa, deriv](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * (*deriv)[i];
    });
}

// ---------------------------------------------------------------------------
// Broadcasting

Var add_bias_cols(const Var& x, const Var& bias) {
    require(x.value().rank() == 2 && bias.value().size() == static_cast<std::size_t>(x.shape()[1]),
            "add_bias_cols: bias must match columns of " + shape_str(x.shape()));
    const int n = x.shape()[0], d = x.shape()[1];
    Tensor out = x.value();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.data[static_cast<std::size_t>(i) * d + j] += bias.value().data[j];
    auto px = x.ptr(), pb = bias.ptr();
    return make_result(std::move(out), {px, pb}, [px, pb, n, d](Node& self) {
        if (px->requires_grad) accumulate(*px, self.grad);
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) g.data[j] += self.grad.data[static_cast<std::size_t>(i) * d + j];
        }
    });
}

Var add_row_broadcast(const Var& x, const Var& row) { return add_bias_cols(x, row); }

Var add_bias_channels(const Var& x, const Var& bias) {
    const int c = x.shape()[0];
    require(bias.value().size() == static_cast<std::size_t>(c), "add_bias_channels: channel mismatch");
    const std::size_t plane = x.value().size() / c;
    Tensor out = x.value();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out.data[ch * plane + i] += bias.value().data[ch];
    auto px = x.ptr(), pb = bias.ptr();
    return make_result(std::move(out), {px, pb}, [px, pb, c, plane](Node& self) {
        if (px->requires_grad) accumulate(*px, self.grad);
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buffer();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < plane; ++i) g.data[ch] += self.grad.data[ch * plane + i];
        }
    });
}

Var mul_channels(const Var& x, const Var& gate) {
    const int c = x.shape()[0];
    require(gate.value().size() == static_cast<std::size_t>(c), "mul_channels: channel mismatch");
    const std::size_t plane = x.value().size() / c;
    Tensor out = x.value();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) out.data[ch * plane + i] *= gate.value().data[ch];
    auto px = x.ptr(), pg = gate.ptr();
    return make_result(std::move(out), {px, pg}, [px, pg, c, plane](Node& self) {
        if (px->requires_grad) {
            Tensor& g = px->grad_buffer();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < plane; ++i)
                    g.data[ch * plane + i] += self.grad.data[ch * plane + i] * pg->value.data[ch];
        }
        if (pg->requires_grad) {
            Tensor& g = pg->grad_buffer();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < plane; ++i)
                    g.data[ch] += self.grad.data[ch * plane + i] * px->value.data[ch * plane + i];
        }
    });
}

// ---------------------------------------------------------------------------
// Structural

Var reshape(const Var& a, Shape shape) {
    require(numel(shape) == a.value().size(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), a.value().data);
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa](Node& self) { accumulate(*pa, self.grad); });
}

Var transpose(const Var& a) {
    require(a.value().rank() == 2, "transpose: expects a 2-D tensor");
    const int n = a.shape()[0], m = a.shape()[1];
    Tensor out({m, n});
    as_mat(out, m, n) = as_mat(a.value(), n, m).transpose();
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa, n, m](Node& self) {
        Tensor& g = pa->grad_buffer();
        as_mat(g, n, m) += as_mat(self.grad, m, n).transpose();
    });
}

Var slice_rows(const Var& a, int start, int count) {
    require(a.value().rank() == 2 && start >= 0 && count >= 0 && start + count <= a.shape()[0],
            "slice_rows out of range");
    const int d = a.shape()[1];
    Tensor out({count, d});
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(start) * d,
                static_cast<std::size_t>(count) * d, out.data.begin());
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa, start, count, d](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (std::size_t i = 0; i < static_cast<std::size_t>(count) * d; ++i)
            g.data[static_cast<std::size_t>(start) * d + i] += self.grad.data[i];
    });
}

Var slice_cols(const Var& a, int start, int count) {
    require(a.value().rank() == 2 && start >= 0 && count >= 0 && start + count <= a.shape()[1],
            "slice_cols out of range");
    const int n = a.shape()[0], d = a.shape()[1];
    Tensor out({n, count});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < count; ++j)
            out.data[static_cast<std::size_t>(i) * count + j] = a.value().data[static_cast<std::size_t>(i) * d + start + j];
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa, start, count, n, d](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < count; ++j)
                g.data[static_cast<std::size_t>(i) * d + start + j] += self.grad.data[static_cast<std::size_t>(i) * count + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const int d = parts[0].shape()[1];
    int n = 0;
    for (const auto& p : parts) {
        require(p.value().rank() == 2 && p.shape()[1] == d, "concat_rows: column mismatch");
        n += p.shape()[0];
    }
    Tensor out({n, d});
    std::vector<std::shared_ptr<Node>> parents;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.value().size();
        parents.push_back(p.ptr());
    }
    auto captured = parents;
    return make_result(std::move(out), std::move(parents), [captured](Node& self) {
        std::size_t off = 0;
        for (const auto& p : captured) {
            if (p->requires_grad) {
                Tensor& g = p->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[off + i];
            }
            off += p->value.size();
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const int n = parts[0].shape()[0];
    int d = 0;
    for (const auto& p : parts) {
        require(p.value().rank() == 2 && p.shape()[0] == n, "concat_cols: row mismatch");
        d += p.shape()[1];
    }
    Tensor out({n, d});
    std::vector<std::shared_ptr<Node>> parents;
    int col = 0;
    for (const auto& p : parts) {
        const int w = p.shape()[1];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                out.data[static_cast<std::size_t>(i) * d + col + j] = p.value().data[static_cast<std::size_t>(i) * w + j];
        col += w;
        parents.push_back(p.ptr());
    }
    auto captured = parents;
    return make_result(std::move(out), std::move(parents), [captured, n, d](Node& self) {
        int c0 = 0;
        for (const auto& p : captured) {
            const int w = p->value.shape[1];
            if (p->requires_grad) {
                Tensor& g = p->grad_buffer();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        g.data[static_cast<std::size_t>(i) * w + j] += self.grad.data[static_cast<std::size_t>(i) * d + c0 + j];
            }
            c0 += w;
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
    require(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor out({n, m});
    as_mat(out, n, m).noalias() = as_mat(a.value(), n, k) * as_mat(b.value(), k, m);
    auto pa = a.ptr(), pb = b.ptr();
    return make_result(std::move(out), {pa, pb}, [pa, pb, n, k, m](Node& self) {
        auto dout = as_mat(self.grad, n, m);
        if (pa->requires_grad) as_mat(pa->grad_buffer(), n, k).noalias() += dout * as_mat(pb->value, k, m).transpose();
        if (pb->requires_grad) as_mat(pb->grad_buffer(), k, m).noalias() += as_mat(pa->value, n, k).transpose() * dout;
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    Var y = matmul(x, weight);
    return bias.defined() ? add_bias_cols(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
    double s = 0;
    for (double v : a.value().data) s += v;
    auto pa = a.ptr();
    return make_result(Tensor({1}, {s}), {pa}, [pa](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (double& v : g.data) v += self.grad.data[0];
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_spatial(const Var& x) {
    const int c = x.shape()[0];
    const std::size_t plane = x.value().size() / c;
    Tensor out({c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0;
        for (std::size_t i = 0; i < plane; ++i) s += x.value().data[ch * plane + i];
        out.data[ch] = s / static_cast<double>(plane);
    }
    auto px = x.ptr();
    return make_result(std::move(out), {px}, [px, c, plane](Node& self) {
        Tensor& g = px->grad_buffer();
        for (int ch = 0; ch < c; ++ch) {
            const double v = self.grad.data[ch] / static_cast<double>(plane);
            for (std::size_t i = 0; i < plane; ++i) g.data[ch * plane + i] += v;
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization

Var softmax_rows(const Var& a) {
    require(a.value().rank() == 2, "softmax_rows: expects 2-D");
    const int n = a.shape()[0], m = a.shape()[1];
    Tensor out = a.value();
    for (int i = 0; i < n; ++i) {
        double* row = out.data.data() + static_cast<std::size_t>(i) * m;
        const double mx = *std::max_element(row, row + m);
        double z = 0;
        for (int j = 0; j < m; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j < m; ++j) row[j] /= z;
    }
    auto pa = a.ptr();
    return make_result(std::move(out), {pa}, [pa, n, m](Node& self) {
        Tensor& g = pa->grad_buffer();
        for (int i = 0; i < n; ++i) {
            const double* y = self.value.data.data() + static_cast<std::size_t>(i) * m;
            const double* dy = self.grad.data.data() + static_cast<std::size_t>(i) * m;
            double dot = 0;
            for (int j = 0; j < m; ++j) dot += y[j] * dy[j];
            for (int j = 0; j < m; ++j) g.data[static_cast<std::size_t>(i) * m + j] += y[j] * (dy[j] - dot);
        }
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require(x.value().rank() == 2, "layer_norm_rows: expects 2-D");
    const int n = x.shape()[0], d = x.shape()[1];
    require(gamma.value().size() == static_cast<std::size_t>(d) && beta.value().size() == static_cast<std::size_t>(d),
            "layer_norm_rows: affine size mismatch");
    Tensor out({n, d});
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * d);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    for (int i = 0; i < n; ++i) {
        const double* row = x.value().data.data() + static_cast<std::size_t>(i) * d;
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < d; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * d + j;
            (*xhat)[idx] = (row[j] - mu) * is;
            out.data[idx] = (*xhat)[idx] * gamma.value().data[j] + beta.value().data[j];
        }
    }
    auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
    return make_result(std::move(out), {px, pg, pb}, [px, pg, pb, xhat, inv_std, n, d](Node& self) {
        if (pg->requires_grad || pb->requires_grad) {
            Tensor& gg = pg->grad_buffer();
            Tensor& gb = pb->grad_buffer();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                    gg.data[j] += self.grad.data[idx] * (*xhat)[idx];
                    gb.data[j] += self.grad.data[idx];
                }
        }
        if (px->requires_grad) {
            Tensor& gx = px->grad_buffer();
            for (int i = 0; i < n; ++i) {
                double m1 = 0, m2 = 0;
                for (int j = 0; j < d; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                    const double dxh = self.grad.data[idx] * pg->value.data[j];
                    m1 += dxh;
                    m2 += dxh * (*xhat)[idx];
                }
                m1 /= d;
                m2 /= d;
                for (int j = 0; j < d; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                    const double dxh = self.grad.data[idx] * pg->value.data[j];
                    gx.data[idx] += (*inv_std)[i] * (dxh - m1 - (*xhat)[idx] * m2);
                }
            }
        }
    });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Shape shape = x.shape();
    const int c = shape[0];
    const int plane = static_cast<int>(x.value().size() / c);
    Var tokens = transpose(reshape(x, {c, plane}));
    Var normed = layer_norm_rows(tokens, gamma, beta, eps);
    return reshape(transpose(normed), shape);
}

// ---------------------------------------------------------------------------
// Convolution

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    require(x.value().rank() == 3 && weight.value().rank() == 4, "conv2d: expects [C,H,W] input and 4-D weight");
    const int cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int cout = weight.shape()[0], k = weight.shape()[2];
    require(weight.shape()[1] == cin && weight.shape()[3] == k, "conv2d: weight " + shape_str(weight.shape()) +
                                                                     " incompatible with input " + shape_str(x.shape()));
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (w + 2 * pad - k) / stride + 1;
    require(oh > 0 && ow > 0, "conv2d: empty output");
    ConvGeom g{cin, h, w, k, stride, pad, oh, ow};
    const int rows = cin * k * k, plane = oh * ow;
    auto cols = std::make_shared<Tensor>(Shape{rows, plane});
    im2col(x.value().data.data(), g, cols->data.data());
    Tensor out({cout, oh, ow});
    as_mat(out, cout, plane).noalias() = as_mat(weight.value(), cout, rows) * as_mat(*cols, rows, plane);
    auto px = x.ptr(), pw = weight.ptr();
    Var y = make_result(std::move(out), {px, pw}, [px, pw, cols, g, cout, rows, plane](Node& self) {
        auto dout = as_mat(self.grad, cout, plane);
        if (pw->requires_grad) as_mat(pw->grad_buffer(), cout, rows).noalias() += dout * as_mat(*cols, rows, plane).transpose();
        if (px->requires_grad) {
            Tensor dcols({rows, plane});
            as_mat(dcols, rows, plane).noalias() = as_mat(pw->value, cout, rows).transpose() * dout;
            col2im(dcols.data.data(), g, px->grad_buffer().data.data());
        }
    });
    return bias.defined() ? add_bias_channels(y, bias) : y;
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    require(x.value().rank() == 3 && weight.value().rank() == 4, "conv_transpose2d: expects [C,H,W] input and 4-D weight");
    const int cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int cout = weight.shape()[1], k = weight.shape()[2];
    require(weight.shape()[0] == cin && weight.shape()[3] == k, "conv_transpose2d: weight " +
                                                                    shape_str(weight.shape()) + " incompatible with input " +
                                                                    shape_str(x.shape()));
    const int oh = (h - 1) * stride - 2 * pad + k;
    const int ow = (w - 1) * stride - 2 * pad + k;
    // Geometry of the adjoint convolution: output [cout, oh, ow] -> input grid [h, w].
    ConvGeom g{cout, oh, ow, k, stride, pad, h, w};
    const int rows = cout * k * k, plane = h * w;
    Tensor cols({rows, plane});
    as_mat(cols, rows, plane).noalias() = as_mat(weight.value(), cin, rows).transpose() * as_mat(x.value(), cin, plane);
    Tensor out({cout, oh, ow});
    col2im(cols.data.data(), g, out.data.data());
    auto px = x.ptr(), pw = weight.ptr();
    Var y = make_result(std::move(out), {px, pw}, [px, pw, g, cin, rows, plane](Node& self) {
        Tensor dcols({rows, plane});
        im2col(self.grad.data.data(), g, dcols.data.data());
        auto dc = as_mat(dcols, rows, plane);
        if (px->requires_grad) as_mat(px->grad_buffer(), cin, plane).noalias() += as_mat(pw->value, cin, rows) * dc;
        if (pw->requires_grad) as_mat(pw->grad_buffer(), cin, rows).noalias() += as_mat(px->value, cin, plane) * dc.transpose();
    });
    return bias.defined() ? add_bias_channels(y, bias) : y;
}

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
    require(x.value().rank() == 3, "upsample_bilinear: expects [C,H,W]");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    auto ry = std::make_shared<Interp>(interp_axis(h, out_h));
    auto rx = std::make_shared<Interp>(interp_axis(w, out_w));
    Tensor out({c, out_h, out_w});
    const double* src = x.value().data.data();
    for (int ch = 0; ch < c; ++ch) {
        const double* p = src + static_cast<std::size_t>(ch) * h * w;
        for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = ry->lo[oy], y1 = ry->hi[oy];
            const double fy = ry->frac[oy];
            for (int ox = 0; ox < out_w; ++ox) {
                const int x0 = rx->lo[ox], x1 = rx->hi[ox];
                const double fx = rx->frac[ox];
                const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
                const double bot = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
                out.data[(static_cast<std::size_t>(ch) * out_h + oy) * out_w + ox] = top * (1 - fy) + bot * fy;
            }
        }
    }
    auto px = x.ptr();
    return make_result(std::move(out), {px}, [px, ry, rx, c, h, w, out_h, out_w](Node& self) {
        Tensor& g = px->grad_buffer();
        for (int ch = 0; ch < c; ++ch) {
            double* p = g.data.data() + static_cast<std::size_t>(ch) * h * w;
            for (int oy = 0; oy < out_h; ++oy) {
                const int y0 = ry->lo[oy], y1 = ry->hi[oy];
                const double fy = ry->frac[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const int x0 = rx->lo[ox], x1 = rx->hi[ox];
                    const double fx = rx->frac[ox];
                    const double d = self.grad.data[(static_cast<std::size_t>(ch) * out_h + oy) * out_w + ox];
                    p[y0 * w + x0] += d * (1 - fy) * (1 - fx);
                    p[y0 * w + x1] += d * (1 - fy) * fx;
                    p[y1 * w + x0] += d * fy * (1 - fx);
                    p[y1 * w + x1] += d * fy * fx;
                }
            }
        }
    });
}

} // namespace sammed::ag
