#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// Values are stored row-major. Feature maps use the [C, H, W] layout and
// token sequences use [N, D]. Every op records its parents and a backward
// closure when at least one input requires a gradient and grad mode is on.

#include <cstddef>
#include <functional>
#include <utility>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sammed::ag {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t numel(const Shape& shape);

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    bool empty() const { return data.empty(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

class ShapeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Node {
    Tensor value;
    Tensor grad; // allocated lazily by backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer();
};

class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    static Var leaf(Tensor value, bool requires_grad);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    // Gradient accumulated by backward(); empty tensor if none reached this node.
    const Tensor& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

  private:
    std::shared_ptr<Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

// Seeds d(root)/d(root) = 1 for a scalar root and propagates to every
// reachable node that requires a gradient. Gradients accumulate.
void backward(const Var& root);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
// f(x, i) returns {value, derivative} for element i.
Var pointwise(const Var& a, const std::function<std::pair<double, double>(double, std::size_t)>& f);

// Broadcasting
Var add_bias_cols(const Var& x, const Var& bias);     // x [N, D], bias [D]
Var add_bias_channels(const Var& x, const Var& bias); // x [C, ...], bias [C]
Var mul_channels(const Var& x, const Var& gate);      // x [C, ...], gate [C]
Var add_row_broadcast(const Var& x, const Var& row);  // x [N, D], row [D] or [1, D]

// Structural
Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a); // 2-D only
Var slice_rows(const Var& a, int start, int count);
Var slice_cols(const Var& a, int start, int count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

// Linear algebra
Var matmul(const Var& a, const Var& b); // [n, k] x [k, m]
Var linear(const Var& x, const Var& weight, const Var& bias); // x [N, in], weight [in, out], bias [out] or undefined

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_spatial(const Var& x); // [C, H, W] -> [C]

// Normalization and attention helpers
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6); // [C, H, W]

// Convolution on [C, H, W]. Conv weight is [Cout, Cin, k, k]; transposed
// conv weight is [Cin, Cout, k, k] (PyTorch convention). Bias may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

// Bilinear resize with half-pixel centers (align_corners = false) on [C, h, w].
Var upsample_bilinear(const Var& x, int out_h, int out_w);

} // namespace sammed::ag
