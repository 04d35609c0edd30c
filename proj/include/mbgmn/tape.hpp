#pragma once

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "mbgmn/tensor.hpp"

namespace mbgmn::ad {

// Handle into a Tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense tensors. Single-owner: build the forward
// graph, call backward(loss) once, read gradients, then discard.
class Tape {
public:
    Var constant(Tensor value);           // zero gradient by construction
    Var leaf(Tensor value);               // trainable input, receives gradient

    const Tensor& value(Var v) const;
    const Tensor& grad(Var v) const;      // valid after backward()
    bool requires_grad(Var v) const;

    Var matmul(Var a, Var b);             // a[mxn] * b[nxp]
    Var matmul_nt(Var a, Var b);          // a[mxn] * b[pxn]^T -> [mxp]
    Var spmm(const SparseMatrix* s, Var b);  // gradient flows to b only

    // Binary ops; b may broadcast: scalar, Nx1 column against NxM, or 1xM row.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);

    Var scale_shift(Var x, double mul, double shift = 0.0);
    Var leaky_relu(Var x, double slope);
    Var relu(Var x) { return leaky_relu(x, 0.0); }

    Var concat_last(std::span<const Var> parts);
    Var concat_last(Var a, Var b);
    Var concat_last(Var a, Var b, Var c);
    Var slice_last(Var x, std::size_t lo, std::size_t hi);
    Var sum_all(Var x);                   // -> shape {1}
    Var sum_axis(Var x, int axis);        // 2-D only; axis 0 -> {1,M}, axis 1 -> {N,1}
    Var softmax_last(Var x);
    Var reshape(Var x, std::vector<std::size_t> shape);
    Var tile_rows(Var x, std::size_t n);  // {1,M} or {M} -> {n,M}

    // Per-row generated linear maps: mats row i is an r*c matrix (row-major
    // flat), applied to vecs row i. -> {N,r}
    Var rowwise_matvec(Var mats, Var vecs, std::size_t r, std::size_t c);
    Var rowwise_dot(Var a, Var b);        // {N,M},{N,M} -> {N,1}
    Var gather_rows(Var x, std::vector<std::size_t> idx);

    void backward(Var loss);

    std::size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&, const Tensor&)> backprop;  // g = output grad
    };

    Var push(Tensor value, bool requires_grad,
             std::function<void(Tape&, const Tensor&)> backprop = nullptr);
    Node& node(Var v);
    const Node& node(Var v) const;
    void accumulate(Var v, const Tensor& g);
    void accumulate_at(Var v, std::size_t i, double g);

    // deque: references returned by value()/grad() stay valid as ops are added
    std::deque<Node> nodes_;
    bool backward_done_ = false;
};

// Gradient check report for finite_diff_check.
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_index = 0;
    bool pass = false;
};

// Compares an analytic gradient against central finite differences of f
// evaluated at params. f must be deterministic.
GradCheckReport finite_diff_check(const std::function<double(const Tensor&)>& f,
                                  Tensor params, const Tensor& analytic_grad,
                                  double step, double tol);

}  // namespace mbgmn::ad
