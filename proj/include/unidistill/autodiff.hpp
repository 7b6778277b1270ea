#pragma once

// Minimal tape-based reverse-mode automatic differentiation over rank-2
// tensors (rows = batch, columns = features). Nodes are appended to a tape in
// creation order, which is a topological order of the graph; backward()
// walks the tape once in reverse.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unidistill/error.hpp"

namespace unidistill::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    bool requires_grad() const;
    double scalar() const { return value()(0, 0); }
};

struct Node {
    Matrix value;
    Matrix grad;  // same shape as value, zero until backward reaches the node
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    // Reads the node's own gradient and accumulates into parents.
    std::function<void(Tape&, std::size_t)> backward;
};

class Tape {
public:
    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return leaf(std::move(value), false); }

    Var leaf(Matrix value, bool requires_grad) {
        Node n;
        n.grad = Matrix::Zero(value.rows(), value.cols());
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    // Records an interior node. It requires gradient iff any parent does; the
    // backward rule is dropped otherwise.
    Var push(Matrix value, std::initializer_list<Var> parents,
             std::function<void(Tape&, std::size_t)> backward) {
        Node n;
        n.grad = Matrix::Zero(value.rows(), value.cols());
        n.value = std::move(value);
        for (const Var& p : parents) {
            if (p.tape != this) throw ContractError("autodiff: variable belongs to a different tape");
            n.parents.push_back(p.id);
            n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

    // Adds `g` into the gradient of node `id` if that node requires gradient.
    template <typename Expr>
    void accumulate(std::size_t id, const Expr& g) {
        Node& n = nodes_[id];
        if (n.requires_grad) n.grad += g;
    }

    void backward(Var root) {
        if (root.tape != this) throw ContractError("autodiff: root belongs to a different tape");
        const Node& r = nodes_[root.id];
        if (r.value.rows() != 1 || r.value.cols() != 1)
            throw ContractError("backward: root must be scalar, got " + std::to_string(r.value.rows()) +
                                "x" + std::to_string(r.value.cols()));
        if (!r.requires_grad) return;
        nodes_[root.id].grad(0, 0) += 1.0;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward) n.backward(*this, i);
        }
    }

private:
    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->node(id).value; }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

namespace detail {

inline void same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

}  // namespace detail

inline Var detach(Var a) { return a.tape->constant(a.value()); }

inline Var add(Var a, Var b) {
    detail::same_shape(a, b, "add");
    return a.tape->push(a.value() + b.value(), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    detail::same_shape(a, b, "sub");
    return a.tape->push(a.value() - b.value(), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

inline Var mul(Var a, Var b) {
    detail::same_shape(a, b, "mul");
    return a.tape->push(a.value().cwiseProduct(b.value()), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        if (t.node(a).requires_grad) t.accumulate(a, g.cwiseProduct(t.node(b).value));
        if (t.node(b).requires_grad) t.accumulate(b, g.cwiseProduct(t.node(a).value));
    });
}

// a (n x m) + row vector b (1 x m) broadcast over rows.
inline Var add_row(Var a, Var b) {
    if (b.rows() != 1 || b.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
    Matrix v = a.value().rowwise() + b.value().row(0);
    return a.tape->push(std::move(v), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        t.accumulate(a, g);
        if (t.node(b).requires_grad) t.accumulate(b, g.colwise().sum());
    });
}

// a (n x m) scaled row-wise by column c (n x 1).
inline Var mul_col(Var a, Var c) {
    if (c.cols() != 1 || c.rows() != a.rows()) throw ShapeError("mul_col: scale must be rows x 1");
    Matrix v = a.value().array().colwise() * c.value().col(0).array();
    return a.tape->push(std::move(v), {a, c}, [a = a.id, c = c.id](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        if (t.node(a).requires_grad) {
            Matrix ga = g.array().colwise() * t.node(c).value.col(0).array();
            t.accumulate(a, ga);
        }
        if (t.node(c).requires_grad) {
            Matrix gc = g.cwiseProduct(t.node(a).value).rowwise().sum();
            t.accumulate(c, gc);
        }
    });
}

// Row-wise scaling by constant weights (no gradient to the weights).
inline Var scale_rows(Var a, const Vector& w) {
    if (w.size() != a.rows()) throw ShapeError("scale_rows: weight count must equal rows");
    Matrix v = a.value().array().colwise() * w.array();
    return a.tape->push(std::move(v), {a}, [a = a.id, w](Tape& t, std::size_t s) {
        Matrix g = t.node(s).grad.array().colwise() * w.array();
        t.accumulate(a, g);
    });
}

inline Var scale(Var a, double c) {
    return a.tape->push(a.value() * c, {a}, [a = a.id, c](Tape& t, std::size_t s) {
        t.accumulate(a, t.node(s).grad * c);
    });
}

inline Var add_scalar(Var a, double c) {
    return a.tape->push(a.value().array() + c, {a}, [a = a.id](Tape& t, std::size_t s) {
        t.accumulate(a, t.node(s).grad);
    });
}

inline Var matmul(Var a, Var b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
    return a.tape->push(a.value() * b.value(), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        if (t.node(a).requires_grad) t.accumulate(a, g * t.node(b).value.transpose());
        if (t.node(b).requires_grad) t.accumulate(b, t.node(a).value.transpose() * g);
    });
}

// Elementwise map with a caller-supplied derivative.
template <typename F, typename DF>
Var apply(Var a, F f, DF df) {
    Matrix v = a.value().unaryExpr(f);
    return a.tape->push(std::move(v), {a}, [a = a.id, df](Tape& t, std::size_t s) {
        Matrix g = t.node(s).grad.cwiseProduct(t.node(a).value.unaryExpr(df));
        t.accumulate(a, g);
    });
}

// tanh(x) = sign(x) (1 - e) / (1 + e) with e = exp(-2|x|); written with exp
// so the whole map vectorizes.
inline Var tanh(Var a) {
    const auto x = a.value().array();
    const Eigen::ArrayXXd e = (-2.0 * x.abs()).exp();
    Matrix v = (x.sign() * (1.0 - e) / (1.0 + e)).matrix();
    return a.tape->push(std::move(v), {a}, [a = a.id](Tape& t, std::size_t s) {
        const Node& self = t.node(s);
        Matrix g = self.grad.array() * (1.0 - self.value.array().square());
        t.accumulate(a, g);
    });
}

inline double softplus_scalar(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var softplus(Var a) {
    const auto x = a.value().array();
    Matrix v = (x.cwiseMax(0.0) + (1.0 + (-x.abs()).exp()).log()).matrix();
    return a.tape->push(std::move(v), {a}, [a = a.id](Tape& t, std::size_t s) {
        const auto x = t.node(a).value.array();
        Matrix g = t.node(s).grad.array() / (1.0 + (-x).exp());
        t.accumulate(a, g);
    });
}

inline Var sigmoid(Var a) {
    Matrix v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return a.tape->push(std::move(v), {a}, [a = a.id](Tape& t, std::size_t s) {
        const auto y = t.node(s).value.array();
        Matrix g = t.node(s).grad.array() * y * (1.0 - y);
        t.accumulate(a, g);
    });
}

inline Var exp(Var a) {
    Matrix v = a.value().array().exp();
    return a.tape->push(v, {a}, [a = a.id](Tape& t, std::size_t s) {
        const Node& self = t.node(s);
        t.accumulate(a, self.grad.cwiseProduct(self.value));
    });
}

inline Var log(Var a) {
    return apply(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var square(Var a) {
    return a.tape->push(a.value().array().square(), {a}, [a = a.id](Tape& t, std::size_t s) {
        t.accumulate(a, 2.0 * t.node(s).grad.cwiseProduct(t.node(a).value));
    });
}

// Zero gradient outside [lo, hi].
inline Var clamp(Var a, double lo, double hi) {
    Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
    return a.tape->push(std::move(v), {a}, [a = a.id, lo, hi](Tape& t, std::size_t s) {
        const Matrix& x = t.node(a).value;
        Matrix g = t.node(s).grad;
        for (Index i = 0; i < g.size(); ++i)
            if (x(i) < lo || x(i) > hi) g(i) = 0.0;
        t.accumulate(a, g);
    });
}

// Sum over columns: (n x m) -> (n x 1).
inline Var row_sum(Var a) {
    Matrix v = a.value().rowwise().sum();
    const Index cols = a.cols();
    return a.tape->push(std::move(v), {a}, [a = a.id, cols](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        t.accumulate(a, g.replicate(1, cols));
    });
}

inline Var sum(Var a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    const Index r = a.rows(), c = a.cols();
    return a.tape->push(std::move(v), {a}, [a = a.id, r, c](Tape& t, std::size_t s) {
        t.accumulate(a, Matrix::Constant(r, c, t.node(s).grad(0, 0)));
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// sum_i w_i a_i for a column a (n x 1) and constant weights.
inline Var weighted_sum(Var a, const Vector& w) {
    if (a.cols() != 1 || w.size() != a.rows()) throw ShapeError("weighted_sum: expects n x 1 and n weights");
    Matrix v(1, 1);
    v(0, 0) = a.value().col(0).dot(w);
    return a.tape->push(std::move(v), {a}, [a = a.id, w](Tape& t, std::size_t s) {
        t.accumulate(a, w * t.node(s).grad(0, 0));
    });
}

inline Var concat_cols(Var a, Var b) {
    if (a.rows() != b.rows()) throw ShapeError("concat_cols: row counts differ");
    Matrix v(a.rows(), a.cols() + b.cols());
    v << a.value(), b.value();
    const Index ca = a.cols(), cb = b.cols();
    return a.tape->push(std::move(v), {a, b}, [a = a.id, b = b.id, ca, cb](Tape& t, std::size_t s) {
        const Matrix& g = t.node(s).grad;
        t.accumulate(a, g.leftCols(ca));
        t.accumulate(b, g.rightCols(cb));
    });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }

}  // namespace unidistill::ad
