#pragma once

// Minimal reverse-mode differentiation over row-major dense matrices.
//
// A Tape records one forward pass. Every op returns a Var (an index into the
// tape); backward() walks the tape in reverse and accumulates gradients into
// the nodes and finally into the Param objects that were read. Batched
// tensors are flattened to (batch * rows) x cols, so sample b owns a
// contiguous block of rows and a row-major reshape never crosses samples.

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fildeep/errors.hpp"

namespace fildeep::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;

template <class T>
using ConstStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <class T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    bool trainable = true;
    double lr_scale = 1.0;  // per-parameter multiplier on the optimizer rate
};

/// Named parameter arrays in insertion order.
template <class T>
class ParamStore {
public:
    Param<T>& add(const std::string& name, Mat<T> value) {
        if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
        auto p = std::make_unique<Param<T>>();
        p->name = name;
        p->grad = Mat<T>::Zero(value.rows(), value.cols());
        p->value = std::move(value);
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Param<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("missing parameter '" + name + "'");
        return *params_[it->second];
    }
    const Param<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("missing parameter '" + name + "'");
        return *params_[it->second];
    }

    std::size_t size() const { return params_.size(); }
    Param<T>& at(std::size_t i) { return *params_[i]; }
    const Param<T>& at(std::size_t i) const { return *params_[i]; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->grad.setZero();
    }

    /// Marks every parameter whose name starts with one of `prefixes` as
    /// trainable and all others as frozen.
    void train_only(const std::vector<std::string>& prefixes) {
        for (auto& p : params_) {
            p->trainable = false;
            for (const auto& pre : prefixes)
                if (p->name.rfind(pre, 0) == 0) p->trainable = true;
        }
    }

    void train_all() {
        for (auto& p : params_) p->trainable = true;
    }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) {
            auto& q = out.add(p->name, p->value.template cast<U>());
            q.trainable = p->trainable;
            q.lr_scale = p->lr_scale;
        }
        return out;
    }

    /// Copies values (not gradients) by name. With `skip_missing`, names
    /// absent from `other` keep their current values.
    template <class U>
    void assign_from(const ParamStore<U>& other, bool skip_missing = false) {
        for (auto& p : params_) {
            if (skip_missing && !other.has(p->name)) continue;
            const auto& q = other.get(p->name);
            if (q.value.rows() != p->value.rows() || q.value.cols() != p->value.cols())
                throw DataError("parameter '" + p->name + "' shape mismatch");
            p->value = q.value.template cast<T>();
        }
    }

private:
    std::vector<std::unique_ptr<Param<T>>> params_;
    std::map<std::string, std::size_t> index_;
};

struct Var {
    int id = -1;
};

template <class T>
class Tape {
public:
    using M = Mat<T>;

    /// With gradients disabled no backward closures are recorded; used for
    /// inference and for cached frozen features.
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    const M& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

    /// Gradient of the last backward() target w.r.t. `v` (zeros if untouched).
    M grad(Var v) const {
        const auto& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    Var constant(M v) { return push(std::move(v), false, nullptr); }

    /// Input that collects a gradient even though it is not a parameter
    /// (finite-difference probes on activations).
    Var variable(M v) { return push(std::move(v), grad_enabled_, nullptr); }

    Var param(Param<T>& p) {
        Var v = push(p.value, grad_enabled_ && p.trainable, nullptr);
        if (requires_grad(v)) leaves_.push_back({v.id, &p});
        return v;
    }

    void backward(Var target) {
        auto& t = node(target);
        if (t.value.size() != 1) throw NumericalError("backward target must be a scalar");
        if (!t.requires_grad) return;
        t.grad = M::Ones(1, 1);
        for (int i = target.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && n.grad.size() != 0) n.back(n.grad);
        }
        for (const auto& [id, p] : leaves_) {
            const auto& g = nodes_[static_cast<std::size_t>(id)].grad;
            if (g.size() != 0) p->grad += g;
        }
    }

    // ---- elementwise and shape ops -------------------------------------

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        return unary2(a, b, value(a) + value(b), [this, a, b](const M& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        return unary2(a, b, value(a) - value(b), [this, a, b](const M& g) {
            accumulate(a, g);
            accumulate(b, -g);
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        return unary2(a, b, value(a).cwiseProduct(value(b)), [this, a, b](const M& g) {
            accumulate(a, g.cwiseProduct(value(b)));
            accumulate(b, g.cwiseProduct(value(a)));
        });
    }

    Var scale(Var a, T s) {
        return unary(a, value(a) * s, [this, a, s](const M& g) { accumulate(a, g * s); });
    }

    Var add_scalar(Var a, T s) {
        return unary(a, (value(a).array() + s).matrix(), [this, a](const M& g) { accumulate(a, g); });
    }

    /// a + row broadcast to every row.
    Var add_row(Var a, Var row) {
        const M& A = value(a);
        const M& r = value(row);
        if (r.rows() != 1 || r.cols() != A.cols()) throw DataError("add_row: shape mismatch");
        M y = A.rowwise() + r.row(0);
        return unary2(a, row, std::move(y), [this, a, row](const M& g) {
            accumulate(a, g);
            accumulate(row, g.colwise().sum());
        });
    }

    /// Adds a constant pattern of G rows to every group of G consecutive rows.
    Var add_tiled_constant(Var a, const M& pattern) {
        const M& A = value(a);
        const Eigen::Index G = pattern.rows();
        if (pattern.cols() != A.cols() || A.rows() % G != 0) throw DataError("add_tiled_constant: shape mismatch");
        M y = A;
        for (Eigen::Index b = 0; b < A.rows() / G; ++b) y.middleRows(b * G, G) += pattern;
        return unary(a, std::move(y), [this, a](const M& g) { accumulate(a, g); });
    }

    Var exp(Var a) {
        M y = value(a).array().exp().matrix();
        M yc = y;
        return unary(a, std::move(y), [this, a, yc](const M& g) { accumulate(a, g.cwiseProduct(yc)); });
    }

    /// Exact (erf) GELU.
    Var gelu(Var a) {
        const M& x = value(a);
        const T r2 = static_cast<T>(std::numbers::sqrt2);
        M y = x.unaryExpr([r2](T v) { return T(0.5) * v * (T(1) + std::erf(v / r2)); });
        return unary(a, std::move(y), [this, a, r2](const M& g) {
            const T inv = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
            M d = value(a).unaryExpr([r2, inv](T v) {
                return T(0.5) * (T(1) + std::erf(v / r2)) + v * inv * std::exp(T(-0.5) * v * v);
            });
            accumulate(a, g.cwiseProduct(d));
        });
    }

    Var relu(Var a) {
        M y = value(a).cwiseMax(T(0));
        return unary(a, std::move(y), [this, a](const M& g) {
            accumulate(a, (value(a).array() > T(0)).select(g.array(), T(0)).matrix());
        });
    }

    /// Row-major reinterpretation; the element order is unchanged.
    Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
        const M& A = value(a);
        if (rows * cols != A.size()) throw DataError("reshape: element count mismatch");
        M y = Eigen::Map<const M>(A.data(), rows, cols);
        const Eigen::Index r0 = A.rows(), c0 = A.cols();
        return unary(a, std::move(y), [this, a, r0, c0](const M& g) {
            accumulate(a, Eigen::Map<const M>(g.data(), r0, c0));
        });
    }

    Var concat_cols(Var a, Var b) {
        const M& A = value(a);
        const M& B = value(b);
        if (A.rows() != B.rows()) throw DataError("concat_cols: row count mismatch");
        M y(A.rows(), A.cols() + B.cols());
        y << A, B;
        const Eigen::Index ca = A.cols(), cb = B.cols();
        return unary2(a, b, std::move(y), [this, a, b, ca, cb](const M& g) {
            accumulate(a, g.leftCols(ca));
            accumulate(b, g.rightCols(cb));
        });
    }

    Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
        const M& A = value(a);
        if (start < 0 || start + n > A.cols()) throw DataError("slice_cols: out of range");
        M y = A.middleCols(start, n);
        return unary(a, std::move(y), [this, a, start, n](const M& g) {
            M full = M::Zero(value(a).rows(), value(a).cols());
            full.middleCols(start, n) = g;
            accumulate(a, full);
        });
    }

    /// (B*G) x C -> B x C mean over each group of G rows.
    Var group_mean(Var a, Eigen::Index G) {
        const M& A = value(a);
        if (G <= 0 || A.rows() % G != 0) throw DataError("group_mean: rows not divisible by group");
        const Eigen::Index B = A.rows() / G;
        M y(B, A.cols());
        for (Eigen::Index b = 0; b < B; ++b) y.row(b) = A.middleRows(b * G, G).colwise().mean();
        return unary(a, std::move(y), [this, a, G, B](const M& g) {
            M d(B * G, g.cols());
            for (Eigen::Index b = 0; b < B; ++b) d.middleRows(b * G, G).rowwise() = g.row(b) / static_cast<T>(G);
            accumulate(a, d);
        });
    }

    /// a ((B*G) x C) plus row b of `s` (B x C) added to every row of group b.
    Var add_group_broadcast(Var a, Var s) {
        const M& A = value(a);
        const M& S = value(s);
        if (S.rows() == 0 || A.rows() % S.rows() != 0 || A.cols() != S.cols())
            throw DataError("add_group_broadcast: shape mismatch");
        const Eigen::Index B = S.rows(), G = A.rows() / S.rows();
        M y = A;
        for (Eigen::Index b = 0; b < B; ++b) y.middleRows(b * G, G).rowwise() += S.row(b);
        return unary2(a, s, std::move(y), [this, a, s, B, G](const M& g) {
            accumulate(a, g);
            M ds(B, g.cols());
            for (Eigen::Index b = 0; b < B; ++b) ds.row(b) = g.middleRows(b * G, G).colwise().sum();
            accumulate(s, ds);
        });
    }

    // ---- dense layers ---------------------------------------------------

    Var matmul(Var a, Var b) {
        const M& A = value(a);
        const M& B = value(b);
        if (A.cols() != B.rows()) throw DataError("matmul: inner dimension mismatch");
        M y = A * B;
        return unary2(a, b, std::move(y), [this, a, b](const M& g) {
            if (requires_grad(a)) accumulate(a, g * value(b).transpose());
            if (requires_grad(b)) accumulate(b, value(a).transpose() * g);
        });
    }

    /// x W + b, W in x out, b 1 x out.
    Var linear(Var x, Var W, Var b) {
        const M& X = value(x);
        const M& Wm = value(W);
        if (X.cols() != Wm.rows() || value(b).cols() != Wm.cols()) throw DataError("linear: shape mismatch");
        M y = X * Wm;
        y.rowwise() += value(b).row(0);
        return unary3(x, W, b, std::move(y), [this, x, W, b](const M& g) {
            if (requires_grad(x)) accumulate(x, g * value(W).transpose());
            if (requires_grad(W)) accumulate(W, value(x).transpose() * g);
            if (requires_grad(b)) accumulate(b, g.colwise().sum());
        });
    }

    /// Row i uses weight block (i mod R): W is (R*in) x out, b is R x out.
    Var region_linear(Var x, Var W, Var b, Eigen::Index R) {
        const M& X = value(x);
        const M& Wm = value(W);
        const M& bm = value(b);
        const Eigen::Index in = X.cols(), out = Wm.cols();
        if (R <= 0 || X.rows() % R != 0 || Wm.rows() != R * in || bm.rows() != R || bm.cols() != out)
            throw DataError("region_linear: shape mismatch");
        const Eigen::Index B = X.rows() / R;
        M y(X.rows(), out);
        for (Eigen::Index r = 0; r < R; ++r) {
            ConstStridedMap<T> xr(X.data() + r * in, B, in, Eigen::OuterStride<>(R * in));
            StridedMap<T> yr(y.data() + r * out, B, out, Eigen::OuterStride<>(R * out));
            yr.noalias() = xr * Wm.middleRows(r * in, in);
            yr.rowwise() += bm.row(r);
        }
        return unary3(x, W, b, std::move(y), [this, x, W, b, R, in, out, B](const M& g) {
            const M& Xv = value(x);
            const M& Wv = value(W);
            M dx, dW, db;
            if (requires_grad(x)) dx = M::Zero(Xv.rows(), in);
            if (requires_grad(W)) dW = M::Zero(Wv.rows(), out);
            if (requires_grad(b)) db = M::Zero(R, out);
            for (Eigen::Index r = 0; r < R; ++r) {
                ConstStridedMap<T> gr(g.data() + r * out, B, out, Eigen::OuterStride<>(R * out));
                if (dx.size()) {
                    StridedMap<T> dxr(dx.data() + r * in, B, in, Eigen::OuterStride<>(R * in));
                    dxr.noalias() = gr * Wv.middleRows(r * in, in).transpose();
                }
                if (dW.size()) {
                    ConstStridedMap<T> xr(Xv.data() + r * in, B, in, Eigen::OuterStride<>(R * in));
                    dW.middleRows(r * in, in).noalias() = xr.transpose() * gr;
                }
                if (db.size()) db.row(r) = gr.colwise().sum();
            }
            if (dx.size()) accumulate(x, dx);
            if (dW.size()) accumulate(W, dW);
            if (db.size()) accumulate(b, db);
        });
    }

    /// Row-wise layer norm with affine gamma/beta (1 x C each).
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        const M& X = value(x);
        const Eigen::Index n = X.rows(), c = X.cols();
        M xhat(n, c);
        Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const T mu = X.row(i).mean();
            const T var = (X.row(i).array() - mu).square().mean();
            inv_std(i) = T(1) / std::sqrt(var + eps);
            xhat.row(i) = (X.row(i).array() - mu) * inv_std(i);
        }
        M y = xhat.array().rowwise() * value(gamma).row(0).array();
        y.rowwise() += value(beta).row(0);
        return unary3(x, gamma, beta, std::move(y), [this, x, gamma, beta, xhat, inv_std, c](const M& g) {
            if (requires_grad(gamma)) accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
            if (requires_grad(beta)) accumulate(beta, g.colwise().sum());
            if (!requires_grad(x)) return;
            M dxhat = g.array().rowwise() * value(gamma).row(0).array();
            M dx(dxhat.rows(), c);
            for (Eigen::Index i = 0; i < dx.rows(); ++i) {
                const T m1 = dxhat.row(i).mean();
                const T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
            }
            accumulate(x, dx);
        });
    }

    /// Multi-head scaled dot-product attention, block-diagonal over samples.
    /// Q is (B*Nq) x C, K and V are (B*Nk) x C. If `probs` is given, the
    /// softmax matrices are appended to it in (sample, head) order.
    Var attention(Var q, Var k, Var v, Eigen::Index B, Eigen::Index heads, std::vector<M>* probs = nullptr) {
        const M& Q = value(q);
        const M& K = value(k);
        const M& V = value(v);
        const Eigen::Index C = Q.cols();
        if (heads <= 0 || C % heads != 0) throw ConfigError("attention: heads must divide the channel width");
        if (K.cols() != C || V.cols() != C || K.rows() != V.rows() || Q.rows() % B != 0 || K.rows() % B != 0)
            throw DataError("attention: shape mismatch");
        const Eigen::Index Nq = Q.rows() / B, Nk = K.rows() / B, d = C / heads;
        const T sc = T(1) / std::sqrt(static_cast<T>(d));
        auto P = std::make_shared<std::vector<M>>(static_cast<std::size_t>(B * heads));
        M y(Q.rows(), C);
        for (Eigen::Index b = 0; b < B; ++b)
            for (Eigen::Index h = 0; h < heads; ++h) {
                M s = (Q.block(b * Nq, h * d, Nq, d) * K.block(b * Nk, h * d, Nk, d).transpose()) * sc;
                for (Eigen::Index i = 0; i < Nq; ++i) {
                    const T mx = s.row(i).maxCoeff();
                    s.row(i) = (s.row(i).array() - mx).exp().matrix();
                    s.row(i) /= s.row(i).sum();
                }
                y.block(b * Nq, h * d, Nq, d).noalias() = s * V.block(b * Nk, h * d, Nk, d);
                (*P)[static_cast<std::size_t>(b * heads + h)] = std::move(s);
            }
        if (probs)
            for (const auto& p : *P) probs->push_back(p);
        return unary3(q, k, v, std::move(y), [this, q, k, v, B, heads, Nq, Nk, d, sc, P](const M& g) {
            const M& Qv = value(q);
            const M& Kv = value(k);
            const M& Vv = value(v);
            M dq = M::Zero(Qv.rows(), Qv.cols()), dk = M::Zero(Kv.rows(), Kv.cols()), dv = M::Zero(Vv.rows(), Vv.cols());
            for (Eigen::Index b = 0; b < B; ++b)
                for (Eigen::Index h = 0; h < heads; ++h) {
                    const M& p = (*P)[static_cast<std::size_t>(b * heads + h)];
                    const auto go = g.block(b * Nq, h * d, Nq, d);
                    dv.block(b * Nk, h * d, Nk, d).noalias() = p.transpose() * go;
                    M dp = go * Vv.block(b * Nk, h * d, Nk, d).transpose();
                    Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
                    M ds = p.cwiseProduct(dp.colwise() - rs) * sc;
                    dq.block(b * Nq, h * d, Nq, d).noalias() = ds * Kv.block(b * Nk, h * d, Nk, d);
                    dk.block(b * Nk, h * d, Nk, d).noalias() = ds.transpose() * Qv.block(b * Nq, h * d, Nq, d);
                }
            accumulate(q, dq);
            accumulate(k, dk);
            accumulate(v, dv);
        });
    }

    // ---- images (channels last: rows are (sample, y, x), cols channels) ---

    struct ImageShape {
        Eigen::Index B = 0, H = 0, W = 0, C = 0;
    };

    /// k x k convolution with zero padding. W is (k*k*Cin) x Cout with rows
    /// ordered (ky, kx, cin); b is 1 x Cout.
    Var conv2d(Var x, Var W, Var b, ImageShape s, Eigen::Index k, Eigen::Index stride, Eigen::Index pad) {
        const M& X = value(x);
        const M& Wm = value(W);
        if (X.rows() != s.B * s.H * s.W || X.cols() != s.C || Wm.rows() != k * k * s.C || value(b).cols() != Wm.cols())
            throw DataError("conv2d: shape mismatch");
        const Eigen::Index Ho = (s.H + 2 * pad - k) / stride + 1, Wo = (s.W + 2 * pad - k) / stride + 1;
        if (Ho <= 0 || Wo <= 0) throw DataError("conv2d: output would be empty");
        auto col = std::make_shared<M>(M::Zero(s.B * Ho * Wo, k * k * s.C));
        for (Eigen::Index bb = 0; bb < s.B; ++bb)
            for (Eigen::Index oy = 0; oy < Ho; ++oy)
                for (Eigen::Index ox = 0; ox < Wo; ++ox) {
                    const Eigen::Index row = (bb * Ho + oy) * Wo + ox;
                    for (Eigen::Index ky = 0; ky < k; ++ky) {
                        const Eigen::Index iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= s.H) continue;
                        for (Eigen::Index kx = 0; kx < k; ++kx) {
                            const Eigen::Index ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= s.W) continue;
                            col->block(row, (ky * k + kx) * s.C, 1, s.C) = X.row((bb * s.H + iy) * s.W + ix);
                        }
                    }
                }
        M y = *col * Wm;
        y.rowwise() += value(b).row(0);
        return unary3(x, W, b, std::move(y), [this, x, W, b, s, k, stride, pad, Ho, Wo, col](const M& g) {
            if (requires_grad(W)) accumulate(W, col->transpose() * g);
            if (requires_grad(b)) accumulate(b, g.colwise().sum());
            if (!requires_grad(x)) return;
            const M dcol = g * value(W).transpose();
            M dx = M::Zero(s.B * s.H * s.W, s.C);
            for (Eigen::Index bb = 0; bb < s.B; ++bb)
                for (Eigen::Index oy = 0; oy < Ho; ++oy)
                    for (Eigen::Index ox = 0; ox < Wo; ++ox) {
                        const Eigen::Index row = (bb * Ho + oy) * Wo + ox;
                        for (Eigen::Index ky = 0; ky < k; ++ky) {
                            const Eigen::Index iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= s.H) continue;
                            for (Eigen::Index kx = 0; kx < k; ++kx) {
                                const Eigen::Index ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= s.W) continue;
                                dx.row((bb * s.H + iy) * s.W + ix) += dcol.block(row, (ky * k + kx) * s.C, 1, s.C);
                            }
                        }
                    }
            accumulate(x, dx);
        });
    }

    /// Bilinear 2x upsampling (half-pixel centres, edge clamped).
    Var upsample2x(Var x, ImageShape s) {
        const M& X = value(x);
        if (X.rows() != s.B * s.H * s.W || X.cols() != s.C) throw DataError("upsample2x: shape mismatch");
        const Eigen::Index Ho = 2 * s.H, Wo = 2 * s.W;
        auto taps = [](Eigen::Index o, Eigen::Index n, Eigen::Index& i0, Eigen::Index& i1, T& w1) {
            const T src = std::max(T(0), (static_cast<T>(o) + T(0.5)) / T(2) - T(0.5));
            i0 = std::min(static_cast<Eigen::Index>(src), n - 1);
            i1 = std::min(i0 + 1, n - 1);
            w1 = src - static_cast<T>(i0);
        };
        M y(s.B * Ho * Wo, s.C);
        for (Eigen::Index bb = 0; bb < s.B; ++bb)
            for (Eigen::Index oy = 0; oy < Ho; ++oy) {
                Eigen::Index y0, y1;
                T wy;
                taps(oy, s.H, y0, y1, wy);
                for (Eigen::Index ox = 0; ox < Wo; ++ox) {
                    Eigen::Index x0, x1;
                    T wx;
                    taps(ox, s.W, x0, x1, wx);
                    auto px = [&](Eigen::Index yy, Eigen::Index xx) { return X.row((bb * s.H + yy) * s.W + xx); };
                    y.row((bb * Ho + oy) * Wo + ox) = (T(1) - wy) * ((T(1) - wx) * px(y0, x0) + wx * px(y0, x1)) +
                                                      wy * ((T(1) - wx) * px(y1, x0) + wx * px(y1, x1));
                }
            }
        return unary(x, std::move(y), [this, x, s, Ho, Wo, taps](const M& g) {
            M dx = M::Zero(s.B * s.H * s.W, s.C);
            for (Eigen::Index bb = 0; bb < s.B; ++bb)
                for (Eigen::Index oy = 0; oy < Ho; ++oy) {
                    Eigen::Index y0, y1;
                    T wy;
                    taps(oy, s.H, y0, y1, wy);
                    for (Eigen::Index ox = 0; ox < Wo; ++ox) {
                        Eigen::Index x0, x1;
                        T wx;
                        taps(ox, s.W, x0, x1, wx);
                        const auto go = g.row((bb * Ho + oy) * Wo + ox);
                        dx.row((bb * s.H + y0) * s.W + x0) += (T(1) - wy) * (T(1) - wx) * go;
                        dx.row((bb * s.H + y0) * s.W + x1) += (T(1) - wy) * wx * go;
                        dx.row((bb * s.H + y1) * s.W + x0) += wy * (T(1) - wx) * go;
                        dx.row((bb * s.H + y1) * s.W + x1) += wy * wx * go;
                    }
                }
            accumulate(x, dx);
        });
    }

    // ---- reductions / losses ---------------------------------------------

    Var mean_all(Var a) {
        M y(1, 1);
        y(0, 0) = value(a).mean();
        return unary(a, std::move(y), [this, a](const M& g) {
            const auto& A = value(a);
            accumulate(a, M::Constant(A.rows(), A.cols(), g(0, 0) / static_cast<T>(A.size())));
        });
    }

    /// sum_ij w_j (a_ij - target_ij)^2 / denom, with optional per-column weights.
    Var weighted_sq_error(Var a, const M& target, T denom, const std::vector<T>& col_weights = {}) {
        const M& A = value(a);
        if (A.rows() != target.rows() || A.cols() != target.cols()) throw DataError("squared error: shape mismatch");
        if (!col_weights.empty() && static_cast<Eigen::Index>(col_weights.size()) != A.cols())
            throw DataError("squared error: weight count mismatch");
        M wdiff = A - target;
        if (!col_weights.empty())
            for (Eigen::Index j = 0; j < A.cols(); ++j) wdiff.col(j) *= col_weights[static_cast<std::size_t>(j)];
        M y(1, 1);
        y(0, 0) = (A - target).cwiseProduct(wdiff).sum() / denom;
        return unary(a, std::move(y), [this, a, wdiff, denom](const M& g) {
            accumulate(a, wdiff * (T(2) * g(0, 0) / denom));
        });
    }

private:
    struct Node {
        M value;
        M grad;
        bool requires_grad = false;
        std::function<void(const M&)> back;
    };

    Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }

    Var push(M value, bool rg, std::function<void(const M&)> back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = rg;
        if (rg) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    template <class F>
    Var unary(Var a, M y, F&& f) {
        return push(std::move(y), requires_grad(a), std::forward<F>(f));
    }
    template <class F>
    Var unary2(Var a, Var b, M y, F&& f) {
        return push(std::move(y), requires_grad(a) || requires_grad(b), std::forward<F>(f));
    }
    template <class F>
    Var unary3(Var a, Var b, Var c, M y, F&& f) {
        return push(std::move(y), requires_grad(a) || requires_grad(b) || requires_grad(c), std::forward<F>(f));
    }

    template <class Expr>
    void accumulate(Var v, const Expr& g) {
        auto& n = node(v);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = g;
        else n.grad += g;
    }

    void check_same(Var a, Var b, const char* op) const {
        if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
            throw DataError(std::string(op) + ": shape mismatch");
    }

    bool grad_enabled_;
    std::deque<Node> nodes_;
    std::vector<std::pair<int, Param<T>*>> leaves_;
};

/// Adaptive-moment optimizer over the trainable entries of a ParamStore,
/// with optional cosine decay of the rate and global-norm gradient clipping.
template <class T>
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 0.0;  // 0 disables clipping
        long total_steps = 0;    // > 0 enables cosine decay to zero
    };

    explicit Adam(Options o) : o_(o) {}

    double current_lr() const {
        if (o_.total_steps <= 0) return o_.lr;
        const double t = std::min(1.0, static_cast<double>(step_) / static_cast<double>(o_.total_steps));
        return o_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }

    long steps() const { return step_; }

    /// Applies one update from the accumulated gradients. Returns the
    /// pre-clipping gradient norm; throws on a non-finite gradient.
    double step(ParamStore<T>& store) {
        double sq = 0.0;
        for (std::size_t i = 0; i < store.size(); ++i) {
            const auto& p = store.at(i);
            if (p.trainable) sq += p.grad.template cast<double>().squaredNorm();
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericalError("non-finite gradient");
        const double clip = (o_.clip_norm > 0.0 && norm > o_.clip_norm) ? o_.clip_norm / norm : 1.0;
        const double lr = current_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(o_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(o_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& p = store.at(i);
            if (!p.trainable) continue;
            auto& st = state_[p.name];
            if (st.m.size() == 0) {
                st.m = Mat<T>::Zero(p.value.rows(), p.value.cols());
                st.v = Mat<T>::Zero(p.value.rows(), p.value.cols());
            }
            const Mat<T> g = p.grad * static_cast<T>(clip);
            st.m = static_cast<T>(o_.beta1) * st.m + static_cast<T>(1.0 - o_.beta1) * g;
            st.v = static_cast<T>(o_.beta2) * st.v + static_cast<T>(1.0 - o_.beta2) * g.cwiseProduct(g);
            const T a = static_cast<T>(lr * p.lr_scale / bc1);
            const T vb = static_cast<T>(1.0 / bc2);
            const T eps = static_cast<T>(o_.eps);
            p.value.array() -= a * st.m.array() / ((st.v.array() * vb).sqrt() + eps);
        }
        return norm;
    }

private:
    struct State {
        Mat<T> m, v;
    };
    Options o_;
    long step_ = 0;
    std::map<std::string, State> state_;
};

} // namespace fildeep::nn
