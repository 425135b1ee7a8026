#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "autolora/errors.hpp"

namespace autolora {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class Tape;

/// Dense row-major tensor of 64-bit reals. Handles are cheap to copy and
/// share the underlying buffer; clone() makes a deep copy. A tensor produced
/// by an operation recorded on a tape carries that tape's node handle.
class Tensor {
public:
    Tensor() : Tensor(Shape{1}, 0.0) {}

    Tensor(Shape shape, double fill)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(numel(shape_), fill)) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(data))) {
        if (numel(shape_) != data_->size()) {
            throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                                 " does not match shape " + shape_to_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

    double& at(std::size_t i) { return (*data_)[i]; }
    double at(std::size_t i) const { return (*data_)[i]; }
    double& at(std::size_t r, std::size_t c) { return (*data_)[r * shape_.back() + c]; }
    double at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_.back() + c]; }

    /// Value of a one-element tensor.
    double item() const {
        if (size() != 1) {
            throw ContractError("item() requires a scalar tensor, got shape " +
                                shape_to_string(shape_));
        }
        return (*data_)[0];
    }

    /// Deep copy; the result is untracked.
    Tensor clone() const { return Tensor(shape_, *data_); }

    /// Untracked handle sharing this buffer. Gradients do not flow through it.
    Tensor detach() const {
        Tensor t = *this;
        t.tape_ = nullptr;
        t.node_ = -1;
        return t;
    }

    bool tracked() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;

    friend class Tape;
};

inline Tensor detach(const Tensor& t) { return t.detach(); }

inline bool all_finite(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t.at(i))) return false;
    }
    return true;
}

inline Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0, double mean = 0.0) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> data(numel(shape));
    for (double& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data));
}

inline Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> data(numel(shape));
    for (double& v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data));
}

/// Named parameter gradients from one backward sweep. Holds an entry for
/// every named leaf of the tape; leaves not reached from the root hold exact
/// zeros.
class GradMap {
public:
    bool contains(const std::string& name) const { return grads_.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = grads_.find(name);
        if (it == grads_.end()) {
            throw ContractError("no gradient recorded for parameter '" + name + "'");
        }
        return it->second;
    }

    std::size_t size() const { return grads_.size(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

    void insert(const std::string& name, Tensor grad) { grads_.insert_or_assign(name, std::move(grad)); }

private:
    std::map<std::string, Tensor> grads_;
};

namespace detail {

/// Accumulation target handed to node adjoints during a backward sweep.
/// buffer(node) lazily materializes a zeroed gradient buffer; constant inputs
/// (node < 0) yield nullptr so adjoints can skip them.
class GradSink {
public:
    double* buffer(int node);

private:
    GradSink(const Tape* tape, std::vector<std::optional<std::vector<double>>>* grads)
        : tape_(tape), grads_(grads) {}

    const Tape* tape_;
    std::vector<std::optional<std::vector<double>>>* grads_;

    friend class ::autolora::Tape;
};

}  // namespace detail

using BackwardFn = std::function<void(const double* upstream, detail::GradSink& sink)>;

class BackwardResult;

/// Append-only record of one forward pass. Nodes are inserted in evaluation
/// order, so inputs always precede their consumers; backward visits each node
/// exactly once in reverse insertion order. Rebuilt per forward pass.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a differentiable leaf. Watching the same buffer twice yields
    /// the same node, so gradient contributions from different uses
    /// accumulate. A non-empty name makes the leaf visible in param_grads().
    Tensor watch(const Tensor& t, const std::string& name = "") {
        int node;
        auto it = leaf_by_buffer_.find(static_cast<const void*>(t.buffer().get()));
        if (it != leaf_by_buffer_.end()) {
            node = it->second;
        } else {
            nodes_.push_back(Node{t.shape(), {}, nullptr});
            node = static_cast<int>(nodes_.size()) - 1;
            leaf_by_buffer_.emplace(static_cast<const void*>(t.buffer().get()), node);
        }
        if (!name.empty()) {
            auto [pos, inserted] = named_.emplace(name, node);
            if (!inserted && pos->second != node) {
                throw ContractError("parameter name '" + name +
                                    "' bound to two different tensors on one tape");
            }
        }
        Tensor out = t;
        out.tape_ = this;
        out.node_ = node;
        return out;
    }

    /// Appends an operation result. `parents` may contain -1 for constant
    /// inputs; `fn` scatters the upstream gradient into the parents.
    Tensor record(Shape shape, std::vector<double> data, std::vector<int> parents, BackwardFn fn) {
        nodes_.push_back(Node{shape, std::move(parents), std::move(fn)});
        Tensor t(std::move(shape), std::move(data));
        t.tape_ = this;
        t.node_ = static_cast<int>(nodes_.size()) - 1;
        return t;
    }

    BackwardResult backward(const Tensor& root) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Shape shape;
        std::vector<int> parents;
        BackwardFn fn;  // null for leaves
    };

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_by_buffer_;
    std::map<std::string, int> named_;

    friend class BackwardResult;
    friend class detail::GradSink;
};

/// Gradients of one scalar root with respect to everything on its tape.
/// Valid only while the tape is alive; wrt() and param_grads() return owning
/// tensors that may outlive it.
class BackwardResult {
public:
    /// Gradient w.r.t. a tracked tensor; exact zeros when the tensor does not
    /// lie on a path to the root.
    Tensor wrt(const Tensor& t) const {
        if (!t.tracked() || t.tape() != tape_) {
            throw ContractError("tensor is not recorded on the differentiated tape");
        }
        const auto& slot = grads_[static_cast<std::size_t>(t.node())];
        if (!slot) return Tensor(t.shape(), 0.0);
        return Tensor(t.shape(), *slot);
    }

    /// Gradients of all named leaves; unreached leaves are exact zeros.
    GradMap param_grads() const {
        GradMap out;
        for (const auto& [name, node] : tape_->named_) {
            const auto& slot = grads_[static_cast<std::size_t>(node)];
            const Shape& shape = tape_->nodes_[static_cast<std::size_t>(node)].shape;
            out.insert(name, slot ? Tensor(shape, *slot) : Tensor(shape, 0.0));
        }
        return out;
    }

private:
    BackwardResult(const Tape* tape, std::vector<std::optional<std::vector<double>>> grads)
        : tape_(tape), grads_(std::move(grads)) {}

    const Tape* tape_;
    std::vector<std::optional<std::vector<double>>> grads_;

    friend class Tape;
};

inline BackwardResult Tape::backward(const Tensor& root) const {
    if (root.size() != 1) {
        throw ContractError("backward requires a scalar root, got shape " +
                            shape_to_string(root.shape()));
    }
    if (!root.tracked() || root.tape() != this) {
        throw ContractError("backward root is not recorded on this tape");
    }
    std::vector<std::optional<std::vector<double>>> grads(nodes_.size());
    grads[static_cast<std::size_t>(root.node())].emplace(1, 1.0);
    detail::GradSink sink(this, &grads);
    for (int i = root.node(); i >= 0; --i) {
        const auto& slot = grads[static_cast<std::size_t>(i)];
        const Node& node = nodes_[static_cast<std::size_t>(i)];
        if (!slot || !node.fn) continue;
        node.fn(slot->data(), sink);
    }
    return BackwardResult(this, std::move(grads));
}

namespace detail {

inline double* GradSink::buffer(int node) {
    if (node < 0) return nullptr;
    auto& slot = (*grads_)[static_cast<std::size_t>(node)];
    if (!slot) {
        slot.emplace(numel(tape_->nodes_[static_cast<std::size_t>(node)].shape), 0.0);
    }
    return slot->data();
}

/// Tape shared by the tracked inputs, or nullptr when all are constants.
inline Tape* result_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->tracked()) continue;
        if (tape != nullptr && tape != t->tape()) {
            throw ContractError("operation mixes tensors from different tapes");
        }
        tape = t->tape();
    }
    return tape;
}

inline int parent_of(const Tensor& t) { return t.tracked() ? t.node() : -1; }

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("cannot broadcast " + shape_to_string(a) + " with " +
                                 shape_to_string(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides into `in`, aligned to `out`; 0 marks broadcast dims.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    const std::size_t off = out.size() - in.size();
    std::size_t stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        if (in[i] != 1) strides[off + i] = stride;
        stride *= in[i];
    }
    return strides;
}

/// Calls f(out_index, a_index, b_index) for every output element of the
/// broadcast of shapes `a` and `b` onto `out`.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    const std::size_t n = numel(out);
    if (n == 0) return;
    const auto sa = broadcast_strides(a, out);
    const auto sb = broadcast_strides(b, out);
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t io = 0; io < n; ++io) {
        f(io, ia, ib);
        for (std::size_t d = out.size(); d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

enum class BinaryKind { kAdd, kSub, kMul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    std::vector<double> out(numel(out_shape));
    const double* av = a.data();
    const double* bv = b.data();
    switch (kind) {
        case BinaryKind::kAdd:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t io, std::size_t ia, std::size_t ib) {
                                   out[io] = av[ia] + bv[ib];
                               });
            break;
        case BinaryKind::kSub:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t io, std::size_t ia, std::size_t ib) {
                                   out[io] = av[ia] - bv[ib];
                               });
            break;
        case BinaryKind::kMul:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t io, std::size_t ia, std::size_t ib) {
                                   out[io] = av[ia] * bv[ib];
                               });
            break;
    }
    Tape* tape = result_tape({&a, &b});
    if (tape == nullptr) return Tensor(out_shape, std::move(out));

    const int pa = parent_of(a);
    const int pb = parent_of(b);
    const Shape ash = a.shape();
    const Shape bsh = b.shape();
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    BackwardFn fn = [out_shape, ash, bsh, pa, pb, abuf, bbuf, kind](const double* g,
                                                                    GradSink& sink) {
        double* da = sink.buffer(pa);
        double* db = sink.buffer(pb);
        const double* avd = abuf->data();
        const double* bvd = bbuf->data();
        for_each_broadcast(out_shape, ash, bsh,
                           [&](std::size_t io, std::size_t ia, std::size_t ib) {
                               switch (kind) {
                                   case BinaryKind::kAdd:
                                       if (da) da[ia] += g[io];
                                       if (db) db[ib] += g[io];
                                       break;
                                   case BinaryKind::kSub:
                                       if (da) da[ia] += g[io];
                                       if (db) db[ib] -= g[io];
                                       break;
                                   case BinaryKind::kMul:
                                       if (da) da[ia] += g[io] * bvd[ib];
                                       if (db) db[ib] += g[io] * avd[ia];
                                       break;
                               }
                           });
    };
    return tape->record(out_shape, std::move(out), {pa, pb}, std::move(fn));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinaryKind::kAdd);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinaryKind::kSub);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinaryKind::kMul);
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a.at(i);
    Tape* tape = detail::result_tape({&a});
    if (tape == nullptr) return Tensor(a.shape(), std::move(out));
    const int pa = a.node();
    const std::size_t n = a.size();
    BackwardFn fn = [pa, s, n](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        for (std::size_t i = 0; i < n; ++i) da[i] += s * g[i];
    };
    return tape->record(a.shape(), std::move(out), {pa}, std::move(fn));
}

/// Matrix product of [m x k] and [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul requires rank-2 tensors, got " + shape_to_string(a.shape()) +
                             " and " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner dimensions differ: " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const double* av = a.data();
    const double* bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    Tape* tape = detail::result_tape({&a, &b});
    if (tape == nullptr) return Tensor({m, n}, std::move(out));

    const int pa = detail::parent_of(a);
    const int pb = detail::parent_of(b);
    auto abuf = a.buffer();
    auto bbuf = b.buffer();
    BackwardFn fn = [m, k, n, pa, pb, abuf, bbuf](const double* g, detail::GradSink& sink) {
        const double* avd = abuf->data();
        const double* bvd = bbuf->data();
        if (double* da = sink.buffer(pa)) {
            // dA += G * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    const double* grow = g + i * n;
                    const double* brow = bvd + p * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    da[i * k + p] += acc;
                }
            }
        }
        if (double* db = sink.buffer(pb)) {
            // dB += A^T * G
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = avd[i * k + p];
                    if (aip == 0.0) continue;
                    double* brow = db + p * n;
                    for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
                }
            }
        }
    };
    return tape->record({m, n}, std::move(out), {pa, pb}, std::move(fn));
}

/// Elementwise max(x, 0). The subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    Tape* tape = detail::result_tape({&a});
    if (tape == nullptr) return Tensor(a.shape(), std::move(out));
    const int pa = a.node();
    auto abuf = a.buffer();
    const std::size_t n = a.size();
    BackwardFn fn = [pa, abuf, n](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        const double* av = abuf->data();
        for (std::size_t i = 0; i < n; ++i) {
            if (av[i] > 0.0) da[i] += g[i];
        }
    };
    return tape->record(a.shape(), std::move(out), {pa}, std::move(fn));
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a.at(i));
    Tape* tape = detail::result_tape({&a});
    if (tape == nullptr) return Tensor(a.shape(), std::move(out));
    const int pa = a.node();
    const std::size_t n = a.size();
    // Adjoint reuses the forward output: d/dx exp(x) = exp(x).
    auto obuf = std::make_shared<std::vector<double>>(out);
    BackwardFn fn = [pa, obuf, n](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        const double* ov = obuf->data();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * ov[i];
    };
    return tape->record(a.shape(), std::move(out), {pa}, std::move(fn));
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
    Tape* tape = detail::result_tape({&a});
    if (tape == nullptr) return Tensor::scalar(acc);
    const int pa = a.node();
    const std::size_t n = a.size();
    BackwardFn fn = [pa, n](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        for (std::size_t i = 0; i < n; ++i) da[i] += g[0];
    };
    return tape->record({1}, {acc}, {pa}, std::move(fn));
}

inline Tensor mean(const Tensor& a) {
    const std::size_t n = a.size();
    if (n == 0) throw ContractError("mean of an empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a.at(i);
    const double m = acc / static_cast<double>(n);
    Tape* tape = detail::result_tape({&a});
    if (tape == nullptr) return Tensor::scalar(m);
    const int pa = a.node();
    BackwardFn fn = [pa, n](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        const double share = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) da[i] += share;
    };
    return tape->record({1}, {m}, {pa}, std::move(fn));
}

/// Row-wise log-softmax of a [b x z] tensor, computed with max subtraction.
inline Tensor log_softmax(const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError("log_softmax requires a rank-2 tensor, got " +
                             shape_to_string(a.shape()));
    }
    const std::size_t b = a.dim(0);
    const std::size_t z = a.dim(1);
    if (z < 2) {
        throw DimensionError("log_softmax requires at least 2 columns, got " +
                             shape_to_string(a.shape()));
    }
    std::vector<double> out(b * z);
    const double* av = a.data();
    for (std::size_t i = 0; i < b; ++i) {
        const double* row = av + i * z;
        double mx = row[0];
        for (std::size_t j = 1; j < z; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < z; ++j) denom += std::exp(row[j] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < z; ++j) out[i * z + j] = row[j] - lse;
    }
    Tape* tape = detail::result_tape({&a});
    if (tape == nullptr) return Tensor({b, z}, std::move(out));
    const int pa = a.node();
    auto obuf = std::make_shared<std::vector<double>>(out);
    BackwardFn fn = [pa, obuf, b, z](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        const double* ov = obuf->data();
        for (std::size_t i = 0; i < b; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < z; ++j) gsum += g[i * z + j];
            for (std::size_t j = 0; j < z; ++j) {
                da[i * z + j] += g[i * z + j] - std::exp(ov[i * z + j]) * gsum;
            }
        }
    };
    return tape->record({b, z}, std::move(out), {pa}, std::move(fn));
}

/// Negative log-likelihood of integer labels under [b x z] log-probabilities,
/// averaged over the batch.
inline Tensor nll(const Tensor& logp, const std::vector<int>& labels) {
    if (logp.rank() != 2) {
        throw DimensionError("nll requires rank-2 log-probabilities, got " +
                             shape_to_string(logp.shape()));
    }
    const std::size_t b = logp.dim(0);
    const std::size_t z = logp.dim(1);
    if (labels.size() != b) {
        throw DimensionError("nll got " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(b));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= z) {
            throw ContractError("label " + std::to_string(y) + " out of range [0, " +
                                std::to_string(z) + ") at row " + std::to_string(i));
        }
        acc -= logp.at(i, static_cast<std::size_t>(y));
    }
    const double loss = acc / static_cast<double>(b);
    Tape* tape = detail::result_tape({&logp});
    if (tape == nullptr) return Tensor::scalar(loss);
    const int pa = logp.node();
    auto ys = labels;
    BackwardFn fn = [pa, ys, b, z](const double* g, detail::GradSink& sink) {
        double* da = sink.buffer(pa);
        const double share = g[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i) {
            da[i * z + static_cast<std::size_t>(ys[i])] -= share;
        }
    };
    return tape->record({1}, {loss}, {pa}, std::move(fn));
}

}  // namespace autolora
