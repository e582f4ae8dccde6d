#pragma once

#include <atomic>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "pkdn/error.hpp"
#include "pkdn/util.hpp"

namespace pkdn {

// All values are 4-D (batch, channel, height, width), row-major with width
// contiguous.
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    i64 numel() const { return i64(n) * c * h * w; }
    bool operator==(const Shape& o) const = default;

    std::string str() const { return cat("(", n, ",", c, ",", h, ",", w, ")"); }
};

template <class T>
class Tape;

template <class T>
Tape<T>*& active_tape_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}

template <class T>
Tape<T>* active_tape() {
    return active_tape_slot<T>();
}

// Immutable-after-creation dense tensor. Copies share the buffer. `node`
// identifies this value on the tape that recorded it; the pairing is only
// meaningful while that tape is the active one, so tensors surviving a tape
// silently become constants.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape s)
        : shape_(check_shape(s)),
          buf_(std::make_shared<std::vector<T>>(static_cast<size_t>(shape_.numel()), T(0))) {}

    Tensor(Shape s, std::vector<T> data) : shape_(s), buf_(std::make_shared<std::vector<T>>(std::move(data))) {
        if (static_cast<i64>(buf_->size()) != shape_.numel())
            throw ValidationError(cat("tensor data length ", buf_->size(), " does not match shape ", s.str()));
    }

    static Tensor full(Shape s, T v) {
        Tensor t(s);
        std::fill(t.buf_->begin(), t.buf_->end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1, 1, 1, 1}, v); }

    const Shape& shape() const { return shape_; }
    int n() const { return shape_.n; }
    int c() const { return shape_.c; }
    int h() const { return shape_.h; }
    int w() const { return shape_.w; }
    i64 numel() const { return shape_.numel(); }
    bool defined() const { return buf_ != nullptr; }

    const T* data() const { return buf_->data(); }
    const std::vector<T>& vec() const { return *buf_; }

    // Mutable access for the op that is constructing this value. Never call
    // on a tensor that has been handed out.
    T* mut() { return buf_->data(); }

    T at(int n, int c, int h, int w) const {
        return (*buf_)[((i64(n) * shape_.c + c) * shape_.h + h) * shape_.w + w];
    }

    T item() const {
        if (numel() != 1) throw ValidationError(cat("item() on non-scalar tensor ", shape_.str()));
        return (*buf_)[0];
    }

    int node() const { return node_; }
    u64 tape_serial() const { return tape_serial_; }

    void set_node(int node, u64 serial) {
        node_ = node;
        tape_serial_ = serial;
    }

private:
    static Shape check_shape(Shape s) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw ValidationError(cat("negative dimension in shape ", s.str()));
        return s;
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> buf_;
    int node_ = -1;
    u64 tape_serial_ = 0;
};

// Trainable tensor plus its gradient accumulator and optimizer moment slots.
template <class T>
class Parameter {
public:
    Parameter() = default;
    explicit Parameter(Tensor<T> init)
        : value(std::move(init)),
          grad(static_cast<size_t>(value.numel()), T(0)),
          m(static_cast<size_t>(value.numel()), T(0)),
          v(static_cast<size_t>(value.numel()), T(0)) {}

    const Shape& shape() const { return value.shape(); }
    i64 numel() const { return value.numel(); }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

    Tensor<T> value;
    std::vector<T> grad;
    std::vector<T> m, v;
};

// Reverse-mode record: one node per produced value, created in topological
// order. Node backward callbacks receive the output gradient and accumulate
// into parent node buffers (or parameter .grad for leaves). Single use: a
// second backward on the same tape is an error.
template <class T>
class Tape {
public:
    Tape() : serial_(next_serial()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    u64 serial() const { return serial_; }
    bool consumed() const { return consumed_; }
    size_t node_count() const { return nodes_.size(); }

    int record(i64 out_elems, std::function<void(Tape&, const std::vector<T>&)> bw) {
        nodes_.push_back(Node{std::move(bw), out_elems});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Leaf node for a parameter; cached so repeated use of the same parameter
    // in one forward pass accumulates into a single slot.
    int leaf(Parameter<T>& p) {
        auto it = leaves_.find(&p);
        if (it != leaves_.end()) return it->second;
        std::vector<T>* gp = &p.grad;
        const int id = record(p.numel(), [gp](Tape&, const std::vector<T>& g) {
            for (size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
        });
        leaves_.emplace(&p, id);
        return id;
    }

    void add_grad(int id, const T* g, i64 count) {
        auto& buf = grads_[static_cast<size_t>(id)];
        if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].out_elems), T(0));
        for (i64 i = 0; i < count; ++i) buf[static_cast<size_t>(i)] += g[i];
    }

    std::vector<T>& grad_buf(int id) {
        auto& buf = grads_[static_cast<size_t>(id)];
        if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].out_elems), T(0));
        return buf;
    }

    void run_backward(int from_node) {
        if (consumed_) throw Error("backward on a consumed tape");
        if (from_node < 0 || from_node >= static_cast<int>(nodes_.size()))
            throw Error("backward from a node not on this tape");
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<size_t>(from_node)].assign(1, T(1));
        for (int i = from_node; i >= 0; --i) {
            auto& g = grads_[static_cast<size_t>(i)];
            if (g.empty()) continue;  // not reachable from the loss
            if (nodes_[static_cast<size_t>(i)].backward) nodes_[static_cast<size_t>(i)].backward(*this, g);
            g.clear();
            g.shrink_to_fit();
        }
        consumed_ = true;
    }

private:
    struct Node {
        std::function<void(Tape&, const std::vector<T>&)> backward;
        i64 out_elems;
    };

    static u64 next_serial() {
        static std::atomic<u64> counter{1};
        return counter.fetch_add(1);
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::unordered_map<const Parameter<T>*, int> leaves_;
    bool consumed_ = false;
    u64 serial_;
};

// RAII activation of a tape on this thread.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& t) : prev_(active_tape_slot<T>()) { active_tape_slot<T>() = &t; }
    ~TapeScope() { active_tape_slot<T>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

// Temporarily disables recording (teacher forwards during distillation).
template <class T>
class NoGradScope {
public:
    NoGradScope() : prev_(active_tape_slot<T>()) { active_tape_slot<T>() = nullptr; }
    ~NoGradScope() { active_tape_slot<T>() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<T>* prev_;
};

// Node id of `t` on the active tape, or -1 when `t` is a constant there.
template <class T>
int tape_node(const Tape<T>* tape, const Tensor<T>& t) {
    if (!tape || t.node() < 0 || t.tape_serial() != tape->serial()) return -1;
    return t.node();
}

// Seeds d(loss)/d(loss)=1 and accumulates gradients of every reachable
// parameter. Consumes the active tape.
template <class T>
void backward(const Tensor<T>& loss) {
    Tape<T>* tape = active_tape<T>();
    if (!tape) throw Error("backward with no active tape");
    if (loss.numel() != 1 || loss.shape() != Shape{1, 1, 1, 1})
        throw ValidationError(cat("backward requires a (1,1,1,1) scalar loss, got ", loss.shape().str()));
    if (tape_node(tape, loss) < 0) throw Error("loss was not produced on the active tape");
    tape->run_backward(loss.node());
}

}  // namespace pkdn
