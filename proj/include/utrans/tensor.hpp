#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace utrans {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Rank <= 4, row-major, width fastest.
struct Shape {
    std::array<int, 4> d{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        if (dims.size() > 4) throw ShapeError("rank > 4 unsupported");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int x : dims) {
            if (x < 0) throw ShapeError("negative extent");
            d[i++] = x;
        }
    }
    int operator[](int i) const { return d[i]; }
    int& operator[](int i) { return d[i]; }
    long numel() const {
        long n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }
    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (d[i] != o.d[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }
    std::string str() const {
        std::ostringstream os;
        os << "(";
        for (int i = 0; i < rank; ++i) os << d[i] << (i + 1 < rank ? "," : "");
        os << ")";
        return os.str();
    }
};

// Allocator whose default-construct is a no-op, so resize() skips the
// zero fill for storage that is written immediately afterwards.
template <typename T>
struct uninit_alloc : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = uninit_alloc<U>;
    };
    template <typename U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... A>
    void construct(U* p, A&&... a) {
        ::new (static_cast<void*>(p)) U(std::forward<A>(a)...);
    }
};

template <typename T>
using tvec = std::vector<T, uninit_alloc<T>>;

template <typename T>
struct TensorData {
    Shape shape;
    tvec<T> v;
    tvec<T> g;  // empty until backward touches this tensor
    bool requires_grad = false;

    void ensure_grad() {
        if (g.empty()) g.assign(v.size(), T(0));
    }
};

// Value-like handle over shared storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0), bool rg = false)
        : d_(std::make_shared<TensorData<T>>()) {
        d_->shape = s;
        d_->v.assign(static_cast<size_t>(s.numel()), fill);
        d_->requires_grad = rg;
    }
    static Tensor from(Shape s, const std::vector<T>& data, bool rg = false) {
        if (static_cast<long>(data.size()) != s.numel())
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + s.str());
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = s;
        t.d_->v.assign(data.begin(), data.end());
        t.d_->requires_grad = rg;
        return t;
    }
    // storage left uninitialized; caller must write every element
    static Tensor uninit(Shape s) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = s;
        t.d_->v.resize(static_cast<size_t>(s.numel()));
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    long numel() const { return d_->shape.numel(); }
    tvec<T>& value() { return d_->v; }
    const tvec<T>& value() const { return d_->v; }
    tvec<T>& grad() { return d_->g; }
    const tvec<T>& grad() const { return d_->g; }
    bool has_grad() const { return !d_->g.empty(); }
    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }
    void zero_grad() { d_->g.clear(); }
    void ensure_grad() { d_->ensure_grad(); }

    T* data() { return d_->v.data(); }
    const T* data() const { return d_->v.data(); }

    const std::shared_ptr<TensorData<T>>& impl() const { return d_; }

    bool all_finite() const {
        for (T x : d_->v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// Ordered record of executed ops; execution order is topological by
// construction. One backward traversal visits each op exactly once.
template <typename T>
class Tape {
public:
    struct Op {
        const char* name;
        std::vector<std::shared_ptr<TensorData<T>>> inputs;
        std::shared_ptr<TensorData<T>> output;
        std::function<void()> back;  // reads output->g, accumulates into inputs
    };

    static Tape*& active() {
        thread_local Tape* t = nullptr;
        return t;
    }

    // RAII activation; tapes are confined to one thread.
    struct Scope {
        explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
        ~Scope() { active() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(Op op) { ops_.push_back(std::move(op)); }
    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ValueError("backward requires a scalar loss, got shape " +
                             loss.shape().str());
        if (ops_.empty()) throw ValueError("backward on empty tape");
        loss.impl()->ensure_grad();
        loss.impl()->g[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->output->g.empty()) continue;  // not upstream of the loss
            it->back();
        }
    }

private:
    std::vector<Op> ops_;
};

// Records an op on the active tape when any input wants gradients.
template <typename T>
inline void record_op(const char* name,
                      std::vector<Tensor<T>> inputs,
                      const Tensor<T>& output,
                      std::function<void()> back) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) return;
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (!rg) return;
    output.impl()->requires_grad = true;
    typename Tape<T>::Op op;
    op.name = name;
    for (auto& in : inputs) op.inputs.push_back(in.impl());
    op.output = output.impl();
    op.back = std::move(back);
    tape->record(std::move(op));
}

// splitmix64; used wherever independent sub-seeds are derived.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace utrans
