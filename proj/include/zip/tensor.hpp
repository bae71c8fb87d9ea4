#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace zip {

// Thrown on extent mismatches; the message names both shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(const std::vector<int>& shape);

// Dense row-major N-d array (rank <= 4, feature maps are NCHW) with an
// optional gradient buffer of identical shape.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until ensure_grad()

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        values.assign(static_cast<size_t>(numel()), T(0));
    }
    Tensor(std::vector<int> s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<int64_t>(values.size()) != numel())
            throw ShapeError("tensor value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    int rank() const { return static_cast<int>(shape.size()); }
    int extent(int d) const { return shape[static_cast<size_t>(d)]; }

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
    void zero_grad() { grad.assign(values.size(), T(0)); }

    // 4D accessors (NCHW).
    T& at4(int n, int c, int h, int w) {
        return values[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    T at4(int n, int c, int h, int w) const {
        return values[static_cast<size_t>(((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    T& at2(int r, int c) { return values[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }
    T at2(int r, int c) const { return values[static_cast<size_t>(static_cast<int64_t>(r) * shape[1] + c)]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(std::vector<int> shape) {
    return std::make_shared<Tensor<T>>(std::move(shape));
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<int> shape, std::vector<T> values) {
    return std::make_shared<Tensor<T>>(std::move(shape), std::move(values));
}

// Trainable tensor plus its SGD momentum buffer.
template <typename T>
struct Parameter {
    Tensor<T> value;
    std::vector<T> momentum;
    bool weight_decay_enabled = true;

    Parameter() = default;
    explicit Parameter(std::vector<int> shape, bool decay = true)
        : value(std::move(shape)), weight_decay_enabled(decay) {
        value.ensure_grad();
        momentum.assign(value.values.size(), T(0));
    }
};

// Linear record of backward closures. Forward execution order of the network
// is its topological order, so replaying in reverse is the whole of backprop;
// there is no graph, no reference counting, no dynamic topology.
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
    void backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }
    void clear() { ops_.clear(); }
    size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
};

// Optional NaN/Inf guard; when enabled every op asserts its output is finite.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

template <typename T>
void assert_all_finite(const Tensor<T>& t, const char* what);

}  // namespace zip
