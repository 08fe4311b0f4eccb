#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gendebias {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes do not conform to what a primitive expects.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of doubles. Parameters set `requires_grad` and own
/// their gradient buffer; intermediate values of a tape never do.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    std::optional<std::vector<double>> grad;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {
        check_shape();
    }

    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        check_shape();
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor parameter(Shape s, double fill = 0.0) {
        Tensor t(std::move(s), fill);
        t.requires_grad = true;
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    /// Leading extent of a matrix view; vectors are a single row.
    std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
    std::size_t cols() const {
        if (shape.empty()) return 1;
        return shape.size() >= 2 ? numel() / shape[0] : shape[0];
    }

    double &at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    double item() const {
        if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    }

    std::vector<double> &ensure_grad() {
        if (!grad) grad.emplace(data.size(), 0.0);
        return *grad;
    }

  private:
    void check_shape() const {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
};

} // namespace gendebias
