#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bttt::ad {

/// Dense row-major shape, rank 0 (scalar) through 3.
struct Shape {
    int rank = 0;
    std::array<std::int64_t, 3> dim{1, 1, 1};

    static Shape scalar() { return Shape{0, {1, 1, 1}}; }
    static Shape vec(std::int64_t n) { return Shape{1, {n, 1, 1}}; }
    static Shape mat(std::int64_t r, std::int64_t c) { return Shape{2, {r, c, 1}}; }
    static Shape cube(std::int64_t a, std::int64_t b, std::int64_t c) { return Shape{3, {a, b, c}}; }

    [[nodiscard]] std::int64_t size() const { return dim[0] * dim[1] * dim[2]; }
    [[nodiscard]] std::int64_t rows() const { return dim[0]; }
    [[nodiscard]] std::int64_t cols() const { return dim[1]; }
    bool operator==(const Shape& o) const { return rank == o.rank && dim == o.dim; }
    bool operator!=(const Shape& o) const { return !(*this == o); }
    [[nodiscard]] std::string str() const;
};

/// Named, owning parameter. Gradients accumulate across backward() calls
/// until zero_grad(); optimizers read `grad` and write `value`.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool trainable = true;
    bool backbone = false;  // permanently frozen, excluded from every partition

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Ordered parameter collection with canonical JSON serialization.
class ParamStore {
public:
    Parameter& add(const std::string& name, Shape shape);
    [[nodiscard]] bool contains(const std::string& name) const { return params_.count(name) > 0; }
    Parameter& at(const std::string& name);
    [[nodiscard]] const Parameter& at(const std::string& name) const;

    [[nodiscard]] std::vector<std::string> names() const;
    [[nodiscard]] std::size_t size() const { return params_.size(); }

    void zero_grads();

    /// Total scalar count over parameters matching a name predicate.
    [[nodiscard]] std::int64_t count_scalars(const std::function<bool(const Parameter&)>& pred) const;

    /// Canonical serialization of a subset (all params if `names` empty).
    /// Byte-stable: alphabetical order, shortest-round-trip doubles.
    [[nodiscard]] std::string to_json(std::span<const std::string> names = {}) const;
    static ParamStore from_json(const std::string& text);

    /// Copy parameter values (not flags) from another store with identical layout.
    void assign_values_from(const ParamStore& other);

private:
    static ParamStore from_json_impl(const std::string& text);

public:

    template <typename F>
    void for_each(F&& f) {
        for (auto& [k, p] : params_) f(p);
    }
    template <typename F>
    void for_each(F&& f) const {
        for (const auto& [k, p] : params_) f(p);
    }

private:
    std::map<std::string, Parameter> params_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Val {
public:
    Val() = default;
    [[nodiscard]] const Shape& shape() const;
    [[nodiscard]] const std::vector<double>& data() const;
    [[nodiscard]] double scalar() const;
    [[nodiscard]] bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Val(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode tape, rebuilt per forward pass (define-by-run).
/// Single-threaded; clone parameters to run tapes concurrently.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves -----------------------------------------------------------
    Val constant(double v);
    Val constant(Shape shape, std::span<const double> data);
    Val leaf(Shape shape, std::vector<double> data);  // non-parameter input
    Val param(Parameter& p);                          // gradient exported on backward()

    // ---- arithmetic -------------------------------------------------------
    Val add(Val a, Val b);
    Val sub(Val a, Val b);
    Val mul(Val a, Val b);  // elementwise
    Val div(Val a, Val b);  // elementwise
    Val scale(Val a, double s);
    Val add_rowvec(Val m, Val row);  // (R,C) + (C,) broadcast over rows, explicit

    // ---- linear algebra ---------------------------------------------------
    Val matmul(Val a, Val b);   // (M,K)x(K,N)
    Val transpose(Val a);       // rank 2
    Val reshape(Val a, Shape s);

    // ---- nonlinearities ---------------------------------------------------
    Val softplus(Val a);
    Val tanh_act(Val a);
    Val sigmoid(Val a);
    Val gelu(Val a);

    // ---- structural -------------------------------------------------------
    Val cumsum(Val a);                       // along last axis
    Val softmax(Val a);                      // along last axis, stable
    Val layer_norm(Val a, Val gamma, Val beta, double eps = 1e-5);  // last axis
    Val slice_rows(Val a, std::int64_t r0, std::int64_t r1);
    Val slice_cols(Val a, std::int64_t c0, std::int64_t c1);
    Val concat_rows(std::span<const Val> parts);
    Val concat_cols(std::span<const Val> parts);
    Val concat_rows(std::initializer_list<Val> parts) {
        return concat_rows(std::span<const Val>(parts.begin(), parts.size()));
    }
    Val concat_cols(std::initializer_list<Val> parts) {
        return concat_cols(std::span<const Val>(parts.begin(), parts.size()));
    }

    // ---- reductions -------------------------------------------------------
    Val mean_all(Val a);
    Val mean_rows(Val a);        // (R,C) -> (C,)
    Val sum_all(Val a);
    Val mse(Val a, Val b);       // scalar mean squared error

    /// Piecewise-linear table lookup, elementwise, clamped outside [xs.front(), xs.back()].
    /// xs must be strictly increasing. Gradient is the active segment's slope
    /// (zero in the clamped region); callers should keep inputs off breakpoints
    /// when finite-difference checking.
    Val lerp_table(Val x, std::vector<double> xs, std::vector<double> ys);

    /// Reverse sweep from a scalar loss. Node gradients accumulate on the tape
    /// and parameter gradients accumulate into Parameter::grad, so calling
    /// twice without zeroing doubles every gradient.
    void backward(Val loss);

    [[nodiscard]] const Shape& shape_of(int id) const { return nodes_[id].value_shape; }
    [[nodiscard]] const std::vector<double>& value_of(int id) const { return nodes_[id].value; }
    [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }

private:
    friend class Val;
    struct Node {
        Shape value_shape;
        std::vector<double> value;
        std::vector<double> grad;
        std::function<void()> backprop;  // null for leaves/constants
        Parameter* bound = nullptr;      // parameter leaf
    };

    Val make(Shape shape, std::vector<double> value);
    Node& node(Val v) { return nodes_[v.id_]; }
    const Node& node(Val v) const { return nodes_[v.id_]; }
    void check_same_shape(Val a, Val b, const char* op) const;

    std::vector<Node> nodes_;
};

/// Builds a loss on a fresh tape from the current parameter values.
using LossBuilder = std::function<Val(Tape&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    int coords_checked = 0;
    std::string worst_param;
    std::int64_t worst_index = -1;
};

/// Central finite differences against reverse-mode gradients on a random
/// subsample of at most `max_coords` coordinates across `params`.
/// Relative error metric: |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
GradCheckReport grad_check(const LossBuilder& build, std::span<Parameter*> params,
                           double epsilon = 1e-5, int max_coords = 200,
                           std::uint64_t seed = 0x5eed);

}  // namespace bttt::ad
