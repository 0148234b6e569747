#include "bttt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::ad {

std::string Shape::str() const {
    if (rank == 0) return "scalar";
    std::string s;
    for (int i = 0; i < rank; ++i) {
        if (i) s += 'x';
        s += std::to_string(dim[i]);
    }
    return s;
}

// ---------------------------------------------------------------------------
// ParamStore

Parameter& ParamStore::add(const std::string& name, Shape shape) {
    if (name.empty()) throw std::invalid_argument("parameter name must be non-empty");
    if (shape.size() <= 0) throw std::invalid_argument("parameter " + name + " has empty shape");
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
    Parameter& p = it->second;
    p.name = name;
    p.shape = shape;
    p.value.assign(static_cast<std::size_t>(shape.size()), 0.0);
    p.grad.assign(static_cast<std::size_t>(shape.size()), 0.0);
    return p;
}

Parameter& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, p] : params_) out.push_back(k);
    return out;
}

void ParamStore::zero_grads() {
    for (auto& [k, p] : params_) p.zero_grad();
}

std::int64_t ParamStore::count_scalars(const std::function<bool(const Parameter&)>& pred) const {
    std::int64_t n = 0;
    for (const auto& [k, p] : params_)
        if (pred(p)) n += p.shape.size();
    return n;
}

std::string ParamStore::to_json(std::span<const std::string> names) const {
    nlohmann::ordered_json root;
    root["format"] = "bttt-params";
    root["version"] = 1;
    nlohmann::ordered_json ps = nlohmann::ordered_json::object();
    auto emit = [&ps](const Parameter& p) {
        for (double v : p.value)
            if (!std::isfinite(v))
                throw std::runtime_error("non-finite value in parameter " + p.name);
        nlohmann::ordered_json jp;
        std::vector<std::int64_t> dims;
        for (int i = 0; i < p.shape.rank; ++i) dims.push_back(p.shape.dim[i]);
        jp["shape"] = dims;
        jp["trainable"] = p.trainable;
        jp["backbone"] = p.backbone;
        jp["data"] = p.value;
        ps[p.name] = std::move(jp);
    };
    if (names.empty()) {
        for (const auto& [k, p] : params_) emit(p);
    } else {
        std::vector<std::string> sorted(names.begin(), names.end());
        std::sort(sorted.begin(), sorted.end());
        sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
        for (const auto& n : sorted) emit(at(n));
    }
    root["params"] = std::move(ps);
    return root.dump(2) + "\n";
}

ParamStore ParamStore::from_json(const std::string& text) {
    return detail::with_json_errors("parameter json", [&] { return from_json_impl(text); });
}

ParamStore ParamStore::from_json_impl(const std::string& text) {
    nlohmann::json root = nlohmann::json::parse(text);
    if (root.value("format", std::string{}) != "bttt-params")
        throw std::runtime_error("unrecognized parameter file format");
    if (root.value("version", 0) != 1)
        throw std::runtime_error("unsupported parameter file version");
    ParamStore store;
    for (const auto& [name, jp] : root.at("params").items()) {
        auto dims = jp.at("shape").get<std::vector<std::int64_t>>();
        if (dims.size() > 3)
            throw std::runtime_error("parameter " + name + " has rank > 3");
        Shape s;
        s.rank = static_cast<int>(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) s.dim[i] = dims[i];
        Parameter& p = store.add(name, s);
        p.trainable = jp.at("trainable").get<bool>();
        p.backbone = jp.value("backbone", false);
        auto data = jp.at("data").get<std::vector<double>>();
        if (static_cast<std::int64_t>(data.size()) != s.size())
            throw std::runtime_error("parameter " + name + " data length does not match shape");
        p.value = std::move(data);
    }
    return store;
}

void ParamStore::assign_values_from(const ParamStore& other) {
    for (auto& [k, p] : params_) {
        const Parameter& src = other.at(k);
        if (src.shape != p.shape)
            throw std::invalid_argument("shape mismatch for parameter " + k + ": " +
                                        p.shape.str() + " vs " + src.shape.str());
        p.value = src.value;
    }
}

// ---------------------------------------------------------------------------
// Val

const Shape& Val::shape() const { return tape_->shape_of(id_); }

const std::vector<double>& Val::data() const { return tape_->value_of(id_); }

double Val::scalar() const {
    const auto& d = data();
    if (d.size() != 1) throw std::logic_error("scalar() on value of shape " + shape().str());
    return d[0];
}

// ---------------------------------------------------------------------------
// Tape

Val Tape::make(Shape shape, std::vector<double> value) {
    if (static_cast<std::int64_t>(value.size()) != shape.size())
        throw std::logic_error("internal: value size does not match shape " + shape.str());
    Node n;
    n.value_shape = shape;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Val(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_same_shape(Val a, Val b, const char* op) const {
    if (node(a).value_shape != node(b).value_shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    node(a).value_shape.str() + " vs " + node(b).value_shape.str());
}

Val Tape::constant(double v) { return make(Shape::scalar(), {v}); }

Val Tape::constant(Shape shape, std::span<const double> data) {
    return make(shape, std::vector<double>(data.begin(), data.end()));
}

Val Tape::leaf(Shape shape, std::vector<double> data) { return make(shape, std::move(data)); }

Val Tape::param(Parameter& p) {
    if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
    Val v = make(p.shape, p.value);
    nodes_[v.id_].bound = &p;
    return v;
}

namespace {
enum class BinKind { Same, AScalar, BScalar };
}

static BinKind bin_kind(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return BinKind::Same;
    if (a.rank == 0) return BinKind::AScalar;
    if (b.rank == 0) return BinKind::BScalar;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

Val Tape::add(Val a, Val b) {
    BinKind kind = bin_kind(node(a).value_shape, node(b).value_shape, "add");
    Shape os = (kind == BinKind::AScalar) ? node(b).value_shape : node(a).value_shape;
    std::vector<double> out(static_cast<std::size_t>(os.size()));
    {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        for (std::size_t i = 0; i < out.size(); ++i) {
            double x = (kind == BinKind::AScalar) ? av[0] : av[i];
            double y = (kind == BinKind::BScalar) ? bv[0] : bv[i];
            out[i] = x + y;
        }
    }
    Val o = make(os, std::move(out));
    int ia = a.id_, ib = b.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ib, io, kind] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        auto& gb = nodes_[ib].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (kind == BinKind::AScalar) ga[0] += g[i]; else ga[i] += g[i];
            if (kind == BinKind::BScalar) gb[0] += g[i]; else gb[i] += g[i];
        }
    };
    return o;
}

Val Tape::sub(Val a, Val b) {
    BinKind kind = bin_kind(node(a).value_shape, node(b).value_shape, "sub");
    Shape os = (kind == BinKind::AScalar) ? node(b).value_shape : node(a).value_shape;
    std::vector<double> out(static_cast<std::size_t>(os.size()));
    {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        for (std::size_t i = 0; i < out.size(); ++i) {
            double x = (kind == BinKind::AScalar) ? av[0] : av[i];
            double y = (kind == BinKind::BScalar) ? bv[0] : bv[i];
            out[i] = x - y;
        }
    }
    Val o = make(os, std::move(out));
    int ia = a.id_, ib = b.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ib, io, kind] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        auto& gb = nodes_[ib].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (kind == BinKind::AScalar) ga[0] += g[i]; else ga[i] += g[i];
            if (kind == BinKind::BScalar) gb[0] -= g[i]; else gb[i] -= g[i];
        }
    };
    return o;
}

Val Tape::mul(Val a, Val b) {
    BinKind kind = bin_kind(node(a).value_shape, node(b).value_shape, "mul");
    Shape os = (kind == BinKind::AScalar) ? node(b).value_shape : node(a).value_shape;
    std::vector<double> out(static_cast<std::size_t>(os.size()));
    {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        for (std::size_t i = 0; i < out.size(); ++i) {
            double x = (kind == BinKind::AScalar) ? av[0] : av[i];
            double y = (kind == BinKind::BScalar) ? bv[0] : bv[i];
            out[i] = x * y;
        }
    }
    Val o = make(os, std::move(out));
    int ia = a.id_, ib = b.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ib, io, kind] {
        const auto& g = nodes_[io].grad;
        const auto& av = nodes_[ia].value;
        const auto& bv = nodes_[ib].value;
        auto& ga = nodes_[ia].grad;
        auto& gb = nodes_[ib].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = (kind == BinKind::AScalar) ? av[0] : av[i];
            double y = (kind == BinKind::BScalar) ? bv[0] : bv[i];
            if (kind == BinKind::AScalar) ga[0] += g[i] * y; else ga[i] += g[i] * y;
            if (kind == BinKind::BScalar) gb[0] += g[i] * x; else gb[i] += g[i] * x;
        }
    };
    return o;
}

Val Tape::div(Val a, Val b) {
    BinKind kind = bin_kind(node(a).value_shape, node(b).value_shape, "div");
    Shape os = (kind == BinKind::AScalar) ? node(b).value_shape : node(a).value_shape;
    std::vector<double> out(static_cast<std::size_t>(os.size()));
    {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        for (std::size_t i = 0; i < out.size(); ++i) {
            double x = (kind == BinKind::AScalar) ? av[0] : av[i];
            double y = (kind == BinKind::BScalar) ? bv[0] : bv[i];
            out[i] = x / y;
        }
    }
    Val o = make(os, std::move(out));
    int ia = a.id_, ib = b.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ib, io, kind] {
        const auto& g = nodes_[io].grad;
        const auto& av = nodes_[ia].value;
        const auto& bv = nodes_[ib].value;
        auto& ga = nodes_[ia].grad;
        auto& gb = nodes_[ib].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = (kind == BinKind::AScalar) ? av[0] : av[i];
            double y = (kind == BinKind::BScalar) ? bv[0] : bv[i];
            double inv = 1.0 / y;
            if (kind == BinKind::AScalar) ga[0] += g[i] * inv; else ga[i] += g[i] * inv;
            double db = -g[i] * x * inv * inv;
            if (kind == BinKind::BScalar) gb[0] += db; else gb[i] += db;
        }
    };
    return o;
}

Val Tape::scale(Val a, double s) {
    std::vector<double> out = node(a).value;
    for (double& v : out) v *= s;
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, s] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    };
    return o;
}

Val Tape::add_rowvec(Val m, Val row) {
    const Shape& sm = node(m).value_shape;
    const Shape& sr = node(row).value_shape;
    if (sm.rank != 2 || sr.rank != 1 || sr.dim[0] != sm.cols())
        throw std::invalid_argument("add_rowvec: shapes " + sm.str() + " and " + sr.str());
    const std::int64_t R = sm.rows(), C = sm.cols();
    std::vector<double> out(static_cast<std::size_t>(R * C));
    {
        const auto& mv = node(m).value;
        const auto& rv = node(row).value;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c)
                out[r * C + c] = mv[r * C + c] + rv[c];
    }
    Val o = make(sm, std::move(out));
    int im = m.id_, ir = row.id_, io = o.id_;
    nodes_[io].backprop = [this, im, ir, io, R, C] {
        const auto& g = nodes_[io].grad;
        auto& gm = nodes_[im].grad;
        auto& gr = nodes_[ir].grad;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) {
                gm[r * C + c] += g[r * C + c];
                gr[c] += g[r * C + c];
            }
    };
    return o;
}

Val Tape::matmul(Val a, Val b) {
    const Shape sa = node(a).value_shape;
    const Shape sb = node(b).value_shape;
    if (sa.rank != 2 || sb.rank != 2 || sa.cols() != sb.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + sa.str() + " and " + sb.str());
    const std::int64_t M = sa.rows(), K = sa.cols(), N = sb.cols();
    std::vector<double> out(static_cast<std::size_t>(M * N), 0.0);
    {
        const auto& av = node(a).value;
        const auto& bv = node(b).value;
        for (std::int64_t m = 0; m < M; ++m)
            for (std::int64_t k = 0; k < K; ++k) {
                double amk = av[m * K + k];
                if (amk == 0.0) continue;
                const double* brow = bv.data() + k * N;
                double* orow = out.data() + m * N;
                for (std::int64_t n = 0; n < N; ++n) orow[n] += amk * brow[n];
            }
    }
    Val o = make(Shape::mat(M, N), std::move(out));
    int ia = a.id_, ib = b.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ib, io, M, K, N] {
        const auto& g = nodes_[io].grad;
        const auto& av = nodes_[ia].value;
        const auto& bv = nodes_[ib].value;
        auto& ga = nodes_[ia].grad;
        auto& gb = nodes_[ib].grad;
        for (std::int64_t m = 0; m < M; ++m)
            for (std::int64_t n = 0; n < N; ++n) {
                double gmn = g[m * N + n];
                if (gmn == 0.0) continue;
                for (std::int64_t k = 0; k < K; ++k) ga[m * K + k] += gmn * bv[k * N + n];
            }
        for (std::int64_t m = 0; m < M; ++m)
            for (std::int64_t k = 0; k < K; ++k) {
                double amk = av[m * K + k];
                if (amk == 0.0) continue;
                const double* grow = g.data() + m * N;
                double* gbrow = gb.data() + k * N;
                for (std::int64_t n = 0; n < N; ++n) gbrow[n] += amk * grow[n];
            }
    };
    return o;
}

Val Tape::transpose(Val a) {
    const Shape sa = node(a).value_shape;
    if (sa.rank != 2) throw std::invalid_argument("transpose: rank-2 required, got " + sa.str());
    const std::int64_t R = sa.rows(), C = sa.cols();
    std::vector<double> out(static_cast<std::size_t>(R * C));
    {
        const auto& av = node(a).value;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) out[c * R + r] = av[r * C + c];
    }
    Val o = make(Shape::mat(C, R), std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, R, C] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) ga[r * C + c] += g[c * R + r];
    };
    return o;
}

Val Tape::reshape(Val a, Shape s) {
    if (s.size() != node(a).value_shape.size())
        throw std::invalid_argument("reshape: size mismatch " + node(a).value_shape.str() +
                                    " -> " + s.str());
    Val o = make(s, node(a).value);
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
    return o;
}

namespace {

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Val Tape::softplus(Val a) {
    std::vector<double> out = node(a).value;
    for (double& v : out) v = softplus_scalar(v);
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io] {
        const auto& g = nodes_[io].grad;
        const auto& av = nodes_[ia].value;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigmoid_scalar(av[i]);
    };
    return o;
}

Val Tape::tanh_act(Val a) {
    std::vector<double> out = node(a).value;
    for (double& v : out) v = std::tanh(v);
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io] {
        const auto& g = nodes_[io].grad;
        const auto& ov = nodes_[io].value;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - ov[i] * ov[i]);
    };
    return o;
}

Val Tape::sigmoid(Val a) {
    std::vector<double> out = node(a).value;
    for (double& v : out) v = sigmoid_scalar(v);
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io] {
        const auto& g = nodes_[io].grad;
        const auto& ov = nodes_[io].value;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i] * (1.0 - ov[i]);
    };
    return o;
}

Val Tape::gelu(Val a) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    std::vector<double> out = node(a).value;
    for (double& v : out) {
        double u = kC * (v + kA * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io] {
        const auto& g = nodes_[io].grad;
        const auto& av = nodes_[ia].value;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = av[i];
            double u = kC * (x + kA * x * x * x);
            double t = std::tanh(u);
            double du = kC * (1.0 + 3.0 * kA * x * x);
            double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            ga[i] += g[i] * d;
        }
    };
    return o;
}

namespace {

// Treats any tensor as (outer, last) with `last` the trailing axis length.
std::pair<std::int64_t, std::int64_t> outer_last(const Shape& s, const char* op) {
    if (s.rank < 1) throw std::invalid_argument(std::string(op) + ": rank >= 1 required");
    std::int64_t last = s.dim[s.rank - 1];
    return {s.size() / last, last};
}

}  // namespace

Val Tape::cumsum(Val a) {
    auto [outer, last] = outer_last(node(a).value_shape, "cumsum");
    std::vector<double> out(node(a).value.size());
    {
        const auto& av = node(a).value;
        for (std::int64_t r = 0; r < outer; ++r) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < last; ++j) {
                acc += av[r * last + j];
                out[r * last + j] = acc;
            }
        }
    }
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, outer = outer, last = last] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::int64_t r = 0; r < outer; ++r) {
            double acc = 0.0;
            for (std::int64_t j = last - 1; j >= 0; --j) {
                acc += g[r * last + j];
                ga[r * last + j] += acc;
            }
        }
    };
    return o;
}

Val Tape::softmax(Val a) {
    auto [outer, last] = outer_last(node(a).value_shape, "softmax");
    std::vector<double> out(node(a).value.size());
    {
        const auto& av = node(a).value;
        for (std::int64_t r = 0; r < outer; ++r) {
            const double* x = av.data() + r * last;
            double* y = out.data() + r * last;
            double mx = x[0];
            for (std::int64_t j = 1; j < last; ++j) mx = std::max(mx, x[j]);
            double sum = 0.0;
            for (std::int64_t j = 0; j < last; ++j) {
                y[j] = std::exp(x[j] - mx);
                sum += y[j];
            }
            for (std::int64_t j = 0; j < last; ++j) y[j] /= sum;
        }
    }
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, outer = outer, last = last] {
        const auto& g = nodes_[io].grad;
        const auto& ov = nodes_[io].value;
        auto& ga = nodes_[ia].grad;
        for (std::int64_t r = 0; r < outer; ++r) {
            const double* y = ov.data() + r * last;
            const double* gy = g.data() + r * last;
            double dot = 0.0;
            for (std::int64_t j = 0; j < last; ++j) dot += gy[j] * y[j];
            for (std::int64_t j = 0; j < last; ++j)
                ga[r * last + j] += y[j] * (gy[j] - dot);
        }
    };
    return o;
}

Val Tape::layer_norm(Val a, Val gamma, Val beta, double eps) {
    auto [outer, last] = outer_last(node(a).value_shape, "layer_norm");
    const Shape& sg = node(gamma).value_shape;
    const Shape& sb = node(beta).value_shape;
    if (sg.rank != 1 || sg.dim[0] != last || sb.rank != 1 || sb.dim[0] != last)
        throw std::invalid_argument("layer_norm: gamma/beta must be vectors of length " +
                                    std::to_string(last));
    std::vector<double> out(node(a).value.size());
    std::vector<double> mu(static_cast<std::size_t>(outer));
    std::vector<double> inv(static_cast<std::size_t>(outer));
    {
        const auto& av = node(a).value;
        const auto& gv = node(gamma).value;
        const auto& bv = node(beta).value;
        for (std::int64_t r = 0; r < outer; ++r) {
            const double* x = av.data() + r * last;
            double m = 0.0;
            for (std::int64_t j = 0; j < last; ++j) m += x[j];
            m /= static_cast<double>(last);
            double var = 0.0;
            for (std::int64_t j = 0; j < last; ++j) var += (x[j] - m) * (x[j] - m);
            var /= static_cast<double>(last);
            double is = 1.0 / std::sqrt(var + eps);
            mu[r] = m;
            inv[r] = is;
            for (std::int64_t j = 0; j < last; ++j)
                out[r * last + j] = (x[j] - m) * is * gv[j] + bv[j];
        }
    }
    Val o = make(node(a).value_shape, std::move(out));
    int ia = a.id_, ig = gamma.id_, ibt = beta.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ig, ibt, io, outer = outer, last = last,
                           mu = std::move(mu), inv = std::move(inv)] {
        const auto& g = nodes_[io].grad;
        const auto& av = nodes_[ia].value;
        const auto& gv = nodes_[ig].value;
        auto& ga = nodes_[ia].grad;
        auto& gg = nodes_[ig].grad;
        auto& gb = nodes_[ibt].grad;
        std::vector<double> h(static_cast<std::size_t>(last));
        for (std::int64_t r = 0; r < outer; ++r) {
            const double* x = av.data() + r * last;
            const double* gy = g.data() + r * last;
            double m1 = 0.0, m2 = 0.0;
            for (std::int64_t j = 0; j < last; ++j) {
                double xhat = (x[j] - mu[r]) * inv[r];
                h[j] = gy[j] * gv[j];
                m1 += h[j];
                m2 += h[j] * xhat;
                gg[j] += gy[j] * xhat;
                gb[j] += gy[j];
            }
            m1 /= static_cast<double>(last);
            m2 /= static_cast<double>(last);
            for (std::int64_t j = 0; j < last; ++j) {
                double xhat = (x[j] - mu[r]) * inv[r];
                ga[r * last + j] += inv[r] * (h[j] - m1 - xhat * m2);
            }
        }
    };
    return o;
}

Val Tape::slice_rows(Val a, std::int64_t r0, std::int64_t r1) {
    const Shape sa = node(a).value_shape;
    if (sa.rank != 1 && sa.rank != 2)
        throw std::invalid_argument("slice_rows: rank-1 or rank-2 required, got " + sa.str());
    const std::int64_t R = sa.dim[0];
    const std::int64_t C = (sa.rank == 2) ? sa.cols() : 1;
    if (r0 < 0 || r1 > R || r0 >= r1)
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                    std::to_string(r1) + ") out of bounds for " + sa.str());
    Shape os = (sa.rank == 2) ? Shape::mat(r1 - r0, C) : Shape::vec(r1 - r0);
    std::vector<double> out(static_cast<std::size_t>((r1 - r0) * C));
    {
        const auto& av = node(a).value;
        std::copy(av.begin() + r0 * C, av.begin() + r1 * C, out.begin());
    }
    Val o = make(os, std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, r0, C] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[static_cast<std::size_t>(r0 * C) + i] += g[i];
    };
    return o;
}

Val Tape::slice_cols(Val a, std::int64_t c0, std::int64_t c1) {
    const Shape sa = node(a).value_shape;
    if (sa.rank != 2) throw std::invalid_argument("slice_cols: rank-2 required, got " + sa.str());
    const std::int64_t R = sa.rows(), C = sa.cols();
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") out of bounds for " + sa.str());
    const std::int64_t W = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(R * W));
    {
        const auto& av = node(a).value;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < W; ++c) out[r * W + c] = av[r * C + c0 + c];
    }
    Val o = make(Shape::mat(R, W), std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, R, C, c0, W] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < W; ++c) ga[r * C + c0 + c] += g[r * W + c];
    };
    return o;
}

Val Tape::concat_rows(std::span<const Val> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const Shape s0 = node(parts[0]).value_shape;
    if (s0.rank != 1 && s0.rank != 2)
        throw std::invalid_argument("concat_rows: rank-1 or rank-2 required, got " + s0.str());
    const std::int64_t C = (s0.rank == 2) ? s0.cols() : 1;
    std::int64_t R = 0;
    for (Val p : parts) {
        const Shape sp = node(p).value_shape;
        if (sp.rank != s0.rank || ((s0.rank == 2) && sp.cols() != C))
            throw std::invalid_argument("concat_rows: mismatched part shape " + sp.str());
        R += sp.dim[0];
    }
    Shape os = (s0.rank == 2) ? Shape::mat(R, C) : Shape::vec(R);
    std::vector<double> out(static_cast<std::size_t>(R * C));
    std::vector<int> ids;
    std::vector<std::int64_t> offsets;
    {
        std::int64_t off = 0;
        for (Val p : parts) {
            const auto& pv = node(p).value;
            std::copy(pv.begin(), pv.end(), out.begin() + off);
            ids.push_back(p.id_);
            offsets.push_back(off);
            off += static_cast<std::int64_t>(pv.size());
        }
    }
    Val o = make(os, std::move(out));
    int io = o.id_;
    nodes_[io].backprop = [this, io, ids = std::move(ids), offsets = std::move(offsets)] {
        const auto& g = nodes_[io].grad;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            auto& gp = nodes_[ids[k]].grad;
            for (std::size_t i = 0; i < gp.size(); ++i)
                gp[i] += g[static_cast<std::size_t>(offsets[k]) + i];
        }
    };
    return o;
}

Val Tape::concat_cols(std::span<const Val> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const Shape s0 = node(parts[0]).value_shape;
    if (s0.rank != 2) throw std::invalid_argument("concat_cols: rank-2 required, got " + s0.str());
    const std::int64_t R = s0.rows();
    std::int64_t C = 0;
    std::vector<int> ids;
    std::vector<std::int64_t> widths;
    for (Val p : parts) {
        const Shape sp = node(p).value_shape;
        if (sp.rank != 2 || sp.rows() != R)
            throw std::invalid_argument("concat_cols: mismatched part shape " + sp.str());
        ids.push_back(p.id_);
        widths.push_back(sp.cols());
        C += sp.cols();
    }
    std::vector<double> out(static_cast<std::size_t>(R * C));
    {
        std::int64_t coff = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const auto& pv = nodes_[ids[k]].value;
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t c = 0; c < widths[k]; ++c)
                    out[r * C + coff + c] = pv[r * widths[k] + c];
            coff += widths[k];
        }
    }
    Val o = make(Shape::mat(R, C), std::move(out));
    int io = o.id_;
    nodes_[io].backprop = [this, io, R, C, ids = std::move(ids), widths = std::move(widths)] {
        const auto& g = nodes_[io].grad;
        std::int64_t coff = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            auto& gp = nodes_[ids[k]].grad;
            for (std::int64_t r = 0; r < R; ++r)
                for (std::int64_t c = 0; c < widths[k]; ++c)
                    gp[r * widths[k] + c] += g[r * C + coff + c];
            coff += widths[k];
        }
    };
    return o;
}

Val Tape::mean_all(Val a) {
    const auto& av = node(a).value;
    const double n = static_cast<double>(av.size());
    double s = 0.0;
    for (double v : av) s += v;
    Val o = make(Shape::scalar(), {s / n});
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, n] {
        const double g = nodes_[io].grad[0];
        auto& ga = nodes_[ia].grad;
        for (double& v : ga) v += g / n;
    };
    return o;
}

Val Tape::sum_all(Val a) {
    const auto& av = node(a).value;
    double s = 0.0;
    for (double v : av) s += v;
    Val o = make(Shape::scalar(), {s});
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io] {
        const double g = nodes_[io].grad[0];
        auto& ga = nodes_[ia].grad;
        for (double& v : ga) v += g;
    };
    return o;
}

Val Tape::mean_rows(Val a) {
    const Shape sa = node(a).value_shape;
    if (sa.rank != 2) throw std::invalid_argument("mean_rows: rank-2 required, got " + sa.str());
    const std::int64_t R = sa.rows(), C = sa.cols();
    std::vector<double> out(static_cast<std::size_t>(C), 0.0);
    {
        const auto& av = node(a).value;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) out[c] += av[r * C + c];
        for (double& v : out) v /= static_cast<double>(R);
    }
    Val o = make(Shape::vec(C), std::move(out));
    int ia = a.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, io, R, C] {
        const auto& g = nodes_[io].grad;
        auto& ga = nodes_[ia].grad;
        for (std::int64_t r = 0; r < R; ++r)
            for (std::int64_t c = 0; c < C; ++c) ga[r * C + c] += g[c] / static_cast<double>(R);
    };
    return o;
}

Val Tape::mse(Val a, Val b) {
    check_same_shape(a, b, "mse");
    const auto& av = node(a).value;
    const auto& bv = node(b).value;
    const double n = static_cast<double>(av.size());
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        s += d * d;
    }
    Val o = make(Shape::scalar(), {s / n});
    int ia = a.id_, ib = b.id_, io = o.id_;
    nodes_[io].backprop = [this, ia, ib, io, n] {
        const double g = nodes_[io].grad[0];
        const auto& av2 = nodes_[ia].value;
        const auto& bv2 = nodes_[ib].value;
        auto& ga = nodes_[ia].grad;
        auto& gb = nodes_[ib].grad;
        for (std::size_t i = 0; i < av2.size(); ++i) {
            double d = 2.0 * (av2[i] - bv2[i]) / n;
            ga[i] += g * d;
            gb[i] -= g * d;
        }
    };
    return o;
}

namespace {

// Clamped piecewise-linear evaluation; slope is zero outside the table and the
// right-segment slope at interior breakpoints.
double lerp_eval(const std::vector<double>& xs, const std::vector<double>& ys, double v,
                 double* slope_out) {
    const std::size_t n = xs.size();
    if (v < xs.front()) {
        if (slope_out) *slope_out = 0.0;
        return ys.front();
    }
    if (v > xs.back()) {
        if (slope_out) *slope_out = 0.0;
        return ys.back();
    }
    auto it = std::upper_bound(xs.begin(), xs.end(), v);
    std::size_t k = static_cast<std::size_t>(std::distance(xs.begin(), it));
    if (k == 0) k = 1;
    if (k >= n) k = n - 1;
    double slope = (ys[k] - ys[k - 1]) / (xs[k] - xs[k - 1]);
    if (slope_out) *slope_out = slope;
    return ys[k - 1] + slope * (v - xs[k - 1]);
}

}  // namespace

Val Tape::lerp_table(Val x, std::vector<double> xs, std::vector<double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw std::invalid_argument("lerp_table: xs and ys must have equal length >= 2");
    for (std::size_t i = 1; i < xs.size(); ++i)
        if (!(xs[i] > xs[i - 1]))
            throw std::invalid_argument("lerp_table: xs must be strictly increasing");
    std::vector<double> out = node(x).value;
    for (double& v : out) v = lerp_eval(xs, ys, v, nullptr);
    Val o = make(node(x).value_shape, std::move(out));
    int ix = x.id_, io = o.id_;
    nodes_[io].backprop = [this, ix, io, xs = std::move(xs), ys = std::move(ys)] {
        const auto& g = nodes_[io].grad;
        const auto& xv = nodes_[ix].value;
        auto& gx = nodes_[ix].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double slope = 0.0;
            lerp_eval(xs, ys, xv[i], &slope);
            gx[i] += g[i] * slope;
        }
    };
    return o;
}

void Tape::backward(Val loss) {
    if (loss.tape_ != this) throw std::logic_error("backward: value from a different tape");
    Node& ln = nodes_[loss.id_];
    if (ln.value.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + ln.value_shape.str());
    for (int i = 0; i <= loss.id_; ++i) nodes_[i].grad.assign(nodes_[i].value.size(), 0.0);
    nodes_[loss.id_].grad[0] = 1.0;
    for (int i = loss.id_; i >= 0; --i)
        if (nodes_[i].backprop) nodes_[i].backprop();
    for (int i = 0; i <= loss.id_; ++i) {
        if (!nodes_[i].bound) continue;
        auto& pg = nodes_[i].bound->grad;
        const auto& ng = nodes_[i].grad;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += ng[j];
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckReport grad_check(const LossBuilder& build, std::span<Parameter*> params,
                           double epsilon, int max_coords, std::uint64_t seed) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape t;
        Val loss = build(t);
        t.backward(loss);
    }

    std::vector<std::pair<int, std::int64_t>> coords;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::int64_t j = 0; j < params[pi]->shape.size(); ++j)
            coords.emplace_back(static_cast<int>(pi), j);
    Rng rng(seed);
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(max_coords), coords.size());
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t j = k + static_cast<std::size_t>(rng.below(coords.size() - k));
        std::swap(coords[k], coords[j]);
    }

    GradCheckReport rep;
    rep.coords_checked = static_cast<int>(n);
    for (std::size_t k = 0; k < n; ++k) {
        auto [pi, idx] = coords[k];
        Parameter& p = *params[static_cast<std::size_t>(pi)];
        const double orig = p.value[static_cast<std::size_t>(idx)];
        double lp, lm;
        p.value[static_cast<std::size_t>(idx)] = orig + epsilon;
        {
            Tape t;
            lp = build(t).scalar();
        }
        p.value[static_cast<std::size_t>(idx)] = orig - epsilon;
        {
            Tape t;
            lm = build(t).scalar();
        }
        p.value[static_cast<std::size_t>(idx)] = orig;
        const double g_fd = (lp - lm) / (2.0 * epsilon);
        const double g_ad = p.grad[static_cast<std::size_t>(idx)];
        const double rel = std::abs(g_ad - g_fd) / (std::abs(g_ad) + std::abs(g_fd) + 1e-12);
        if (rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_param = p.name;
            rep.worst_index = idx;
        }
    }
    return rep;
}

}  // namespace bttt::ad
