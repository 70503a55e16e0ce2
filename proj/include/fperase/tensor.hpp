#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fperase/errors.hpp"
#include "fperase/rng.hpp"

namespace fperase {

// Dense row-major float32 tensor. Dot-product style reductions accumulate in
// double; storage stays 32-bit so checkpoints remain compact and bit-exact.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw DimError("tensor: shape does not match payload size");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) {
            if (d < 0) throw DimError("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> s) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<float>(static_cast<std::size_t>(n), 0.0f));
    }

    static Tensor full(std::vector<std::int64_t> s, float v) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<float>(static_cast<std::size_t>(n), v));
    }

    static Tensor identity(std::int64_t n) {
        Tensor t = zeros({n, n});
        for (std::int64_t i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i * n + i)] = 1.0f;
        return t;
    }

    static Tensor randn(std::vector<std::int64_t> s, Rng& rng, float scale) {
        auto n = numel_of(s);
        std::vector<float> d(static_cast<std::size_t>(n));
        for (auto& v : d) v = static_cast<float>(rng.normal()) * scale;
        return Tensor(std::move(s), std::move(d));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

    std::int64_t rows() const {
        require_rank2("rows");
        return shape[0];
    }
    std::int64_t cols() const {
        require_rank2("cols");
        return shape[1];
    }

    float& at(std::int64_t r, std::int64_t c) {
        require_rank2("at");
        return data[static_cast<std::size_t>(r * shape[1] + c)];
    }
    float at(std::int64_t r, std::int64_t c) const {
        require_rank2("at");
        return data[static_cast<std::size_t>(r * shape[1] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }

private:
    void require_rank2(const char* op) const {
        if (shape.size() != 2) throw DimError(std::string(op) + ": tensor is not 2-D");
    }
};

// Named tensor map: all trainable weights of a model, or a delta between models.
using ParamSet = std::map<std::string, Tensor>;

inline void check_same_schema(const ParamSet& a, const ParamSet& b, const char* what) {
    if (a.size() != b.size()) throw SchemaError(std::string(what) + ": tensor counts differ");
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first)
            throw SchemaError(std::string(what) + ": name mismatch '" + ia->first + "' vs '" + ib->first + "'");
        if (!ia->second.same_shape(ib->second))
            throw DimError(std::string(what) + ": shape mismatch for '" + ia->first + "'");
    }
}

// c = a . b with double accumulation.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimError("matmul: operands must be 2-D");
    if (a.shape[1] != b.shape[0])
        throw DimError("matmul: inner dimensions disagree, " + a.shape_str() + " vs " + b.shape_str());
    const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c = Tensor::zeros({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p)
                acc += static_cast<double>(a.data[static_cast<std::size_t>(i * k + p)]) *
                       static_cast<double>(b.data[static_cast<std::size_t>(p * n + j)]);
            c.data[static_cast<std::size_t>(i * n + j)] = static_cast<float>(acc);
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimError("transpose: tensor is not 2-D");
    const std::int64_t m = a.shape[0], n = a.shape[1];
    Tensor t = Tensor::zeros({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            t.data[static_cast<std::size_t>(j * m + i)] = a.data[static_cast<std::size_t>(i * n + j)];
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimError("add: shapes differ, " + a.shape_str() + " vs " + b.shape_str());
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimError("sub: shapes differ, " + a.shape_str() + " vs " + b.shape_str());
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor c = a;
    for (auto& v : c.data) v *= s;
    return c;
}

// Elementwise ParamSet algebra; shapes are checked name by name.
inline ParamSet param_add(const ParamSet& a, const ParamSet& b) {
    check_same_schema(a, b, "param_add");
    ParamSet out = a;
    auto ib = b.begin();
    for (auto& [name, t] : out) {
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += ib->second.data[i];
        ++ib;
    }
    return out;
}

inline ParamSet param_sub(const ParamSet& a, const ParamSet& b) {
    check_same_schema(a, b, "param_sub");
    ParamSet out = a;
    auto ib = b.begin();
    for (auto& [name, t] : out) {
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= ib->second.data[i];
        ++ib;
    }
    return out;
}

inline ParamSet param_scale(const ParamSet& a, float s) {
    ParamSet out = a;
    for (auto& [name, t] : out)
        for (auto& v : t.data) v *= s;
    return out;
}

inline std::int64_t param_count(const ParamSet& p) {
    std::int64_t n = 0;
    for (const auto& [name, t] : p) n += t.numel();
    return n;
}

inline bool params_equal(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
        if (ia->second.data != ib->second.data) return false;
    }
    return true;
}

}  // namespace fperase
