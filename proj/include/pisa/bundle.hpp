#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "pisa/errors.hpp"
#include "pisa/matrix.hpp"

namespace pisa {

enum class Dtype : std::uint32_t { F32 = 1, F64 = 2 };

template <class T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::F32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::F64; }

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

// Multi-head Q/K/V tensors, each stored row-major [num_heads][seq_len][head_dim].
// Immutable by convention after construction; safe to share across threads.
template <class T>
struct TensorBundle {
    using value_type = T;

    std::size_t num_heads = 0;
    std::size_t seq_len = 0;
    std::size_t head_dim = 0;
    std::vector<T> q, k, v;

    std::size_t head_elems() const { return seq_len * head_dim; }
    std::size_t total_elems() const { return num_heads * head_elems(); }

    ConstView<T> q_head(std::size_t h) const {
        return {q.data() + h * head_elems(), seq_len, head_dim};
    }
    ConstView<T> k_head(std::size_t h) const {
        return {k.data() + h * head_elems(), seq_len, head_dim};
    }
    ConstView<T> v_head(std::size_t h) const {
        return {v.data() + h * head_elems(), seq_len, head_dim};
    }

    bool operator==(const TensorBundle&) const = default;
};

using AnyBundle = std::variant<TensorBundle<float>, TensorBundle<double>>;

inline Dtype bundle_dtype(const AnyBundle& b) {
    return std::visit([](const auto& t) {
        return dtype_of<typename std::decay_t<decltype(t)>::value_type>();
    }, b);
}

}  // namespace pisa
