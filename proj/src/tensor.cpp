#include "lsr/tensor.hpp"

#include <cmath>
#include <cstdio>

namespace lsr {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values()) {
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
std::uint64_t tensor_hash(const Tensor<T>& t) {
  std::uint64_t h = fnv1a(t.shape().data(), t.shape().size() * sizeof(int));
  return fnv1a(t.data(), t.size() * sizeof(T), h);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);
template bool all_finite(const Tensor<std::int32_t>&);
template std::uint64_t tensor_hash(const Tensor<float>&);
template std::uint64_t tensor_hash(const Tensor<double>&);
template std::uint64_t tensor_hash(const Tensor<std::int32_t>&);

}  // namespace lsr
