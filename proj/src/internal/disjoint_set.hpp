#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

namespace segloo::detail {

class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n) : parent_(n), size_(n, 1) { std::iota(parent_.begin(), parent_.end(), 0u); }

  std::uint32_t find(std::uint32_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  // Links the two roots, larger set absorbing the smaller (ties: lower id absorbs). Returns the new root.
  std::uint32_t unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return a;
    if (size_[a] < size_[b] || (size_[a] == size_[b] && b < a)) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    return a;
  }

  // Makes `into` the root of the merged set regardless of sizes.
  std::uint32_t attach(std::uint32_t from, std::uint32_t into) {
    from = find(from);
    into = find(into);
    if (from == into) return into;
    parent_[from] = into;
    size_[into] += size_[from];
    return into;
  }

  std::size_t size_of(std::uint32_t x) { return size_[find(x)]; }

 private:
  std::vector<std::uint32_t> parent_;
  std::vector<std::size_t> size_;
};

}  // namespace segloo::detail
