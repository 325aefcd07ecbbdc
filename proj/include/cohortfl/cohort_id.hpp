#pragma once

#include <algorithm>
#include <charconv>
#include <compare>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cohortfl/error.hpp"

namespace cohortfl {

/// Position of a cohort in the cohort tree. The root has an empty path and
/// renders as "0"; child k of P renders as P + "." + k.
class CohortId {
 public:
  CohortId() = default;
  explicit CohortId(std::vector<int> path) : path_(std::move(path)) {}

  static CohortId root() { return CohortId(); }

  static CohortId parse(std::string_view text) {
    if (text.empty() || text.front() != '0') throw ContractViolation("invalid cohort id: " + std::string(text));
    std::vector<int> path;
    std::size_t pos = 1;
    while (pos < text.size()) {
      if (text[pos] != '.') throw ContractViolation("invalid cohort id: " + std::string(text));
      ++pos;
      int v = -1;
      auto [p, ec] = std::from_chars(text.data() + pos, text.data() + text.size(), v);
      if (ec != std::errc() || v < 0 || p == text.data() + pos)
        throw ContractViolation("invalid cohort id: " + std::string(text));
      path.push_back(v);
      pos = static_cast<std::size_t>(p - text.data());
    }
    return CohortId(std::move(path));
  }

  const std::vector<int>& path() const { return path_; }
  std::size_t depth() const { return path_.size(); }
  bool is_root() const { return path_.empty(); }

  CohortId child(int k) const {
    auto p = path_;
    p.push_back(k);
    return CohortId(std::move(p));
  }
  CohortId parent() const {
    require(!path_.empty(), "root has no parent");
    return CohortId(std::vector<int>(path_.begin(), path_.end() - 1));
  }
  bool is_ancestor_of(const CohortId& other) const {
    return path_.size() <= other.path_.size() &&
           std::equal(path_.begin(), path_.end(), other.path_.begin());
  }

  std::string str() const {
    std::string s = "0";
    for (int k : path_) {
      s += '.';
      s += std::to_string(k);
    }
    return s;
  }

  friend bool operator==(const CohortId&, const CohortId&) = default;
  // Lexicographic by rendered path, root first.
  friend std::strong_ordering operator<=>(const CohortId& a, const CohortId& b) {
    return std::lexicographical_compare_three_way(a.path_.begin(), a.path_.end(), b.path_.begin(),
                                                  b.path_.end());
  }

 private:
  std::vector<int> path_;
};

/// Edge count on the path a -> lowest common ancestor -> b.
inline int tree_distance(const CohortId& a, const CohortId& b) {
  const auto& pa = a.path();
  const auto& pb = b.path();
  std::size_t common = 0;
  while (common < pa.size() && common < pb.size() && pa[common] == pb[common]) ++common;
  return static_cast<int>(pa.size() + pb.size() - 2 * common);
}

}  // namespace cohortfl
