#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace kuq::detail {

/// Sum over the multiset of values, independent of input order: sorting fixes
/// the accumulation order, so any permutation of the input yields a
/// bit-identical result.
inline double canonical_sum(std::span<const double> v, std::vector<double>& scratch) {
    scratch.assign(v.begin(), v.end());
    std::sort(scratch.begin(), scratch.end());
    double acc = 0.0;
    for (double x : scratch) acc += x;
    return acc;
}

inline double canonical_sum(std::span<const double> v) {
    std::vector<double> scratch;
    return canonical_sum(v, scratch);
}

inline bool all_equal(std::span<const double> v) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] != v[0]) return false;
    return true;
}

/// Order-independent mean. The all-equal case returns the common value
/// exactly, so deviations of coincident members vanish bit-exactly.
inline double canonical_mean(std::span<const double> v, std::vector<double>& scratch) {
    if (v.empty()) return 0.0;
    if (all_equal(v)) return v[0];
    return canonical_sum(v, scratch) / static_cast<double>(v.size());
}

inline double canonical_mean(std::span<const double> v) {
    std::vector<double> scratch;
    return canonical_mean(v, scratch);
}

}  // namespace kuq::detail
