#include "zip/rng.hpp"

#include <cmath>

namespace zip {

double Rng::normal(double mean, double stddev) {
    if (have_cached_normal_) {
        have_cached_normal_ = false;
        return mean + stddev * cached_normal_;
    }
    // Box-Muller; u1 bounded away from zero so log stays finite.
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_normal_ = r * std::sin(theta);
    have_cached_normal_ = true;
    return mean + stddev * r * std::cos(theta);
}

std::vector<int> Rng::sample_indices(int n, int k) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    if (k >= n) {
        shuffle(idx);
        return idx;
    }
    // Partial Fisher-Yates: first k slots end up as the sample.
    for (int i = 0; i < k; ++i) {
        int j = i + uniform_index(n - i);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

}  // namespace zip
