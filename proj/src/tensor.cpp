#include "zip/tensor.hpp"

#include <cmath>
#include <sstream>

namespace zip {

namespace {
bool g_finite_checks = false;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

template <typename T>
void assert_all_finite(const Tensor<T>& t, const char* what) {
    for (const T v : t.values) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string("non-finite value in ") + what);
    }
}

template void assert_all_finite<float>(const Tensor<float>&, const char*);
template void assert_all_finite<double>(const Tensor<double>&, const char*);

}  // namespace zip
