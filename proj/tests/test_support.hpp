#pragma once

// Test-only helpers: the central-difference oracle and parameter-coordinate
// enumeration. Independent of the tape's backward path.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "autolora/nn.hpp"

namespace testsupport {

/// Central finite difference of f() with respect to one tensor coordinate,
/// perturbing in place and restoring afterwards.
template <class F>
double central_difference(autolora::Tensor& t, std::size_t index, F&& f, double h = 1e-5) {
    const double original = t.at(index);
    t.at(index) = original + h;
    const double fp = f();
    t.at(index) = original - h;
    const double fm = f();
    t.at(index) = original;
    return (fp - fm) / (2.0 * h);
}

/// Relative agreement with an absolute floor for the finite-difference noise
/// at h = 1e-5.
inline bool grad_close(double analytic, double fd, double rel_tol = 1e-4,
                       double abs_floor = 5e-7) {
    const double diff = std::abs(analytic - fd);
    const double scale = std::max(std::abs(analytic), std::abs(fd));
    return diff <= std::max(rel_tol * scale, abs_floor);
}

struct Coord {
    std::string name;
    std::size_t index;
};

inline autolora::Tensor* tensor_by_name(autolora::ParamSet& ps, const std::string& wanted) {
    autolora::Tensor* found = nullptr;
    ps.for_each_named([&](const std::string& name, autolora::Tensor& t) {
        if (name == wanted) found = &t;
    });
    return found;
}

/// All coordinates of the trainable tensors, optionally with the low-rank
/// factors.
inline std::vector<Coord> trainable_coords(autolora::ParamSet& ps, bool include_lora) {
    std::vector<Coord> coords;
    auto collect = [&](const std::string& name, autolora::Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) coords.push_back(Coord{name, i});
    };
    ps.for_each_theta1(collect);
    ps.for_each_theta2(collect);
    if (include_lora) ps.for_each_lora(collect);
    return coords;
}

}  // namespace testsupport
