#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "errors.hpp"

namespace memgauge::special {

/// log Gamma(a + b) - log Gamma(a), using the Stirling series when a is large so that the
/// two large log-gammas do not cancel.
inline double log_gamma_ratio(double a, double b) {
    if (a < 20.0)
        return std::lgamma(a + b) - std::lgamma(a);
    auto series = [](double x) {
        const double x2 = x * x;
        return 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x2 * x2 * x) -
               1.0 / (1680.0 * x2 * x2 * x2 * x);
    };
    // (a+b-1/2) log(a+b) - (a-1/2) log a - b, split so the leading terms cancel analytically
    const double lead = (a - 0.5) * std::log1p(b / a) + b * std::log(a + b) - b;
    return lead + series(a + b) - series(a);
}

/// log B(a, b) = lgamma(a) + lgamma(b) - lgamma(a + b).
inline double log_beta(double a, double b) {
    if (a < b)
        return log_beta(b, a);
    return std::lgamma(b) - log_gamma_ratio(a, b);
}

namespace detail {

// Modified Lentz evaluation of the incomplete beta continued fraction.
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
    constexpr int max_iter = 100000;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny)
        d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny)
            d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny)
            c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny)
            d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny)
            c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps)
            return h;
    }
    throw Error("incomplete beta continued fraction did not converge");
}

} // namespace detail

/// Regularized incomplete beta I_x(a, b). `y` must equal 1 - x; passing it separately lets
/// callers supply it without cancellation.
inline double incomplete_beta(double a, double b, double x, double y) {
    if (!(a > 0.0 && b > 0.0))
        throw Error("incomplete beta needs a, b > 0");
    if (x <= 0.0)
        return 0.0;
    if (y <= 0.0)
        return 1.0;
    const double log_x = x > 0.5 ? std::log1p(-y) : std::log(x);
    const double log_y = y > 0.5 ? std::log1p(-x) : std::log(y);
    const double log_front = a * log_x + b * log_y - log_beta(a, b);
    if (x < (a + 1.0) / (a + b + 2.0))
        return std::exp(log_front) * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - std::exp(log_front) * detail::beta_continued_fraction(b, a, y) / b;
}

inline double incomplete_beta(double a, double b, double x) { return incomplete_beta(a, b, x, 1.0 - x); }

/// Two-sided p-value P(|T_df| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2).
inline double student_t_two_sided(double t, double df) {
    if (!(df > 0.0))
        throw Error("degrees of freedom must be positive");
    if (std::isnan(t))
        return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t))
        return 0.0;
    const double t2 = t * t;
    if (t2 == 0.0)
        return 1.0;
    // x = df / (df + t^2), 1 - x = t^2 / (df + t^2)
    const double x = df / (df + t2);
    const double y = t2 / (df + t2);
    const double p = incomplete_beta(0.5 * df, 0.5, x, y);
    return std::clamp(p, 0.0, 1.0);
}

} // namespace memgauge::special
