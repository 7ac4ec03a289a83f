#pragma once

#include <cmath>
#include <deque>
#include <functional>

#include <Eigen/Dense>

namespace clusterpolicy {

// ============================================================================
// Compact L-BFGS minimizer (two-loop recursion, Armijo backtracking).
// ============================================================================

struct LbfgsOptions {
    int max_iter = 200;
    double grad_tol = 1e-8;
    int history = 8;
    double armijo_c1 = 1e-4;
    int max_backtracks = 40;
};

struct LbfgsResult {
    Eigen::VectorXd x;
    double fx = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// fg(x, grad) evaluates the objective and writes its gradient.
inline LbfgsResult lbfgs_minimize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fg,
    Eigen::VectorXd x0, const LbfgsOptions& opts = {}) {
    const long d = x0.size();
    LbfgsResult res;
    res.x = std::move(x0);
    Eigen::VectorXd grad(d);
    res.fx = fg(res.x, grad);

    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        if (grad.lpNorm<Eigen::Infinity>() < opts.grad_tol) {
            res.converged = true;
            break;
        }
        // two-loop recursion
        Eigen::VectorXd q = grad;
        std::vector<double> alpha(s_hist.size());
        for (int k = static_cast<int>(s_hist.size()) - 1; k >= 0; --k) {
            alpha[k] = rho_hist[k] * s_hist[k].dot(q);
            q -= alpha[k] * y_hist[k];
        }
        if (!s_hist.empty()) {
            const double gamma =
                s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            q *= gamma;
        }
        for (std::size_t k = 0; k < s_hist.size(); ++k) {
            const double beta = rho_hist[k] * y_hist[k].dot(q);
            q += (alpha[k] - beta) * s_hist[k];
        }
        Eigen::VectorXd dir = -q;
        double slope = grad.dot(dir);
        if (!(slope < 0.0)) {  // not a descent direction, fall back
            dir = -grad;
            slope = -grad.squaredNorm();
            if (slope == 0.0) {
                res.converged = true;
                break;
            }
        }

        double step = 1.0;
        double fx_new = res.fx;
        Eigen::VectorXd x_new(d), grad_new(d);
        bool accepted = false;
        for (int bt = 0; bt < opts.max_backtracks; ++bt) {
            x_new = res.x + step * dir;
            fx_new = fg(x_new, grad_new);
            if (std::isfinite(fx_new) && fx_new <= res.fx + opts.armijo_c1 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        ++res.iterations;
        if (!accepted) break;

        Eigen::VectorXd s = x_new - res.x;
        Eigen::VectorXd y = grad_new - grad;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opts.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        res.x = std::move(x_new);
        res.fx = fx_new;
        grad = std::move(grad_new);
    }
    return res;
}

}  // namespace clusterpolicy
