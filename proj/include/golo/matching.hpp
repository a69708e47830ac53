#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "golo/tensor.hpp"

namespace golo {

// Loss term coefficients. Defaults follow the training recipe:
// focal 2, L1 5, GIoU 2, auxiliary terms 0.25 each.
struct LossWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
    double aux_bbox = 0.25;
    double aux_cls = 0.25;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;

    void validate() const {
        if (cls < 0 || l1 < 0 || giou < 0 || aux_bbox < 0 || aux_cls < 0)
            throw ContractError("loss weights must be non-negative");
    }
};

// Boxes are (cx, cy, w, h), normalized to [0,1] unless stated otherwise.
using Box = std::array<double, 4>;

struct CostMatrix {
    int64_t n_pred = 0;
    int64_t n_gt = 0;
    std::vector<double> cost;  // row-major (n_pred, n_gt)

    double at(int64_t i, int64_t j) const { return cost[size_t(i * n_gt + j)]; }
    double& at(int64_t i, int64_t j) { return cost[size_t(i * n_gt + j)]; }
};

// One (pred, gt) pair per ground-truth object, ordered by gt index.
struct Assignment {
    std::vector<std::pair<int64_t, int64_t>> pairs;
    double total_cost = 0.0;
};

// --------------------------------------------------------------------------
// Scalar box / classification terms (plain arithmetic, used for cost matrices)
// --------------------------------------------------------------------------

inline double sigmoid_d(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double softplus_d(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// alpha-balanced focal loss of a single logit, stable via log-sigmoid.
inline double focal_loss(double logit, int target, double alpha = 0.25, double gamma = 2.0) {
    double p = sigmoid_d(logit);
    double pt = target == 1 ? p : 1.0 - p;
    double at = target == 1 ? alpha : 1.0 - alpha;
    double log_pt = target == 1 ? -softplus_d(-logit) : -softplus_d(logit);
    return -at * std::pow(1.0 - pt, gamma) * log_pt;
}

// Focal-style matching cost: positive-branch loss minus negative-branch loss.
inline double focal_cost(double logit, double alpha = 0.25, double gamma = 2.0) {
    return focal_loss(logit, 1, alpha, gamma) - focal_loss(logit, 0, alpha, gamma);
}

// Generalized IoU in [-1, 1] of two (cx,cy,w,h) boxes with positive extents.
inline double giou(const Box& a, const Box& b) {
    if (a[2] <= 0 || a[3] <= 0 || b[2] <= 0 || b[3] <= 0)
        throw ContractError("giou: boxes must have positive width/height");
    double ax1 = a[0] - a[2] / 2, ax2 = a[0] + a[2] / 2;
    double ay1 = a[1] - a[3] / 2, ay2 = a[1] + a[3] / 2;
    double bx1 = b[0] - b[2] / 2, bx2 = b[0] + b[2] / 2;
    double by1 = b[1] - b[3] / 2, by2 = b[1] + b[3] / 2;
    double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    double inter = iw * ih;
    double uni = a[2] * a[3] + b[2] * b[3] - inter;
    double hw = std::max(ax2, bx2) - std::min(ax1, bx1);
    double hh = std::max(ay2, by2) - std::min(ay1, by1);
    double hull = hw * hh;
    return inter / uni - (hull - uni) / hull;
}

// --------------------------------------------------------------------------
// Pairwise cost
// --------------------------------------------------------------------------

// cost[i,j] = cls * focal_cost(logit of gt j's class) + l1 * |b_i - b_j|_1
//           + giou * (1 - GIoU). In the class-agnostic global stage each
//           prediction carries a single foreground logit and gt_class is 0.
inline CostMatrix pairwise_cost(const std::vector<Box>& pred_boxes,
                                const std::vector<std::vector<double>>& pred_logits,
                                const std::vector<Box>& gt_boxes,
                                const std::vector<int>& gt_class, const LossWeights& w) {
    int64_t n_pred = int64_t(pred_boxes.size());
    int64_t n_gt = int64_t(gt_boxes.size());
    CostMatrix m;
    m.n_pred = n_pred;
    m.n_gt = n_gt;
    if (n_gt == 0) return m;
    if (n_pred < n_gt)
        throw ContractError("pairwise_cost: needs n_pred >= n_gt, got " + std::to_string(n_pred) +
                            " < " + std::to_string(n_gt));
    m.cost.resize(size_t(n_pred * n_gt));
    for (int64_t i = 0; i < n_pred; ++i)
        for (int64_t j = 0; j < n_gt; ++j) {
            double c_cls =
                focal_cost(pred_logits[size_t(i)][size_t(gt_class[size_t(j)])], w.focal_alpha,
                           w.focal_gamma);
            double c_l1 = 0;
            for (int k = 0; k < 4; ++k)
                c_l1 += std::abs(pred_boxes[size_t(i)][size_t(k)] - gt_boxes[size_t(j)][size_t(k)]);
            double c_giou = 1.0 - giou(pred_boxes[size_t(i)], gt_boxes[size_t(j)]);
            m.at(i, j) = w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou;
        }
    return m;
}

// --------------------------------------------------------------------------
// Assignment solvers
// --------------------------------------------------------------------------

namespace detail {

// Canonical total: chosen entries summed in gt-index order, so tied optima
// compare bitwise-identically across solvers.
inline double canonical_total(const CostMatrix& m, const std::vector<int64_t>& pred_of_gt) {
    double acc = 0;
    for (int64_t j = 0; j < m.n_gt; ++j) acc += m.at(pred_of_gt[size_t(j)], j);
    return acc;
}

// Jonker-Volgenant style shortest augmenting path LAP. Rows are gts
// (n <= m), columns are preds. Returns pred index per gt.
inline std::vector<int64_t> lap_solve(int64_t n_gt, int64_t n_pred,
                                      const std::function<double(int64_t, int64_t)>& cost) {
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(size_t(n_gt + 1), 0.0), v(size_t(n_pred + 1), 0.0);
    std::vector<int64_t> p(size_t(n_pred + 1), 0), way(size_t(n_pred + 1), 0);
    for (int64_t i = 1; i <= n_gt; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(size_t(n_pred + 1), INF);
        std::vector<char> used(size_t(n_pred + 1), 0);
        do {
            used[size_t(j0)] = 1;
            int64_t i0 = p[size_t(j0)], j1 = -1;
            double delta = INF;
            for (int64_t j = 1; j <= n_pred; ++j)
                if (!used[size_t(j)]) {
                    double cur = cost(i0 - 1, j - 1) - u[size_t(i0)] - v[size_t(j)];
                    if (cur < minv[size_t(j)]) {
                        minv[size_t(j)] = cur;
                        way[size_t(j)] = j0;
                    }
                    if (minv[size_t(j)] < delta) {
                        delta = minv[size_t(j)];
                        j1 = j;
                    }
                }
            for (int64_t j = 0; j <= n_pred; ++j) {
                if (used[size_t(j)]) {
                    u[size_t(p[size_t(j)])] += delta;
                    v[size_t(j)] -= delta;
                } else {
                    minv[size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[size_t(j0)] != 0);
        do {
            int64_t j1 = way[size_t(j0)];
            p[size_t(j0)] = p[size_t(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int64_t> pred_of_gt(size_t(n_gt), -1);
    for (int64_t j = 1; j <= n_pred; ++j)
        if (p[size_t(j)] > 0) pred_of_gt[size_t(p[size_t(j)] - 1)] = j - 1;
    return pred_of_gt;
}

inline double lap_best_total(const CostMatrix& m, const std::vector<int64_t>& gts,
                             const std::vector<int64_t>& preds) {
    if (gts.empty()) return 0.0;
    auto sub = [&](int64_t i, int64_t j) { return m.at(preds[size_t(j)], gts[size_t(i)]); };
    auto sol = lap_solve(int64_t(gts.size()), int64_t(preds.size()), sub);
    double acc = 0;
    for (size_t j = 0; j < gts.size(); ++j) acc += m.at(preds[size_t(sol[j])], gts[j]);
    return acc;
}

}  // namespace detail

// Minimum-cost one-to-one assignment covering all gts. Ties between optimal
// assignments break toward the lowest pred index, gt by gt in index order
// (the same rule brute_force_match uses).
inline Assignment hungarian(const CostMatrix& m) {
    Assignment a;
    if (m.n_gt == 0) return a;
    if (m.n_pred < m.n_gt)
        throw ContractError("hungarian: needs n_pred >= n_gt, got " + std::to_string(m.n_pred) +
                            " x " + std::to_string(m.n_gt));
    for (double c : m.cost)
        if (std::isnan(c)) throw ContractError("hungarian: NaN in cost matrix");

    auto full = [&](int64_t i, int64_t j) { return m.at(j, i); };  // rows = gts
    auto sol = detail::lap_solve(m.n_gt, m.n_pred, full);
    double best = detail::canonical_total(m, sol);
    double tol = 1e-9 * (1.0 + std::abs(best));

    // Lexicographic refinement over tied optima.
    std::vector<int64_t> avail;
    for (int64_t i = 0; i < m.n_pred; ++i) avail.push_back(i);
    double fixed = 0.0;
    for (int64_t j = 0; j < m.n_gt; ++j) {
        std::vector<int64_t> rest_gts;
        for (int64_t jj = j + 1; jj < m.n_gt; ++jj) rest_gts.push_back(jj);
        bool placed = false;
        for (size_t ai = 0; ai < avail.size(); ++ai) {
            int64_t i = avail[ai];
            std::vector<int64_t> rest_preds;
            for (size_t aj = 0; aj < avail.size(); ++aj)
                if (aj != ai) rest_preds.push_back(avail[aj]);
            double total = fixed + m.at(i, j) + detail::lap_best_total(m, rest_gts, rest_preds);
            if (total <= best + tol) {
                a.pairs.emplace_back(i, j);
                fixed += m.at(i, j);
                avail.erase(avail.begin() + int64_t(ai));
                placed = true;
                break;
            }
        }
        if (!placed) throw ContractError("hungarian: refinement failed to place gt");
    }
    a.total_cost = fixed;
    return a;
}

// Exhaustive oracle over all injections gt -> pred. Same tie-break contract
// as hungarian. Guarded to small problems.
inline Assignment brute_force_match(const CostMatrix& m) {
    if (m.n_gt > 8)
        throw ContractError("brute_force_match: n_gt > 8 (" + std::to_string(m.n_gt) + ")");
    Assignment best;
    if (m.n_gt == 0) return best;
    if (m.n_pred < m.n_gt)
        throw ContractError("brute_force_match: needs n_pred >= n_gt");
    std::vector<int64_t> cur(size_t(m.n_gt), -1);
    std::vector<char> used(size_t(m.n_pred), 0);
    double best_total = std::numeric_limits<double>::infinity();
    std::vector<int64_t> best_assign;
    // depth-first in lexicographic order of (pred for gt0, pred for gt1, ...);
    // strict < keeps the first (lexicographically smallest) optimum.
    std::function<void(int64_t, double)> rec = [&](int64_t j, double acc) {
        if (j == m.n_gt) {
            if (acc < best_total) {
                best_total = acc;
                best_assign = cur;
            }
            return;
        }
        for (int64_t i = 0; i < m.n_pred; ++i) {
            if (used[size_t(i)]) continue;
            used[size_t(i)] = 1;
            cur[size_t(j)] = i;
            rec(j + 1, acc + m.at(i, j));
            used[size_t(i)] = 0;
        }
    };
    rec(0, 0.0);
    for (int64_t j = 0; j < m.n_gt; ++j) best.pairs.emplace_back(best_assign[size_t(j)], j);
    best.total_cost = best_total;
    return best;
}

// --------------------------------------------------------------------------
// Differentiable loss terms (tape graph versions)
// --------------------------------------------------------------------------

// Sum of alpha-balanced focal losses over all entries of `logits` against a
// constant 0/1 target mask of the same shape.
template <class T>
Tensor<T> focal_loss_graph(const Tensor<T>& logits, const std::vector<T>& targets, T alpha,
                           T gamma) {
    if (int64_t(targets.size()) != logits.size())
        throw ShapeError("focal_loss_graph: target mask size mismatch");
    auto t = Tensor<T>::from(logits.shape(), targets);
    auto one = Tensor<T>::full(logits.shape(), T(1));
    auto p = sigmoid(logits);
    auto pos = mul_scalar(mul(pow_scalar(sub(one, p), gamma), softplus(neg(logits))), alpha);
    auto negb = mul_scalar(mul(pow_scalar(p, gamma), softplus(logits)), T(1) - alpha);
    auto per = add(mul(t, pos), mul(sub(one, t), negb));
    return sum_all(per);
}

// Per-pair GIoU of predicted vs constant gt boxes, both (k, 4) cxcywh.
template <class T>
Tensor<T> giou_graph(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.ndim() != 2 || pred.dim(1) != 4 || !same_shape(pred.shape(), gt.shape()))
        throw ShapeError("giou_graph: expected matching (k,4) boxes, got " +
                         shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
    auto half = [&](const Tensor<T>& v) { return mul_scalar(v, T(0.5)); };
    auto acx = select_last(pred, 0), acy = select_last(pred, 1);
    auto aw = select_last(pred, 2), ah = select_last(pred, 3);
    auto bcx = select_last(gt, 0), bcy = select_last(gt, 1);
    auto bw = select_last(gt, 2), bh = select_last(gt, 3);
    auto ax1 = sub(acx, half(aw)), ax2 = add(acx, half(aw));
    auto ay1 = sub(acy, half(ah)), ay2 = add(acy, half(ah));
    auto bx1 = sub(bcx, half(bw)), bx2 = add(bcx, half(bw));
    auto by1 = sub(bcy, half(bh)), by2 = add(bcy, half(bh));
    auto zero = Tensor<T>::zeros(acx.shape());
    auto iw = maximum(zero, sub(minimum(ax2, bx2), maximum(ax1, bx1)));
    auto ih = maximum(zero, sub(minimum(ay2, by2), maximum(ay1, by1)));
    auto inter = mul(iw, ih);
    auto uni = sub(add(mul(aw, ah), mul(bw, bh)), inter);
    auto hw = sub(maximum(ax2, bx2), minimum(ax1, bx1));
    auto hh = sub(maximum(ay2, by2), minimum(ay1, by1));
    auto hull = mul(hw, hh);
    return sub(div(inter, uni), div(sub(hull, uni), hull));
}

// Sum of absolute coordinate errors between (k,4) boxes.
template <class T>
Tensor<T> l1_graph(const Tensor<T>& pred, const Tensor<T>& gt) {
    return sum_all(abs_val(sub(pred, gt)));
}

}  // namespace golo
