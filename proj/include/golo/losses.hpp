#pragma once

#include "golo/global_stage.hpp"
#include "golo/local_stage.hpp"
#include "golo/matching.hpp"

namespace golo {

// Ground truth for one image: normalized cxcywh boxes and 0-based classes.
struct GtSet {
    std::vector<Box> boxes;
    std::vector<int> classes;

    size_t size() const { return boxes.size(); }
};

template <class T>
struct StageLossTerms {
    Tensor<T> cls, l1, giou;  // unweighted sums normalized by gt count
};

namespace detail {

template <class T>
Tensor<T> gt_box_tensor(const GtSet& gts, const std::vector<int64_t>& order) {
    std::vector<T> v;
    v.reserve(order.size() * 4);
    for (int64_t j : order)
        for (int k = 0; k < 4; ++k) v.push_back(T(gts.boxes[size_t(j)][size_t(k)]));
    return Tensor<T>::from({int64_t(order.size()), 4}, std::move(v));
}

}  // namespace detail

// Matched predictions contribute focal + L1 + GIoU; unmatched ones contribute
// focal toward background. All terms are normalized by the gt count (or 1
// when the image is empty).
template <class T>
StageLossTerms<T> stage_loss(const Tensor<T>& pred_boxes, const Tensor<T>& logits,
                             const GtSet& gts, const Assignment& assign, const LossWeights& w) {
    int64_t n = pred_boxes.dim(0);
    int64_t n_cls = logits.ndim() == 2 ? logits.dim(1) : 1;
    int64_t n_gt = int64_t(gts.size());
    if (int64_t(assign.pairs.size()) != n_gt)
        throw ContractError("stage_loss: assignment does not cover all gts");
    T norm = T(1) / T(std::max<int64_t>(1, n_gt));

    // classification target mask over every (query, class) slot
    std::vector<T> target(size_t(logits.size()), T(0));
    for (auto [pi, gj] : assign.pairs) {
        int cls_idx = logits.ndim() == 2 ? gts.classes[size_t(gj)] : 0;
        target[size_t(pi * n_cls + cls_idx)] = T(1);
    }
    StageLossTerms<T> terms;
    terms.cls = mul_scalar(
        focal_loss_graph(logits, target, T(w.focal_alpha), T(w.focal_gamma)), norm);

    if (n_gt == 0) {
        terms.l1 = Tensor<T>::scalar(T(0));
        terms.giou = Tensor<T>::scalar(T(0));
        return terms;
    }
    std::vector<int64_t> pred_idx, gt_idx;
    for (auto [pi, gj] : assign.pairs) {
        pred_idx.push_back(pi);
        gt_idx.push_back(gj);
    }
    auto matched = gather_rows(pred_boxes, pred_idx);
    auto gt_boxes = detail::gt_box_tensor<T>(gts, gt_idx);
    terms.l1 = mul_scalar(l1_graph(matched, gt_boxes), norm);
    auto ones = Tensor<T>::full({n_gt}, T(1));
    terms.giou = mul_scalar(sum_all(sub(ones, giou_graph(matched, gt_boxes))), norm);
    (void)n;
    return terms;
}

// Box cost + aux terms reuse a stage's final matching; helpers below build
// the per-stage cost matrices from prediction values.
template <class T>
Assignment match_global(const GlobalOutput<T>& out, const GtSet& gts, const LossWeights& w) {
    int64_t n = out.boxes.dim(0);
    std::vector<Box> pb;
    pb.resize(size_t(n));
    std::vector<std::vector<double>> pl;
    pl.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        for (int k = 0; k < 4; ++k) pb[size_t(i)][size_t(k)] = double(out.boxes.at({i, k}));
        pl[size_t(i)] = {double(out.fg_logit.data()[size_t(i)])};
    }
    std::vector<int> zero_cls(gts.size(), 0);
    return hungarian(pairwise_cost(pb, pl, gts.boxes, zero_cls, w));
}

template <class T>
Assignment match_local(const LocalOutput<T>& out, const GtSet& gts, const LossWeights& w) {
    int64_t n = out.boxes.dim(0);
    int64_t k_cls = out.class_logits.dim(1);
    std::vector<Box> pb;
    pb.resize(size_t(n));
    std::vector<std::vector<double>> pl;
    pl.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        for (int k = 0; k < 4; ++k) pb[size_t(i)][size_t(k)] = double(out.boxes.at({i, k}));
        pl[size_t(i)].resize(size_t(k_cls));
        for (int64_t k = 0; k < k_cls; ++k) pl[size_t(i)][size_t(k)] = double(out.class_logits.at({i, k}));
    }
    return hungarian(pairwise_cost(pb, pl, gts.boxes, gts.classes, w));
}

// All scalars are tape tensors; `total` is the weighted combination ready for
// backward.
template <class T>
struct LossBreakdown {
    Tensor<T> cls, l1, giou, aux_bbox, aux_cls, total;
    Assignment global_assign, local_assign;

    double total_value() const { return double(total.item()); }
};

// L = L_match(global) + L_match(local)
//   + aux_bbox * (L1 + GIoU of the step-1 boxes of each stage)
//   + aux_cls  * (focal of the step-2 logits of each stage),
// with auxiliary targets taken from each stage's final assignment.
template <class T>
LossBreakdown<T> total_loss(const GlobalOutput<T>& g, const LocalOutput<T>& l, const GtSet& gts,
                            const LossWeights& w) {
    if (!g.aux_box.defined() || !g.aux_logit.defined() || !l.aux_box.defined() ||
        !l.aux_logits.defined())
        throw ContractError("total_loss: stage intermediates missing");
    w.validate();

    LossBreakdown<T> out;
    out.global_assign = match_global(g, gts, w);
    out.local_assign = match_local(l, gts, w);

    auto tg = stage_loss(g.boxes, g.fg_logit, gts, out.global_assign, w);
    auto tl = stage_loss(l.boxes, l.class_logits, gts, out.local_assign, w);
    out.cls = add(tg.cls, tl.cls);
    out.l1 = add(tg.l1, tl.l1);
    out.giou = add(tg.giou, tl.giou);

    // auxiliary terms, supervised by the final matching of their stage
    auto ta_g = stage_loss(g.aux_box, g.aux_logit, gts, out.global_assign, w);
    auto ta_l = stage_loss(l.aux_box, l.aux_logits, gts, out.local_assign, w);
    out.aux_bbox = add(add(ta_g.l1, ta_g.giou), add(ta_l.l1, ta_l.giou));
    out.aux_cls = add(ta_g.cls, ta_l.cls);

    out.total = add(
        add(add(mul_scalar(out.cls, T(w.cls)), mul_scalar(out.l1, T(w.l1))),
            mul_scalar(out.giou, T(w.giou))),
        add(mul_scalar(out.aux_bbox, T(w.aux_bbox)), mul_scalar(out.aux_cls, T(w.aux_cls))));
    return out;
}

}  // namespace golo
