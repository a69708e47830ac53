#pragma once

#include <iostream>

#include "golo/decoder_common.hpp"
#include "golo/global_stage.hpp"

namespace golo {

// ---------------------------------------------------------------------------
// RoIAlign
// ---------------------------------------------------------------------------

struct RoiAlignConfig {
    int64_t S = 7;             // output grid is S x S
    int64_t sampling = 2;      // sub-samples per bin axis
    double canonical = 56.0;   // FPN assignment scale (224 at full scale)
};

// FPN level for a normalized (cx,cy,w,h) box on an (H,W) image:
// k = clamp(floor(4 + log2(sqrt(w*h*H*W) / canonical)), 2, 5).
inline int roi_level_for_box(double w_norm, double h_norm, int64_t H, int64_t W,
                             double canonical) {
    double scale = std::sqrt(std::max(w_norm, 1e-4) * std::max(h_norm, 1e-4) * double(H) *
                             double(W));
    int k = int(std::floor(4.0 + std::log2(scale / canonical)));
    return std::min(5, std::max(2, k));
}

namespace detail {

// S x S average pooling of `sampling`^2 bilinear reads per bin from one
// pyramid level, differentiable in the box coordinates and the features.
// `boxes` is (n,4) normalized cxcywh; `levels[level_idx[i]]` is used per box.
template <class T>
Tensor<T> roi_align_impl(const FeaturePyramid<T>& pyr, const Tensor<T>& boxes,
                         const std::vector<int>& level_idx, int64_t H, int64_t W,
                         const RoiAlignConfig& cfg) {
    int64_t n = boxes.dim(0), c = pyr.channels, S = cfg.S, ns = cfg.sampling;
    bool rg = boxes.requires_grad();
    for (const auto& lv : pyr.levels) rg = rg || lv.requires_grad();
    auto out = make_out<T>({n, S * S, c}, rg);

    // absolute-coordinate box corners; degenerate extents clamped
    auto corner = [&](int64_t i, T& x1, T& y1, T& bw, T& bh) {
        T cx = boxes.data()[size_t(i * 4 + 0)] * T(W);
        T cy = boxes.data()[size_t(i * 4 + 1)] * T(H);
        bw = std::max(boxes.data()[size_t(i * 4 + 2)], T(1e-4)) * T(W);
        bh = std::max(boxes.data()[size_t(i * 4 + 3)], T(1e-4)) * T(H);
        x1 = cx - bw / T(2);
        y1 = cy - bh / T(2);
    };

    for (int64_t i = 0; i < n; ++i) {
        const auto& lv = pyr.levels[size_t(level_idx[size_t(i)] - 2)];
        int64_t lh = lv.dim(1), lw = lv.dim(2);
        T stride = T(kPyramidStrides[size_t(level_idx[size_t(i)] - 2)]);
        T x1, y1, bw, bh;
        corner(i, x1, y1, bw, bh);
        for (int64_t by = 0; by < S; ++by)
            for (int64_t bx = 0; bx < S; ++bx) {
                for (int64_t sy = 0; sy < ns; ++sy)
                    for (int64_t sx = 0; sx < ns; ++sx) {
                        T ay = y1 + bh / T(S) * (T(by) + (T(sy) + T(0.5)) / T(ns));
                        T ax = x1 + bw / T(S) * (T(bx) + (T(sx) + T(0.5)) / T(ns));
                        T py = ay / stride - T(0.5);
                        T px = ax / stride - T(0.5);
                        int64_t x0 = int64_t(std::floor(px)), y0 = int64_t(std::floor(py));
                        T fx = px - T(x0), fy = py - T(y0);
                        for (int64_t ch = 0; ch < c; ++ch) {
                            T v00 = texel(lv.data(), c, lh, lw, ch, y0, x0);
                            T v01 = texel(lv.data(), c, lh, lw, ch, y0, x0 + 1);
                            T v10 = texel(lv.data(), c, lh, lw, ch, y0 + 1, x0);
                            T v11 = texel(lv.data(), c, lh, lw, ch, y0 + 1, x0 + 1);
                            T v = (v00 * (T(1) - fx) + v01 * fx) * (T(1) - fy) +
                                  (v10 * (T(1) - fx) + v11 * fx) * fy;
                            out.data()[size_t(((i * S + by) * S + bx) * c + ch)] +=
                                v / T(ns * ns);
                        }
                    }
            }
    }
    check_finite(out, "roi_align");
    if (taping(out)) {
        auto bn = boxes.node(), on = out.node();
        std::array<std::shared_ptr<Node<T>>, 4> lvn;
        for (int j = 0; j < 4; ++j) lvn[size_t(j)] = pyr.levels[size_t(j)].node();
        Tape<T>::current()->record(on, [bn, on, lvn, level_idx, H, W, n, c, S, ns] {
            on->ensure_grad();
            bool want_box = bn->requires_grad;
            if (want_box) bn->ensure_grad();
            for (int j = 0; j < 4; ++j)
                if (lvn[size_t(j)]->requires_grad) lvn[size_t(j)]->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                auto& lv = lvn[size_t(level_idx[size_t(i)] - 2)];
                int64_t lh = lv->shape[1], lw = lv->shape[2];
                T stride = T(kPyramidStrides[size_t(level_idx[size_t(i)] - 2)]);
                T w_raw = bn->data[size_t(i * 4 + 2)], h_raw = bn->data[size_t(i * 4 + 3)];
                bool w_clamped = w_raw < T(1e-4), h_clamped = h_raw < T(1e-4);
                T bw = std::max(w_raw, T(1e-4)) * T(W);
                T bh = std::max(h_raw, T(1e-4)) * T(H);
                T cx = bn->data[size_t(i * 4 + 0)] * T(W);
                T cy = bn->data[size_t(i * 4 + 1)] * T(H);
                T x1 = cx - bw / T(2), y1 = cy - bh / T(2);
                for (int64_t by = 0; by < S; ++by)
                    for (int64_t bx = 0; bx < S; ++bx)
                        for (int64_t sy = 0; sy < ns; ++sy)
                            for (int64_t sx = 0; sx < ns; ++sx) {
                                // u in [0,1): relative position within the box
                                T uy = (T(by) + (T(sy) + T(0.5)) / T(ns)) / T(S);
                                T ux = (T(bx) + (T(sx) + T(0.5)) / T(ns)) / T(S);
                                T ay = y1 + bh * uy;
                                T ax = x1 + bw * ux;
                                T py = ay / stride - T(0.5);
                                T px = ax / stride - T(0.5);
                                int64_t x0 = int64_t(std::floor(px)),
                                        y0 = int64_t(std::floor(py));
                                T fx = px - T(x0), fy = py - T(y0);
                                T gx_acc = T(0), gy_acc = T(0);
                                for (int64_t ch = 0; ch < c; ++ch) {
                                    T g = on->grad[size_t(((i * S + by) * S + bx) * c + ch)] /
                                          T(ns * ns);
                                    if (g == T(0)) continue;
                                    T v00 = texel(lv->data, c, lh, lw, ch, y0, x0);
                                    T v01 = texel(lv->data, c, lh, lw, ch, y0, x0 + 1);
                                    T v10 = texel(lv->data, c, lh, lw, ch, y0 + 1, x0);
                                    T v11 = texel(lv->data, c, lh, lw, ch, y0 + 1, x0 + 1);
                                    if (lv->requires_grad) {
                                        auto scatter = [&](int64_t yy, int64_t xx, T wgt) {
                                            if (yy < 0 || yy >= lh || xx < 0 || xx >= lw) return;
                                            lv->grad[size_t((ch * lh + yy) * lw + xx)] += g * wgt;
                                        };
                                        scatter(y0, x0, (T(1) - fx) * (T(1) - fy));
                                        scatter(y0, x0 + 1, fx * (T(1) - fy));
                                        scatter(y0 + 1, x0, (T(1) - fx) * fy);
                                        scatter(y0 + 1, x0 + 1, fx * fy);
                                    }
                                    gx_acc += g * ((v01 - v00) * (T(1) - fy) + (v11 - v10) * fy);
                                    gy_acc += g * ((v10 - v00) * (T(1) - fx) + (v11 - v01) * fx);
                                }
                                if (!want_box) continue;
                                // chain: sample position is affine in the box fields
                                T dpx_dax = T(1) / stride, dpy_day = T(1) / stride;
                                T gax = gx_acc * dpx_dax, gay = gy_acc * dpy_day;
                                bn->grad[size_t(i * 4 + 0)] += gax * T(W);
                                bn->grad[size_t(i * 4 + 1)] += gay * T(H);
                                if (!w_clamped)
                                    bn->grad[size_t(i * 4 + 2)] += gax * T(W) * (ux - T(0.5));
                                if (!h_clamped)
                                    bn->grad[size_t(i * 4 + 3)] += gay * T(H) * (uy - T(0.5));
                            }
            }
        });
    }
    return out;
}

}  // namespace detail

// Pools an S x S grid from the pyramid inside each box; the source level
// follows the FPN assignment rule. Output (n, S*S, c).
template <class T>
Tensor<T> roi_align(const FeaturePyramid<T>& pyr, const Tensor<T>& boxes, int64_t img_h,
                    int64_t img_w, const RoiAlignConfig& cfg = {}) {
    if (boxes.ndim() != 2 || boxes.dim(1) != 4)
        throw ShapeError("roi_align: boxes must be (n,4), got " + shape_str(boxes.shape()));
    int64_t n = boxes.dim(0);
    std::vector<int> levels(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i) {
        double w = double(boxes.data()[size_t(i * 4 + 2)]);
        double h = double(boxes.data()[size_t(i * 4 + 3)]);
        if ((w <= 0 || h <= 0) && debug_checks())
            std::cerr << "[golo] roi_align: degenerate box " << i << " clamped (w=" << w
                      << ", h=" << h << ")\n";
        levels[size_t(i)] = roi_level_for_box(w, h, img_h, img_w, cfg.canonical);
    }
    return detail::roi_align_impl(pyr, boxes, levels, img_h, img_w, cfg);
}

// ---------------------------------------------------------------------------
// Query-guided feature enhancing
// ---------------------------------------------------------------------------

template <class T>
struct QgfeParams {
    Tensor<T> w1, b1, w2, b2;      // c -> S*S*c kernel generators
    Tensor<T> ln1_g, ln1_b;        // over the mixed S*S axis
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w3, b3;              // S*S*c -> c
    int64_t S = 0;

    static QgfeParams init(ParamStore<T>& ps, const std::string& prefix, int64_t c, int64_t S) {
        QgfeParams p;
        p.S = S;
        int64_t ss = S * S;
        p.w1 = ps.add_xavier2d(prefix + ".w1", c, ss * c);
        p.b1 = ps.add_const(prefix + ".b1", {ss * c}, T(0));
        p.w2 = ps.add_xavier2d(prefix + ".w2", c, ss * c);
        p.b2 = ps.add_const(prefix + ".b2", {ss * c}, T(0));
        p.ln1_g = ps.add_const(prefix + ".ln1.g", {ss}, T(1));
        p.ln1_b = ps.add_const(prefix + ".ln1.b", {ss}, T(0));
        p.ln2_g = ps.add_const(prefix + ".ln2.g", {ss}, T(1));
        p.ln2_b = ps.add_const(prefix + ".ln2.b", {ss}, T(0));
        p.w3 = ps.add_xavier2d(prefix + ".w3", ss * c, c);
        p.b3 = ps.add_const(prefix + ".b3", {c}, T(0));
        return p;
    }
};

// Intermediate shapes per query, recorded for contract checks.
struct QgfeTrace {
    Shape kernel;       // (C, S*S)
    Shape after_bmm1;   // (S*S, S*S)
    Shape after_bmm2;   // (C, S*S)
    Shape output;       // (1, C)
};

// Two query-generated kernels mix the RoI feature spatially and back to
// channel space, then a linear layer reduces the flattened map to a
// C-vector. Batched over queries: q (n,c), roi (n, S*S, c) -> (n, c).
template <class T>
Tensor<T> qgfe(const Tensor<T>& q, const Tensor<T>& roi, const QgfeParams<T>& p,
               QgfeTrace* trace = nullptr) {
    int64_t n = q.dim(0), c = q.dim(1), ss = p.S * p.S;
    if (roi.ndim() != 3 || roi.dim(0) != n || roi.dim(1) != ss || roi.dim(2) != c)
        throw ShapeError("qgfe: roi shape " + shape_str(roi.shape()) + " does not match q " +
                         shape_str(q.shape()) + " with S*S = " + std::to_string(ss));
    auto k1 = reshape(linear(q, p.w1, p.b1), {n, c, ss});
    auto k2 = reshape(linear(q, p.w2, p.b2), {n, c, ss});
    auto m1 = relu(layer_norm(matmul(roi, k1), p.ln1_g, p.ln1_b, 2));  // (n, S*S, S*S)
    auto m2 = relu(layer_norm(matmul(k2, m1), p.ln2_g, p.ln2_b, 2));   // (n, c, S*S)
    auto out = linear(reshape(m2, {n, c * ss}), p.w3, p.b3);           // (n, c)
    if (trace) {
        trace->kernel = {c, ss};
        trace->after_bmm1 = {ss, ss};
        trace->after_bmm2 = {c, ss};
        trace->output = {1, c};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Query fusion (residual RoI branch)
// ---------------------------------------------------------------------------

template <class T>
struct FuseParams {
    Tensor<T> w1, b1;      // c -> c
    Tensor<T> ln_g, ln_b;  // over c
    Tensor<T> w2, b2;      // c -> c

    static FuseParams init(ParamStore<T>& ps, const std::string& prefix, int64_t c) {
        FuseParams p;
        p.w1 = ps.add_xavier2d(prefix + ".w1", c, c);
        p.b1 = ps.add_const(prefix + ".b1", {c}, T(0));
        p.ln_g = ps.add_const(prefix + ".ln.g", {c}, T(1));
        p.ln_b = ps.add_const(prefix + ".ln.b", {c}, T(0));
        p.w2 = ps.add_xavier2d(prefix + ".w2", c, c);
        p.b2 = ps.add_const(prefix + ".b2", {c}, T(0));
        return p;
    }
};

// r = W2(LN(ReLU(W1(f)))) with f the RoI grid reduced to a C-vector by its
// spatial mean.
template <class T>
Tensor<T> fuse_residual(const Tensor<T>& roi, const FuseParams<T>& p) {
    auto pooled = mean_axis(roi, 1);  // (n, c)
    auto h = layer_norm(relu(linear(pooled, p.w1, p.b1)), p.ln_g, p.ln_b, 1);
    return linear(h, p.w2, p.b2);
}

// q_hat = q + d + r, elementwise.
template <class T>
Tensor<T> fuse_query(const Tensor<T>& q, const Tensor<T>& d, const Tensor<T>& r) {
    return add(add(q, d), r);
}

// ---------------------------------------------------------------------------
// Local heads
// ---------------------------------------------------------------------------

template <class T>
struct LocalHeadParams {
    Tensor<T> w1, b1, w2, b2;  // shared trunk, two hidden layers of width 4c
    Tensor<T> cls_w, cls_b;    // 4c -> num_classes
    Tensor<T> box_w, box_b;    // 4c -> 4 deltas

    static LocalHeadParams init(ParamStore<T>& ps, const std::string& prefix, int64_t c,
                                int64_t num_classes) {
        LocalHeadParams p;
        p.w1 = ps.add_xavier2d(prefix + ".w1", c, 4 * c);
        p.b1 = ps.add_const(prefix + ".b1", {4 * c}, T(0));
        p.w2 = ps.add_xavier2d(prefix + ".w2", 4 * c, 4 * c);
        p.b2 = ps.add_const(prefix + ".b2", {4 * c}, T(0));
        p.cls_w = ps.add_xavier2d(prefix + ".cls_w", 4 * c, num_classes);
        p.cls_b = ps.add_const(prefix + ".cls_b", {num_classes}, T(0));
        p.box_w = ps.add_xavier2d(prefix + ".box_w", 4 * c, 4);
        p.box_b = ps.add_const(prefix + ".box_b", {4}, T(0));
        return p;
    }
};

template <class T>
Tensor<T> local_trunk(const Tensor<T>& q, const LocalHeadParams<T>& p) {
    return relu(linear(relu(linear(q, p.w1, p.b1)), p.w2, p.b2));
}

// (dx, dy, dlog w, dlog h) against a reference box, decoded and clipped.
template <class T>
Tensor<T> decode_box_deltas(const Tensor<T>& deltas, const Tensor<T>& ref) {
    auto dx = select_last(deltas, 0), dy = select_last(deltas, 1);
    auto dw = select_last(deltas, 2), dh = select_last(deltas, 3);
    auto cx = select_last(ref, 0), cy = select_last(ref, 1);
    auto w = select_last(ref, 2), h = select_last(ref, 3);
    auto ncx = clamp(add(cx, mul(dx, w)), T(0), T(1));
    auto ncy = clamp(add(cy, mul(dy, h)), T(0), T(1));
    auto nw = clamp(mul(w, exp_op(dw)), T(1e-4), T(1));
    auto nh = clamp(mul(h, exp_op(dh)), T(1e-4), T(1));
    return stack_last<T>({ncx, ncy, nw, nh});
}

// Per-class sigmoid logits and refined boxes, plus the step-1 box / step-2
// logit intermediates.
template <class T>
struct LocalOutput {
    Tensor<T> class_logits;  // (n, num_classes)
    Tensor<T> boxes;         // (n, 4)
    Tensor<T> aux_box;       // (n, 4)
    Tensor<T> aux_logits;    // (n, num_classes)
};

template <class T>
struct LocalStageParams {
    QgfeParams<T> qgfe;
    FuseParams<T> fuse;
    AttentionParams<T> self;
    PointPredictParams<T> points;
    MixingParams<T> mixing;
    LocalHeadParams<T> heads;
    RoiAlignConfig roi;
    int64_t num_classes = 0;

    static LocalStageParams init(ParamStore<T>& ps, int64_t c, int64_t S, int64_t n_pts,
                                 int64_t heads, int64_t num_classes, double canonical) {
        LocalStageParams p;
        p.roi.S = S;
        p.roi.canonical = canonical;
        p.num_classes = num_classes;
        p.qgfe = QgfeParams<T>::init(ps, "local.qgfe", c, S);
        p.fuse = FuseParams<T>::init(ps, "local.fuse", c);
        p.self = AttentionParams<T>::init(ps, "local.self", c, heads);
        p.points = PointPredictParams<T>::init(ps, "local.points", c, n_pts);
        p.mixing = MixingParams<T>::init(ps, "local.mixing", c, n_pts);
        p.heads = LocalHeadParams<T>::init(ps, "local.heads", c, num_classes);
        return p;
    }
};

// Stage 2: RoIAlign -> QGFE + fusion -> self-attention -> box-relative
// sampling + mixing -> classification and box refinement heads.
template <class T>
LocalOutput<T> run_local_stage(const FeaturePyramid<T>& pyr, const QuerySet<T>& qg,
                               const LocalStageParams<T>& p, int64_t img_h, int64_t img_w) {
    auto roi = roi_align(pyr, qg.boxes, img_h, img_w, p.roi);  // (n, S*S, c)
    auto d = qgfe(qg.q, roi, p.qgfe);
    auto r = fuse_residual(roi, p.fuse);
    auto q1 = fuse_query(qg.q, d, r);             // step 1
    auto q2 = self_attention_block(q1, p.self);   // step 2

    auto pts = predict_sampling_points(q2, p.points, SamplingMode::kBoxRelative, &qg.boxes);
    auto sampled = bidirectional_sample(pyr, pts);
    auto q3 = adaptive_mixing(q2, sampled, p.mixing);  // step 3

    LocalOutput<T> out;
    auto t1 = local_trunk(q1, p.heads);
    out.aux_box = decode_box_deltas(linear(t1, p.heads.box_w, p.heads.box_b), qg.boxes);
    auto t2 = local_trunk(q2, p.heads);
    out.aux_logits = linear(t2, p.heads.cls_w, p.heads.cls_b);
    auto t3 = local_trunk(q3, p.heads);
    out.class_logits = linear(t3, p.heads.cls_w, p.heads.cls_b);
    out.boxes = decode_box_deltas(linear(t3, p.heads.box_w, p.heads.box_b), qg.boxes);
    return out;
}

}  // namespace golo
