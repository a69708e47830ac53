#pragma once

#include <array>

#include "golo/backbone.hpp"
#include "golo/params.hpp"
#include "golo/tensor.hpp"

namespace golo {

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

template <class T>
struct AttentionParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln_g, ln_b;  // pre-residual norm of the block input
    int64_t heads = 1;

    static AttentionParams init(ParamStore<T>& ps, const std::string& prefix, int64_t c,
                                int64_t heads) {
        if (heads < 1 || c % heads != 0)
            throw ConfigError("attention: channel count " + std::to_string(c) +
                              " not divisible by heads " + std::to_string(heads));
        AttentionParams p;
        p.heads = heads;
        p.wq = ps.add_xavier2d(prefix + ".wq", c, c);
        p.bq = ps.add_const(prefix + ".bq", {c}, T(0));
        p.wk = ps.add_xavier2d(prefix + ".wk", c, c);
        p.bk = ps.add_const(prefix + ".bk", {c}, T(0));
        p.wv = ps.add_xavier2d(prefix + ".wv", c, c);
        p.bv = ps.add_const(prefix + ".bv", {c}, T(0));
        p.wo = ps.add_xavier2d(prefix + ".wo", c, c);
        p.bo = ps.add_const(prefix + ".bo", {c}, T(0));
        p.ln_g = ps.add_const(prefix + ".ln.g", {c}, T(1));
        p.ln_b = ps.add_const(prefix + ".ln.b", {c}, T(0));
        return p;
    }
};

namespace detail {

// (rows, h*dk) -> (h, rows, dk)
template <class T>
Tensor<T> split_heads(const Tensor<T>& t, int64_t h) {
    int64_t rows = t.dim(0), c = t.dim(1), dk = c / h;
    auto out = make_out<T>({h, rows, dk}, t.requires_grad());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t hh = 0; hh < h; ++hh)
            for (int64_t d = 0; d < dk; ++d)
                out.data()[size_t((hh * rows + r) * dk + d)] = t.data()[size_t(r * c + hh * dk + d)];
    if (taping(out)) {
        auto tn = t.node(), on = out.node();
        Tape<T>::current()->record(on, [tn, on, rows, h, dk] {
            on->ensure_grad();
            tn->ensure_grad();
            int64_t c = h * dk;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t hh = 0; hh < h; ++hh)
                    for (int64_t d = 0; d < dk; ++d)
                        tn->grad[size_t(r * c + hh * dk + d)] +=
                            on->grad[size_t((hh * rows + r) * dk + d)];
        });
    }
    return out;
}

// (h, rows, dk) -> (rows, h*dk)
template <class T>
Tensor<T> merge_heads(const Tensor<T>& t) {
    int64_t h = t.dim(0), rows = t.dim(1), dk = t.dim(2);
    auto out = make_out<T>({rows, h * dk}, t.requires_grad());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t hh = 0; hh < h; ++hh)
            for (int64_t d = 0; d < dk; ++d)
                out.data()[size_t(r * h * dk + hh * dk + d)] =
                    t.data()[size_t((hh * rows + r) * dk + d)];
    if (taping(out)) {
        auto tn = t.node(), on = out.node();
        Tape<T>::current()->record(on, [tn, on, rows, h, dk] {
            on->ensure_grad();
            tn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t hh = 0; hh < h; ++hh)
                    for (int64_t d = 0; d < dk; ++d)
                        tn->grad[size_t((hh * rows + r) * dk + d)] +=
                            on->grad[size_t(r * h * dk + hh * dk + d)];
        });
    }
    return out;
}

}  // namespace detail

// softmax(QK^T / sqrt(dk)) V per head, heads concatenated, output-projected.
// No residual or norm here; blocks below add those.
template <class T>
Tensor<T> mha_core(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                   const AttentionParams<T>& p) {
    if (Q.dim(1) != K.dim(1) || K.shape() != V.shape())
        throw ShapeError("mha_core: mismatched Q/K/V shapes " + shape_str(Q.shape()) + ", " +
                         shape_str(K.shape()) + ", " + shape_str(V.shape()));
    int64_t dk = Q.dim(1) / p.heads;
    auto qh = detail::split_heads(linear(Q, p.wq, p.bq), p.heads);
    auto kh = detail::split_heads(linear(K, p.wk, p.bk), p.heads);
    auto vh = detail::split_heads(linear(V, p.wv, p.bv), p.heads);
    auto scores = mul_scalar(matmul(qh, btranspose(kh)), T(1) / std::sqrt(T(dk)));
    auto attn = softmax(scores, 2);
    auto ctx = detail::merge_heads(matmul(attn, vh));
    return linear(ctx, p.wo, p.bo);
}

// Pre-norm residual cross-attention: x + MHA(LN(x), K, V).
template <class T>
Tensor<T> attention_block(const Tensor<T>& x, const Tensor<T>& K, const Tensor<T>& V,
                          const AttentionParams<T>& p) {
    auto xn = layer_norm(x, p.ln_g, p.ln_b, 1);
    return add(x, mha_core(xn, K, V, p));
}

// Pre-norm residual self-attention over the query set.
template <class T>
Tensor<T> self_attention_block(const Tensor<T>& x, const AttentionParams<T>& p) {
    auto xn = layer_norm(x, p.ln_g, p.ln_b, 1);
    return add(x, mha_core(xn, xn, xn, p));
}

// ---------------------------------------------------------------------------
// Point prediction (x, y, z^w, z^h per sampled point)
// ---------------------------------------------------------------------------

// Per-query sampled points: planar coordinates in normalized [0,1] image
// space plus two log2-stride scale coordinates clamped to [2,5].
template <class T>
struct SamplingPoints {
    Tensor<T> x, y;    // (n, n_pts)
    Tensor<T> zw, zh;  // (n, n_pts)
    int64_t n_pts() const { return x.dim(1); }
};

template <class T>
struct PointPredictParams {
    Tensor<T> W, b;  // c -> n_pts*4
    int64_t n_pts = 0;

    static PointPredictParams init(ParamStore<T>& ps, const std::string& prefix, int64_t c,
                                   int64_t n_pts) {
        PointPredictParams p;
        p.n_pts = n_pts;
        p.W = ps.add_xavier2d(prefix + ".W", c, n_pts * 4);
        p.b = ps.add_const(prefix + ".b", {n_pts * 4}, T(0));
        return p;
    }
};

enum class SamplingMode {
    kAbsolute,     // x,y are sigmoid-squashed absolute image coordinates
    kBoxRelative,  // x,y offset within the query's current box
};

// One linear layer emits n_pts*4 values per query. The scale coordinates are
// shifted to the z range midpoint and clamped to [2,5].
template <class T>
SamplingPoints<T> predict_sampling_points(const Tensor<T>& q, const PointPredictParams<T>& p,
                                          SamplingMode mode, const Tensor<T>* boxes = nullptr) {
    int64_t n = q.dim(0), k = p.n_pts;
    auto raw = reshape(linear(q, p.W, p.b), {n, k, 4});
    auto tx = select_last(raw, 0), ty = select_last(raw, 1);
    auto tzw = select_last(raw, 2), tzh = select_last(raw, 3);
    SamplingPoints<T> s;
    if (mode == SamplingMode::kAbsolute) {
        s.x = sigmoid(tx);
        s.y = sigmoid(ty);
    } else {
        if (boxes == nullptr) throw ContractError("box-relative sampling requires boxes");
        auto cx = broadcast_last(select_last(*boxes, 0), k);
        auto cy = broadcast_last(select_last(*boxes, 1), k);
        auto w = broadcast_last(select_last(*boxes, 2), k);
        auto h = broadcast_last(select_last(*boxes, 3), k);
        auto off = [&](const Tensor<T>& t) { return add_scalar(sigmoid(t), T(-0.5)); };
        s.x = clamp(add(cx, mul(off(tx), w)), T(0), T(1));
        s.y = clamp(add(cy, mul(off(ty), h)), T(0), T(1));
    }
    s.zw = clamp(add_scalar(tzw, T(3.5)), T(2), T(5));
    s.zh = clamp(add_scalar(tzh, T(3.5)), T(2), T(5));
    return s;
}

// ---------------------------------------------------------------------------
// Bidirectional level weighting (two Gaussians in log2-stride space)
// ---------------------------------------------------------------------------

// Reference scalar form: w_j = softmax_j(-(z_j - z_h)^2/2) +
// softmax_j(-(z_j - z_w)^2/2) over levels z_j in {2,3,4,5}; sum is 2.
inline std::array<double, 4> level_weights(double z_w, double z_h) {
    std::array<double, 4> out{};
    for (double z : {z_h, z_w}) {
        std::array<double, 4> e{};
        double mx = -1e300;
        for (int j = 0; j < 4; ++j) {
            e[size_t(j)] = -(level_z(j) - z) * (level_z(j) - z) / 2.0;
            mx = std::max(mx, e[size_t(j)]);
        }
        double s = 0;
        for (int j = 0; j < 4; ++j) {
            e[size_t(j)] = std::exp(e[size_t(j)] - mx);
            s += e[size_t(j)];
        }
        for (int j = 0; j < 4; ++j) out[size_t(j)] += e[size_t(j)] / s;
    }
    return out;
}

namespace detail {

// (N,) -> (N,4): a[i,j] = -(z_level_j - z_i)^2 / 2
template <class T>
Tensor<T> neg_half_sqdiff_levels(const Tensor<T>& z) {
    int64_t N = z.size();
    auto out = make_out<T>({N, 4}, z.requires_grad());
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            T d = T(level_z(int(j))) - z.data()[size_t(i)];
            out.data()[size_t(i * 4 + j)] = -d * d / T(2);
        }
    if (taping(out)) {
        auto zn = z.node(), on = out.node();
        Tape<T>::current()->record(on, [zn, on, N] {
            on->ensure_grad();
            zn->ensure_grad();
            for (int64_t i = 0; i < N; ++i) {
                T acc = T(0);
                for (int64_t j = 0; j < 4; ++j) {
                    T d = T(level_z(int(j))) - zn->data[size_t(i)];
                    acc += on->grad[size_t(i * 4 + j)] * d;
                }
                zn->grad[size_t(i)] += acc;
            }
        });
    }
    return out;
}

}  // namespace detail

// Differentiable per-point level weights: (N,) x (N,) -> (N, 4), rows sum to 2.
template <class T>
Tensor<T> level_weights_graph(const Tensor<T>& zw, const Tensor<T>& zh) {
    auto wa = softmax(detail::neg_half_sqdiff_levels(zh), 1);
    auto wb = softmax(detail::neg_half_sqdiff_levels(zw), 1);
    return add(wa, wb);
}

// ---------------------------------------------------------------------------
// Bilinear pyramid sampling
// ---------------------------------------------------------------------------

namespace detail {

// Bilinear fetch helpers with zero padding outside the map.
template <class T>
inline T texel(const std::vector<T>& data, int64_t C, int64_t H, int64_t W, int64_t c, int64_t y,
               int64_t x) {
    (void)C;
    if (y < 0 || y >= H || x < 0 || x >= W) return T(0);
    return data[size_t((c * H + y) * W + x)];
}

}  // namespace detail

// Samples every pyramid level at normalized points (align-corners=false,
// zero-padded). Output (N, 4, c); differentiable w.r.t. the level features
// and the point coordinates.
template <class T>
Tensor<T> pyramid_bilinear(const FeaturePyramid<T>& pyr, const Tensor<T>& x, const Tensor<T>& y) {
    if (!same_shape(x.shape(), y.shape()))
        throw ShapeError("pyramid_bilinear: x/y shape mismatch");
    int64_t N = x.size();
    int64_t c = pyr.channels;
    bool rg = x.requires_grad() || y.requires_grad();
    for (const auto& lv : pyr.levels) rg = rg || lv.requires_grad();
    auto out = detail::make_out<T>({N, 4, c}, rg);
    auto sample_level = [&](const Tensor<T>& lv, int64_t i, int64_t j, T* dst) {
        int64_t H = lv.dim(1), W = lv.dim(2);
        T px = x.data()[size_t(i)] * T(W) - T(0.5);
        T py = y.data()[size_t(i)] * T(H) - T(0.5);
        int64_t x0 = int64_t(std::floor(px)), y0 = int64_t(std::floor(py));
        T fx = px - T(x0), fy = py - T(y0);
        for (int64_t ch = 0; ch < c; ++ch) {
            T v00 = detail::texel(lv.data(), c, H, W, ch, y0, x0);
            T v01 = detail::texel(lv.data(), c, H, W, ch, y0, x0 + 1);
            T v10 = detail::texel(lv.data(), c, H, W, ch, y0 + 1, x0);
            T v11 = detail::texel(lv.data(), c, H, W, ch, y0 + 1, x0 + 1);
            dst[(j * c + ch)] = (v00 * (T(1) - fx) + v01 * fx) * (T(1) - fy) +
                                (v10 * (T(1) - fx) + v11 * fx) * fy;
        }
    };
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < 4; ++j)
            sample_level(pyr.levels[size_t(j)], i, j, out.data().data() + i * 4 * c);
    detail::check_finite(out, "pyramid_bilinear");
    if (detail::taping(out)) {
        auto xn = x.node(), yn = y.node(), on = out.node();
        std::array<std::shared_ptr<Node<T>>, 4> lvn;
        std::array<int64_t, 4> Hs, Ws;
        for (int j = 0; j < 4; ++j) {
            lvn[size_t(j)] = pyr.levels[size_t(j)].node();
            Hs[size_t(j)] = pyr.levels[size_t(j)].dim(1);
            Ws[size_t(j)] = pyr.levels[size_t(j)].dim(2);
        }
        Tape<T>::current()->record(on, [xn, yn, on, lvn, Hs, Ws, N, c] {
            on->ensure_grad();
            bool want_x = xn->requires_grad;
            bool want_y = yn->requires_grad;
            if (want_x) xn->ensure_grad();
            if (want_y) yn->ensure_grad();
            for (int j = 0; j < 4; ++j)
                if (lvn[size_t(j)]->requires_grad) lvn[size_t(j)]->ensure_grad();
            for (int64_t i = 0; i < N; ++i) {
                for (int64_t j = 0; j < 4; ++j) {
                    auto& lv = lvn[size_t(j)];
                    int64_t H = Hs[size_t(j)], W = Ws[size_t(j)];
                    T px = xn->data[size_t(i)] * T(W) - T(0.5);
                    T py = yn->data[size_t(i)] * T(H) - T(0.5);
                    int64_t x0 = int64_t(std::floor(px)), y0 = int64_t(std::floor(py));
                    T fx = px - T(x0), fy = py - T(y0);
                    T gx_acc = T(0), gy_acc = T(0);
                    for (int64_t ch = 0; ch < c; ++ch) {
                        T g = on->grad[size_t((i * 4 + j) * c + ch)];
                        if (g == T(0)) continue;
                        T v00 = detail::texel(lv->data, c, H, W, ch, y0, x0);
                        T v01 = detail::texel(lv->data, c, H, W, ch, y0, x0 + 1);
                        T v10 = detail::texel(lv->data, c, H, W, ch, y0 + 1, x0);
                        T v11 = detail::texel(lv->data, c, H, W, ch, y0 + 1, x0 + 1);
                        if (lv->requires_grad) {
                            auto scatter = [&](int64_t yy, int64_t xx, T wgt) {
                                if (yy < 0 || yy >= H || xx < 0 || xx >= W) return;
                                lv->grad[size_t((ch * H + yy) * W + xx)] += g * wgt;
                            };
                            scatter(y0, x0, (T(1) - fx) * (T(1) - fy));
                            scatter(y0, x0 + 1, fx * (T(1) - fy));
                            scatter(y0 + 1, x0, (T(1) - fx) * fy);
                            scatter(y0 + 1, x0 + 1, fx * fy);
                        }
                        // d(sample)/dfx and /dfy
                        gx_acc += g * ((v01 - v00) * (T(1) - fy) + (v11 - v10) * fy);
                        gy_acc += g * ((v10 - v00) * (T(1) - fx) + (v11 - v01) * fx);
                    }
                    if (want_x) xn->grad[size_t(i)] += gx_acc * T(W);
                    if (want_y) yn->grad[size_t(i)] += gy_acc * T(H);
                }
            }
        });
    }
    return out;
}

// Eq-weighted multi-level read: sum_j w_j * f_j(x, y) for each per-query
// point, differentiable through coordinates, scales, and features.
template <class T>
Tensor<T> bidirectional_sample(const FeaturePyramid<T>& pyr, const SamplingPoints<T>& pts) {
    int64_t n = pts.x.dim(0), k = pts.x.dim(1);
    int64_t N = n * k;
    auto xf = reshape(pts.x, {N});
    auto yf = reshape(pts.y, {N});
    auto samples = pyramid_bilinear(pyr, xf, yf);                       // (N, 4, c)
    auto w = level_weights_graph(reshape(pts.zw, {N}), reshape(pts.zh, {N}));  // (N, 4)
    auto fused = sum_axis(mul_prefix(samples, w), 1);                   // (N, c)
    return reshape(fused, {n, k, pyr.channels});
}

// ---------------------------------------------------------------------------
// Adaptive channel / spatial mixing
// ---------------------------------------------------------------------------

template <class T>
struct MixingParams {
    Tensor<T> wc, bc;      // c -> c*c channel-mixing generator
    Tensor<T> ws, bs;      // c -> n_pts*p_out spatial-mixing generator
    Tensor<T> ln1_g, ln1_b;  // over channels
    Tensor<T> ln2_g, ln2_b;  // over mixed points
    Tensor<T> wo, bo;      // c*p_out -> c
    int64_t n_pts = 0, p_out = 0;

    static MixingParams init(ParamStore<T>& ps, const std::string& prefix, int64_t c,
                             int64_t n_pts) {
        MixingParams p;
        p.n_pts = n_pts;
        p.p_out = n_pts;  // square spatial mixing
        p.wc = ps.add_xavier2d(prefix + ".wc", c, c * c);
        p.bc = ps.add_const(prefix + ".bc", {c * c}, T(0));
        p.ws = ps.add_xavier2d(prefix + ".ws", c, n_pts * p.p_out);
        p.bs = ps.add_const(prefix + ".bs", {n_pts * p.p_out}, T(0));
        p.ln1_g = ps.add_const(prefix + ".ln1.g", {c}, T(1));
        p.ln1_b = ps.add_const(prefix + ".ln1.b", {c}, T(0));
        p.ln2_g = ps.add_const(prefix + ".ln2.g", {p.p_out}, T(1));
        p.ln2_b = ps.add_const(prefix + ".ln2.b", {p.p_out}, T(0));
        p.wo = ps.add_xavier2d(prefix + ".wo", c * p.p_out, c);
        p.bo = ps.add_const(prefix + ".bo", {c}, T(0));
        return p;
    }
};

// Query-generated channel mixing then spatial mixing of the sampled feature
// set, flattened, projected back to c and added residually onto the query.
// q (n, c), sampled (n, n_pts, c) -> (n, c).
template <class T>
Tensor<T> adaptive_mixing(const Tensor<T>& q, const Tensor<T>& sampled, const MixingParams<T>& p) {
    int64_t n = q.dim(0), c = q.dim(1);
    if (sampled.dim(0) != n || sampled.dim(1) != p.n_pts || sampled.dim(2) != c)
        throw ShapeError("adaptive_mixing: sampled shape " + shape_str(sampled.shape()));
    auto mc = reshape(linear(q, p.wc, p.bc), {n, c, c});
    auto s1 = relu(layer_norm(matmul(sampled, mc), p.ln1_g, p.ln1_b, 2));  // (n, n_pts, c)
    auto ms = reshape(linear(q, p.ws, p.bs), {n, p.n_pts, p.p_out});
    auto s2 = relu(layer_norm(matmul(btranspose(s1), ms), p.ln2_g, p.ln2_b, 2));  // (n, c, p_out)
    auto flat = reshape(s2, {n, c * p.p_out});
    return add(q, linear(flat, p.wo, p.bo));
}

// ---------------------------------------------------------------------------
// Two-layer feedforward heads
// ---------------------------------------------------------------------------

template <class T>
struct FfnParams {
    Tensor<T> w1, b1, w2, b2;

    static FfnParams init(ParamStore<T>& ps, const std::string& prefix, int64_t in, int64_t hidden,
                          int64_t out) {
        FfnParams p;
        p.w1 = ps.add_xavier2d(prefix + ".w1", in, hidden);
        p.b1 = ps.add_const(prefix + ".b1", {hidden}, T(0));
        p.w2 = ps.add_xavier2d(prefix + ".w2", hidden, out);
        p.b2 = ps.add_const(prefix + ".b2", {out}, T(0));
        return p;
    }
};

template <class T>
Tensor<T> ffn_forward(const Tensor<T>& x, const FfnParams<T>& p) {
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace golo
