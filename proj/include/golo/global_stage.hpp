#pragma once

#include "golo/decoder_common.hpp"

namespace golo {

// Learnable meta vectors plus per-query combination weights. Queries are
// linear combinations of the meta vectors: q = alpha x meta.
template <class T>
struct MetaBank {
    Tensor<T> meta;   // (m, c)
    Tensor<T> alpha;  // (n, m)

    static MetaBank init(ParamStore<T>& ps, int64_t n, int64_t m, int64_t c) {
        if (n < 1 || m < 1) throw ConfigError("meta bank needs n >= 1 and m >= 1");
        MetaBank b;
        b.meta = ps.add_xavier("global.meta", {m, c}, m, c);
        b.alpha = ps.add_xavier("global.alpha", {n, m}, n, m);
        return b;
    }
};

template <class T>
Tensor<T> meta_query_init(const MetaBank<T>& bank) {
    return matmul(bank.alpha, bank.meta);
}

// Query content vectors plus per-query box state in normalized (cx,cy,w,h).
template <class T>
struct QuerySet {
    Tensor<T> q;      // (n, c)
    Tensor<T> boxes;  // (n, 4)
};

// Fused multi-scale descriptor: one (c, k_mff) block per P5 cell.
template <class T>
struct MffFeature {
    Tensor<T> x;  // (h_s, w_s, c, k_mff)
    int64_t h_s = 0, w_s = 0;
};

// Per-cell gather layout: the P5 cell itself, then the aligned 2x2 P4 block,
// 4x4 P3 block, and 8x8 P2 block - 1+4+16+64 = 85 entries.
constexpr int64_t kMffGatherWidth = 85;

struct MffIndex {
    int level;  // 0..3 for P2..P5
    int64_t y, x;
};

// Index map for one P5 cell (i, j); used by the gather op and by tests that
// verify the tiling of the aligned regions.
inline std::vector<MffIndex> mff_gather_indices(int64_t i, int64_t j) {
    std::vector<MffIndex> out;
    out.reserve(size_t(kMffGatherWidth));
    out.push_back({3, i, j});
    for (int level = 2; level >= 0; --level) {
        int64_t f = int64_t(1) << (3 - level);  // 2, 4, 8
        for (int64_t dy = 0; dy < f; ++dy)
            for (int64_t dx = 0; dx < f; ++dx) out.push_back({level, i * f + dy, j * f + dx});
    }
    return out;
}

namespace detail {

// Gathers aligned features from all levels into (h_s*w_s, c, 85).
template <class T>
Tensor<T> mff_gather(const FeaturePyramid<T>& pyr) {
    int64_t h_s = pyr.levels[3].dim(1), w_s = pyr.levels[3].dim(2);
    int64_t c = pyr.channels;
    bool rg = false;
    for (const auto& lv : pyr.levels) rg = rg || lv.requires_grad();
    auto out = make_out<T>({h_s * w_s, c, kMffGatherWidth}, rg);
    for (int64_t i = 0; i < h_s; ++i)
        for (int64_t j = 0; j < w_s; ++j) {
            auto idx = mff_gather_indices(i, j);
            int64_t cell = i * w_s + j;
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t e = 0; e < kMffGatherWidth; ++e) {
                    const auto& lv = pyr.levels[size_t(idx[size_t(e)].level)];
                    out.data()[size_t((cell * c + ch) * kMffGatherWidth + e)] =
                        lv.data()[size_t((ch * lv.dim(1) + idx[size_t(e)].y) * lv.dim(2) +
                                         idx[size_t(e)].x)];
                }
        }
    if (taping(out)) {
        std::array<std::shared_ptr<Node<T>>, 4> lvn;
        std::array<int64_t, 4> Hs, Ws;
        for (int l = 0; l < 4; ++l) {
            lvn[size_t(l)] = pyr.levels[size_t(l)].node();
            Hs[size_t(l)] = pyr.levels[size_t(l)].dim(1);
            Ws[size_t(l)] = pyr.levels[size_t(l)].dim(2);
        }
        auto on = out.node();
        Tape<T>::current()->record(on, [lvn, on, Hs, Ws, h_s, w_s, c] {
            on->ensure_grad();
            for (int l = 0; l < 4; ++l)
                if (lvn[size_t(l)]->requires_grad) lvn[size_t(l)]->ensure_grad();
            for (int64_t i = 0; i < h_s; ++i)
                for (int64_t j = 0; j < w_s; ++j) {
                    auto idx = mff_gather_indices(i, j);
                    int64_t cell = i * w_s + j;
                    for (int64_t ch = 0; ch < c; ++ch)
                        for (int64_t e = 0; e < kMffGatherWidth; ++e) {
                            auto& lv = lvn[size_t(idx[size_t(e)].level)];
                            if (!lv->requires_grad) continue;
                            int64_t H = Hs[size_t(idx[size_t(e)].level)];
                            int64_t W = Ws[size_t(idx[size_t(e)].level)];
                            (void)H;
                            lv->grad[size_t((ch * Hs[size_t(idx[size_t(e)].level)] +
                                             idx[size_t(e)].y) * W + idx[size_t(e)].x)] +=
                                on->grad[size_t((cell * c + ch) * kMffGatherWidth + e)];
                        }
                }
        });
    }
    return out;
}

}  // namespace detail

template <class T>
struct MffParams {
    Tensor<T> w1, b1;  // 85 -> 2*k_mff
    Tensor<T> w2, b2;  // 2*k_mff -> k_mff
    int64_t k_mff = 0;

    static MffParams init(ParamStore<T>& ps, int64_t k_mff) {
        MffParams p;
        p.k_mff = k_mff;
        p.w1 = ps.add_xavier2d("global.mff.w1", kMffGatherWidth, 2 * k_mff);
        p.b1 = ps.add_const("global.mff.b1", {2 * k_mff}, T(0));
        p.w2 = ps.add_xavier2d("global.mff.w2", 2 * k_mff, k_mff);
        p.b2 = ps.add_const("global.mff.b2", {k_mff}, T(0));
        return p;
    }
};

// Per P5 cell: gather the 85 aligned entries per channel, then expand/reduce
// along that axis with two linear layers to a (c, k_mff) block.
template <class T>
MffFeature<T> multi_scale_feature_fusion(const FeaturePyramid<T>& pyr, const MffParams<T>& p) {
    pyr.validate();
    int64_t h_s = pyr.levels[3].dim(1), w_s = pyr.levels[3].dim(2);
    int64_t c = pyr.channels;
    auto cat = detail::mff_gather(pyr);  // (h_s*w_s, c, 85)
    auto hidden = relu(linear(cat, p.w1, p.b1));
    auto reduced = linear(hidden, p.w2, p.b2);  // (h_s*w_s, c, k_mff)
    MffFeature<T> f;
    f.h_s = h_s;
    f.w_s = w_s;
    f.x = reshape(reduced, {h_s, w_s, c, p.k_mff});
    return f;
}

template <class T>
struct KvParams {
    Tensor<T> w, b;  // k_mff -> 2

    static KvParams init(ParamStore<T>& ps, int64_t k_mff) {
        KvParams p;
        p.w = ps.add_xavier2d("global.kv.w", k_mff, 2);
        p.b = ps.add_const("global.kv.b", {2}, T(0));
        return p;
    }
};

// Linear map k_mff -> 2 on the last axis; the two slices become K and V,
// each flattened to (h_s*w_s, c).
template <class T>
std::pair<Tensor<T>, Tensor<T>> mff_to_kv(const MffFeature<T>& f, const KvParams<T>& p) {
    int64_t cells = f.h_s * f.w_s;
    int64_t c = f.x.dim(2);
    auto y = linear(f.x, p.w, p.b);  // (h_s, w_s, c, 2)
    auto K = reshape(select_last(y, 0), {cells, c});
    auto V = reshape(select_last(y, 1), {cells, c});
    return {K, V};
}

// Class-agnostic stage outputs: one foreground logit and one box per query,
// plus the step-1 box / step-2 logit intermediates for the auxiliary losses.
template <class T>
struct GlobalOutput {
    Tensor<T> fg_logit;   // (n,)
    Tensor<T> boxes;      // (n, 4)
    Tensor<T> aux_box;    // (n, 4), decoded after cross-attention (step 1)
    Tensor<T> aux_logit;  // (n,), decoded after self-attention (step 2)
};

template <class T>
struct GlobalStageParams {
    MetaBank<T> bank;
    MffParams<T> mff;
    KvParams<T> kv;
    AttentionParams<T> cross;
    AttentionParams<T> self;
    PointPredictParams<T> points;
    MixingParams<T> mixing;
    FfnParams<T> box_head;  // c -> c -> 4
    FfnParams<T> cls_head;  // c -> c -> 1
    // when set, replaces the meta-based initialization by a plain learnable
    // query matrix (ablation)
    Tensor<T> plain_queries;

    static GlobalStageParams init(ParamStore<T>& ps, int64_t n, int64_t m, int64_t c,
                                  int64_t k_mff, int64_t n_pts, int64_t heads,
                                  bool ablate_meta_init) {
        GlobalStageParams p;
        if (ablate_meta_init)
            p.plain_queries = ps.add_xavier("global.plain_queries", {n, c}, n, c);
        else
            p.bank = MetaBank<T>::init(ps, n, m, c);
        p.mff = MffParams<T>::init(ps, k_mff);
        p.kv = KvParams<T>::init(ps, k_mff);
        p.cross = AttentionParams<T>::init(ps, "global.cross", c, heads);
        p.self = AttentionParams<T>::init(ps, "global.self", c, heads);
        p.points = PointPredictParams<T>::init(ps, "global.points", c, n_pts);
        p.mixing = MixingParams<T>::init(ps, "global.mixing", c, n_pts);
        p.box_head = FfnParams<T>::init(ps, "global.box_head", c, c, 4);
        p.cls_head = FfnParams<T>::init(ps, "global.cls_head", c, c, 1);
        return p;
    }
};

// FFN heads shared across the stage's steps: boxes through sigmoid, one
// foreground logit per query.
template <class T>
Tensor<T> global_box_decode(const Tensor<T>& q, const GlobalStageParams<T>& p) {
    return sigmoid(ffn_forward(q, p.box_head));
}

template <class T>
Tensor<T> global_fg_logit(const Tensor<T>& q, const GlobalStageParams<T>& p) {
    return reshape(ffn_forward(q, p.cls_head), {q.dim(0)});
}

struct GlobalStageOptions {
    bool ablate_mff = false;  // zero-information K/V for cross-attention
};

// Stage 1: meta init -> MFF -> cross-attention -> self-attention ->
// point sampling + adaptive mixing -> heads.
template <class T>
std::pair<QuerySet<T>, GlobalOutput<T>> run_global_stage(const FeaturePyramid<T>& pyr,
                                                         const GlobalStageParams<T>& p,
                                                         const GlobalStageOptions& opt = {}) {
    Tensor<T> q0 = p.plain_queries.defined() ? p.plain_queries : meta_query_init(p.bank);
    int64_t c = q0.dim(1);

    Tensor<T> K, V;
    if (opt.ablate_mff) {
        int64_t cells = pyr.levels[3].dim(1) * pyr.levels[3].dim(2);
        K = Tensor<T>::zeros({cells, c});
        V = Tensor<T>::zeros({cells, c});
    } else {
        auto f = multi_scale_feature_fusion(pyr, p.mff);
        std::tie(K, V) = mff_to_kv(f, p.kv);
    }

    auto q1 = attention_block(q0, K, V, p.cross);  // step 1
    auto q2 = self_attention_block(q1, p.self);    // step 2

    auto pts = predict_sampling_points(q2, p.points, SamplingMode::kAbsolute);
    auto sampled = bidirectional_sample(pyr, pts);
    auto q3 = adaptive_mixing(q2, sampled, p.mixing);  // step 3

    GlobalOutput<T> out;
    out.aux_box = global_box_decode(q1, p);
    out.aux_logit = global_fg_logit(q2, p);
    out.boxes = global_box_decode(q3, p);
    out.fg_logit = global_fg_logit(q3, p);

    QuerySet<T> qs;
    qs.q = q3;
    qs.boxes = out.boxes;
    return {qs, out};
}

}  // namespace golo
