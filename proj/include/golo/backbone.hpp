#pragma once

#include <array>

#include "golo/params.hpp"
#include "golo/tensor.hpp"

namespace golo {

constexpr std::array<int64_t, 4> kPyramidStrides = {4, 8, 16, 32};

// z-axis coordinate of pyramid level j: log2 of its stride, i.e. 2..5.
inline double level_z(int level) { return double(2 + level); }

// Normalized input image. Spatial dims must be multiples of 32 so the
// pyramid halving stays exact down to P5.
template <class T>
struct Image {
    Tensor<T> data;  // (3, H, W), values in [0,1]

    int64_t height() const { return data.dim(1); }
    int64_t width() const { return data.dim(2); }

    void validate() const {
        if (data.ndim() != 3 || data.dim(0) != 3)
            throw ShapeError("image must be (3,H,W), got " + shape_str(data.shape()));
        int64_t H = height(), W = width();
        if (H < 32 || W < 32 || H % 32 != 0 || W % 32 != 0)
            throw ContractError("image dims must be multiples of 32 and >= 32, got " +
                                std::to_string(H) + "x" + std::to_string(W));
    }
};

// Four feature maps P2..P5 at strides 4/8/16/32 sharing channel count c.
template <class T>
struct FeaturePyramid {
    std::array<Tensor<T>, 4> levels;  // each (c, H/stride, W/stride)
    int64_t channels = 0;

    const Tensor<T>& p(int j) const { return levels[size_t(j - 2)]; }

    void validate() const {
        for (int j = 0; j < 4; ++j) {
            const auto& t = levels[size_t(j)];
            if (t.ndim() != 3 || t.dim(0) != channels)
                throw ShapeError("pyramid level P" + std::to_string(j + 2) + " has shape " +
                                 shape_str(t.shape()));
            if (j > 0 && (levels[size_t(j - 1)].dim(1) != 2 * t.dim(1) ||
                          levels[size_t(j - 1)].dim(2) != 2 * t.dim(2)))
                throw ShapeError("pyramid level sizes must halve exactly");
        }
    }
};

// Small conv stack standing in for a full backbone: a stride-2 stem plus one
// stride-2 conv per stage, then 1x1 lateral projections to a shared width
// and top-down addition. Nine conv layers total.
template <class T>
struct BackboneParams {
    Tensor<T> stem_k, stem_b;
    std::array<Tensor<T>, 4> stage_k, stage_b;  // C2..C5
    std::array<Tensor<T>, 4> lat_k, lat_b;      // 1x1 laterals to c channels

    static BackboneParams init(ParamStore<T>& ps, int64_t c) {
        if (c < 4) throw ContractError("pyramid channel count must be >= 4");
        BackboneParams p;
        const int64_t w_stem = c / 4;
        const std::array<int64_t, 4> w = {c / 4, c / 2, c / 2, c};
        auto conv = [&](const std::string& name, int64_t cin, int64_t cout, int64_t k) {
            return ps.add_xavier("backbone." + name + ".k", {cout, cin, k, k}, cin * k * k,
                                 cout * k * k);
        };
        p.stem_k = conv("stem", 3, w_stem, 3);
        p.stem_b = ps.add_const("backbone.stem.b", {w_stem}, T(0));
        int64_t prev = w_stem;
        for (int j = 0; j < 4; ++j) {
            p.stage_k[size_t(j)] = conv("c" + std::to_string(j + 2), prev, w[size_t(j)], 3);
            p.stage_b[size_t(j)] =
                ps.add_const("backbone.c" + std::to_string(j + 2) + ".b", {w[size_t(j)]}, T(0));
            p.lat_k[size_t(j)] = conv("lat" + std::to_string(j + 2), w[size_t(j)], c, 1);
            p.lat_b[size_t(j)] =
                ps.add_const("backbone.lat" + std::to_string(j + 2) + ".b", {c}, T(0));
            prev = w[size_t(j)];
        }
        return p;
    }
};

template <class T>
FeaturePyramid<T> forward_pyramid(const Image<T>& image, const BackboneParams<T>& params,
                                  int64_t channels) {
    image.validate();
    auto stem = relu(conv2d(image.data, params.stem_k, params.stem_b, 2, 1));  // stride 2
    std::array<Tensor<T>, 4> stages;
    Tensor<T> x = stem;
    for (int j = 0; j < 4; ++j) {
        x = relu(conv2d(x, params.stage_k[size_t(j)], params.stage_b[size_t(j)], 2, 1));
        stages[size_t(j)] = x;
    }
    FeaturePyramid<T> pyr;
    pyr.channels = channels;
    // top-down: P5 first, then add upsampled coarser level onto each lateral
    Tensor<T> top = conv2d(stages[3], params.lat_k[3], params.lat_b[3], 1, 0);
    pyr.levels[3] = top;
    for (int j = 2; j >= 0; --j) {
        auto lat = conv2d(stages[size_t(j)], params.lat_k[size_t(j)], params.lat_b[size_t(j)], 1, 0);
        top = add(lat, upsample2x(top));
        pyr.levels[size_t(j)] = top;
    }
    pyr.validate();
    return pyr;
}

}  // namespace golo
