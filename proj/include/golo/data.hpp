#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "golo/common.hpp"
#include "golo/rng.hpp"

namespace golo {

// Shape classes: 1 = circle, 2 = square, 3 = triangle.
constexpr int kNumShapeClasses = 3;

inline const char* shape_class_name(int category_id) {
    switch (category_id) {
        case 1: return "circle";
        case 2: return "square";
        case 3: return "triangle";
        default: throw ContractError("unknown shape category " + std::to_string(category_id));
    }
}

struct SceneSpec {
    int64_t width = 64;
    int64_t height = 64;
    int min_objects = 1;
    int max_objects = 4;
    double min_size = 10.0;  // px
    double max_size = 28.0;
    double min_separation = 2.0;  // required gap between boxes, px
    int num_classes = kNumShapeClasses;
    int max_place_retries = 100;

    void validate() const {
        if (width < 32 || height < 32 || width % 32 != 0 || height % 32 != 0)
            throw ConfigError("scene size must be a multiple of 32 and >= 32");
        if (min_objects < 0 || max_objects < min_objects)
            throw ConfigError("bad object count range");
        if (min_size < 2.0 || max_size < min_size) throw ConfigError("bad size range");
        if (num_classes < 1 || num_classes > kNumShapeClasses)
            throw ConfigError("num_classes must be in [1, 3]");
    }
};

// Absolute-pixel, corner-origin annotation.
struct SceneAnnotation {
    double x = 0, y = 0, w = 0, h = 0;
    int category_id = 0;

    bool operator==(const SceneAnnotation&) const = default;
};

struct Scene {
    int64_t width = 0, height = 0;
    std::vector<float> pixels;  // (3, H, W), values k/255
    std::vector<SceneAnnotation> annotations;

    float at(int c, int64_t y, int64_t x) const {
        return pixels[size_t((c * height + y) * width + x)];
    }
};

// Planned shape placement; the annotation box is the exact geometric extent.
struct PlacedShape {
    int category_id = 0;       // 1 circle, 2 square, 3 triangle
    double x = 0, y = 0;       // top-left of the tight box
    double size = 0;           // box side (square side, circle diameter, triangle w=h)
    double color[3] = {0, 0, 0};
};

namespace detail {

inline bool boxes_separated(double ax, double ay, double as, double bx, double by, double bs,
                            double gap) {
    return ax + as + gap <= bx || bx + bs + gap <= ax || ay + as + gap <= by ||
           by + bs + gap <= ay;
}

}  // namespace detail

// Chooses object classes, sizes and non-overlapping positions. Fully
// determined by the seed; placement failures after bounded retries raise
// GenerationError naming the seed.
inline std::vector<PlacedShape> plan_scene(uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(seed, "plan"));
    int count = int(rng.uniform_int(spec.min_objects, spec.max_objects));
    const double base_colors[3][3] = {
        {0.85, 0.25, 0.25}, {0.25, 0.80, 0.30}, {0.30, 0.40, 0.90}};
    std::vector<PlacedShape> placed;
    for (int i = 0; i < count; ++i) {
        PlacedShape s;
        s.category_id = int(rng.uniform_int(1, spec.num_classes));
        s.size = rng.uniform(spec.min_size, std::min(spec.max_size,
                                                     double(std::min(spec.width, spec.height)) - 2));
        for (int ch = 0; ch < 3; ++ch)
            s.color[ch] = std::min(1.0, std::max(0.0, base_colors[s.category_id - 1][ch] +
                                                          rng.uniform(-0.08, 0.08)));
        bool ok = false;
        for (int attempt = 0; attempt < spec.max_place_retries; ++attempt) {
            s.x = rng.uniform(1.0, double(spec.width) - s.size - 1.0);
            s.y = rng.uniform(1.0, double(spec.height) - s.size - 1.0);
            ok = true;
            for (const auto& other : placed)
                if (!detail::boxes_separated(s.x, s.y, s.size, other.x, other.y, other.size,
                                             spec.min_separation)) {
                    ok = false;
                    break;
                }
            if (ok) break;
        }
        if (!ok)
            throw GenerationError("scene placement unsatisfiable after " +
                                  std::to_string(spec.max_place_retries) +
                                  " retries (seed " + std::to_string(seed) + ")");
        placed.push_back(s);
    }
    return placed;
}

namespace detail {

inline bool point_in_shape(const PlacedShape& s, double px, double py) {
    switch (s.category_id) {
        case 1: {  // circle inscribed in the tight box
            double r = s.size / 2;
            double cx = s.x + r, cy = s.y + r;
            return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
        }
        case 2:
            return px >= s.x && px < s.x + s.size && py >= s.y && py < s.y + s.size;
        case 3: {  // upright isosceles triangle: apex top-center, base at bottom
            double u = (py - s.y) / s.size;
            if (u < 0 || u > 1) return false;
            double cx = s.x + s.size / 2;
            double half = u * s.size / 2;
            return px >= cx - half && px <= cx + half;
        }
        default:
            return false;
    }
}

}  // namespace detail

// Renders the plan with 4x4 coverage anti-aliasing over a noise background
// and quantizes to 8-bit levels so PNG round trips are lossless.
inline Scene render_plan(const std::vector<PlacedShape>& plan, uint64_t seed,
                         const SceneSpec& spec) {
    Scene scene;
    scene.width = spec.width;
    scene.height = spec.height;
    scene.pixels.resize(size_t(3 * spec.width * spec.height));
    Rng rng(derive_seed(seed, "render"));
    // background noise
    for (int64_t y = 0; y < spec.height; ++y)
        for (int64_t x = 0; x < spec.width; ++x) {
            double g = rng.uniform(0.30, 0.45);
            for (int c = 0; c < 3; ++c)
                scene.pixels[size_t((c * spec.height + y) * spec.width + x)] =
                    float(g + rng.uniform(-0.02, 0.02));
        }
    const int ss = 4;  // subsamples per axis
    for (const auto& s : plan) {
        int64_t x0 = int64_t(std::floor(s.x)) - 1, x1 = int64_t(std::ceil(s.x + s.size)) + 1;
        int64_t y0 = int64_t(std::floor(s.y)) - 1, y1 = int64_t(std::ceil(s.y + s.size)) + 1;
        x0 = std::max<int64_t>(0, x0);
        y0 = std::max<int64_t>(0, y0);
        x1 = std::min(spec.width, x1);
        y1 = std::min(spec.height, y1);
        for (int64_t y = y0; y < y1; ++y)
            for (int64_t x = x0; x < x1; ++x) {
                int inside = 0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx)
                        if (detail::point_in_shape(s, double(x) + (sx + 0.5) / ss,
                                                   double(y) + (sy + 0.5) / ss))
                            ++inside;
                if (inside == 0) continue;
                double cov = double(inside) / (ss * ss);
                for (int c = 0; c < 3; ++c) {
                    auto& px = scene.pixels[size_t((c * spec.height + y) * spec.width + x)];
                    px = float(double(px) * (1 - cov) + s.color[c] * cov);
                }
            }
        scene.annotations.push_back({s.x, s.y, s.size, s.size, s.category_id});
    }
    // quantize to the 8-bit grid
    for (auto& v : scene.pixels) {
        int q = int(std::lround(std::min(1.0f, std::max(0.0f, v)) * 255.0f));
        v = float(q) / 255.0f;
    }
    return scene;
}

inline Scene generate_scene(uint64_t seed, const SceneSpec& spec) {
    return render_plan(plan_scene(seed, spec), seed, spec);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentPolicy {
    double hflip_prob = 0.5;
    double crop_prob = 0.0;
    double crop_min_frac = 0.6;
    double min_box_area_frac = 0.25;  // crop drops boxes below this fraction
    double scale_prob = 0.0;          // multi-scale resize
    int64_t scale_min_short = 48;
    int64_t scale_max_short = 80;
    int64_t max_long_side = 133;
    int64_t pad_multiple = 32;
};

inline Scene flip_horizontal(const Scene& s) {
    Scene out = s;
    for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < s.height; ++y)
            for (int64_t x = 0; x < s.width; ++x)
                out.pixels[size_t((c * s.height + y) * s.width + x)] =
                    s.pixels[size_t((c * s.height + y) * s.width + (s.width - 1 - x))];
    for (auto& a : out.annotations) a.x = double(s.width) - a.x - a.w;
    return out;
}

// Crops to [x0, x0+cw) x [y0, y0+ch). Boxes keeping less than
// min_area_frac of their area are dropped; the rest are clipped.
inline Scene crop_scene(const Scene& s, int64_t x0, int64_t y0, int64_t cw, int64_t ch,
                        double min_area_frac) {
    if (x0 < 0 || y0 < 0 || cw < 1 || ch < 1 || x0 + cw > s.width || y0 + ch > s.height)
        throw ContractError("crop window out of bounds");
    Scene out;
    out.width = cw;
    out.height = ch;
    out.pixels.resize(size_t(3 * cw * ch));
    for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < ch; ++y)
            for (int64_t x = 0; x < cw; ++x)
                out.pixels[size_t((c * ch + y) * cw + x)] =
                    s.pixels[size_t((c * s.height + (y + y0)) * s.width + (x + x0))];
    for (const auto& a : s.annotations) {
        double nx1 = std::max(a.x - double(x0), 0.0);
        double ny1 = std::max(a.y - double(y0), 0.0);
        double nx2 = std::min(a.x + a.w - double(x0), double(cw));
        double ny2 = std::min(a.y + a.h - double(y0), double(ch));
        double nw = nx2 - nx1, nh = ny2 - ny1;
        if (nw <= 0 || nh <= 0) continue;
        if (nw * nh < min_area_frac * a.w * a.h) continue;
        out.annotations.push_back({nx1, ny1, nw, nh, a.category_id});
    }
    return out;
}

// Bilinear image resize; box coordinates scale exactly by new/old.
inline Scene resize_scene(const Scene& s, int64_t nw, int64_t nh) {
    if (nw < 1 || nh < 1) throw ContractError("bad resize target");
    Scene out;
    out.width = nw;
    out.height = nh;
    out.pixels.resize(size_t(3 * nw * nh));
    double fx = double(s.width) / double(nw), fy = double(s.height) / double(nh);
    for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < nh; ++y)
            for (int64_t x = 0; x < nw; ++x) {
                double sx = (double(x) + 0.5) * fx - 0.5;
                double sy = (double(y) + 0.5) * fy - 0.5;
                int64_t ix = int64_t(std::floor(sx)), iy = int64_t(std::floor(sy));
                double ax = sx - double(ix), ay = sy - double(iy);
                auto tex = [&](int64_t yy, int64_t xx) {
                    yy = std::min(s.height - 1, std::max<int64_t>(0, yy));
                    xx = std::min(s.width - 1, std::max<int64_t>(0, xx));
                    return double(s.pixels[size_t((c * s.height + yy) * s.width + xx)]);
                };
                out.pixels[size_t((c * nh + y) * nw + x)] =
                    float((tex(iy, ix) * (1 - ax) + tex(iy, ix + 1) * ax) * (1 - ay) +
                          (tex(iy + 1, ix) * (1 - ax) + tex(iy + 1, ix + 1) * ax) * ay);
            }
    double rx = double(nw) / double(s.width), ry = double(nh) / double(s.height);
    for (const auto& a : s.annotations)
        out.annotations.push_back({a.x * rx, a.y * ry, a.w * rx, a.h * ry, a.category_id});
    return out;
}

// Zero-pads bottom/right to the next multiple; boxes are unchanged.
inline Scene pad_to_multiple(const Scene& s, int64_t multiple) {
    int64_t nw = ((s.width + multiple - 1) / multiple) * multiple;
    int64_t nh = ((s.height + multiple - 1) / multiple) * multiple;
    if (nw == s.width && nh == s.height) return s;
    Scene out;
    out.width = nw;
    out.height = nh;
    out.pixels.assign(size_t(3 * nw * nh), 0.f);
    for (int c = 0; c < 3; ++c)
        for (int64_t y = 0; y < s.height; ++y)
            for (int64_t x = 0; x < s.width; ++x)
                out.pixels[size_t((c * nh + y) * nw + x)] =
                    s.pixels[size_t((c * s.height + y) * s.width + x)];
    out.annotations = s.annotations;
    return out;
}

// Flip / crop / multi-scale resize, then pad back to the size multiple.
inline Scene augment(const Scene& scene, uint64_t seed, const AugmentPolicy& policy) {
    Rng rng(derive_seed(seed, "augment"));
    Scene s = scene;
    if (rng.bernoulli(policy.hflip_prob)) s = flip_horizontal(s);
    if (rng.bernoulli(policy.crop_prob)) {
        int64_t cw = int64_t(std::lround(double(s.width) * rng.uniform(policy.crop_min_frac, 1.0)));
        int64_t ch =
            int64_t(std::lround(double(s.height) * rng.uniform(policy.crop_min_frac, 1.0)));
        cw = std::max<int64_t>(1, std::min(cw, s.width));
        ch = std::max<int64_t>(1, std::min(ch, s.height));
        int64_t x0 = rng.uniform_int(0, s.width - cw);
        int64_t y0 = rng.uniform_int(0, s.height - ch);
        s = crop_scene(s, x0, y0, cw, ch, policy.min_box_area_frac);
    }
    if (rng.bernoulli(policy.scale_prob)) {
        int64_t short_side = std::min(s.width, s.height);
        int64_t target = rng.uniform_int(policy.scale_min_short, policy.scale_max_short);
        double f = double(target) / double(short_side);
        if (double(std::max(s.width, s.height)) * f > double(policy.max_long_side))
            f = double(policy.max_long_side) / double(std::max(s.width, s.height));
        int64_t nw = std::max<int64_t>(1, int64_t(std::lround(double(s.width) * f)));
        int64_t nh = std::max<int64_t>(1, int64_t(std::lround(double(s.height) * f)));
        s = resize_scene(s, nw, nh);
    }
    return pad_to_multiple(s, policy.pad_multiple);
}

}  // namespace golo
