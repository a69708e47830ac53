#include "golo/backbone.hpp"

#include <gtest/gtest.h>

#include "golo/rng.hpp"

using namespace golo;

namespace {

template <class T>
Image<T> random_image(int64_t H, int64_t W, uint64_t seed) {
    Rng rng(seed);
    auto t = Tensor<T>::zeros({3, H, W});
    for (auto& v : t.data()) v = T(rng.uniform());
    return Image<T>{t};
}

}  // namespace

TEST(Backbone, PyramidShapes64) {
    ParamStore<float> ps(1);
    int64_t c = 64;
    auto params = BackboneParams<float>::init(ps, c);
    auto pyr = forward_pyramid(random_image<float>(64, 64, 2), params, c);
    EXPECT_EQ(pyr.levels[0].shape(), (Shape{c, 16, 16}));
    EXPECT_EQ(pyr.levels[1].shape(), (Shape{c, 8, 8}));
    EXPECT_EQ(pyr.levels[2].shape(), (Shape{c, 4, 4}));
    EXPECT_EQ(pyr.levels[3].shape(), (Shape{c, 2, 2}));
    for (const auto& lv : pyr.levels)
        for (float v : lv.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backbone, NonSquareAndErrors) {
    ParamStore<float> ps(1);
    auto params = BackboneParams<float>::init(ps, 16);
    auto pyr = forward_pyramid(random_image<float>(96, 64, 3), params, 16);
    EXPECT_EQ(pyr.levels[3].shape(), (Shape{16, 3, 2}));

    EXPECT_THROW(forward_pyramid(random_image<float>(50, 50, 4), params, 16), ContractError);
    EXPECT_THROW(forward_pyramid(random_image<float>(64, 31, 4), params, 16), ContractError);
}

TEST(Backbone, ShapeContractPropertyOverRandomSizes) {
    ParamStore<float> ps(9);
    int64_t c = 8;
    auto params = BackboneParams<float>::init(ps, c);
    Rng rng(77);
    for (int rep = 0; rep < 6; ++rep) {
        int64_t H = 32 * rng.uniform_int(1, 5);
        int64_t W = 32 * rng.uniform_int(1, 5);
        auto pyr = forward_pyramid(random_image<float>(H, W, uint64_t(rep)), params, c);
        for (int j = 0; j < 4; ++j) {
            int64_t s = kPyramidStrides[size_t(j)];
            EXPECT_EQ(pyr.levels[size_t(j)].shape(), (Shape{c, H / s, W / s}));
        }
    }
}

TEST(Backbone, LevelZCoordinates) {
    for (int j = 0; j < 4; ++j)
        EXPECT_DOUBLE_EQ(level_z(j), std::log2(double(kPyramidStrides[size_t(j)])));
    EXPECT_DOUBLE_EQ(level_z(0), 2.0);
    EXPECT_DOUBLE_EQ(level_z(3), 5.0);
}

TEST(Backbone, GradientsReachAllParameters) {
    ParamStore<double> ps(5);
    int64_t c = 8;
    auto params = BackboneParams<double>::init(ps, c);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto pyr = forward_pyramid(random_image<double>(32, 32, 8), params, c);
    Tensor<double> loss;
    for (int j = 0; j < 4; ++j) {
        auto s = sum_all(mul(pyr.levels[size_t(j)], pyr.levels[size_t(j)]));
        loss = j == 0 ? s : add(loss, s);
    }
    ps.zero_grad();
    tape.backward(loss);
    for (auto& [name, t] : ps.entries()) {
        double norm = 0;
        for (double g : t.grad()) norm += g * g;
        EXPECT_GT(norm, 0.0) << "no gradient reached " << name;
    }
}
