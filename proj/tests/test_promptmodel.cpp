#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fednull/error.hpp"
#include "fednull/promptmodel.hpp"
#include "support.hpp"

using namespace fednull;
using fednull::testing::random_image;
using fednull::testing::random_matrix;

namespace {

ModelDims small_dims() {
    ModelDims d;
    d.image_size = 8;
    d.patch_size = 4;
    d.embed_dim = 6;
    d.layers = 2;
    d.prompt_tokens = 3;
    return d;
}

PromptSet random_prompts(const ModelDims& dims, Rng& rng, double scale) {
    PromptSet p = PromptSet::zeros(dims);
    for (auto& m : p.layers) m = random_matrix(m.rows(), m.cols(), rng, scale);
    return p;
}

// d = p², patch_embed = I, token_mix = [0 | I], channel_mix = I and a head that
// undoes patchify, so the network is the identity on images.
Backbone identity_backbone(const ModelDims& dims) {
    Backbone bb = Backbone::zeros(dims, Activation::Identity);
    const std::size_t n = dims.tokens(), l = dims.prompt_tokens, d = dims.embed_dim;
    bb.patch_embed = Matrix::identity(d);
    for (std::size_t i = 0; i < dims.layers; ++i) {
        for (std::size_t t = 0; t < n; ++t) bb.token_mix[i](t, l + t) = 1.0;
        bb.channel_mix[i] = Matrix::identity(d);
    }
    const std::size_t grid = dims.image_size / dims.patch_size;
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < d; ++k) {
            const std::size_t row = (t / grid) * dims.patch_size + k / dims.patch_size;
            const std::size_t col = (t % grid) * dims.patch_size + k % dims.patch_size;
            bb.head(t * d + k, row * dims.image_size + col) = 1.0;
        }
    return bb;
}

double relative_error(double analytic, double numeric) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / scale;
}

Sample make_sample(const ModelDims& dims, Rng& rng) {
    Image x = random_image(dims.image_size, dims.image_size, rng);
    Image y = random_image(dims.image_size, dims.image_size, rng);
    for (double& v : y.pixels().values()) v = 3.0 * v - 1.0;
    return {std::move(x), std::move(y)};
}

}  // namespace

TEST_CASE("model dims arithmetic") {
    const ModelDims desk;
    CHECK(desk.tokens() == 16);
    CHECK(desk.patch_pixels() == 16);
    CHECK(desk.prompt_scalars() == 1024);
    CHECK(desk.backbone_scalars() == 137216);
    CHECK(Backbone::random(desk, 1).scalar_count() == 137216);
    CHECK(PromptSet::zeros(desk).flattened_size() == 1024);

    ModelDims bad = desk;
    bad.image_size = 12;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = desk;
    bad.patch_size = 32;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("patchify and unpatchify are inverse") {
    Rng rng(1);
    const Image img = random_image(16, 16, rng);
    const Matrix p = patchify(img, 4);
    CHECK(p.rows() == 16);
    CHECK(p.cols() == 16);
    CHECK(p(1, 0) == img(0, 4));
    CHECK(p(4, 5) == img(5, 1));
    CHECK(unpatchify(p, 16, 4) == img);
    CHECK_THROWS_AS(unpatchify(Matrix(3, 16), 16, 4), Error);
}

TEST_CASE("forward examples") {
    const ModelDims dims;
    const Backbone bb = Backbone::random(dims, 3);
    const Image out = forward(Image(16, 16), PromptSet::zeros(dims), bb);
    CHECK(max_abs(out.pixels()) == 0.0);
    CHECK(out.height() == 16);
    CHECK(out.width() == 16);

    ModelDims id = dims;
    id.embed_dim = 16;
    Rng rng(2);
    const Image x = random_image(16, 16, rng);
    const Backbone ibb = identity_backbone(id);
    CHECK(max_abs_diff(forward(x, random_prompts(id, rng, 1.0), ibb).pixels(), x.pixels()) < 1e-15);
}

TEST_CASE("forward shape errors") {
    const ModelDims dims;
    const Backbone bb = Backbone::random(dims, 3);
    CHECK_THROWS_AS(forward(Image(8, 8), PromptSet::zeros(dims), bb), Error);
    PromptSet short_set = PromptSet::zeros(dims);
    short_set.layers.pop_back();
    CHECK_THROWS_AS(forward(Image(16, 16), short_set, bb), Error);
    PromptSet wrong = PromptSet::zeros(dims);
    wrong.layers[1] = Matrix(7, 32);
    CHECK_THROWS_AS(forward(Image(16, 16), wrong, bb), Error);
}

TEST_CASE("forward golden snapshot for the seed-0 backbone") {
    const ModelDims dims;
    const Backbone bb = Backbone::random(dims, 0);
    Image x(16, 16);
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) x(r, c) = std::sin(0.3 * static_cast<double>(r) + 0.7 * static_cast<double>(c));
    PromptSet p = PromptSet::zeros(dims);
    for (std::size_t i = 0; i < dims.layers; ++i)
        for (std::size_t t = 0; t < dims.prompt_tokens; ++t)
            for (std::size_t k = 0; k < dims.embed_dim; ++k)
                p.layers[i](t, k) = 0.01 * static_cast<double>((i + 1) * (t + 2)) - 0.002 * static_cast<double>(k);
    const Image out = forward(x, p, bb);
    double sum = 0.0, sq = 0.0;
    for (double v : out.pixels().values()) sum += v, sq += v * v;
    CHECK(sum == doctest::Approx(1.5241525687031596).epsilon(1e-12));
    CHECK(sq == doctest::Approx(13.840030652294102).epsilon(1e-12));
    CHECK(out(0, 0) == doctest::Approx(-0.30238860664592482).epsilon(1e-12));
    CHECK(out(7, 11) == doctest::Approx(0.14731167484016061).epsilon(1e-12));
}

TEST_CASE("loss_l1 examples") {
    Rng rng(4);
    const Image t = random_image(4, 4, rng);
    CHECK(loss_l1(t, t) == 0.0);
    CHECK(loss_l1(Image(t.pixels() + Matrix(4, 4, 0.5)), t) == doctest::Approx(0.5).epsilon(1e-15));
    Image half = t;
    for (std::size_t i = 0; i < 8; ++i) half.pixels().values()[i] += 1.0;
    CHECK(loss_l1(half, t) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(loss_l1(Image(4, 4), Image(4, 8)), Error);
}

TEST_CASE("grad_prompts matches central finite differences") {
    constexpr double h = 1e-5;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ModelDims dims;
        Rng rng(100 + seed);
        const Backbone bb = Backbone::random(dims, seed);
        const PromptSet prompts = random_prompts(dims, rng, 0.3);
        const std::vector<Sample> batch{make_sample(dims, rng), make_sample(dims, rng)};
        const GradientSet g = grad_prompts(batch, prompts, bb);

        std::uniform_int_distribution<std::size_t> layer(0, dims.layers - 1), tok(0, dims.prompt_tokens - 1),
            ch(0, dims.embed_dim - 1);
        for (int k = 0; k < 20; ++k) {
            const std::size_t i = layer(rng), t = tok(rng), c = ch(rng);
            PromptSet plus = prompts, minus = prompts;
            plus.layers[i](t, c) += h;
            minus.layers[i](t, c) -= h;
            const double fd = (mean_loss(batch, plus, bb) - mean_loss(batch, minus, bb)) / (2 * h);
            CHECK(relative_error(g.layers[i](t, c), fd) < 1e-5);
        }
    }
}

TEST_CASE("backbone gradients match central finite differences") {
    constexpr double h = 1e-5;
    const ModelDims dims = small_dims();
    Rng rng(7);
    Backbone bb = Backbone::random(dims, 9);
    const PromptSet prompts = random_prompts(dims, rng, 0.3);
    const std::vector<Sample> batch{make_sample(dims, rng), make_sample(dims, rng)};
    std::vector<const Sample*> ptrs{&batch[0], &batch[1]};
    const LossAndGradients lg = compute_gradients(ptrs, prompts, bb, true);
    REQUIRE(lg.has_backbone);
    CHECK(lg.loss == doctest::Approx(mean_loss(batch, prompts, bb)).epsilon(1e-14));

    const auto params = bb.parameters();
    const auto grads = lg.backbone.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix& m = *params[p];
        std::uniform_int_distribution<std::size_t> idx(0, m.size() - 1);
        for (int k = 0; k < 4; ++k) {
            const std::size_t j = idx(rng);
            const double orig = m.values()[j];
            m.values()[j] = orig + h;
            const double up = mean_loss(batch, prompts, bb);
            m.values()[j] = orig - h;
            const double down = mean_loss(batch, prompts, bb);
            m.values()[j] = orig;
            CHECK(relative_error(grads[p]->values()[j], (up - down) / (2 * h)) < 1e-5);
        }
    }
}

TEST_CASE("grad_prompts examples") {
    const ModelDims dims = small_dims();
    Rng rng(11);
    const Backbone bb = Backbone::random(dims, 5);
    const PromptSet prompts = random_prompts(dims, rng, 0.2);

    const Image x = random_image(8, 8, rng);
    const std::vector<Sample> exact{{x, forward(x, prompts, bb)}};
    const GradientSet zero = grad_prompts(exact, prompts, bb);
    for (const auto& m : zero.layers) CHECK(max_abs(m) == 0.0);

    const Sample s = make_sample(dims, rng);
    const std::vector<Sample> one{s}, two{s, s};
    const GradientSet g1 = grad_prompts(one, prompts, bb);
    const GradientSet g2 = grad_prompts(two, prompts, bb);
    for (std::size_t i = 0; i < dims.layers; ++i) CHECK(max_abs_diff(g1.layers[i], g2.layers[i]) < 1e-15);

    CHECK_THROWS_AS(grad_prompts(std::span<const Sample>{}, prompts, bb), Error);
}

TEST_CASE("forward is affine in prompts under the identity activation") {
    const ModelDims dims = small_dims();
    Rng rng(12);
    const Backbone bb = Backbone::random(dims, 6, Activation::Identity);
    const Image x = random_image(8, 8, rng);
    const PromptSet p1 = random_prompts(dims, rng, 1.0), p2 = random_prompts(dims, rng, 1.0);
    const double a = 0.7, b = -1.3;
    PromptSet mix = p1;
    mix *= a;
    PromptSet scaled2 = p2;
    scaled2 *= b;
    mix += scaled2;

    const Matrix base = forward(x, PromptSet::zeros(dims), bb).pixels();
    const Matrix f1 = forward(x, p1, bb).pixels() - base;
    const Matrix f2 = forward(x, p2, bb).pixels() - base;
    const Matrix fm = forward(x, mix, bb).pixels() - base;
    CHECK(max_abs_diff(fm, f1 * a + f2 * b) < 1e-10);
}

TEST_CASE("pretrain_backbone") {
    const ModelDims dims = small_dims();
    Rng rng(13);
    std::vector<Sample> source;
    for (int i = 0; i < 6; ++i) source.push_back(make_sample(dims, rng));

    CHECK(pretrain_backbone(source, dims, 0, 0.1, 21) == Backbone::random(dims, 21));

    const Backbone init = Backbone::random(dims, 21);
    const Backbone trained = pretrain_backbone(source, dims, 40, 0.1, 21);
    const PromptSet zero = PromptSet::zeros(dims);
    CHECK(mean_loss(source, zero, trained) <= mean_loss(source, zero, init));
    CHECK(trained == pretrain_backbone(source, dims, 40, 0.1, 21));

    CHECK_THROWS_AS(pretrain_backbone({}, dims, 1, 0.1, 1), Error);
    try {
        pretrain_backbone(source, dims, 50, 1e300, 21);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NumericalFailure);
    }
}

TEST_CASE("checkpoint files round-trip") {
    const ModelDims dims = small_dims();
    Rng rng(14);
    const PromptSet p = random_prompts(dims, rng, 1.0);
    const Backbone bb = Backbone::random(dims, 3, Activation::Identity);
    const auto dir = std::filesystem::temp_directory_path() / "fednull_test_promptmodel";
    std::filesystem::create_directories(dir);

    save_prompts(dir / "p.fnpm", p);
    save_backbone(dir / "b.fnpm", bb);
    CHECK(load_prompts(dir / "p.fnpm") == p);
    CHECK(load_backbone(dir / "b.fnpm") == bb);

    auto expect_io = [](auto&& fn) {
        try {
            fn();
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::IoError);
        }
    };
    expect_io([&] { load_prompts(dir / "b.fnpm"); });
    expect_io([&] { load_backbone(dir / "missing.fnpm"); });
    {
        std::ofstream bad(dir / "bad.fnpm", std::ios::binary);
        bad << "XXXX";
    }
    expect_io([&] { load_prompts(dir / "bad.fnpm"); });
    std::filesystem::resize_file(dir / "p.fnpm", 40);
    expect_io([&] { load_prompts(dir / "p.fnpm"); });
    std::filesystem::remove_all(dir);
}
