#include <doctest.h>

#include <cmath>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "fednull/error.hpp"
#include "fednull/federation.hpp"
#include "fednull/synth.hpp"
#include "support.hpp"

using namespace fednull;
using fednull::testing::random_matrix;
using Big = boost::multiprecision::cpp_bin_float_50;

namespace {

ModelDims tiny_dims() {
    ModelDims d;
    d.image_size = 16;
    d.patch_size = 4;
    d.embed_dim = 8;
    d.layers = 2;
    d.prompt_tokens = 4;
    return d;
}

std::vector<ClientShard> tiny_clients(std::size_t k, std::size_t samples = 10) {
    std::vector<ClientShard> out;
    const double acc[] = {2.0, 3.0, 4.0};
    for (std::size_t i = 0; i < k; ++i) {
        const ClientProtocol proto{acc[i % 3], 0.01 * static_cast<double>(i), 1.0 + 0.1 * static_cast<double>(i),
                                   0.05 * static_cast<double>(i)};
        out.push_back(synth_shard(static_cast<int>(i), proto, samples + i, 0.7, 0.25, 16, 1000 + i));
    }
    return out;
}

FederationConfig tiny_config() {
    FederationConfig c;
    c.rounds = 3;
    c.local_epochs = 2;
    c.learning_rate = 0.2;
    c.batch_size = 3;
    c.gamma_percent = 75;
    return c;
}

PromptSet random_prompt_set(const ModelDims& dims, Rng& rng) {
    PromptSet p = PromptSet::zeros(dims);
    for (auto& m : p.layers) m = random_matrix(m.rows(), m.cols(), rng);
    return p;
}

// Σ n_k x_k / Σ n_k evaluated with 50 significant digits, rounded once.
PromptSet oracle_aggregate(std::span<const std::pair<PromptSet, std::size_t>> updates) {
    PromptSet out = PromptSet::zeros_like(updates.front().first);
    Big total = 0;
    for (const auto& u : updates) total += Big(u.second);
    for (std::size_t l = 0; l < out.layers.size(); ++l)
        for (std::size_t j = 0; j < out.layers[l].size(); ++j) {
            Big acc = 0;
            for (const auto& u : updates) acc += Big(u.first.layers[l].values()[j]) * Big(u.second);
            out.layers[l].values()[j] = static_cast<double>(acc / total);
        }
    return out;
}

bool runs_identical(const FederationState& a, const FederationState& b) {
    if (!(a.global_prompts == b.global_prompts) || !(a.backbone == b.backbone)) return false;
    if (a.history.size() != b.history.size()) return false;
    for (std::size_t r = 0; r < a.history.size(); ++r) {
        const auto& x = a.history[r];
        const auto& y = b.history[r];
        if (x.residual_ratios != y.residual_ratios || x.clients.size() != y.clients.size()) return false;
        for (std::size_t k = 0; k < x.clients.size(); ++k)
            if (x.clients[k].train_loss != y.clients[k].train_loss || !(x.clients[k].eval == y.clients[k].eval) ||
                x.clients[k].eval_loss != y.clients[k].eval_loss)
                return false;
    }
    return a.ledger.total_scalars == b.ledger.total_scalars;
}

}  // namespace

TEST_CASE("aggregation weights") {
    const std::vector<std::size_t> counts{17, 3, 29, 1, 8};
    const auto w = aggregation_weights(counts);
    double sum = 0.0;
    for (double v : w) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-15);
    CHECK(w[1] == 3.0 / 58.0);

    const std::vector<std::size_t> one{42};
    CHECK(aggregation_weights(one) == std::vector<double>{1.0});
    CHECK_THROWS_AS(aggregation_weights(std::vector<std::size_t>{0, 0}), Error);
    CHECK_THROWS_AS(aggregation_weights(std::vector<std::size_t>{}), Error);
}

TEST_CASE("aggregate matches the extended precision oracle") {
    const ModelDims dims = tiny_dims();
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 7)(rng);
        std::vector<std::pair<PromptSet, std::size_t>> equal, unequal;
        for (std::size_t i = 0; i < k; ++i) {
            PromptSet p = random_prompt_set(dims, rng);
            equal.emplace_back(p, 12);
            unequal.emplace_back(std::move(p), std::uniform_int_distribution<std::size_t>(1, 400)(rng));
        }
        CHECK(aggregate(equal) == oracle_aggregate(equal));

        const PromptSet got = aggregate(unequal);
        const PromptSet want = oracle_aggregate(unequal);
        for (std::size_t l = 0; l < got.layers.size(); ++l)
            for (std::size_t j = 0; j < got.layers[l].size(); ++j) {
                const double a = got.layers[l].values()[j], b = want.layers[l].values()[j];
                CHECK(std::abs(a - b) <= 1e-15 * std::abs(b));
            }
    }
}

TEST_CASE("aggregate identities and errors") {
    const ModelDims dims = tiny_dims();
    Rng rng(2);
    const PromptSet p = random_prompt_set(dims, rng);
    const std::vector<std::pair<PromptSet, std::size_t>> same{{p, 3}, {p, 11}, {p, 5}};
    CHECK(aggregate(same) == p);
    const std::vector<std::pair<PromptSet, std::size_t>> single{{p, 9}};
    CHECK(aggregate(single) == p);

    CHECK_THROWS_AS(aggregate({}), Error);
    PromptSet other = PromptSet::zeros(dims);
    other.layers.pop_back();
    const std::vector<std::pair<PromptSet, std::size_t>> mismatch{{p, 1}, {other, 1}};
    CHECK_THROWS_AS(aggregate(mismatch), Error);

    const Backbone b = Backbone::random(dims, 4);
    const std::vector<std::pair<Backbone, std::size_t>> bbs{{b, 2}, {b, 7}};
    CHECK(aggregate_backbones(bbs) == b);
}

TEST_CASE("local_update under the identity projector is a plain gradient step") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(1, 12);
    const Backbone bb = Backbone::random(dims, 5);
    FederationConfig cfg = tiny_config();
    cfg.local_epochs = 1;
    cfg.batch_size = clients[0].train_pairs.size();
    Rng rng(3);
    const PromptSet start = random_prompt_set(dims, rng);

    const LocalResult r = local_update(clients[0], start, bb, std::nullopt, cfg, 1);
    GradientSet g = grad_prompts(clients[0].train_pairs, start, bb);
    PromptSet expected = start;
    g *= -cfg.learning_rate;
    expected += g;
    for (std::size_t i = 0; i < dims.layers; ++i) CHECK(max_abs_diff(r.prompts.layers[i], expected.layers[i]) < 1e-15);
    CHECK(r.steps == 1);
    CHECK_FALSE(r.backbone.has_value());
}

TEST_CASE("local_update with zero learning rate is a no-op") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(1);
    const Backbone bb = Backbone::random(dims, 5);
    FederationConfig cfg = tiny_config();
    cfg.learning_rate = 0.0;
    Rng rng(4);
    const PromptSet start = random_prompt_set(dims, rng);
    const auto bases = compute_bases(start, 50);
    for (TrainingMode mode : {TrainingMode::PromptOnly, TrainingMode::FedPR, TrainingMode::FedAvgFullFinetune}) {
        cfg.mode = mode;
        const LocalResult r = local_update(clients[0], start, bb, bases, cfg, 2);
        CHECK(r.prompts == start);
        if (r.backbone) CHECK(*r.backbone == bb);
    }
}

TEST_CASE("projected local steps stay out of the principal subspace") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(1);
    const Backbone bb = Backbone::random(dims, 6);
    Rng rng(5);
    const PromptSet start = random_prompt_set(dims, rng);
    const auto bases = compute_bases(start, 50);

    for (ProjectionTarget target : {ProjectionTarget::Gradient, ProjectionTarget::Prompt}) {
        FederationConfig cfg = tiny_config();
        cfg.projection_target = target;
        int events = 0;
        double worst = 0.0;
        cfg.observer = [&](const StepEvent& e) {
            ++events;
            REQUIRE(e.basis != nullptr);
            worst = std::max(worst, frobenius_norm(matmul(*e.applied_update, e.basis->u1)));
        };
        const LocalResult r = local_update(clients[0], start, bb, bases, cfg, 2);
        CHECK(events == r.steps * static_cast<int>(dims.layers));
        CHECK(worst < 1e-8);
    }
}

TEST_CASE("local_update reports divergence with context") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(1);
    const Backbone bb = Backbone::random(dims, 7, Activation::Identity);
    FederationConfig cfg = tiny_config();
    cfg.learning_rate = 1e308;
    cfg.mode = TrainingMode::PromptOnly;
    try {
        local_update(clients[0], PromptSet::zeros(dims), bb, std::nullopt, cfg, 4);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NumericalFailure);
        CHECK(std::string(e.what()).find("round 4") != std::string::npos);
    }
}

TEST_CASE("server round keeps the backbone frozen in prompt modes") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(3);
    const Backbone bb = Backbone::random(dims, 8);
    for (TrainingMode mode : {TrainingMode::PromptOnly, TrainingMode::FedPR}) {
        FederationConfig cfg = tiny_config();
        cfg.mode = mode;
        const FederationState s = run_federation(clients, &clients[0], bb, cfg);
        CHECK(s.backbone == bb);
        CHECK(s.round == cfg.rounds);
        CHECK(s.history.size() == static_cast<std::size_t>(cfg.rounds));
    }
    FederationConfig cfg = tiny_config();
    cfg.mode = TrainingMode::FedAvgFullFinetune;
    CHECK_FALSE(run_federation(clients, nullptr, bb, cfg).backbone == bb);
}

TEST_CASE("run_federation with one round equals one server_round") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(2);
    const Backbone bb = Backbone::random(dims, 9);
    FederationConfig cfg = tiny_config();
    cfg.rounds = 1;
    const FederationState a = run_federation(clients, nullptr, bb, cfg);
    const FederationState b = server_round(FederationState::initial(bb, cfg.mode), clients, nullptr, cfg);
    CHECK(runs_identical(a, b));
}

TEST_CASE("mode equivalences") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(3);
    const Backbone bb = Backbone::random(dims, 10);

    FederationConfig full = tiny_config();
    full.gamma_percent = 100;
    FederationConfig po = full;
    po.mode = TrainingMode::PromptOnly;
    CHECK(runs_identical(run_federation(clients, &clients[1], bb, po), run_federation(clients, &clients[1], bb, full)));

    FederationConfig frozen = tiny_config();
    frozen.gamma_percent = 0;
    frozen.rounds = 4;
    FederationState s = FederationState::initial(bb, frozen.mode);
    s = server_round(std::move(s), clients, nullptr, frozen);
    const PromptSet after_bootstrap = s.global_prompts;
    CHECK_FALSE(after_bootstrap == PromptSet::zeros(dims));
    for (int z = 1; z < frozen.rounds; ++z) {
        s = server_round(std::move(s), clients, nullptr, frozen);
        CHECK(s.global_prompts == after_bootstrap);
    }

    FederationConfig still = tiny_config();
    still.learning_rate = 0.0;
    CHECK(run_federation(clients, nullptr, bb, still).global_prompts == PromptSet::zeros(dims));
}

TEST_CASE("parallel and serial schedules are bit identical") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(5);
    const Backbone bb = Backbone::random(dims, 11);
    for (TrainingMode mode : {TrainingMode::FedPR, TrainingMode::FedAvgFullFinetune}) {
        FederationConfig serial = tiny_config();
        serial.mode = mode;
        serial.fft_momentum = 0.5;
        FederationConfig parallel = serial;
        parallel.threads = 4;
        CHECK(runs_identical(run_federation(clients, &clients[0], bb, serial),
                             run_federation(clients, &clients[0], bb, parallel)));
    }
}

TEST_CASE("communication ledger totals") {
    const ModelDims dims = tiny_dims();
    const auto clients = tiny_clients(3);
    const Backbone bb = Backbone::random(dims, 12);
    FederationConfig cfg = tiny_config();
    const FederationState s = run_federation(clients, nullptr, bb, cfg);
    const std::uint64_t per = dims.layers * dims.prompt_tokens * dims.embed_dim;
    CHECK(s.ledger.total_scalars == static_cast<std::uint64_t>(cfg.rounds) * clients.size() * 2 * per);
    for (const auto& rec : s.history) {
        CHECK(rec.scalars_up == per);
        CHECK(rec.scalars_down == per);
        CHECK(rec.residual_ratios.size() == dims.layers);
    }

    cfg.count_basis_scalars = true;
    const FederationState with_bases = run_federation(clients, nullptr, bb, cfg);
    CHECK(with_bases.ledger.total_scalars > s.ledger.total_scalars);
}

TEST_CASE("evaluate") {
    ModelDims dims;
    dims.embed_dim = 16;
    dims.layers = 2;
    dims.prompt_tokens = 2;
    Backbone id = Backbone::zeros(dims, Activation::Identity);
    id.patch_embed = Matrix::identity(16);
    for (std::size_t i = 0; i < dims.layers; ++i) {
        for (std::size_t t = 0; t < 16; ++t) id.token_mix[i](t, 2 + t) = 1.0;
        id.channel_mix[i] = Matrix::identity(16);
    }
    for (std::size_t t = 0; t < 16; ++t)
        for (std::size_t k = 0; k < 16; ++k)
            id.head(t * 16 + k, ((t / 4) * 4 + k / 4) * 16 + (t % 4) * 4 + k % 4) = 1.0;

    std::vector<ClientShard> clients;
    for (int k = 0; k < 2; ++k) {
        ClientShard s = synth_shard(k, {2.0, 0.0, 1.0, 0.0}, 6, 0.5, 0.08, 16, 50 + k);
        for (auto& p : s.test_pairs) p.x = p.y;
        clients.push_back(std::move(s));
    }
    const EvaluationReport rep = evaluate(PromptSet::zeros(dims), id, clients, &clients[0]);
    for (const auto& r : rep.in_federation) CHECK(r.psnr == kPsnrCapDb);
    CHECK(rep.out_of_federation->psnr == kPsnrCapDb);

    const Backbone bb = Backbone::random(dims, 3);
    const EvaluationReport a = evaluate(PromptSet::zeros(dims), bb, clients, nullptr);
    const EvaluationReport b = evaluate(PromptSet::zeros(dims), bb, clients, nullptr);
    CHECK(a.in_federation == b.in_federation);
    CHECK(a.in_federation_loss == b.in_federation_loss);
    CHECK_FALSE(a.out_of_federation.has_value());

    clients[1].test_pairs.clear();
    try {
        evaluate(PromptSet::zeros(dims), bb, clients, nullptr);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidInput);
    }
}
