#include "fednull/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>
#include <thread>

#include "fednull/error.hpp"
#include "fednull/rng.hpp"

namespace fednull {
namespace {

#if defined(__SIZEOF_FLOAT128__)
using Wide = __float128;
#else
using Wide = long double;
#endif

// out = Σ_k n_k · inputs[k] / Σ_k n_k, elementwise, rounded to double once.
void weighted_mean_into(std::span<double> out, std::span<const std::span<const double>> inputs,
                        std::span<const std::size_t> counts) {
    Wide total = 0;
    for (std::size_t n : counts) total += static_cast<Wide>(n);
    for (std::size_t j = 0; j < out.size(); ++j) {
        Wide acc = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k)
            acc += static_cast<Wide>(counts[k]) * static_cast<Wide>(inputs[k][j]);
        out[j] = static_cast<double>(acc / total);
    }
}

std::size_t checked_total(std::span<const std::size_t> counts) {
    std::size_t total = 0;
    for (std::size_t n : counts) total += n;
    if (total == 0) throw_invalid("aggregate: total sample count is zero");
    return total;
}

unsigned resolve_threads(unsigned requested, std::size_t jobs) {
    unsigned n = requested == 0 ? std::max(1u, std::thread::hardware_concurrency()) : requested;
    return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

// Runs fn(i) for i in [0, jobs) on up to `threads` workers. The first
// exception by job index is rethrown after all workers finish.
template <typename Fn>
void run_jobs(std::size_t jobs, unsigned threads, Fn&& fn) {
    std::vector<std::exception_ptr> errors(jobs);
    if (threads <= 1) {
        for (std::size_t i = 0; i < jobs; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> workers;
        workers.reserve(threads);
        for (unsigned t = 0; t < threads; ++t) {
            workers.emplace_back([&] {
                for (std::size_t i = next++; i < jobs; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

std::string_view to_string(ProjectionTarget target) noexcept {
    return target == ProjectionTarget::Prompt ? "prompt" : "gradient";
}

std::optional<ProjectionTarget> parse_projection_target(std::string_view text) noexcept {
    if (text == "gradient") return ProjectionTarget::Gradient;
    if (text == "prompt") return ProjectionTarget::Prompt;
    return std::nullopt;
}

FederationState FederationState::initial(const Backbone& backbone, TrainingMode mode) {
    (void)mode;
    FederationState s;
    s.round = 0;
    s.global_prompts = PromptSet::zeros(backbone.dims);
    s.backbone = backbone;
    s.bases = std::nullopt;
    s.ledger = count_communication(mode, backbone.dims);
    return s;
}

MetricReport EvaluationReport::in_federation_mean() const {
    return mean_report(in_federation);
}

LocalResult local_update(const ClientShard& client, const PromptSet& start, const Backbone& backbone,
                         const LayerBases& bases, const FederationConfig& config, int round) {
    if (config.local_epochs < 1) throw_invalid("local_update: local_epochs must be >= 1");
    if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate))
        throw_invalid("local_update: learning rate must be finite and non-negative");
    if (config.batch_size == 0) throw_invalid("local_update: batch_size must be positive");
    if (client.train_pairs.empty()) throw_invalid("local_update: client has no training pairs");
    if (bases && bases->size() != start.layers.size())
        throw_invalid("local_update: basis count does not match prompt layers");

    const bool full_finetune = config.mode == TrainingMode::FedAvgFullFinetune;
    const bool project = config.mode == TrainingMode::FedPR && bases.has_value();

    LocalResult result;
    result.prompts = start;
    Backbone local_bb;
    std::optional<Backbone> velocity;
    if (full_finetune) {
        local_bb = backbone;
        if (config.fft_momentum != 0.0) velocity = Backbone::zeros_like(backbone);
    }
    const Backbone& model = full_finetune ? local_bb : backbone;

    Rng rng(derive_seed(config.seed, {static_cast<std::uint64_t>(round),
                                      static_cast<std::uint64_t>(client.id)}));
    std::vector<std::size_t> order(client.train_pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<const Sample*> batch;
    batch.reserve(config.batch_size);

    double loss_sum = 0.0;
    int step = 0;
    for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
            batch.clear();
            const std::size_t last = std::min(order.size(), first + config.batch_size);
            for (std::size_t i = first; i < last; ++i) batch.push_back(&client.train_pairs[order[i]]);

            LossAndGradients g = compute_gradients(batch, result.prompts, model, full_finetune);
            if (!std::isfinite(g.loss))
                throw_numerical("local update produced a non-finite loss (round " +
                                std::to_string(round) + ", client " + std::to_string(client.id) +
                                ", step " + std::to_string(step) + ")");
            loss_sum += g.loss;

            for (std::size_t i = 0; i < result.prompts.layers.size(); ++i) {
                Matrix delta;
                const NullSpaceBasis* basis = nullptr;
                if (project) {
                    basis = &(*bases)[i];
                    const Matrix& candidate = config.projection_target == ProjectionTarget::Prompt
                                                  ? result.prompts.layers[i]
                                                  : g.prompts.layers[i];
                    delta = project_update(candidate, *basis);
                } else {
                    delta = std::move(g.prompts.layers[i]);
                }
                if (config.observer)
                    config.observer({round, client.id, step, i, &delta, basis});
                delta *= config.learning_rate;
                result.prompts.layers[i] -= delta;
            }

            if (full_finetune) {
                if (velocity) {
                    *velocity *= config.fft_momentum;
                    *velocity += g.backbone;
                    Backbone stepv = *velocity;
                    stepv *= -config.learning_rate;
                    local_bb += stepv;
                } else {
                    g.backbone *= -config.learning_rate;
                    local_bb += g.backbone;
                }
            }
            ++step;
        }
    }
    if (!result.prompts.all_finite() || (full_finetune && !local_bb.all_finite()))
        throw_numerical("local update diverged (round " + std::to_string(round) + ", client " +
                        std::to_string(client.id) + ")");

    result.steps = step;
    result.train_loss = step > 0 ? loss_sum / step : 0.0;
    if (full_finetune) result.backbone = std::move(local_bb);
    return result;
}

std::vector<double> aggregation_weights(std::span<const std::size_t> sample_counts) {
    const std::size_t total = checked_total(sample_counts);
    std::vector<double> w;
    w.reserve(sample_counts.size());
    for (std::size_t n : sample_counts)
        w.push_back(static_cast<double>(static_cast<Wide>(n) / static_cast<Wide>(total)));
    return w;
}

PromptSet aggregate(std::span<const std::pair<PromptSet, std::size_t>> updates) {
    if (updates.empty()) throw_invalid("aggregate: no updates");
    std::vector<std::size_t> counts;
    for (const auto& [p, n] : updates) {
        if (!p.same_shape(updates.front().first)) throw_invalid("aggregate: prompt shape mismatch");
        counts.push_back(n);
    }
    checked_total(counts);

    PromptSet out = PromptSet::zeros_like(updates.front().first);
    std::vector<std::span<const double>> inputs(updates.size());
    for (std::size_t layer = 0; layer < out.layers.size(); ++layer) {
        for (std::size_t k = 0; k < updates.size(); ++k)
            inputs[k] = updates[k].first.layers[layer].values();
        weighted_mean_into(out.layers[layer].values(), inputs, counts);
    }
    return out;
}

Backbone aggregate_backbones(std::span<const std::pair<Backbone, std::size_t>> updates) {
    if (updates.empty()) throw_invalid("aggregate_backbones: no updates");
    std::vector<std::size_t> counts;
    for (const auto& [b, n] : updates) {
        if (b.dims != updates.front().first.dims) throw_invalid("aggregate_backbones: shape mismatch");
        counts.push_back(n);
    }
    checked_total(counts);

    Backbone out = Backbone::zeros_like(updates.front().first);
    auto out_params = out.parameters();
    std::vector<std::vector<const Matrix*>> in_params;
    for (const auto& [b, n] : updates) in_params.push_back(b.parameters());
    std::vector<std::span<const double>> inputs(updates.size());
    for (std::size_t p = 0; p < out_params.size(); ++p) {
        for (std::size_t k = 0; k < updates.size(); ++k) inputs[k] = in_params[k][p]->values();
        weighted_mean_into(out_params[p]->values(), inputs, counts);
    }
    return out;
}

std::vector<NullSpaceBasis> compute_bases(const PromptSet& prompts, double gamma_percent) {
    std::vector<NullSpaceBasis> bases;
    bases.reserve(prompts.layers.size());
    for (std::size_t i = 0; i < prompts.layers.size(); ++i)
        bases.push_back(build_null_basis(prompts.layers[i], gamma_percent, static_cast<int>(i)));
    return bases;
}

EvaluationReport evaluate(const PromptSet& prompts, const Backbone& backbone,
                          std::span<const ClientShard> clients, const ClientShard* held_out) {
    auto score = [&](const ClientShard& shard, double* loss) {
        if (shard.test_pairs.empty())
            throw_invalid("evaluate: client " + std::to_string(shard.id) + " has an empty test split");
        std::vector<MetricReport> reports;
        double acc = 0.0;
        for (const auto& s : shard.test_pairs) {
            const Image pred = forward(s.x, prompts, backbone);
            reports.push_back(evaluate_pair(s.y, pred));
            acc += loss_l1(pred, s.y);
        }
        if (loss) *loss = acc / static_cast<double>(shard.test_pairs.size());
        return mean_report(reports);
    };

    EvaluationReport report;
    for (const auto& c : clients) {
        double loss = 0.0;
        report.in_federation.push_back(score(c, &loss));
        report.in_federation_loss.push_back(loss);
    }
    if (held_out) report.out_of_federation = score(*held_out, nullptr);
    return report;
}

EvaluationReport evaluate(const FederationState& state, std::span<const ClientShard> clients,
                          const ClientShard* held_out) {
    return evaluate(state.global_prompts, state.backbone, clients, held_out);
}

FederationState server_round(FederationState state, std::span<const ClientShard> clients,
                             const ClientShard* held_out, const FederationConfig& config) {
    if (clients.empty()) throw_invalid("server_round: no clients");
    if (state.round < 0) throw_invalid("server_round: negative round counter");
    const int round = state.round + 1;
    const bool full_finetune = config.mode == TrainingMode::FedAvgFullFinetune;

    std::vector<LocalResult> results(clients.size());
    run_jobs(clients.size(), resolve_threads(config.threads, clients.size()), [&](std::size_t k) {
        results[k] = local_update(clients[k], state.global_prompts, state.backbone, state.bases,
                                  config, round);
    });

    std::vector<std::pair<PromptSet, std::size_t>> prompt_updates;
    prompt_updates.reserve(clients.size());
    for (std::size_t k = 0; k < clients.size(); ++k)
        prompt_updates.emplace_back(std::move(results[k].prompts), clients[k].sample_count());
    state.global_prompts = aggregate(prompt_updates);

    if (full_finetune) {
        std::vector<std::pair<Backbone, std::size_t>> bb_updates;
        bb_updates.reserve(clients.size());
        for (std::size_t k = 0; k < clients.size(); ++k)
            bb_updates.emplace_back(std::move(*results[k].backbone), clients[k].sample_count());
        state.backbone = aggregate_backbones(bb_updates);
    }

    // Bases broadcast this round are the ones computed after the previous round.
    if (config.count_basis_scalars && config.mode == TrainingMode::FedPR && state.bases) {
        std::uint64_t basis_scalars = 0;
        for (const auto& b : *state.bases) basis_scalars += b.u2.size();
        state.ledger.record_extra_down(basis_scalars * clients.size());
    }
    state.ledger.record_round(clients.size());

    state.bases = compute_bases(state.global_prompts, config.gamma_percent);
    state.round = round;

    const EvaluationReport eval = evaluate(state, clients, held_out);
    RoundRecord record;
    record.round = round;
    record.scalars_up = state.ledger.per_round_scalars_up;
    record.scalars_down = state.ledger.per_round_scalars_down;
    for (const auto& b : *state.bases) record.residual_ratios.push_back(b.residual_ratio);
    for (std::size_t k = 0; k < clients.size(); ++k) {
        record.clients.push_back({clients[k].id, results[k].train_loss, results[k].steps,
                                  eval.in_federation[k], eval.in_federation_loss[k]});
    }
    record.out_of_federation = eval.out_of_federation;
    state.history.push_back(std::move(record));
    return state;
}

FederationState run_federation(std::span<const ClientShard> clients, const ClientShard* held_out,
                               const Backbone& backbone, const FederationConfig& config) {
    if (config.rounds < 1) throw_invalid("run_federation: rounds must be >= 1");
    if (!(config.gamma_percent >= 0.0 && config.gamma_percent <= 100.0))
        throw_invalid("run_federation: gamma must lie in [0, 100]");
    FederationState state = FederationState::initial(backbone, config.mode);
    for (int z = 0; z < config.rounds; ++z) state = server_round(std::move(state), clients, held_out, config);
    return state;
}

}  // namespace fednull
