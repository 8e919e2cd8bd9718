#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fednull/metrics.hpp"
#include "fednull/model_dims.hpp"
#include "fednull/mri.hpp"
#include "fednull/nullspace.hpp"
#include "fednull/promptmodel.hpp"

namespace fednull {

/// One participating institution: its private train/test pairs and the
/// acquisition protocol that produced them.
struct ClientShard {
    int id = 0;
    std::vector<Sample> train_pairs;
    std::vector<Sample> test_pairs;
    SamplingMask mask;
    double noise_std = 0.0;
    double contrast_gain = 1.0;
    double contrast_offset = 0.0;

    std::size_t sample_count() const noexcept { return train_pairs.size(); }
};

/// What the null-space projector is applied to inside a local step.
enum class ProjectionTarget {
    Gradient,  // ΔP = ∇ℓ · Π
    Prompt,    // ΔP = P · Π (literal reading of the projected-update rule)
};

std::string_view to_string(ProjectionTarget target) noexcept;
std::optional<ProjectionTarget> parse_projection_target(std::string_view text) noexcept;

/// Per-layer bases; std::nullopt is the identity sentinel used before the
/// first aggregation.
using LayerBases = std::optional<std::vector<NullSpaceBasis>>;

/// Reported once for every applied prompt update (one per layer per step).
struct StepEvent {
    int round = 0;
    int client_id = 0;
    int step = 0;
    std::size_t layer = 0;
    const Matrix* applied_update = nullptr;  // ΔP before scaling by η
    const NullSpaceBasis* basis = nullptr;   // null under the identity projector
};

/// Called from worker threads when clients run in parallel.
using StepObserver = std::function<void(const StepEvent&)>;

struct FederationConfig {
    int rounds = 20;          // Z
    int local_epochs = 3;     // T
    double learning_rate = 0.1;
    std::size_t batch_size = 8;
    double gamma_percent = 80.0;
    TrainingMode mode = TrainingMode::FedPR;
    ProjectionTarget projection_target = ProjectionTarget::Gradient;
    std::uint64_t seed = 7;
    /// Worker count for client updates; 0 = hardware concurrency, 1 = serial.
    unsigned threads = 1;
    /// Count broadcast U₂ scalars in the communication ledger.
    bool count_basis_scalars = false;
    /// Heavy-ball momentum for the full fine-tune baseline only.
    double fft_momentum = 0.0;
    StepObserver observer;
};

struct LocalResult {
    PromptSet prompts;
    std::optional<Backbone> backbone;  // set only in full fine-tune mode
    double train_loss = 0.0;           // mean mini-batch loss over the round
    int steps = 0;
};

struct ClientRoundStats {
    int client_id = 0;
    double train_loss = 0.0;
    int steps = 0;
    MetricReport eval;       // global model on the client's test split
    double eval_loss = 0.0;  // L1 of the global model on the test split
};

struct RoundRecord {
    int round = 0;
    std::vector<ClientRoundStats> clients;
    std::optional<MetricReport> out_of_federation;
    std::vector<double> residual_ratios;  // one per layer
    std::uint64_t scalars_up = 0;         // per client
    std::uint64_t scalars_down = 0;       // per client
};

struct FederationState {
    int round = 0;
    PromptSet global_prompts;
    Backbone backbone;  // frozen in prompt modes
    LayerBases bases;
    CommLedger ledger;
    std::vector<RoundRecord> history;

    static FederationState initial(const Backbone& backbone, TrainingMode mode);
};

struct EvaluationReport {
    std::vector<MetricReport> in_federation;  // one per client
    std::vector<double> in_federation_loss;
    std::optional<MetricReport> out_of_federation;

    MetricReport in_federation_mean() const;
};

LocalResult local_update(const ClientShard& client, const PromptSet& start, const Backbone& backbone,
                         const LayerBases& bases, const FederationConfig& config, int round);

/// |Dᵏ| / |D| per client, as doubles.
std::vector<double> aggregation_weights(std::span<const std::size_t> sample_counts);

/// Σ_k (|Dᵏ|/|D|) · P_k, accumulated in extended precision and rounded once.
PromptSet aggregate(std::span<const std::pair<PromptSet, std::size_t>> updates);
Backbone aggregate_backbones(std::span<const std::pair<Backbone, std::size_t>> updates);

/// Per-layer null-space bases of a prompt set.
std::vector<NullSpaceBasis> compute_bases(const PromptSet& prompts, double gamma_percent);

EvaluationReport evaluate(const PromptSet& prompts, const Backbone& backbone,
                          std::span<const ClientShard> clients, const ClientShard* held_out);
EvaluationReport evaluate(const FederationState& state, std::span<const ClientShard> clients,
                          const ClientShard* held_out);

FederationState server_round(FederationState state, std::span<const ClientShard> clients,
                             const ClientShard* held_out, const FederationConfig& config);

FederationState run_federation(std::span<const ClientShard> clients, const ClientShard* held_out,
                               const Backbone& backbone, const FederationConfig& config);

}  // namespace fednull
