#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fednull/config.hpp"
#include "fednull/federation.hpp"
#include "fednull/synth.hpp"

namespace fednull {

/// Header of the per-round CSV for a model with `layers` prompt layers.
std::string round_csv_header(std::size_t layers);

struct RunArtifact {
    ExperimentConfig config;
    std::filesystem::path directory;
    std::filesystem::path round_csv;
    std::filesystem::path initial_csv;  // round-0 evaluation, same schema
    std::filesystem::path summary;
    std::filesystem::path config_snapshot;
    std::optional<std::filesystem::path> plot;
    std::vector<std::filesystem::path> checkpoints;

    FederationState state;
    EvaluationReport initial_eval;
    EvaluationReport final_eval;
    double forgetting = 0.0;
};

struct RunOptions {
    bool write_outputs = true;
    bool plot = false;
    bool checkpoints = true;
    /// Reuse an already prepared backbone instead of pretraining again.
    const Backbone* backbone = nullptr;
};

/// The backbone an experiment starts from: seeded init, then surrogate
/// pretraining unless the full fine-tune baseline runs from scratch.
Backbone prepare_backbone(const ExperimentConfig& config);

RunArtifact run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Writes round CSV, round-0 CSV, summary JSON, config snapshot and (when
/// requested) an SVG of the per-round mean PSNR. Throws IoError on failure.
void emit_report(RunArtifact& artifact, bool plot);

std::string format_round_rows(const FederationState& state);
std::string format_initial_rows(const EvaluationReport& eval, std::span<const ClientShard> clients,
                                std::size_t layers);

struct GammaSweepRow {
    double gamma = 0.0;
    MetricReport in_federation;
    MetricReport out_of_federation;
    double mean_residual_ratio = 0.0;
};

/// One fedpr run per gamma on shared data, backbone and training seeds.
std::vector<GammaSweepRow> gamma_sweep(const ExperimentConfig& config, std::span<const double> gammas,
                                       const Backbone* backbone = nullptr);
std::string format_gamma_table(std::span<const GammaSweepRow> rows);

struct RoundsSweepRow {
    int round = 0;
    MetricReport in_federation;
    MetricReport out_of_federation;
};

/// Mean in/out-of-federation metrics after every round of a single run.
std::vector<RoundsSweepRow> rounds_sweep(const RunArtifact& artifact);
std::string format_rounds_table(std::span<const RoundsSweepRow> rows);

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

/// Minimal standalone SVG line chart.
std::string render_line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label, std::span<const Series> series);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace fednull
