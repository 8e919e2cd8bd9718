#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fednull/federation.hpp"
#include "fednull/model_dims.hpp"

namespace fednull {

/// Acquisition protocol of one client (or of the held-out institution).
struct ClientProtocol {
    double acceleration = 3.0;
    double noise_std = 0.0;
    double contrast_gain = 1.0;
    double contrast_offset = 0.0;

    friend bool operator==(const ClientProtocol&, const ClientProtocol&) = default;
};

/// Everything needed to reproduce one experiment.
///
/// Text form is INI-like: `[model]`, `[data]`, `[pretrain]`, `[federation]`
/// and `[output]` sections holding `key = value` lines; `#` starts a comment.
/// Per-client protocol lists are comma separated and cycle when shorter than
/// the client count.
struct ExperimentConfig {
    // [model]
    ModelDims dims;
    Activation activation = Activation::Tanh;
    std::uint64_t model_seed = 11;

    // [data]
    std::size_t clients = 5;
    std::size_t samples_per_client = 24;
    double train_fraction = 0.7;
    double center_fraction = 0.08;
    std::vector<double> accelerations{2.0, 3.0, 4.0, 3.0, 2.0};
    std::vector<double> noise_stds{0.0, 0.01, 0.02, 0.01, 0.0};
    std::vector<double> contrast_gains{1.0, 0.8, 1.2, 0.9, 1.1};
    std::vector<double> contrast_offsets{0.0, 0.1, -0.05, 0.05, 0.0};
    ClientProtocol held_out{3.0, 0.015, 0.7, 0.15};
    std::uint64_t data_seed = 7;

    // [pretrain]
    std::size_t pretrain_samples = 48;
    int pretrain_epochs = 600;
    double pretrain_lr = 0.5;

    // [federation]
    int rounds = 20;
    int local_epochs = 3;
    double learning_rate = 0.1;
    std::size_t batch_size = 8;
    double gamma_percent = 80.0;
    TrainingMode mode = TrainingMode::FedPR;
    ProjectionTarget projection_target = ProjectionTarget::Gradient;
    std::uint64_t train_seed = 7;
    unsigned threads = 1;
    bool count_basis_scalars = false;
    double fft_momentum = 0.0;
    /// Full fine-tune baseline starts from the un-pretrained initialization.
    bool fft_from_scratch = false;

    // [output]
    std::filesystem::path output_dir = "runs/default";

    ClientProtocol protocol_for(std::size_t client) const;
    FederationConfig federation() const;

    /// Throws ConfigError when a field is outside its documented range.
    void validate() const;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

std::string serialize_config(const ExperimentConfig& config);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a 64-bit hash of the serialized config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Applies a master seed to the data, model and training seeds.
void apply_master_seed(ExperimentConfig& config, std::uint64_t seed);

}  // namespace fednull
