#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fednull/config.hpp"
#include "fednull/federation.hpp"
#include "fednull/rng.hpp"

namespace fednull {

/// Smooth random ground truth: a sum of Gaussian blobs rescaled to [0, 1].
Image gaussian_blob_field(std::size_t size, Rng& rng);

/// Builds one shard: ground truth → contrast transform → masked, noisy
/// zero-filled input, then a train/test split.
ClientShard synth_shard(int id, const ClientProtocol& protocol, std::size_t samples,
                        double train_fraction, double center_fraction, std::size_t image_size,
                        std::uint64_t seed);

struct SyntheticFederation {
    std::vector<ClientShard> clients;
    ClientShard held_out;
};

/// K heterogeneous clients plus one held-out shard whose protocol is not
/// used by any training client.
SyntheticFederation synth_clients(const ExperimentConfig& config, std::uint64_t seed);

/// Pooled source set for surrogate pretraining (reference protocol).
std::vector<Sample> synth_source(const ExperimentConfig& config, std::uint64_t seed);

}  // namespace fednull
