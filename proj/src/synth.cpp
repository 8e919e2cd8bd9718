#include "fednull/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fednull/error.hpp"

namespace fednull {
namespace {

constexpr std::uint64_t kTagMask = 0x6d61736b;   // "mask"
constexpr std::uint64_t kTagImage = 0x696d6167;  // "imag"
constexpr std::uint64_t kTagNoise = 0x6e6f6973;  // "nois"
constexpr std::uint64_t kTagHeldOut = 0x686f6c64;

}  // namespace

Image gaussian_blob_field(std::size_t size, Rng& rng) {
    const double s = static_cast<double>(size);
    std::uniform_int_distribution<int> count(3, 6);
    std::uniform_real_distribution<double> amp(0.3, 1.0);
    std::uniform_real_distribution<double> pos(0.15 * s, 0.85 * s);
    std::uniform_real_distribution<double> width(0.08 * s, 0.25 * s);

    Image img(size, size);
    const int blobs = count(rng);
    for (int b = 0; b < blobs; ++b) {
        const double a = amp(rng);
        const double cy = pos(rng);
        const double cx = pos(rng);
        const double sy = width(rng);
        const double sx = width(rng);
        for (std::size_t r = 0; r < size; ++r)
            for (std::size_t c = 0; c < size; ++c) {
                const double dy = (static_cast<double>(r) - cy) / sy;
                const double dx = (static_cast<double>(c) - cx) / sx;
                img(r, c) += a * std::exp(-0.5 * (dx * dx + dy * dy));
            }
    }
    const double peak = max_abs(img.pixels());
    if (peak > 0.0) img.pixels() *= 1.0 / peak;
    return img;
}

ClientShard synth_shard(int id, const ClientProtocol& protocol, std::size_t samples,
                        double train_fraction, double center_fraction, std::size_t image_size,
                        std::uint64_t seed) {
    if (samples < 2) throw_invalid("synth_shard: need at least two samples per client");
    ClientShard shard;
    shard.id = id;
    shard.noise_std = protocol.noise_std;
    shard.contrast_gain = protocol.contrast_gain;
    shard.contrast_offset = protocol.contrast_offset;
    shard.mask = make_mask(image_size, protocol.acceleration, center_fraction,
                           derive_seed(seed, {kTagMask}));

    Rng rng(derive_seed(seed, {kTagImage}));
    std::vector<Sample> all;
    all.reserve(samples);
    for (std::size_t i = 0; i < samples; ++i) {
        Image y = gaussian_blob_field(image_size, rng);
        for (double& v : y.pixels().values()) v = protocol.contrast_gain * v + protocol.contrast_offset;
        Image x = undersample(y, shard.mask, protocol.noise_std, derive_seed(seed, {kTagNoise, i}));
        all.push_back({std::move(x), std::move(y)});
    }

    auto train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(samples)));
    train = std::clamp<std::size_t>(train, 1, samples - 1);
    shard.train_pairs.assign(std::make_move_iterator(all.begin()),
                             std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(train)));
    shard.test_pairs.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(train)),
                            std::make_move_iterator(all.end()));
    return shard;
}

SyntheticFederation synth_clients(const ExperimentConfig& config, std::uint64_t seed) {
    if (config.clients < 1) throw_invalid("synth_clients: need at least one client");
    if (config.samples_per_client < 2)
        throw_invalid("synth_clients: need at least two samples per client");
    SyntheticFederation fed;
    for (std::size_t k = 0; k < config.clients; ++k) {
        fed.clients.push_back(synth_shard(static_cast<int>(k), config.protocol_for(k),
                                          config.samples_per_client, config.train_fraction,
                                          config.center_fraction, config.dims.image_size,
                                          derive_seed(seed, {k})));
    }
    fed.held_out = synth_shard(static_cast<int>(config.clients), config.held_out,
                               config.samples_per_client, config.train_fraction,
                               config.center_fraction, config.dims.image_size,
                               derive_seed(seed, {kTagHeldOut}));
    return fed;
}

std::vector<Sample> synth_source(const ExperimentConfig& config, std::uint64_t seed) {
    const ClientProtocol reference{3.0, 0.0, 1.0, 0.0};
    // Several acquisition masks so the backbone does not specialize to one.
    constexpr std::size_t kMasks = 4;
    std::vector<Sample> out;
    const std::size_t per_mask = std::max<std::size_t>(1, (config.pretrain_samples + kMasks - 1) / kMasks);
    for (std::size_t m = 0; m < kMasks && out.size() < config.pretrain_samples; ++m) {
        ClientShard s = synth_shard(-1, reference, std::max<std::size_t>(2, per_mask + 1), 0.99,
                                    config.center_fraction, config.dims.image_size,
                                    derive_seed(seed, {0x7372, m}));
        for (auto& p : s.train_pairs) {
            if (out.size() == config.pretrain_samples) break;
            out.push_back(std::move(p));
        }
    }
    return out;
}

}  // namespace fednull
