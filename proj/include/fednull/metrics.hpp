#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fednull/model_dims.hpp"
#include "fednull/mri.hpp"

namespace fednull {

/// PSNR for identical images is reported as this cap so CSV values stay finite.
inline constexpr double kPsnrCapDb = 200.0;

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double nmse = 0.0;

    friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

/// ‖rec − ref‖² / ‖ref‖². Not symmetric in its arguments.
double nmse(const Image& ref, const Image& rec);

/// 10·log10(peak² / MSE), peak = max(ref) − min(ref); capped at 200 dB.
double psnr(const Image& ref, const Image& rec);

struct SsimParams {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

/// Mean SSIM over all fully contained 11×11 Gaussian windows. The dynamic
/// range is max(ref) − min(ref) of the pair's reference image.
double ssim(const Image& ref, const Image& rec, const SsimParams& params = {});

/// Normalized Gaussian window weights (window × window), row-major.
std::vector<double> gaussian_window(std::size_t window, double sigma);

MetricReport evaluate_pair(const Image& ref, const Image& rec);
/// Arithmetic mean of per-image reports.
MetricReport mean_report(std::span<const MetricReport> reports);

/// Scalar counts exchanged between server and clients.
struct CommLedger {
    std::uint64_t per_round_scalars_up = 0;    // one client, one round
    std::uint64_t per_round_scalars_down = 0;  // one client, one round
    std::uint64_t total_scalars = 0;           // both directions, all rounds and clients
    std::uint64_t trainable_scalars = 0;
    std::uint64_t rounds = 0;

    /// Accumulates one round with `clients` participants.
    void record_round(std::uint64_t clients);
    /// Extra server→client scalars for one round (e.g. broadcast bases).
    void record_extra_down(std::uint64_t scalars);
};

/// Per-client per-round counts for a training mode; totals start at zero.
CommLedger count_communication(TrainingMode mode, const ModelDims& dims);

/// Mean over clients of max(0, last loss − best earlier loss).
/// `history[round][client]` holds the global model's loss on each client.
double forgetting_gap(std::span<const std::vector<double>> history);

}  // namespace fednull
