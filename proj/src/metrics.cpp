#include "fednull/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "fednull/error.hpp"

namespace fednull {
namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (a.height() != b.height() || a.width() != b.width())
        throw_invalid(std::string(what) + ": image shapes differ");
}

double dynamic_range(const Image& img) {
    const auto v = img.pixels().values();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo;
}

std::vector<double> gaussian_1d(std::size_t window, double sigma) {
    std::vector<double> g(window);
    const double center = (static_cast<double>(window) - 1.0) / 2.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        const double x = static_cast<double>(i) - center;
        g[i] = std::exp(-(x * x) / (2.0 * sigma * sigma));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
}

}  // namespace

double nmse(const Image& ref, const Image& rec) {
    require_same_shape(ref, rec, "nmse");
    double err = 0.0;
    double norm = 0.0;
    const auto a = ref.pixels().values();
    const auto b = rec.pixels().values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = b[i] - a[i];
        err += diff * diff;
        norm += a[i] * a[i];
    }
    if (norm == 0.0) throw_invalid("nmse: reference image is all zero");
    return err / norm;
}

double psnr(const Image& ref, const Image& rec) {
    require_same_shape(ref, rec, "psnr");
    const double peak = dynamic_range(ref);
    if (!(peak > 0.0)) throw_invalid("psnr: reference has zero dynamic range");
    double mse = 0.0;
    const auto a = ref.pixels().values();
    const auto b = rec.pixels().values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = b[i] - a[i];
        mse += diff * diff;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / mse));
}

std::vector<double> gaussian_window(std::size_t window, double sigma) {
    const std::vector<double> w1 = gaussian_1d(window, sigma);
    std::vector<double> w(window * window);
    for (std::size_t r = 0; r < window; ++r)
        for (std::size_t c = 0; c < window; ++c) w[r * window + c] = w1[r] * w1[c];
    return w;
}

double ssim(const Image& ref, const Image& rec, const SsimParams& params) {
    require_same_shape(ref, rec, "ssim");
    const std::size_t win = params.window;
    const std::size_t h = ref.height();
    const std::size_t w = ref.width();
    if (h < win || w < win) throw_invalid("ssim: image smaller than the window");

    const double range = dynamic_range(ref);
    const double c1 = (params.k1 * range) * (params.k1 * range);
    const double c2 = (params.k2 * range) * (params.k2 * range);

    // The 2D window is the outer product of these weights.
    const std::vector<double> g = gaussian_1d(win, params.sigma);

    const std::size_t oh = h - win + 1;
    const std::size_t ow = w - win + 1;
    // Horizontal pass for the five moment maps, then vertical.
    auto filter = [&](auto&& pixel) {
        Matrix horiz(h, ow);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < ow; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < win; ++k) acc += g[k] * pixel(r, c + k);
                horiz(r, c) = acc;
            }
        Matrix out(oh, ow);
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t c = 0; c < ow; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < win; ++k) acc += g[k] * horiz(r + k, c);
                out(r, c) = acc;
            }
        return out;
    };

    const Matrix mu_x = filter([&](std::size_t r, std::size_t c) { return ref(r, c); });
    const Matrix mu_y = filter([&](std::size_t r, std::size_t c) { return rec(r, c); });
    const Matrix xx = filter([&](std::size_t r, std::size_t c) { return ref(r, c) * ref(r, c); });
    const Matrix yy = filter([&](std::size_t r, std::size_t c) { return rec(r, c) * rec(r, c); });
    const Matrix xy = filter([&](std::size_t r, std::size_t c) { return ref(r, c) * rec(r, c); });

    double total = 0.0;
    for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
            const double mx = mu_x(r, c);
            const double my = mu_y(r, c);
            const double vx = xx(r, c) - mx * mx;
            const double vy = yy(r, c) - my * my;
            const double cxy = xy(r, c) - mx * my;
            const double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += den != 0.0 ? num / den : 1.0;
        }
    }
    return total / static_cast<double>(oh * ow);
}

MetricReport evaluate_pair(const Image& ref, const Image& rec) {
    return {psnr(ref, rec), ssim(ref, rec), nmse(ref, rec)};
}

MetricReport mean_report(std::span<const MetricReport> reports) {
    if (reports.empty()) throw_invalid("mean_report: no reports");
    MetricReport m;
    for (const auto& r : reports) {
        m.psnr += r.psnr;
        m.ssim += r.ssim;
        m.nmse += r.nmse;
    }
    const double n = static_cast<double>(reports.size());
    m.psnr /= n;
    m.ssim /= n;
    m.nmse /= n;
    return m;
}

void CommLedger::record_round(std::uint64_t clients) {
    total_scalars += clients * (per_round_scalars_up + per_round_scalars_down);
    ++rounds;
}

void CommLedger::record_extra_down(std::uint64_t scalars) { total_scalars += scalars; }

CommLedger count_communication(TrainingMode mode, const ModelDims& dims) {
    CommLedger ledger;
    const std::uint64_t prompts = dims.prompt_scalars();
    const std::uint64_t all = prompts + dims.backbone_scalars();
    const std::uint64_t exchanged = mode == TrainingMode::FedAvgFullFinetune ? all : prompts;
    ledger.per_round_scalars_up = exchanged;
    ledger.per_round_scalars_down = exchanged;
    ledger.trainable_scalars = exchanged;
    return ledger;
}

double forgetting_gap(std::span<const std::vector<double>> history) {
    if (history.size() < 2) throw_invalid("forgetting_gap: need at least two rounds of history");
    const std::size_t clients = history.front().size();
    if (clients == 0) throw_invalid("forgetting_gap: no clients in history");
    for (const auto& round : history)
        if (round.size() != clients) throw_invalid("forgetting_gap: ragged history");

    double gap = 0.0;
    for (std::size_t k = 0; k < clients; ++k) {
        double best = history.front()[k];
        for (std::size_t z = 1; z + 1 < history.size(); ++z) best = std::min(best, history[z][k]);
        gap += std::max(0.0, history.back()[k] - best);
    }
    return gap / static_cast<double>(clients);
}

}  // namespace fednull
