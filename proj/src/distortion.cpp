#include "lpt/distortion.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lpt/errors.hpp"

namespace lpt {

namespace {
constexpr double kTwoPi = 6.283185307179586476925287;
}

// ---- level sampling ----

std::vector<double> level_distribution(const LevelSampler& s) {
    if (s.sigma <= 0) throw ConfigError("level sampler: sigma must be > 0");
    if (s.levels < 1) throw ConfigError("level sampler: levels must be >= 1");
    std::vector<double> p(s.levels);
    double total = 0.0;
    for (int i = 0; i < s.levels; ++i) {
        const double d = (i + 1) - s.mu;
        p[i] = std::exp(-d * d / (2.0 * s.sigma * s.sigma));
        total += p[i];
    }
    for (double& v : p) v /= total;
    return p;
}

int sample_level(const LevelSampler& s, Rng& rng) {
    const auto p = level_distribution(s);
    const double u = rng.uniform01();
    double acc = 0.0;
    for (int i = 0; i < s.levels; ++i) {
        acc += p[i];
        if (u < acc) return i + 1;
    }
    return s.levels;
}

// ---- catalog ----

const std::vector<DistortionKind>& full_catalog() {
    static const std::vector<DistortionKind> kinds = [] {
        std::vector<DistortionKind> v;
        for (int i = 0; i < kNumDistortionKinds; ++i) v.push_back(static_cast<DistortionKind>(i));
        return v;
    }();
    return kinds;
}

namespace {
const std::map<DistortionKind, std::string>& kind_names() {
    static const std::map<DistortionKind, std::string> names = {
        {DistortionKind::GaussianBlur, "gaussian_blur"},
        {DistortionKind::LensBlur, "lens_blur"},
        {DistortionKind::GaussianNoise, "gaussian_noise"},
        {DistortionKind::ImpulseNoise, "impulse_noise"},
        {DistortionKind::SpeckleNoise, "speckle_noise"},
        {DistortionKind::ColorShift, "color_shift"},
        {DistortionKind::ColorJitter, "color_jitter"},
        {DistortionKind::Moire, "moire"},
        {DistortionKind::ToneCurve, "tone_curve"},
        {DistortionKind::Brighten, "brighten"},
        {DistortionKind::Darken, "darken"},
        {DistortionKind::JpegCompress, "jpeg"},
        {DistortionKind::Quantize, "quantize"},
        {DistortionKind::SpatialJitter, "spatial_jitter"},
    };
    return names;
}
}  // namespace

std::string kind_name(DistortionKind kind) {
    auto it = kind_names().find(kind);
    if (it == kind_names().end()) throw std::invalid_argument("unknown distortion kind");
    return it->second;
}

DistortionKind kind_from_name(const std::string& name) {
    for (const auto& [k, n] : kind_names())
        if (n == name) return k;
    throw ConfigError("unknown distortion kind: " + name);
}

const DistortionTables& default_tables() {
    static const DistortionTables t{};
    return t;
}

// ---- pipeline construction ----

DistortionPipeline compose_pipeline(const std::vector<DistortionKind>& catalog, int k_min,
                                    int k_max, const LevelSampler& sampler, Rng& rng,
                                    std::uint64_t pipeline_seed) {
    if (k_min > k_max) throw ConfigError("compose_pipeline: k_min > k_max");
    if (catalog.empty()) return DistortionPipeline{{}, pipeline_seed};
    if (k_max > static_cast<int>(catalog.size()))
        throw ConfigError("compose_pipeline: k_max exceeds catalog size");
    if (k_min < 0) throw ConfigError("compose_pipeline: k_min must be >= 0");

    const int k = static_cast<int>(rng.randint(k_min, k_max + 1));
    // partial Fisher-Yates: first k entries are a uniform sample without
    // replacement, in sampled order
    std::vector<DistortionKind> pool = catalog;
    DistortionPipeline out;
    out.seed = pipeline_seed;
    for (int i = 0; i < k; ++i) {
        const auto j = rng.randint(i, static_cast<std::int64_t>(pool.size()));
        std::swap(pool[i], pool[j]);
        out.specs.push_back({pool[i], sample_level(sampler, rng)});
    }
    return out;
}

// ---- convolution helpers (replicated borders) ----

namespace {

int reflect_clamp(int v, int n) { return std::clamp(v, 0, n - 1); }

Image convolve_separable(const Image& img, const std::vector<double>& kernel) {
    const int r = static_cast<int>(kernel.size()) / 2;
    Image tmp(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int t = -r; t <= r; ++t)
                    s += kernel[t + r] * img.at(y, reflect_clamp(x + t, img.w), c);
                tmp.at(y, x, c) = s;
            }
    Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int t = -r; t <= r; ++t)
                    s += kernel[t + r] * tmp.at(reflect_clamp(y + t, img.h), x, c);
                out.at(y, x, c) = s;
            }
    return out;
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma, int ksize) {
    if (sigma <= 0) throw std::invalid_argument("gaussian_blur: sigma must be > 0");
    if (ksize <= 0) ksize = 2 * static_cast<int>(std::ceil(3.0 * sigma)) + 1;
    if (ksize % 2 == 0) throw std::invalid_argument("gaussian_blur: kernel size must be odd");
    const int r = ksize / 2;
    std::vector<double> kernel(ksize);
    double total = 0.0;
    for (int t = -r; t <= r; ++t) {
        kernel[t + r] = std::exp(-0.5 * t * t / (sigma * sigma));
        total += kernel[t + r];
    }
    for (double& v : kernel) v /= total;
    Image out = convolve_separable(img, kernel);
    clamp01(out);
    return out;
}

Image lens_blur(const Image& img, int radius) {
    if (radius < 1) throw std::invalid_argument("lens_blur: radius must be >= 1");
    // normalized disc kernel
    std::vector<std::pair<int, int>> taps;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) taps.emplace_back(dy, dx);
    const double wgt = 1.0 / static_cast<double>(taps.size());
    Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (const auto& [dy, dx] : taps)
                    s += img.at(reflect_clamp(y + dy, img.h), reflect_clamp(x + dx, img.w), c);
                out.at(y, x, c) = s * wgt;
            }
    clamp01(out);
    return out;
}

Image gaussian_noise(const Image& img, double stddev, Rng& rng) {
    Image out = img;
    for (double& v : out.pix) v += rng.normal(0.0, stddev);
    clamp01(out);
    return out;
}

Image impulse_noise(const Image& img, double rate, Rng& rng) {
    // Per pixel: corrupt with probability `rate`, salt vs pepper 50/50,
    // all channels forced together.
    Image out = img;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            if (rng.uniform01() < rate) {
                const double v = rng.uniform01() < 0.5 ? 1.0 : 0.0;
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
            }
        }
    return out;
}

Image speckle_noise(const Image& img, double variance, Rng& rng) {
    const double stddev = std::sqrt(variance);
    Image out = img;
    for (double& v : out.pix) v *= 1.0 + rng.normal(0.0, stddev);
    clamp01(out);
    return out;
}

Image color_shift(const Image& img, double max_offset, Rng& rng) {
    double off[3];
    for (double& o : off) o = rng.uniform(-max_offset, max_offset);
    Image out = img;
    for (std::size_t i = 0; i < out.pix.size(); ++i) out.pix[i] += off[i % 3];
    clamp01(out);
    return out;
}

Image color_jitter(const Image& img, double band, Rng& rng) {
    double gain[3];
    for (double& g : gain) g = rng.uniform(1.0 - band, 1.0 + band);
    const double sat = rng.uniform(1.0 - band, 1.0 + band);
    Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double r = img.at(y, x, 0) * gain[0];
            const double g = img.at(y, x, 1) * gain[1];
            const double b = img.at(y, x, 2) * gain[2];
            const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
            out.at(y, x, 0) = gray + sat * (r - gray);
            out.at(y, x, 1) = gray + sat * (g - gray);
            out.at(y, x, 2) = gray + sat * (b - gray);
        }
    clamp01(out);
    return out;
}

Image moire(const Image& img, double amplitude, Rng& rng) {
    const double u = rng.uniform(0.05, 0.45);
    const double v = rng.uniform(0.05, 0.45);
    const double phase = rng.uniform(0.0, kTwoPi);
    Image out = img;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double s = amplitude * std::sin(kTwoPi * (u * x + v * y) + phase);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) += s;
        }
    clamp01(out);
    return out;
}

Image tone_curve(const Image& img, double gain) {
    // endpoint-preserving S-curve
    const double norm = 1.0 / std::tanh(gain / 2.0);
    Image out = img;
    for (double& v : out.pix) v = 0.5 + 0.5 * std::tanh(gain * (v - 0.5)) * norm;
    clamp01(out);
    return out;
}

Image gamma_map(const Image& img, double gamma) {
    if (gamma <= 0) throw std::invalid_argument("gamma_map: gamma must be > 0");
    Image out = img;
    for (double& v : out.pix) v = std::pow(std::max(v, 0.0), gamma);
    clamp01(out);
    return out;
}

Image quantize_bits(const Image& img, int bits) {
    if (bits < 1 || bits > 8) throw std::invalid_argument("quantize_bits: bits must be in [1,8]");
    const double levels = static_cast<double>((1 << bits) - 1);
    Image out = img;
    for (double& v : out.pix) v = std::round(std::clamp(v, 0.0, 1.0) * levels) / levels;
    return out;
}

Image spatial_jitter(const Image& img, int max_shift, Rng& rng) {
    if (max_shift < 0) throw std::invalid_argument("spatial_jitter: negative shift");
    Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y) {
        const int shift = static_cast<int>(rng.randint(-max_shift, max_shift + 1));
        for (int x = 0; x < img.w; ++x) {
            int src = (x - shift) % img.w;
            if (src < 0) src += img.w;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, src, c);
        }
    }
    return out;
}

// ---- dispatch ----

Image apply_distortion(const Image& img, const DistortionSpec& spec, Rng& rng,
                       const DistortionTables& t) {
    if (spec.level == 0) return img;  // identity test hook
    if (spec.level < 0 || spec.level > kNumLevels)
        throw std::invalid_argument("apply_distortion: level " + std::to_string(spec.level) +
                                    " out of range [1,5]");
    const int li = spec.level - 1;
    switch (spec.kind) {
        case DistortionKind::GaussianBlur:
            return gaussian_blur(img, t.gaussian_blur_sigma[li]);
        case DistortionKind::LensBlur:
            return lens_blur(img, t.lens_blur_radius[li]);
        case DistortionKind::GaussianNoise:
            return gaussian_noise(img, t.gaussian_noise_std[li], rng);
        case DistortionKind::ImpulseNoise:
            return impulse_noise(img, t.impulse_rate[li], rng);
        case DistortionKind::SpeckleNoise:
            return speckle_noise(img, t.speckle_var[li], rng);
        case DistortionKind::ColorShift:
            return color_shift(img, t.color_shift_max[li], rng);
        case DistortionKind::ColorJitter:
            return color_jitter(img, t.color_jitter_band[li], rng);
        case DistortionKind::Moire:
            return moire(img, t.moire_amp[li], rng);
        case DistortionKind::ToneCurve:
            return tone_curve(img, t.tone_gain[li]);
        case DistortionKind::Brighten:
            return gamma_map(img, t.brighten_gamma[li]);
        case DistortionKind::Darken:
            return gamma_map(img, 1.0 / t.brighten_gamma[li]);
        case DistortionKind::JpegCompress:
            return jpeg_compress(img, t.jpeg_quality[li]);
        case DistortionKind::Quantize:
            return quantize_bits(img, t.quantize_bits[li]);
        case DistortionKind::SpatialJitter:
            return spatial_jitter(img, t.spatial_jitter_max[li], rng);
    }
    throw std::invalid_argument("apply_distortion: unknown kind");
}

Image distort(const Image& img, const DistortionPipeline& pipeline, const DistortionTables& t) {
    Rng rng(splitmix64(pipeline.seed));
    Image out = img;
    for (const DistortionSpec& spec : pipeline.specs) out = apply_distortion(out, spec, rng, t);
    return out;
}

// ---- JSON ----

std::string pipeline_to_json(const DistortionPipeline& pipeline) {
    nlohmann::ordered_json j;
    j["seed"] = pipeline.seed;
    j["specs"] = nlohmann::ordered_json::array();
    for (const auto& s : pipeline.specs)
        j["specs"].push_back({{"kind", kind_name(s.kind)}, {"level", s.level}});
    return j.dump(2) + "\n";
}

DistortionPipeline pipeline_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("pipeline JSON parse error: ") + e.what());
    }
    DistortionPipeline p;
    p.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("specs")) {
        DistortionSpec spec;
        spec.kind = kind_from_name(s.at("kind").get<std::string>());
        spec.level = s.at("level").get<int>();
        if (spec.level < 1 || spec.level > kNumLevels)
            throw ConfigError("pipeline JSON: level out of range [1,5]");
        p.specs.push_back(spec);
    }
    return p;
}

}  // namespace lpt
