#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpt/image.hpp"
#include "lpt/rng.hpp"

namespace lpt {

// ---- severity level sampling ----

/// Gaussian-shaped categorical over strength levels 1..levels: the
/// continuous density exp(-(i-mu)^2 / (2 sigma^2)) evaluated at the integer
/// levels and renormalized.
struct LevelSampler {
    double mu = 3.0;
    double sigma = 1.0;
    int levels = 5;
};

std::vector<double> level_distribution(const LevelSampler& sampler);
int sample_level(const LevelSampler& sampler, Rng& rng);

// ---- catalog ----

enum class DistortionKind : int {
    GaussianBlur = 0,
    LensBlur,
    GaussianNoise,
    ImpulseNoise,
    SpeckleNoise,
    ColorShift,
    ColorJitter,
    Moire,
    ToneCurve,
    Brighten,
    Darken,
    JpegCompress,
    Quantize,
    SpatialJitter,
};

constexpr int kNumDistortionKinds = 14;
constexpr int kNumLevels = 5;

const std::vector<DistortionKind>& full_catalog();
std::string kind_name(DistortionKind kind);
DistortionKind kind_from_name(const std::string& name);

/// One distortion with a severity level in [1,5]. Level 0 is an identity
/// test hook and never appears in sampled pipelines.
struct DistortionSpec {
    DistortionKind kind = DistortionKind::GaussianBlur;
    int level = 1;
};

struct DistortionPipeline {
    std::vector<DistortionSpec> specs;
    std::uint64_t seed = 0;
};

/// Level -> parameter tables for every kind. Defaults bracket the common
/// evaluation settings (JPEG Q=50, blur sigma=2, speckle variance 0.25);
/// all values can be overridden from the config file.
struct DistortionTables {
    std::array<double, 5> gaussian_blur_sigma{0.5, 1.0, 1.5, 2.0, 2.5};
    std::array<int, 5> lens_blur_radius{1, 2, 3, 4, 5};
    std::array<double, 5> gaussian_noise_std{0.02, 0.05, 0.08, 0.12, 0.18};
    std::array<double, 5> impulse_rate{0.01, 0.03, 0.06, 0.10, 0.15};
    std::array<double, 5> speckle_var{0.05, 0.10, 0.20, 0.35, 0.50};
    std::array<double, 5> color_shift_max{0.02, 0.05, 0.08, 0.12, 0.16};
    std::array<double, 5> color_jitter_band{0.05, 0.10, 0.20, 0.30, 0.40};
    std::array<double, 5> moire_amp{0.02, 0.04, 0.06, 0.09, 0.12};
    std::array<double, 5> tone_gain{1.5, 2.5, 3.5, 5.0, 7.0};
    std::array<double, 5> brighten_gamma{0.8, 0.65, 0.5, 0.4, 0.3};
    std::array<int, 5> jpeg_quality{80, 60, 45, 30, 18};
    std::array<int, 5> quantize_bits{6, 5, 4, 3, 2};
    std::array<int, 5> spatial_jitter_max{1, 2, 3, 4, 5};
};

const DistortionTables& default_tables();

// ---- pipeline construction and application ----

/// Samples k in [k_min, k_max] (uniform, inclusive), picks k distinct kinds
/// uniformly without replacement, assigns each a sampled level. Application
/// order is the sampled order.
DistortionPipeline compose_pipeline(const std::vector<DistortionKind>& catalog, int k_min,
                                    int k_max, const LevelSampler& sampler, Rng& rng,
                                    std::uint64_t pipeline_seed);

/// Applies one distortion. Same output shape; channels clamped to [0,1];
/// stochastic kinds consume rng deterministically.
Image apply_distortion(const Image& img, const DistortionSpec& spec, Rng& rng,
                       const DistortionTables& tables = default_tables());

/// Applies the whole pipeline with an rng derived from pipeline.seed.
/// Bit-identical output for identical (img, pipeline).
Image distort(const Image& img, const DistortionPipeline& pipeline,
              const DistortionTables& tables = default_tables());

// ---- parameterized primitives (used by both level tables and the fixed
//      evaluation profiles) ----

Image gaussian_blur(const Image& img, double sigma, int ksize = 0);  // 0: 2*ceil(3*sigma)+1
Image lens_blur(const Image& img, int radius);
Image gaussian_noise(const Image& img, double stddev, Rng& rng);
Image impulse_noise(const Image& img, double rate, Rng& rng);
Image speckle_noise(const Image& img, double variance, Rng& rng);
Image color_shift(const Image& img, double max_offset, Rng& rng);
Image color_jitter(const Image& img, double band, Rng& rng);
Image moire(const Image& img, double amplitude, Rng& rng);
Image tone_curve(const Image& img, double gain);
Image gamma_map(const Image& img, double gamma);
Image quantize_bits(const Image& img, int bits);
Image spatial_jitter(const Image& img, int max_shift, Rng& rng);
/// Baseline JPEG round trip: BT.601 RGB<->YCbCr, 8x8 block DCT, standard
/// quantization tables scaled by quality, no chroma subsampling, edge
/// blocks padded by replication. quality in [1,100].
Image jpeg_compress(const Image& img, int quality);

// ---- JSON round trip for reproducibility ----

std::string pipeline_to_json(const DistortionPipeline& pipeline);
DistortionPipeline pipeline_from_json(const std::string& json_text);

}  // namespace lpt
