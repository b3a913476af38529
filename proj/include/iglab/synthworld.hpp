#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iglab/rng.hpp"
#include "iglab/tensor.hpp"

namespace iglab {

// 12x12 intensity grid in [0,1]. Doubles in memory; the on-disk blob format
// stores f32 (see save_grid_blob).
struct Grid {
    int height = 12;
    int width = 12;
    Vec pixels;  // row-major, height*width entries

    static Grid zeros(int h = 12, int w = 12) {
        Grid g;
        g.height = h;
        g.width = w;
        g.pixels.assign(static_cast<size_t>(h) * w, 0.0);
        return g;
    }
    double& at(int r, int c) { return pixels[static_cast<size_t>(r) * width + c]; }
    double at(int r, int c) const { return pixels[static_cast<size_t>(r) * width + c]; }
    int size() const { return height * width; }
};

enum class Kind : uint8_t {
    MotionBlur,
    LensBlur,
    BlockExchange,
    Quantize,
    GaussianNoise,
    DarkIllumination,
    Graffiti,
    SharpnessChange,
};
inline constexpr int kNumKinds = 8;

enum class Severity : uint8_t { Clean, Low, Mid, Hard };

const char* kind_name(Kind k);
const char* severity_name(Severity s);
Kind parse_kind(const std::string& name);
Severity parse_severity(const std::string& name);

struct CorruptionSpec {
    Kind kind = Kind::GaussianNoise;
    Severity severity = Severity::Clean;
    uint64_t seed = 0;
};

// Severity -> parameter registry. Index 0/1/2 = low/mid/hard. Kept as data so
// recalibration does not touch corruption code.
struct SeverityRegistry {
    int motion_len[3] = {3, 5, 7};
    double lens_sigma[3] = {0.8, 1.5, 2.5};
    int block_pairs[3] = {2, 4, 8};
    int quant_levels[3] = {16, 8, 4};
    double noise_sigma[3] = {0.10, 0.25, 0.50};
    double dark_factor[3] = {0.60, 0.35, 0.15};
    double graffiti_frac[3] = {0.05, 0.10, 0.20};
    double sharp_amount[3] = {0.5, 1.5, 3.0};
};
const SeverityRegistry& default_registry();

struct Sample {
    int sample_id = 0;
    int class_id = 0;
    Grid clean;
    Grid degraded;
    CorruptionSpec spec;
};

struct ManifestRecord {
    int sample_id = 0;
    int class_id = 0;
    Kind kind = Kind::GaussianNoise;
    Severity severity = Severity::Clean;
    uint64_t seed = 0;  // per-sample seed; regenerates clean and degraded grids
};

struct DatasetManifest {
    uint64_t global_seed = 0;
    std::string split = "train";
    std::vector<ManifestRecord> records;
};

inline constexpr int kNumClasses = 6;

// Six shape templates (class 0..5): horizontal bar, vertical bar, cross, main
// diagonal, anti-diagonal, square ring. Seeded +/-1 pixel jitter, one uniform
// intensity in [0.7, 1.0] per grid. Deterministic per (class_id, seed).
Grid make_shape(int class_id, uint64_t seed);

// Applies the corruption. severity=Clean is the identity and consumes no
// randomness. The internal RNG stream depends on (seed, kind) but not on
// severity, so severity levels of one seed share their random draws.
Grid corrupt(const Grid& g, const CorruptionSpec& spec,
             const SeverityRegistry& reg = default_registry());

struct SeverityMix {
    double low = 1.0 / 3.0;
    double mid = 1.0 / 3.0;
    double hard = 1.0 / 3.0;
};

struct BuildOptions {
    std::string split = "train";
    std::optional<Kind> forced_kind;  // pin every record to one kind
};

DatasetManifest build_dataset(int count, const SeverityMix& mix, uint64_t seed,
                              const BuildOptions& opts = {});

// Regenerates the full sample (clean + degraded grids) from a record.
Sample materialize(const ManifestRecord& rec);

double grid_mse(const Grid& a, const Grid& b);

// Line-oriented manifest file. First line is exactly "IGLAB-MANIFEST v1";
// lines starting with '#' carry split/seed metadata; every other line is
// "sample_id,class_id,kind,severity,seed".
void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);

// Binary grid blob: magic "IGL1", u32 height, u32 width, f32 pixels
// row-major, all little-endian. Doubles are narrowed to f32 on write.
void save_grid_blob(const std::string& path, const Grid& g);
Grid load_grid_blob(const std::string& path);

}  // namespace iglab
