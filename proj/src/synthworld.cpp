#include "iglab/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace iglab {

namespace {

const char* kKindNames[kNumKinds] = {
    "motion_blur",     "lens_blur", "block_exchange", "quantize",
    "gaussian_noise",  "dark_illumination", "graffiti", "sharpness_change",
};

const char* kSeverityNames[4] = {"clean", "low", "mid", "hard"};

int severity_index(Severity s) {
    switch (s) {
        case Severity::Low: return 0;
        case Severity::Mid: return 1;
        case Severity::Hard: return 2;
        default: throw std::runtime_error("severity_index: clean has no parameters");
    }
}

void clamp_grid(Grid& g) {
    for (double& p : g.pixels) p = std::clamp(p, 0.0, 1.0);
}

// Replicate-border horizontal 1-D convolution with the given symmetric kernel.
Grid conv_rows(const Grid& g, const std::vector<double>& kernel) {
    int radius = static_cast<int>(kernel.size()) / 2;
    Grid out = Grid::zeros(g.height, g.width);
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) {
                int cc = std::clamp(c + d, 0, g.width - 1);
                acc += kernel[static_cast<size_t>(d + radius)] * g.at(r, cc);
            }
            out.at(r, c) = acc;
        }
    return out;
}

Grid conv_cols(const Grid& g, const std::vector<double>& kernel) {
    int radius = static_cast<int>(kernel.size()) / 2;
    Grid out = Grid::zeros(g.height, g.width);
    for (int r = 0; r < g.height; ++r)
        for (int c = 0; c < g.width; ++c) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) {
                int rr = std::clamp(r + d, 0, g.height - 1);
                acc += kernel[static_cast<size_t>(d + radius)] * g.at(rr, c);
            }
            out.at(r, c) = acc;
        }
    return out;
}

std::vector<double> box_kernel(int len) {
    return std::vector<double>(static_cast<size_t>(len), 1.0 / len);
}

std::vector<double> gaussian_kernel(double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double total = 0.0;
    for (int d = -radius; d <= radius; ++d) {
        double w = std::exp(-0.5 * d * d / (sigma * sigma));
        k[static_cast<size_t>(d + radius)] = w;
        total += w;
    }
    for (double& w : k) w /= total;
    return k;
}

Grid apply_motion_blur(const Grid& g, int len) { return conv_rows(g, box_kernel(len)); }

Grid apply_lens_blur(const Grid& g, double sigma) {
    auto k = gaussian_kernel(sigma);
    return conv_cols(conv_rows(g, k), k);
}

Grid apply_block_exchange(const Grid& g, int pairs, Rng& rng) {
    Grid out = g;
    const int B = 3;
    for (int p = 0; p < pairs; ++p) {
        int r1 = rng.uniform_int(g.height - B + 1);
        int c1 = rng.uniform_int(g.width - B + 1);
        int r2 = rng.uniform_int(g.height - B + 1);
        int c2 = rng.uniform_int(g.width - B + 1);
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < B; ++j)
                std::swap(out.at(r1 + i, c1 + j), out.at(r2 + i, c2 + j));
    }
    return out;
}

Grid apply_quantize(const Grid& g, int levels) {
    Grid out = g;
    double steps = levels - 1;
    for (double& p : out.pixels) p = std::round(p * steps) / steps;
    return out;
}

Grid apply_gaussian_noise(const Grid& g, double sigma, Rng& rng) {
    Grid out = g;
    for (double& p : out.pixels) p += sigma * rng.normal();
    clamp_grid(out);
    return out;
}

Grid apply_dark(const Grid& g, double factor) {
    Grid out = g;
    for (double& p : out.pixels) p *= factor;
    return out;
}

// Random 4-neighbor walk painting pixels to 1 until `frac` of the grid has
// been overwritten. One seed produces one walk; higher severities extend the
// same walk, so the painted sets nest across severity levels.
Grid apply_graffiti(const Grid& g, double frac, Rng& rng) {
    Grid out = g;
    int target = static_cast<int>(std::lround(frac * g.size()));
    if (target <= 0) return out;
    std::vector<uint8_t> painted(static_cast<size_t>(g.size()), 0);
    int r = rng.uniform_int(g.height);
    int c = rng.uniform_int(g.width);
    int painted_count = 0;
    const int step_cap = 200 * g.size();
    for (int step = 0; step < step_cap && painted_count < target; ++step) {
        size_t idx = static_cast<size_t>(r) * g.width + c;
        if (!painted[idx]) {
            painted[idx] = 1;
            out.pixels[idx] = 1.0;
            ++painted_count;
        }
        switch (rng.uniform_int(4)) {
            case 0: r = std::clamp(r - 1, 0, g.height - 1); break;
            case 1: r = std::clamp(r + 1, 0, g.height - 1); break;
            case 2: c = std::clamp(c - 1, 0, g.width - 1); break;
            default: c = std::clamp(c + 1, 0, g.width - 1); break;
        }
    }
    return out;
}

Grid apply_sharpness(const Grid& g, double amount) {
    // Unsharp mask against a 3x3 box blur.
    Grid base = conv_cols(conv_rows(g, box_kernel(3)), box_kernel(3));
    Grid out = g;
    for (size_t i = 0; i < out.pixels.size(); ++i)
        out.pixels[i] = g.pixels[i] + amount * (g.pixels[i] - base.pixels[i]);
    clamp_grid(out);
    return out;
}

}  // namespace

const char* kind_name(Kind k) { return kKindNames[static_cast<int>(k)]; }
const char* severity_name(Severity s) { return kSeverityNames[static_cast<int>(s)]; }

Kind parse_kind(const std::string& name) {
    for (int i = 0; i < kNumKinds; ++i)
        if (name == kKindNames[i]) return static_cast<Kind>(i);
    throw std::runtime_error("parse_kind: unknown kind '" + name + "'");
}

Severity parse_severity(const std::string& name) {
    for (int i = 0; i < 4; ++i)
        if (name == kSeverityNames[i]) return static_cast<Severity>(i);
    throw std::runtime_error("parse_severity: unknown severity '" + name + "'");
}

const SeverityRegistry& default_registry() {
    static const SeverityRegistry reg;
    return reg;
}

Grid make_shape(int class_id, uint64_t seed) {
    if (class_id < 0 || class_id >= kNumClasses)
        throw std::runtime_error("make_shape: class_id out of range");
    Rng rng(derive_seed(seed, hash_str("shape")));
    int dr = rng.uniform_int(3) - 1;  // jitter in {-1, 0, 1}
    int dc = rng.uniform_int(3) - 1;
    double intensity = rng.uniform(0.7, 1.0);

    Grid g = Grid::zeros();
    auto set = [&](int r, int c) {
        if (r >= 0 && r < g.height && c >= 0 && c < g.width) g.at(r, c) = intensity;
    };
    switch (class_id) {
        case 0:  // horizontal bar, 2 rows thick
            for (int r = 5 + dr; r <= 6 + dr; ++r)
                for (int c = 1 + dc; c <= 10 + dc; ++c) set(r, c);
            break;
        case 1:  // vertical bar
            for (int c = 5 + dc; c <= 6 + dc; ++c)
                for (int r = 1 + dr; r <= 10 + dr; ++r) set(r, c);
            break;
        case 2:  // cross
            for (int r = 5 + dr; r <= 6 + dr; ++r)
                for (int c = 1 + dc; c <= 10 + dc; ++c) set(r, c);
            for (int c = 5 + dc; c <= 6 + dc; ++c)
                for (int r = 1 + dr; r <= 10 + dr; ++r) set(r, c);
            break;
        case 3:  // main diagonal band, 3 px wide
            for (int r = 0; r < g.height; ++r)
                for (int c = 0; c < g.width; ++c)
                    if (std::abs(r - c - dc) <= 1) set(r, c);
            break;
        case 4:  // anti-diagonal band
            for (int r = 0; r < g.height; ++r)
                for (int c = 0; c < g.width; ++c)
                    if (std::abs(r + c - 11 - dc) <= 1) set(r, c);
            break;
        default:  // square ring
            for (int r = 2 + dr; r <= 9 + dr; ++r)
                for (int c = 2 + dc; c <= 9 + dc; ++c)
                    if (r == 2 + dr || r == 9 + dr || c == 2 + dc || c == 9 + dc)
                        set(r, c);
            break;
    }
    return g;
}

Grid corrupt(const Grid& g, const CorruptionSpec& spec, const SeverityRegistry& reg) {
    if (spec.severity == Severity::Clean) return g;
    int si = severity_index(spec.severity);
    // Stream keyed by (seed, kind) only: the same seed at different severities
    // replays identical draws, which keeps damage comparisons well posed.
    Rng rng(derive_seed(spec.seed, hash_str(kind_name(spec.kind))));
    switch (spec.kind) {
        case Kind::MotionBlur: return apply_motion_blur(g, reg.motion_len[si]);
        case Kind::LensBlur: return apply_lens_blur(g, reg.lens_sigma[si]);
        case Kind::BlockExchange: return apply_block_exchange(g, reg.block_pairs[si], rng);
        case Kind::Quantize: return apply_quantize(g, reg.quant_levels[si]);
        case Kind::GaussianNoise: return apply_gaussian_noise(g, reg.noise_sigma[si], rng);
        case Kind::DarkIllumination: return apply_dark(g, reg.dark_factor[si]);
        case Kind::Graffiti: return apply_graffiti(g, reg.graffiti_frac[si], rng);
        case Kind::SharpnessChange: return apply_sharpness(g, reg.sharp_amount[si]);
    }
    throw std::runtime_error("corrupt: unknown kind");
}

DatasetManifest build_dataset(int count, const SeverityMix& mix, uint64_t seed,
                              const BuildOptions& opts) {
    if (count <= 0) throw std::runtime_error("build_dataset: count must be positive");
    double total = mix.low + mix.mid + mix.hard;
    if (std::abs(total - 1.0) > 1e-9)
        throw std::runtime_error("build_dataset: severity mix must sum to 1");

    DatasetManifest m;
    m.global_seed = seed;
    m.split = opts.split;
    uint64_t split_seed = derive_seed(seed, hash_str(opts.split));
    Rng rng(derive_seed(split_seed, hash_str("build")));
    m.records.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        ManifestRecord rec;
        rec.sample_id = i;
        rec.class_id = rng.uniform_int(kNumClasses);
        rec.kind = opts.forced_kind ? *opts.forced_kind
                                    : static_cast<Kind>(rng.uniform_int(kNumKinds));
        double u = rng.uniform();
        rec.severity = u < mix.low              ? Severity::Low
                       : u < mix.low + mix.mid ? Severity::Mid
                                               : Severity::Hard;
        rec.seed = derive_seed(split_seed, static_cast<uint64_t>(i));
        m.records.push_back(rec);
    }
    return m;
}

Sample materialize(const ManifestRecord& rec) {
    Sample s;
    s.sample_id = rec.sample_id;
    s.class_id = rec.class_id;
    s.clean = make_shape(rec.class_id, derive_seed(rec.seed, hash_str("shape-of")));
    s.spec = CorruptionSpec{rec.kind, rec.severity, derive_seed(rec.seed, hash_str("corrupt"))};
    s.degraded = corrupt(s.clean, s.spec);
    return s;
}

double grid_mse(const Grid& a, const Grid& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::runtime_error("grid_mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        double d = a.pixels[i] - b.pixels[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.pixels.size());
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_manifest: cannot open " + path);
    f << "IGLAB-MANIFEST v1\n";
    f << "# split=" << m.split << " seed=" << m.global_seed << "\n";
    for (const ManifestRecord& r : m.records)
        f << r.sample_id << ',' << r.class_id << ',' << kind_name(r.kind) << ','
          << severity_name(r.severity) << ',' << r.seed << "\n";
    if (!f) throw std::runtime_error("save_manifest: write failed for " + path);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "IGLAB-MANIFEST v1")
        throw std::runtime_error("load_manifest: bad header in " + path);
    DatasetManifest m;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream meta(line.substr(1));
            std::string tok;
            while (meta >> tok) {
                if (tok.rfind("split=", 0) == 0) m.split = tok.substr(6);
                if (tok.rfind("seed=", 0) == 0) m.global_seed = std::stoull(tok.substr(5));
            }
            continue;
        }
        std::istringstream ls(line);
        std::string field[5];
        for (int i = 0; i < 5; ++i)
            if (!std::getline(ls, field[i], i == 4 ? '\n' : ','))
                throw std::runtime_error("load_manifest: malformed record '" + line + "'");
        ManifestRecord rec;
        rec.sample_id = std::stoi(field[0]);
        rec.class_id = std::stoi(field[1]);
        rec.kind = parse_kind(field[2]);
        rec.severity = parse_severity(field[3]);
        rec.seed = std::stoull(field[4]);
        m.records.push_back(rec);
    }
    return m;
}

void save_grid_blob(const std::string& path, const Grid& g) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_grid_blob: cannot open " + path);
    f.write("IGL1", 4);
    uint32_t h = static_cast<uint32_t>(g.height);
    uint32_t w = static_cast<uint32_t>(g.width);
    f.write(reinterpret_cast<const char*>(&h), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    for (double p : g.pixels) {
        float fp = static_cast<float>(p);
        f.write(reinterpret_cast<const char*>(&fp), 4);
    }
    if (!f) throw std::runtime_error("save_grid_blob: write failed for " + path);
}

Grid load_grid_blob(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_grid_blob: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "IGL1", 4) != 0)
        throw std::runtime_error("load_grid_blob: bad magic in " + path);
    uint32_t h = 0, w = 0;
    f.read(reinterpret_cast<char*>(&h), 4);
    f.read(reinterpret_cast<char*>(&w), 4);
    if (!f || h == 0 || w == 0 || h > 4096 || w > 4096)
        throw std::runtime_error("load_grid_blob: bad dimensions in " + path);
    Grid g = Grid::zeros(static_cast<int>(h), static_cast<int>(w));
    for (double& p : g.pixels) {
        float fp = 0.0f;
        f.read(reinterpret_cast<char*>(&fp), 4);
        if (!f) throw std::runtime_error("load_grid_blob: truncated file " + path);
        p = static_cast<double>(fp);
    }
    return g;
}

}  // namespace iglab
