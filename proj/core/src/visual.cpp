#include "hyperpelt/visual.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace hyperpelt {

VisualProjection init_visual_projection(const ModelConfig& cfg, Rng& rng) {
    return VisualProjection{Tensor::randn({cfg.d_t, cfg.d_v}, rng,
                                          1.0f / std::sqrt(static_cast<float>(cfg.d_v)))};
}

Tensor project_visual(Graph& g, const VisualProjection& proj, const VisualFeatures& feats,
                      const ModelConfig& cfg) {
    if (feats.grid.dim(1) != cfg.d_v) {
        throw dimension_error("visual features width " + shape_str(feats.grid.shape()) +
                              " does not match d_v=" + std::to_string(cfg.d_v));
    }
    if (feats.grid.dim(0) != cfg.N) {
        throw dimension_error("visual grid rows " + shape_str(feats.grid.shape()) +
                              " must equal prefix length N=" + std::to_string(cfg.N));
    }
    return g.matmul(feats.grid, proj.w, /*trans_b=*/true); // N x d_t
}

HyperEmbedding build_visual_hyper_embedding(Graph& g, const EmbeddingBank& bank,
                                            const ProjectorMLP& visual_projector,
                                            const Tensor& projected, BlockId block,
                                            std::uint64_t image_id) {
    return build_hyper_embedding(g, bank, visual_projector, projected, block,
                                 "image:" + std::to_string(image_id));
}

std::pair<Tensor, Tensor> merge_prefixes(Graph& g, const std::pair<Tensor, Tensor>& text,
                                         const std::pair<Tensor, Tensor>& visual) {
    if (text.first.dim(1) != visual.first.dim(1)) {
        throw dimension_error("merge_prefixes: width mismatch " + shape_str(text.first.shape()) +
                              " vs " + shape_str(visual.first.shape()));
    }
    return {g.concat({text.first, visual.first}, /*axis=*/0),
            g.concat({text.second, visual.second}, /*axis=*/0)};
}

VisualFeatures synth_visual_features(std::uint64_t image_id, std::uint64_t seed,
                                     int n_grid, int d_v) {
    Rng rng(splitmix64(seed ^ splitmix64(image_id + 0x9e3779b97f4a7c15ULL)));
    VisualFeatures feats;
    feats.image_id = image_id;
    feats.grid = Tensor::randn({n_grid, d_v}, rng, 1.0f);
    return feats;
}

// ------------------------------------------------------------- HPVF file

namespace {

constexpr char kMagic[4] = {'H', 'P', 'V', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::ostream& os, float v) {
    put_u32(os, std::bit_cast<std::uint32_t>(v));
}

std::uint32_t get_u32(std::istream& is, const char* field) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw format_error(std::string("HPVF: truncated while reading ") + field +
                           " at byte offset " + std::to_string(is.gcount() >= 0 ? is.tellg() : -1));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is, const char* field) {
    const std::uint64_t lo = get_u32(is, field);
    const std::uint64_t hi = get_u32(is, field);
    return lo | (hi << 32);
}

float get_f32(std::istream& is, const char* field) {
    return std::bit_cast<float>(get_u32(is, field));
}

void read_header(std::istream& is, const std::string& path, std::uint32_t& count,
                 std::uint32_t& n_grid, std::uint32_t& d_v) {
    char magic[4];
    if (!is.read(magic, 4)) {
        throw format_error("HPVF: '" + path + "' truncated at byte offset 0 (magic)");
    }
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw format_error("HPVF: '" + path + "' has bad magic at byte offset 0");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
        throw version_error("HPVF: unsupported version " + std::to_string(version));
    }
    count = get_u32(is, "count");
    n_grid = get_u32(is, "N_grid");
    d_v = get_u32(is, "d_v");
    if (n_grid == 0 || d_v == 0) {
        throw format_error("HPVF: zero N_grid or d_v in header");
    }
}

VisualFeatures read_record(std::istream& is, std::uint32_t n_grid, std::uint32_t d_v) {
    VisualFeatures feats;
    feats.image_id = get_u64(is, "image_id");
    std::vector<float> values(static_cast<std::size_t>(n_grid) * d_v);
    for (auto& v : values) v = get_f32(is, "feature value");
    feats.grid = Tensor::from({static_cast<int>(n_grid), static_cast<int>(d_v)}, std::move(values));
    return feats;
}

} // namespace

void save_visual_features(const std::string& path, const std::vector<VisualFeatures>& feats) {
    if (feats.empty()) throw contract_error("save_visual_features: empty feature list");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("HPVF: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(feats.size()));
    const int n_grid = feats[0].grid.dim(0);
    const int d_v = feats[0].grid.dim(1);
    put_u32(os, static_cast<std::uint32_t>(n_grid));
    put_u32(os, static_cast<std::uint32_t>(d_v));
    for (const auto& f : feats) {
        if (f.grid.dim(0) != n_grid || f.grid.dim(1) != d_v) {
            throw dimension_error("HPVF: inconsistent grid shape " + shape_str(f.grid.shape()));
        }
        put_u64(os, f.image_id);
        for (float v : f.grid.data()) put_f32(os, v);
    }
    if (!os) throw format_error("HPVF: write to '" + path + "' failed");
}

std::vector<VisualFeatures> load_visual_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("HPVF: cannot open '" + path + "'");
    std::uint32_t count, n_grid, d_v;
    read_header(is, path, count, n_grid, d_v);
    std::vector<VisualFeatures> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        out.push_back(read_record(is, n_grid, d_v));
    }
    return out;
}

struct VisualFeatureReader::State {
    std::ifstream is;
};

VisualFeatureReader::VisualFeatureReader(const std::string& path) : state_(new State) {
    state_->is.open(path, std::ios::binary);
    if (!state_->is) {
        delete state_;
        throw format_error("HPVF: cannot open '" + path + "'");
    }
    try {
        read_header(state_->is, path, count_, n_grid_, d_v_);
    } catch (...) {
        delete state_;
        throw;
    }
}

VisualFeatureReader::~VisualFeatureReader() { delete state_; }

std::optional<VisualFeatures> VisualFeatureReader::next() {
    if (read_ >= count_) return std::nullopt;
    ++read_;
    return read_record(state_->is, n_grid_, d_v_);
}

} // namespace hyperpelt
