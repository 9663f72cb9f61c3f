#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "hyperpelt/hyperembed.hpp"
#include "hyperpelt/tensor.hpp"

namespace hyperpelt {

// Frozen-encoder grid features for one image. Row count equals the prefix
// length N.
struct VisualFeatures {
    std::uint64_t image_id = 0;
    Tensor grid; // N x d_v
};

// Trainable map from frozen visual features into the task-embedding space.
struct VisualProjection {
    Tensor w; // d_t x d_v
};

VisualProjection init_visual_projection(const ModelConfig& cfg, Rng& rng);

// Row-wise linear projection; the result plays the role of z_tau.
Tensor project_visual(Graph& g, const VisualProjection& proj, const VisualFeatures& feats,
                      const ModelConfig& cfg);

// Same pipeline as build_hyper_embedding, with the separately-parameterized
// visual projector of identical architecture.
HyperEmbedding build_visual_hyper_embedding(Graph& g, const EmbeddingBank& bank,
                                            const ProjectorMLP& visual_projector,
                                            const Tensor& projected, BlockId block,
                                            std::uint64_t image_id);

// Concatenation along the prefix axis, text rows first. Downstream
// attention sees N_total = 2N keys/values per site.
std::pair<Tensor, Tensor> merge_prefixes(Graph& g, const std::pair<Tensor, Tensor>& text,
                                         const std::pair<Tensor, Tensor>& visual);

// Deterministic hash-to-Gaussian features for a (image_id, seed) pair.
VisualFeatures synth_visual_features(std::uint64_t image_id, std::uint64_t seed,
                                     int n_grid, int d_v);

// ---- feature file, binary little-endian -------------------------------
// magic "HPVF", version u32=1, count u32, N_grid u32, d_v u32, then per
// image: image_id u64 + N_grid*d_v float32 values. Bit-exact round trip.

void save_visual_features(const std::string& path, const std::vector<VisualFeatures>& feats);
std::vector<VisualFeatures> load_visual_features(const std::string& path);

// Streaming reader over the same format; next() returns nullopt at end.
class VisualFeatureReader {
public:
    explicit VisualFeatureReader(const std::string& path);
    ~VisualFeatureReader();
    VisualFeatureReader(const VisualFeatureReader&) = delete;
    VisualFeatureReader& operator=(const VisualFeatureReader&) = delete;

    std::uint32_t count() const { return count_; }
    std::uint32_t n_grid() const { return n_grid_; }
    std::uint32_t d_v() const { return d_v_; }
    std::optional<VisualFeatures> next();

private:
    struct State;
    State* state_;
    std::uint32_t count_ = 0, n_grid_ = 0, d_v_ = 0, read_ = 0;
};

// Producer/consumer handoff for feature prefetching: push blocks while the
// queue is full, pop blocks while empty, close() wakes everyone up.
template <class T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

    // Returns false when the queue is closed.
    bool push(T value) {
        std::unique_lock lock(mu_);
        not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
        if (closed_) return false;
        items_.push_back(std::move(value));
        not_empty_.notify_one();
        return true;
    }

    std::optional<T> pop() {
        std::unique_lock lock(mu_);
        not_empty_.wait(lock, [&] { return !items_.empty() || closed_; });
        if (items_.empty()) return std::nullopt;
        T value = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return value;
    }

    void close() {
        std::lock_guard lock(mu_);
        closed_ = true;
        not_empty_.notify_all();
        not_full_.notify_all();
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return items_.size();
    }

private:
    mutable std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> items_;
    std::size_t capacity_;
    bool closed_ = false;
};

} // namespace hyperpelt
