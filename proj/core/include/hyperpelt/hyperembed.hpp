#pragma once

#include <string>
#include <vector>

#include "hyperpelt/config.hpp"
#include "hyperpelt/tensor.hpp"

namespace hyperpelt {

// Trainable conditioning inputs: one N x d_t matrix per task, per layer and
// per block kind. Row count N matches the prefix length.
struct EmbeddingBank {
    std::vector<Tensor> task_embeddings;  // T_tasks entries
    std::vector<Tensor> layer_embeddings; // L entries
    std::vector<Tensor> block_embeddings; // always 5 entries
};

// Two affine layers with a ReLU in between, mapping the concatenated
// (source, layer, block) rows from 3*d_t down to d_I.
struct ProjectorMLP {
    Tensor w1; // d_I_mid x 3*d_t
    Tensor b1; // d_I_mid
    Tensor w2; // d_I x d_I_mid
    Tensor b2; // d_I
};

struct HyperEmbedding {
    Tensor I; // N x d_I
    std::string source;
    BlockId block;
};

// I = MLP(concat(source, l_layer, b_kind)) with concat along the feature
// axis. `source` is a task embedding or a projected visual representation.
HyperEmbedding build_hyper_embedding(Graph& g, const EmbeddingBank& bank,
                                     const ProjectorMLP& projector,
                                     const Tensor& source_embedding,
                                     BlockId block,
                                     std::string source_tag = {});

// Mean over the N axis; the d_I vector conditioning the adapter hypernet.
Tensor pool_for_adapter(Graph& g, const HyperEmbedding& I);

// Embeddings ~ N(0, 0.02^2); MLP weights ~ N(0, 1/fan_in); zero biases.
// Deterministic per seed.
EmbeddingBank init_embedding_bank(const ModelConfig& cfg, Rng& rng);
ProjectorMLP init_projector(const ModelConfig& cfg, Rng& rng);

constexpr float kEmbedInitStd = 0.02f;

} // namespace hyperpelt
