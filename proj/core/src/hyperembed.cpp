#include "hyperpelt/hyperembed.hpp"

#include <cmath>

namespace hyperpelt {

HyperEmbedding build_hyper_embedding(Graph& g, const EmbeddingBank& bank,
                                     const ProjectorMLP& projector,
                                     const Tensor& source_embedding,
                                     BlockId block,
                                     std::string source_tag) {
    if (block.layer_index < 0 ||
        block.layer_index >= static_cast<int>(bank.layer_embeddings.size())) {
        throw lookup_error("hyper-embedding: layer index " + std::to_string(block.layer_index) +
                           " out of range");
    }
    const int kind = static_cast<int>(block.kind);
    if (kind < 0 || kind >= static_cast<int>(bank.block_embeddings.size())) {
        throw lookup_error("hyper-embedding: block kind out of range");
    }
    const Tensor& layer = bank.layer_embeddings[static_cast<std::size_t>(block.layer_index)];
    const Tensor& blk = bank.block_embeddings[static_cast<std::size_t>(kind)];

    Tensor cat = g.concat({source_embedding, layer, blk}, /*axis=*/1);
    Tensor hidden = g.relu(g.add(g.matmul(cat, projector.w1, /*trans_b=*/true), projector.b1));
    Tensor I = g.add(g.matmul(hidden, projector.w2, /*trans_b=*/true), projector.b2);
    return HyperEmbedding{std::move(I), std::move(source_tag), block};
}

Tensor pool_for_adapter(Graph& g, const HyperEmbedding& I) {
    return g.adaptive_mean_pool(I.I, 1);
}

EmbeddingBank init_embedding_bank(const ModelConfig& cfg, Rng& rng) {
    EmbeddingBank bank;
    const Shape shape{cfg.N, cfg.d_t};
    bank.task_embeddings.reserve(static_cast<std::size_t>(cfg.T_tasks));
    for (int t = 0; t < cfg.T_tasks; ++t) {
        bank.task_embeddings.push_back(Tensor::randn(shape, rng, kEmbedInitStd));
    }
    bank.layer_embeddings.reserve(static_cast<std::size_t>(cfg.L));
    for (int i = 0; i < cfg.L; ++i) {
        bank.layer_embeddings.push_back(Tensor::randn(shape, rng, kEmbedInitStd));
    }
    bank.block_embeddings.reserve(kBlockKindCount);
    for (int k = 0; k < kBlockKindCount; ++k) {
        bank.block_embeddings.push_back(Tensor::randn(shape, rng, kEmbedInitStd));
    }
    return bank;
}

ProjectorMLP init_projector(const ModelConfig& cfg, Rng& rng) {
    ProjectorMLP p;
    const int in_width = 3 * cfg.d_t;
    p.w1 = Tensor::randn({cfg.d_I_mid, in_width}, rng,
                         1.0f / std::sqrt(static_cast<float>(in_width)));
    p.b1 = Tensor::zeros({cfg.d_I_mid});
    p.w2 = Tensor::randn({cfg.d_I, cfg.d_I_mid}, rng,
                         1.0f / std::sqrt(static_cast<float>(cfg.d_I_mid)));
    p.b2 = Tensor::zeros({cfg.d_I});
    return p;
}

} // namespace hyperpelt
