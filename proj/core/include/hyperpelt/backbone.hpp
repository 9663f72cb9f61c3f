#pragma once

#include <map>
#include <optional>
#include <vector>

#include "hyperpelt/config.hpp"
#include "hyperpelt/hypernets.hpp"
#include "hyperpelt/tensor.hpp"

namespace hyperpelt {

struct AttentionParams {
    Tensor w_q, w_k, w_v, w_o; // each d x d, applied as y = x W^T
};

struct FfnParams {
    Tensor w1; // d_ff x d
    Tensor w2; // d x d_ff
};

struct LayerNormParams {
    Tensor scale, bias; // d each
};

struct EncoderLayerParams {
    LayerNormParams ln_attn;
    AttentionParams attn;
    LayerNormParams ln_ffn;
    FfnParams ffn;
    Tensor rel_bias; // rel_buckets x n_heads
};

struct DecoderLayerParams {
    LayerNormParams ln_self;
    AttentionParams self_attn;
    Tensor rel_bias;
    LayerNormParams ln_cross;
    AttentionParams cross_attn;
    LayerNormParams ln_ffn;
    FfnParams ffn;
};

struct BackboneParams {
    Tensor token_emb; // vocab x d, tied input/output
    std::vector<EncoderLayerParams> enc;
    std::vector<DecoderLayerParams> dec;
    LayerNormParams enc_final;
    LayerNormParams dec_final;
};

BackboneParams init_backbone(const ModelConfig& cfg, Rng& rng);

struct PrefixPair {
    Tensor p_k, p_v; // N_total x d each
};

// Generated key/value prefixes per attention block. Only attention kinds
// may carry entries.
class PrefixPack {
public:
    void set(BlockId block, PrefixPair pair);
    const PrefixPair* find(BlockId block) const;
    bool empty() const { return entries_.empty(); }

private:
    std::map<std::pair<int, int>, PrefixPair> entries_;
};

// Generated adapters per feed-forward block. A site may hold several
// parallel adapters (task-conditioned plus visual-conditioned).
class AdapterSet {
public:
    void add(BlockId block, AdapterWeights weights);
    std::vector<const AdapterWeights*> find(BlockId block) const;
    bool empty() const { return entries_.empty(); }

private:
    std::map<std::pair<int, int>, std::vector<AdapterWeights>> entries_;
};

// Zero-pads an additive attention bias on the key axis so prefix positions
// receive exactly zero bias.
Tensor pad_bias_for_prefix(Graph& g, const Tensor& bias, int n_prefix);

// Per-head additive relative position bias matrices (q_len x k_len each),
// read out of a small bucket table.
std::vector<Tensor> relative_bias_heads(Graph& g, const Tensor& table, int n_heads,
                                        int q_len, int k_len, bool bidirectional);

// Multi-head attention with optional key/value prefixes prepended after
// projection. Unscaled dot-product logits (T5 convention). `rel_bias` holds
// one q_len x k_len matrix per head; `causal` masks context positions above
// the diagonal while prefixes stay visible everywhere.
Tensor attention_with_prefix(Graph& g, const ModelConfig& cfg, const AttentionParams& p,
                             const Tensor& x, const Tensor& context,
                             const PrefixPair* prefix,
                             const std::vector<Tensor>* rel_bias,
                             bool causal);

// x + FFN(LN(x)) + sum of parallel adapter branches applied to x. With no
// adapters this is the plain feed-forward block.
Tensor ffn_with_adapter(Graph& g, const FfnParams& ffn, const LayerNormParams& ln,
                        float ln_eps, const Tensor& x,
                        const std::vector<const AdapterWeights*>& adapters);

struct Seq2SeqOutput {
    Tensor logits; // out_len x vocab
    Tensor loss;   // scalar, mean token cross-entropy
};

// Teacher-forced encoder-decoder pass. Decoder input is the target shifted
// right with the start id; decoder self-attention is causally masked.
Seq2SeqOutput forward_seq2seq(Graph& g, const ModelConfig& cfg, const BackboneParams& params,
                              const std::vector<int>& ids_in, const std::vector<int>& ids_out,
                              const PrefixPack* prefix, const AdapterSet* adapters);

constexpr int kStartTokenId = 0;

// Argmax decoding; emits up to max_len tokens and stops after emitting
// eos_id (which is included in the result when produced).
std::vector<int> greedy_decode(const ModelConfig& cfg, const BackboneParams& params,
                               const std::vector<int>& ids_in, const PrefixPack* prefix,
                               const AdapterSet* adapters, int max_len, int eos_id);

} // namespace hyperpelt
