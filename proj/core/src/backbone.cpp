#include "hyperpelt/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace hyperpelt {

namespace {

constexpr float kMaskValue = -1e9f;

AttentionParams init_attention(const ModelConfig& cfg, Rng& rng) {
    const float std = 1.0f / std::sqrt(static_cast<float>(cfg.d));
    AttentionParams p;
    p.w_q = Tensor::randn({cfg.d, cfg.d}, rng, std);
    p.w_k = Tensor::randn({cfg.d, cfg.d}, rng, std);
    p.w_v = Tensor::randn({cfg.d, cfg.d}, rng, std);
    p.w_o = Tensor::randn({cfg.d, cfg.d}, rng, std);
    return p;
}

FfnParams init_ffn(const ModelConfig& cfg, Rng& rng) {
    FfnParams p;
    p.w1 = Tensor::randn({cfg.d_ff, cfg.d}, rng, 1.0f / std::sqrt(static_cast<float>(cfg.d)));
    p.w2 = Tensor::randn({cfg.d, cfg.d_ff}, rng, 1.0f / std::sqrt(static_cast<float>(cfg.d_ff)));
    return p;
}

LayerNormParams init_ln(int d) {
    return LayerNormParams{Tensor::full({d}, 1.0f), Tensor::zeros({d})};
}

std::pair<int, int> block_key(BlockId block) {
    return {block.layer_index, static_cast<int>(block.kind)};
}

// clamped relative-position bucket; queries index rows, keys index columns
int rel_bucket(int q, int k, int num_buckets, bool bidirectional) {
    const int rel = k - q;
    if (bidirectional) {
        const int half = num_buckets / 2;
        return std::clamp(rel, -half, num_buckets - half - 1) + half;
    }
    return std::clamp(-rel, 0, num_buckets - 1);
}

} // namespace

BackboneParams init_backbone(const ModelConfig& cfg, Rng& rng) {
    BackboneParams p;
    p.token_emb = Tensor::randn({cfg.vocab_size, cfg.d}, rng,
                                1.0f / std::sqrt(static_cast<float>(cfg.d)));
    p.enc.reserve(static_cast<std::size_t>(cfg.L));
    for (int i = 0; i < cfg.L; ++i) {
        EncoderLayerParams layer;
        layer.ln_attn = init_ln(cfg.d);
        layer.attn = init_attention(cfg, rng);
        layer.ln_ffn = init_ln(cfg.d);
        layer.ffn = init_ffn(cfg, rng);
        layer.rel_bias = Tensor::randn({cfg.rel_buckets, cfg.n_heads}, rng, 0.1f);
        p.enc.push_back(std::move(layer));
    }
    p.dec.reserve(static_cast<std::size_t>(cfg.L));
    for (int i = 0; i < cfg.L; ++i) {
        DecoderLayerParams layer;
        layer.ln_self = init_ln(cfg.d);
        layer.self_attn = init_attention(cfg, rng);
        layer.rel_bias = Tensor::randn({cfg.rel_buckets, cfg.n_heads}, rng, 0.1f);
        layer.ln_cross = init_ln(cfg.d);
        layer.cross_attn = init_attention(cfg, rng);
        layer.ln_ffn = init_ln(cfg.d);
        layer.ffn = init_ffn(cfg, rng);
        p.dec.push_back(std::move(layer));
    }
    p.enc_final = init_ln(cfg.d);
    p.dec_final = init_ln(cfg.d);
    return p;
}

void PrefixPack::set(BlockId block, PrefixPair pair) {
    if (!block_kind_is_attention(block.kind)) {
        throw contract_error(std::string("prefix pack: ") + block_kind_name(block.kind) +
                             " is not an attention block");
    }
    if (pair.p_k.shape() != pair.p_v.shape()) {
        throw dimension_error("prefix pack: P_k " + shape_str(pair.p_k.shape()) +
                              " and P_v " + shape_str(pair.p_v.shape()) + " differ");
    }
    entries_[block_key(block)] = std::move(pair);
}

const PrefixPair* PrefixPack::find(BlockId block) const {
    auto it = entries_.find(block_key(block));
    return it == entries_.end() ? nullptr : &it->second;
}

void AdapterSet::add(BlockId block, AdapterWeights weights) {
    if (block_kind_is_attention(block.kind)) {
        throw contract_error(std::string("adapter set: ") + block_kind_name(block.kind) +
                             " is not a feed-forward block");
    }
    entries_[block_key(block)].push_back(std::move(weights));
}

std::vector<const AdapterWeights*> AdapterSet::find(BlockId block) const {
    std::vector<const AdapterWeights*> out;
    auto it = entries_.find(block_key(block));
    if (it != entries_.end()) {
        for (const auto& w : it->second) out.push_back(&w);
    }
    return out;
}

Tensor pad_bias_for_prefix(Graph& g, const Tensor& bias, int n_prefix) {
    if (n_prefix == 0) return bias;
    Tensor zeros = Tensor::zeros({bias.dim(0), n_prefix});
    return g.concat({zeros, bias}, /*axis=*/1);
}

std::vector<Tensor> relative_bias_heads(Graph& g, const Tensor& table, int n_heads,
                                        int q_len, int k_len, bool bidirectional) {
    const int num_buckets = table.dim(0);
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(q_len) * static_cast<std::size_t>(k_len));
    for (int q = 0; q < q_len; ++q) {
        for (int k = 0; k < k_len; ++k) {
            ids.push_back(rel_bucket(q, k, num_buckets, bidirectional));
        }
    }
    Tensor rows = g.embedding_lookup(table, ids); // (q_len*k_len) x n_heads
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Tensor col = g.slice(rows, /*axis=*/1, h, 1);
        heads.push_back(g.reshape(col, {q_len, k_len}));
    }
    return heads;
}

Tensor attention_with_prefix(Graph& g, const ModelConfig& cfg, const AttentionParams& p,
                             const Tensor& x, const Tensor& context,
                             const PrefixPair* prefix,
                             const std::vector<Tensor>* rel_bias,
                             bool causal) {
    if (x.dim(1) != cfg.d || context.dim(1) != cfg.d) {
        throw dimension_error("attention: state width " + shape_str(x.shape()) + "/" +
                              shape_str(context.shape()) + " does not match d=" + std::to_string(cfg.d));
    }
    if (prefix && prefix->p_k.dim(1) != cfg.d) {
        throw dimension_error("attention: prefix width " + shape_str(prefix->p_k.shape()) +
                              " does not match d=" + std::to_string(cfg.d));
    }
    const int q_len = x.dim(0);
    const int k_len = context.dim(0);
    const int n_prefix = prefix ? prefix->p_k.dim(0) : 0;
    const int dh = cfg.d / cfg.n_heads;

    Tensor q = g.matmul(x, p.w_q, /*trans_b=*/true);
    Tensor k = g.matmul(context, p.w_k, /*trans_b=*/true);
    Tensor v = g.matmul(context, p.w_v, /*trans_b=*/true);
    if (prefix) {
        k = g.concat({prefix->p_k, k}, /*axis=*/0);
        v = g.concat({prefix->p_v, v}, /*axis=*/0);
    }

    Tensor causal_mask;
    if (causal) {
        std::vector<float> mask(static_cast<std::size_t>(q_len) * static_cast<std::size_t>(k_len), 0.0f);
        for (int i = 0; i < q_len; ++i) {
            for (int j = i + 1; j < k_len; ++j) {
                mask[static_cast<std::size_t>(i) * k_len + j] = kMaskValue;
            }
        }
        causal_mask = Tensor::from({q_len, k_len}, std::move(mask));
    }

    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
        Tensor qh = g.slice(q, 1, h * dh, dh);
        Tensor kh = g.slice(k, 1, h * dh, dh);
        Tensor vh = g.slice(v, 1, h * dh, dh);
        Tensor scores = g.matmul(qh, kh, /*trans_b=*/true); // q_len x (n_prefix + k_len)

        Tensor bias;
        if (rel_bias) bias = (*rel_bias)[static_cast<std::size_t>(h)];
        if (causal) bias = bias.defined() ? g.add(bias, causal_mask) : causal_mask;
        if (bias.defined()) {
            scores = g.add(scores, pad_bias_for_prefix(g, bias, n_prefix));
        }

        Tensor probs = g.softmax_lastdim(scores);
        heads.push_back(g.matmul(probs, vh));
    }
    Tensor merged = cfg.n_heads == 1 ? heads[0] : g.concat(heads, /*axis=*/1);
    return g.matmul(merged, p.w_o, /*trans_b=*/true);
}

Tensor ffn_with_adapter(Graph& g, const FfnParams& ffn, const LayerNormParams& ln,
                        float ln_eps, const Tensor& x,
                        const std::vector<const AdapterWeights*>& adapters) {
    for (const AdapterWeights* a : adapters) {
        if (a->w_down.dim(1) != x.dim(1)) {
            throw dimension_error("adapter bottleneck " + shape_str(a->w_down.shape()) +
                                  " does not match states " + shape_str(x.shape()));
        }
    }
    Tensor h = g.layernorm(x, ln.scale, ln.bias, ln_eps);
    Tensor f = g.matmul(g.relu(g.matmul(h, ffn.w1, /*trans_b=*/true)), ffn.w2, /*trans_b=*/true);
    Tensor out = g.add(x, f);
    for (const AdapterWeights* a : adapters) {
        out = g.add(out, adapter_delta(g, *a, x));
    }
    return out;
}

namespace {

Tensor encode(Graph& g, const ModelConfig& cfg, const BackboneParams& params,
              const std::vector<int>& ids_in, const PrefixPack* prefix,
              const AdapterSet* adapters) {
    Tensor x = g.embedding_lookup(params.token_emb, ids_in);
    const int len = static_cast<int>(ids_in.size());
    for (int i = 0; i < cfg.L; ++i) {
        const auto& layer = params.enc[static_cast<std::size_t>(i)];
        auto bias = relative_bias_heads(g, layer.rel_bias, cfg.n_heads, len, len,
                                        /*bidirectional=*/true);
        Tensor h = g.layernorm(x, layer.ln_attn.scale, layer.ln_attn.bias, cfg.ln_eps);
        const PrefixPair* pre = prefix ? prefix->find({i, BlockKind::enc_self_attn}) : nullptr;
        x = g.add(x, attention_with_prefix(g, cfg, layer.attn, h, h, pre, &bias, /*causal=*/false));

        std::vector<const AdapterWeights*> site;
        if (adapters) site = adapters->find({i, BlockKind::enc_ffn});
        x = ffn_with_adapter(g, layer.ffn, layer.ln_ffn, cfg.ln_eps, x, site);
    }
    return g.layernorm(x, params.enc_final.scale, params.enc_final.bias, cfg.ln_eps);
}

Tensor decode_states(Graph& g, const ModelConfig& cfg, const BackboneParams& params,
                     const Tensor& enc_out, const std::vector<int>& dec_ids,
                     const PrefixPack* prefix, const AdapterSet* adapters) {
    Tensor x = g.embedding_lookup(params.token_emb, dec_ids);
    const int len = static_cast<int>(dec_ids.size());
    for (int i = 0; i < cfg.L; ++i) {
        const auto& layer = params.dec[static_cast<std::size_t>(i)];
        auto bias = relative_bias_heads(g, layer.rel_bias, cfg.n_heads, len, len,
                                        /*bidirectional=*/false);
        Tensor h = g.layernorm(x, layer.ln_self.scale, layer.ln_self.bias, cfg.ln_eps);
        const PrefixPair* pre_self = prefix ? prefix->find({i, BlockKind::dec_self_attn}) : nullptr;
        x = g.add(x, attention_with_prefix(g, cfg, layer.self_attn, h, h, pre_self, &bias,
                                           /*causal=*/true));

        Tensor hc = g.layernorm(x, layer.ln_cross.scale, layer.ln_cross.bias, cfg.ln_eps);
        const PrefixPair* pre_cross = prefix ? prefix->find({i, BlockKind::dec_cross_attn}) : nullptr;
        x = g.add(x, attention_with_prefix(g, cfg, layer.cross_attn, hc, enc_out, pre_cross,
                                           nullptr, /*causal=*/false));

        std::vector<const AdapterWeights*> site;
        if (adapters) site = adapters->find({i, BlockKind::dec_ffn});
        x = ffn_with_adapter(g, layer.ffn, layer.ln_ffn, cfg.ln_eps, x, site);
    }
    return g.layernorm(x, params.dec_final.scale, params.dec_final.bias, cfg.ln_eps);
}

} // namespace

Seq2SeqOutput forward_seq2seq(Graph& g, const ModelConfig& cfg, const BackboneParams& params,
                              const std::vector<int>& ids_in, const std::vector<int>& ids_out,
                              const PrefixPack* prefix, const AdapterSet* adapters) {
    if (ids_in.empty()) throw contract_error("forward_seq2seq: empty input sequence");
    if (ids_out.empty()) throw contract_error("forward_seq2seq: empty target sequence");

    Tensor enc_out = encode(g, cfg, params, ids_in, prefix, adapters);

    std::vector<int> dec_ids(ids_out.size());
    dec_ids[0] = kStartTokenId;
    std::copy(ids_out.begin(), ids_out.end() - 1, dec_ids.begin() + 1);

    Tensor dec_out = decode_states(g, cfg, params, enc_out, dec_ids, prefix, adapters);
    Tensor logits = g.matmul(dec_out, params.token_emb, /*trans_b=*/true);
    Tensor loss = g.cross_entropy(logits, ids_out);
    return Seq2SeqOutput{std::move(logits), std::move(loss)};
}

std::vector<int> greedy_decode(const ModelConfig& cfg, const BackboneParams& params,
                               const std::vector<int>& ids_in, const PrefixPack* prefix,
                               const AdapterSet* adapters, int max_len, int eos_id) {
    if (max_len < 1) throw contract_error("greedy_decode: max_len must be >= 1");
    std::vector<int> out;
    std::vector<int> dec_ids{kStartTokenId};
    for (int step = 0; step < max_len; ++step) {
        Graph g;
        Tensor enc_out = encode(g, cfg, params, ids_in, prefix, adapters);
        Tensor dec_out = decode_states(g, cfg, params, enc_out, dec_ids, prefix, adapters);
        Tensor logits = g.matmul(dec_out, params.token_emb, /*trans_b=*/true);
        const auto row = logits.data().subspan(
            static_cast<std::size_t>(logits.dim(0) - 1) * static_cast<std::size_t>(logits.dim(1)),
            static_cast<std::size_t>(logits.dim(1)));
        int best = 0;
        for (int v = 1; v < logits.dim(1); ++v) {
            if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
        }
        out.push_back(best);
        if (best == eos_id) break;
        dec_ids.push_back(best);
    }
    return out;
}

} // namespace hyperpelt
