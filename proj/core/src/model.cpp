#include "hyperpelt/model.hpp"

#include <algorithm>
#include <cassert>

namespace hyperpelt {

const char* param_group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::backbone: return "backbone";
        case ParamGroup::layernorm: return "layernorm";
        case ParamGroup::embeddings: return "embeddings";
        case ParamGroup::projectors: return "projectors";
        case ParamGroup::hypernets: return "hypernets";
        case ParamGroup::lambda_gate: return "lambda";
        case ParamGroup::visual: return "visual";
    }
    return "?";
}

ParamGroup param_group_of(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("visual.") || starts("proj.visual.") || starts("hyper.visual.") ||
        starts("adapter_vis.")) {
        return ParamGroup::visual;
    }
    if (starts("backbone.")) return ParamGroup::backbone;
    if (starts("ln.")) return ParamGroup::layernorm;
    if (starts("embed.")) return ParamGroup::embeddings;
    if (starts("proj.")) return ParamGroup::projectors;
    if (starts("hyper.")) return ParamGroup::hypernets;
    if (starts("adapter.")) {
        return name.ends_with(".lambda") ? ParamGroup::lambda_gate : ParamGroup::layernorm;
    }
    throw lookup_error("unknown parameter group for '" + name + "'");
}

namespace {

bool mode_has_hyper(TuningMode m) { return m != TuningMode::full; }
bool mode_has_adapters(TuningMode m) {
    return m == TuningMode::hyperpelt || m == TuningMode::taskembed ||
           m == TuningMode::vl_hyperpelt;
}
bool mode_has_visual(TuningMode m) { return m == TuningMode::vl_hyperpelt; }

void add_ln(std::vector<ParamSpec>& out, const std::string& prefix, int d) {
    out.push_back({prefix + ".scale", {d}, ParamGroup::layernorm});
    out.push_back({prefix + ".bias", {d}, ParamGroup::layernorm});
}

void add_attn(std::vector<ParamSpec>& out, const std::string& prefix, int d) {
    for (const char* w : {"w_q", "w_k", "w_v", "w_o"}) {
        out.push_back({prefix + "." + w, {d, d}, ParamGroup::backbone});
    }
}

void add_projector(std::vector<ParamSpec>& out, const std::string& prefix,
                   const ModelConfig& cfg, ParamGroup group) {
    out.push_back({prefix + ".w1", {cfg.d_I_mid, 3 * cfg.d_t}, group});
    out.push_back({prefix + ".b1", {cfg.d_I_mid}, group});
    out.push_back({prefix + ".w2", {cfg.d_I, cfg.d_I_mid}, group});
    out.push_back({prefix + ".b2", {cfg.d_I}, group});
}

void add_adapter_sites(std::vector<ParamSpec>& out, const std::string& prefix,
                       const ModelConfig& cfg, ParamGroup ln_group) {
    for (const char* half : {"enc", "dec"}) {
        for (int i = 0; i < cfg.L; ++i) {
            const std::string site = prefix + "." + half + "." + std::to_string(i);
            out.push_back({site + ".lambda", {1},
                           ln_group == ParamGroup::visual ? ParamGroup::visual
                                                          : ParamGroup::lambda_gate});
            out.push_back({site + ".ln_scale", {cfg.d}, ln_group});
            out.push_back({site + ".ln_bias", {cfg.d}, ln_group});
        }
    }
}

} // namespace

std::vector<ParamSpec> param_registry(const ModelConfig& cfg) {
    std::vector<ParamSpec> out;
    out.push_back({"backbone.token_emb", {cfg.vocab_size, cfg.d}, ParamGroup::backbone});
    for (int i = 0; i < cfg.L; ++i) {
        const std::string e = "enc." + std::to_string(i);
        add_ln(out, "ln." + e + ".attn", cfg.d);
        add_attn(out, "backbone." + e + ".attn", cfg.d);
        add_ln(out, "ln." + e + ".ffn", cfg.d);
        out.push_back({"backbone." + e + ".ffn.w1", {cfg.d_ff, cfg.d}, ParamGroup::backbone});
        out.push_back({"backbone." + e + ".ffn.w2", {cfg.d, cfg.d_ff}, ParamGroup::backbone});
        out.push_back({"backbone." + e + ".rel_bias", {cfg.rel_buckets, cfg.n_heads}, ParamGroup::backbone});
    }
    for (int i = 0; i < cfg.L; ++i) {
        const std::string d = "dec." + std::to_string(i);
        add_ln(out, "ln." + d + ".self", cfg.d);
        add_attn(out, "backbone." + d + ".self", cfg.d);
        out.push_back({"backbone." + d + ".rel_bias", {cfg.rel_buckets, cfg.n_heads}, ParamGroup::backbone});
        add_ln(out, "ln." + d + ".cross", cfg.d);
        add_attn(out, "backbone." + d + ".cross", cfg.d);
        add_ln(out, "ln." + d + ".ffn", cfg.d);
        out.push_back({"backbone." + d + ".ffn.w1", {cfg.d_ff, cfg.d}, ParamGroup::backbone});
        out.push_back({"backbone." + d + ".ffn.w2", {cfg.d, cfg.d_ff}, ParamGroup::backbone});
    }
    add_ln(out, "ln.enc_final", cfg.d);
    add_ln(out, "ln.dec_final", cfg.d);

    if (mode_has_hyper(cfg.mode)) {
        for (int t = 0; t < cfg.T_tasks; ++t) {
            out.push_back({"embed.task." + std::to_string(t), {cfg.N, cfg.d_t}, ParamGroup::embeddings});
        }
        for (int i = 0; i < cfg.L; ++i) {
            out.push_back({"embed.layer." + std::to_string(i), {cfg.N, cfg.d_t}, ParamGroup::embeddings});
        }
        for (int k = 0; k < kBlockKindCount; ++k) {
            out.push_back({std::string("embed.block.") + block_kind_name(static_cast<BlockKind>(k)),
                           {cfg.N, cfg.d_t}, ParamGroup::embeddings});
        }
        add_projector(out, "proj.text", cfg, ParamGroup::projectors);
        out.push_back({"hyper.prefix.w_k", {cfg.d, cfg.d_I}, ParamGroup::hypernets});
        out.push_back({"hyper.prefix.w_v", {cfg.d, cfg.d_I}, ParamGroup::hypernets});
    }
    if (mode_has_adapters(cfg.mode)) {
        out.push_back({"hyper.adapter.w_up", {cfg.d * cfg.d_mid, cfg.d_I}, ParamGroup::hypernets});
        out.push_back({"hyper.adapter.w_down", {cfg.d_mid * cfg.d, cfg.d_I}, ParamGroup::hypernets});
        add_adapter_sites(out, "adapter", cfg, ParamGroup::layernorm);
    }
    if (mode_has_visual(cfg.mode)) {
        out.push_back({"visual.feat_proj.w", {cfg.d_t, cfg.d_v}, ParamGroup::visual});
        add_projector(out, "proj.visual", cfg, ParamGroup::visual);
        out.push_back({"hyper.visual.prefix.w_k", {cfg.d, cfg.d_I}, ParamGroup::visual});
        out.push_back({"hyper.visual.prefix.w_v", {cfg.d, cfg.d_I}, ParamGroup::visual});
        out.push_back({"hyper.visual.adapter.w_up", {cfg.d * cfg.d_mid, cfg.d_I}, ParamGroup::visual});
        out.push_back({"hyper.visual.adapter.w_down", {cfg.d_mid * cfg.d, cfg.d_I}, ParamGroup::visual});
        add_adapter_sites(out, "adapter_vis", cfg, ParamGroup::visual);
    }
    return out;
}

bool trainable_in_mode(TuningMode mode, const std::string& name, int taskembed_slot) {
    switch (mode) {
        case TuningMode::full:
            return true;
        case TuningMode::taskembed:
            return name == "embed.task." + std::to_string(taskembed_slot);
        case TuningMode::hyperprefix: {
            // No adapter machinery exists; the two FFN block embeddings are
            // present but unused, hence frozen.
            if (name == "embed.block.enc_ffn" || name == "embed.block.dec_ffn") return false;
            const ParamGroup g = param_group_of(name);
            return g == ParamGroup::layernorm || g == ParamGroup::embeddings ||
                   g == ParamGroup::projectors || g == ParamGroup::hypernets;
        }
        case TuningMode::hyperpelt:
        case TuningMode::vl_hyperpelt: {
            const ParamGroup g = param_group_of(name);
            return g != ParamGroup::backbone;
        }
    }
    return false;
}

bool FreezeMask::is_trainable(const std::string& name) const {
    auto it = flags.find(name);
    if (it == flags.end()) throw lookup_error("freeze mask does not cover '" + name + "'");
    return it->second;
}

// -------------------------------------------------------------------- Model

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    backbone_ = init_backbone(cfg_, rng);
    if (has_hyper()) {
        bank_ = init_embedding_bank(cfg_, rng);
        text_projector_ = init_projector(cfg_, rng);
        prefix_net_ = init_prefix_hypernet(cfg_, rng);
    }
    if (has_adapters()) {
        adapter_net_ = init_adapter_hypernet(cfg_, rng);
        for (int i = 0; i < cfg_.L; ++i) {
            enc_adapter_sites_.push_back(
                {Tensor::scalar(0.1f), Tensor::full({cfg_.d}, 1.0f), Tensor::zeros({cfg_.d})});
        }
        for (int i = 0; i < cfg_.L; ++i) {
            dec_adapter_sites_.push_back(
                {Tensor::scalar(0.1f), Tensor::full({cfg_.d}, 1.0f), Tensor::zeros({cfg_.d})});
        }
    }
    if (has_visual()) {
        visual_proj_ = init_visual_projection(cfg_, rng);
        visual_projector_ = init_projector(cfg_, rng);
        visual_prefix_net_ = init_prefix_hypernet(cfg_, rng);
        visual_adapter_net_ = init_adapter_hypernet(cfg_, rng);
        for (int i = 0; i < cfg_.L; ++i) {
            enc_visual_sites_.push_back(
                {Tensor::scalar(0.1f), Tensor::full({cfg_.d}, 1.0f), Tensor::zeros({cfg_.d})});
        }
        for (int i = 0; i < cfg_.L; ++i) {
            dec_visual_sites_.push_back(
                {Tensor::scalar(0.1f), Tensor::full({cfg_.d}, 1.0f), Tensor::zeros({cfg_.d})});
        }
    }
    task_names_.resize(static_cast<std::size_t>(cfg_.T_tasks));
    for (int t = 0; t < cfg_.T_tasks; ++t) task_names_[static_cast<std::size_t>(t)] = "task" + std::to_string(t);

    collect_params();

    // The live parameter list must agree with the registry the budgeter
    // prices; catch drift immediately.
    const auto specs = param_registry(cfg_);
    if (specs.size() != params_.size()) {
        throw contract_error("model/registry mismatch: " + std::to_string(params_.size()) +
                             " live vs " + std::to_string(specs.size()) + " spec'd");
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].name != params_[i].name || specs[i].shape != params_[i].tensor.shape()) {
            throw contract_error("model/registry mismatch at '" + specs[i].name + "'");
        }
    }
}

void Model::collect_params() {
    params_.clear();
    auto add = [&](const std::string& name, const Tensor& t) {
        params_.push_back({name, t});
    };
    add("backbone.token_emb", backbone_.token_emb);
    for (int i = 0; i < cfg_.L; ++i) {
        const auto& layer = backbone_.enc[static_cast<std::size_t>(i)];
        const std::string e = "enc." + std::to_string(i);
        add("ln." + e + ".attn.scale", layer.ln_attn.scale);
        add("ln." + e + ".attn.bias", layer.ln_attn.bias);
        add("backbone." + e + ".attn.w_q", layer.attn.w_q);
        add("backbone." + e + ".attn.w_k", layer.attn.w_k);
        add("backbone." + e + ".attn.w_v", layer.attn.w_v);
        add("backbone." + e + ".attn.w_o", layer.attn.w_o);
        add("ln." + e + ".ffn.scale", layer.ln_ffn.scale);
        add("ln." + e + ".ffn.bias", layer.ln_ffn.bias);
        add("backbone." + e + ".ffn.w1", layer.ffn.w1);
        add("backbone." + e + ".ffn.w2", layer.ffn.w2);
        add("backbone." + e + ".rel_bias", layer.rel_bias);
    }
    for (int i = 0; i < cfg_.L; ++i) {
        const auto& layer = backbone_.dec[static_cast<std::size_t>(i)];
        const std::string d = "dec." + std::to_string(i);
        add("ln." + d + ".self.scale", layer.ln_self.scale);
        add("ln." + d + ".self.bias", layer.ln_self.bias);
        add("backbone." + d + ".self.w_q", layer.self_attn.w_q);
        add("backbone." + d + ".self.w_k", layer.self_attn.w_k);
        add("backbone." + d + ".self.w_v", layer.self_attn.w_v);
        add("backbone." + d + ".self.w_o", layer.self_attn.w_o);
        add("backbone." + d + ".rel_bias", layer.rel_bias);
        add("ln." + d + ".cross.scale", layer.ln_cross.scale);
        add("ln." + d + ".cross.bias", layer.ln_cross.bias);
        add("backbone." + d + ".cross.w_q", layer.cross_attn.w_q);
        add("backbone." + d + ".cross.w_k", layer.cross_attn.w_k);
        add("backbone." + d + ".cross.w_v", layer.cross_attn.w_v);
        add("backbone." + d + ".cross.w_o", layer.cross_attn.w_o);
        add("ln." + d + ".ffn.scale", layer.ln_ffn.scale);
        add("ln." + d + ".ffn.bias", layer.ln_ffn.bias);
        add("backbone." + d + ".ffn.w1", layer.ffn.w1);
        add("backbone." + d + ".ffn.w2", layer.ffn.w2);
    }
    add("ln.enc_final.scale", backbone_.enc_final.scale);
    add("ln.enc_final.bias", backbone_.enc_final.bias);
    add("ln.dec_final.scale", backbone_.dec_final.scale);
    add("ln.dec_final.bias", backbone_.dec_final.bias);

    if (has_hyper()) {
        for (std::size_t t = 0; t < bank_.task_embeddings.size(); ++t) {
            add("embed.task." + std::to_string(t), bank_.task_embeddings[t]);
        }
        for (std::size_t i = 0; i < bank_.layer_embeddings.size(); ++i) {
            add("embed.layer." + std::to_string(i), bank_.layer_embeddings[i]);
        }
        for (int k = 0; k < kBlockKindCount; ++k) {
            add(std::string("embed.block.") + block_kind_name(static_cast<BlockKind>(k)),
                bank_.block_embeddings[static_cast<std::size_t>(k)]);
        }
        add("proj.text.w1", text_projector_.w1);
        add("proj.text.b1", text_projector_.b1);
        add("proj.text.w2", text_projector_.w2);
        add("proj.text.b2", text_projector_.b2);
        add("hyper.prefix.w_k", prefix_net_.w_k);
        add("hyper.prefix.w_v", prefix_net_.w_v);
    }
    if (has_adapters()) {
        add("hyper.adapter.w_up", adapter_net_.w_up_gen);
        add("hyper.adapter.w_down", adapter_net_.w_down_gen);
        auto add_sites = [&](const std::string& prefix, const char* half,
                             const std::vector<AdapterSite>& sites) {
            for (std::size_t i = 0; i < sites.size(); ++i) {
                const std::string site = prefix + "." + half + "." + std::to_string(i);
                add(site + ".lambda", sites[i].lambda);
                add(site + ".ln_scale", sites[i].ln_scale);
                add(site + ".ln_bias", sites[i].ln_bias);
            }
        };
        add_sites("adapter", "enc", enc_adapter_sites_);
        add_sites("adapter", "dec", dec_adapter_sites_);
    }
    if (has_visual()) {
        add("visual.feat_proj.w", visual_proj_.w);
        add("proj.visual.w1", visual_projector_.w1);
        add("proj.visual.b1", visual_projector_.b1);
        add("proj.visual.w2", visual_projector_.w2);
        add("proj.visual.b2", visual_projector_.b2);
        add("hyper.visual.prefix.w_k", visual_prefix_net_.w_k);
        add("hyper.visual.prefix.w_v", visual_prefix_net_.w_v);
        add("hyper.visual.adapter.w_up", visual_adapter_net_.w_up_gen);
        add("hyper.visual.adapter.w_down", visual_adapter_net_.w_down_gen);
        auto add_sites = [&](const char* half, const std::vector<AdapterSite>& sites) {
            for (std::size_t i = 0; i < sites.size(); ++i) {
                const std::string site = std::string("adapter_vis.") + half + "." + std::to_string(i);
                add(site + ".lambda", sites[i].lambda);
                add(site + ".ln_scale", sites[i].ln_scale);
                add(site + ".ln_bias", sites[i].ln_bias);
            }
        };
        add_sites("enc", enc_visual_sites_);
        add_sites("dec", dec_visual_sites_);
    }
}

Tensor Model::find_param(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.tensor;
    }
    throw lookup_error("no parameter named '" + name + "'");
}

bool Model::has_adapters() const {
    return cfg_.mode == TuningMode::hyperpelt || cfg_.mode == TuningMode::taskembed ||
           cfg_.mode == TuningMode::vl_hyperpelt;
}

void Model::set_task_names(std::vector<std::string> names) {
    if (names.size() != bank_.task_embeddings.size() && has_hyper()) {
        throw contract_error("task name count " + std::to_string(names.size()) +
                             " does not match " + std::to_string(bank_.task_embeddings.size()) +
                             " task slots");
    }
    task_names_ = std::move(names);
}

int Model::task_slot(const std::string& task) const {
    for (std::size_t i = 0; i < task_names_.size(); ++i) {
        if (task_names_[i] == task) return static_cast<int>(i);
    }
    throw lookup_error("unknown task '" + task + "'");
}

bool Model::has_task(const std::string& task) const {
    return std::find(task_names_.begin(), task_names_.end(), task) != task_names_.end();
}

int Model::add_task(const std::string& new_task, const std::string& source_task, Rng* rng) {
    if (!has_hyper()) throw contract_error("add_task requires a hyper-conditioned mode");
    if (has_task(new_task)) return task_slot(new_task); // alias of an existing slot
    Tensor z;
    if (!source_task.empty()) {
        z = find_param("embed.task." + std::to_string(task_slot(source_task))).clone();
    } else {
        if (!rng) throw contract_error("add_task: random init requires an rng");
        z = Tensor::randn({cfg_.N, cfg_.d_t}, *rng, kEmbedInitStd);
    }
    bank_.task_embeddings.push_back(z);
    task_names_.push_back(new_task);
    cfg_.T_tasks = static_cast<int>(bank_.task_embeddings.size());
    collect_params();
    return static_cast<int>(task_names_.size()) - 1;
}

Model::PackSet Model::build_packs(Graph& g, int task_slot, const VisualFeatures* visual) const {
    PackSet packs;
    if (!has_hyper()) return packs;
    if (task_slot < 0 || task_slot >= static_cast<int>(bank_.task_embeddings.size())) {
        throw lookup_error("task slot " + std::to_string(task_slot) + " out of range");
    }
    const Tensor& z = bank_.task_embeddings[static_cast<std::size_t>(task_slot)];

    Tensor projected_visual;
    if (has_visual() && visual) {
        projected_visual = project_visual(g, visual_proj_, *visual, cfg_);
    }

    for (int i = 0; i < cfg_.L; ++i) {
        for (int k = 0; k < kBlockKindCount; ++k) {
            const BlockId block{i, static_cast<BlockKind>(k)};
            if (block_kind_is_attention(block.kind)) {
                HyperEmbedding it = build_hyper_embedding(g, bank_, text_projector_, z, block,
                                                          task_names_[static_cast<std::size_t>(task_slot)]);
                auto pair = generate_prefix(g, prefix_net_, it);
                if (projected_visual.defined()) {
                    HyperEmbedding iv = build_visual_hyper_embedding(
                        g, bank_, visual_projector_, projected_visual, block, visual->image_id);
                    auto vpair = generate_prefix(g, visual_prefix_net_, iv);
                    pair = merge_prefixes(g, pair, vpair);
                }
                packs.prefixes.set(block, PrefixPair{pair.first, pair.second});
            } else if (has_adapters()) {
                HyperEmbedding it = build_hyper_embedding(g, bank_, text_projector_, z, block,
                                                          task_names_[static_cast<std::size_t>(task_slot)]);
                Tensor pooled = pool_for_adapter(g, it);
                auto [w_up, w_down] = generate_adapter_weights(g, adapter_net_, pooled, cfg_.d, cfg_.d_mid);
                const AdapterSite& site = block.kind == BlockKind::enc_ffn
                                              ? enc_adapter_sites_[static_cast<std::size_t>(i)]
                                              : dec_adapter_sites_[static_cast<std::size_t>(i)];
                packs.adapters.add(block, AdapterWeights{w_up, w_down, site.lambda, site.ln_scale,
                                                         site.ln_bias, cfg_.ln_eps});
                if (projected_visual.defined()) {
                    HyperEmbedding iv = build_visual_hyper_embedding(
                        g, bank_, visual_projector_, projected_visual, block, visual->image_id);
                    Tensor vpooled = pool_for_adapter(g, iv);
                    auto [vw_up, vw_down] =
                        generate_adapter_weights(g, visual_adapter_net_, vpooled, cfg_.d, cfg_.d_mid);
                    const AdapterSite& vsite = block.kind == BlockKind::enc_ffn
                                                   ? enc_visual_sites_[static_cast<std::size_t>(i)]
                                                   : dec_visual_sites_[static_cast<std::size_t>(i)];
                    packs.adapters.add(block, AdapterWeights{vw_up, vw_down, vsite.lambda,
                                                             vsite.ln_scale, vsite.ln_bias, cfg_.ln_eps});
                }
            }
        }
    }
    return packs;
}

Seq2SeqOutput Model::forward(Graph& g, int task_slot, const std::vector<int>& ids_in,
                             const std::vector<int>& ids_out, const VisualFeatures* visual) const {
    if (!has_hyper()) {
        return forward_seq2seq(g, cfg_, backbone_, ids_in, ids_out, nullptr, nullptr);
    }
    PackSet packs = build_packs(g, task_slot, visual);
    return forward_seq2seq(g, cfg_, backbone_, ids_in, ids_out, &packs.prefixes, &packs.adapters);
}

std::vector<int> Model::greedy(int task_slot, const std::vector<int>& ids_in,
                               const VisualFeatures* visual, int max_len, int eos_id) const {
    if (!has_hyper()) {
        return greedy_decode(cfg_, backbone_, ids_in, nullptr, nullptr, max_len, eos_id);
    }
    // The generated packs are plain tensors; decoding graphs treat them as
    // constant leaves.
    Graph g;
    PackSet packs = build_packs(g, task_slot, visual);
    return greedy_decode(cfg_, backbone_, ids_in, &packs.prefixes, &packs.adapters, max_len, eos_id);
}

FreezeMask Model::freeze_mask(TuningMode tune_mode, const std::string& target_task) const {
    int slot = 0;
    if (tune_mode == TuningMode::taskembed) {
        if (target_task.empty()) {
            throw contract_error("taskembed mask requires a target task");
        }
        slot = task_slot(target_task);
    }
    FreezeMask mask;
    for (const auto& p : params_) {
        mask.flags[p.name] = trainable_in_mode(tune_mode, p.name, slot);
    }
    return mask;
}

void Model::apply_mask(const FreezeMask& mask) {
    for (auto& p : params_) {
        auto it = mask.flags.find(p.name);
        if (it == mask.flags.end()) {
            throw contract_error("freeze mask does not cover parameter '" + p.name + "'");
        }
        p.tensor.set_requires_grad(it->second);
    }
}

} // namespace hyperpelt
