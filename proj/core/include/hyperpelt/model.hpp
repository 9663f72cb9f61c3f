#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hyperpelt/backbone.hpp"
#include "hyperpelt/config.hpp"
#include "hyperpelt/grad_check.hpp"
#include "hyperpelt/hyperembed.hpp"
#include "hyperpelt/hypernets.hpp"
#include "hyperpelt/visual.hpp"

namespace hyperpelt {

enum class ParamGroup { backbone, layernorm, embeddings, projectors, hypernets, lambda_gate, visual };

const char* param_group_name(ParamGroup g);
ParamGroup param_group_of(const std::string& name);

struct ParamSpec {
    std::string name;
    Shape shape;
    ParamGroup group;
};

// Every parameter the mode instantiates, in construction order. The live
// model's named parameters match this list one-to-one.
std::vector<ParamSpec> param_registry(const ModelConfig& cfg);

// Trainability predicate shared by freeze masks and closed-form counting.
// `taskembed_slot` selects the single tunable task embedding in taskembed
// mode and is ignored otherwise.
bool trainable_in_mode(TuningMode mode, const std::string& name, int taskembed_slot = 0);

struct FreezeMask {
    std::map<std::string, bool> flags;

    bool is_trainable(const std::string& name) const;
};

// Per-site adapter leaves: the scaled gate and the Eq.-6 layer norm.
struct AdapterSite {
    Tensor lambda;
    Tensor ln_scale;
    Tensor ln_bias;
};

class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    std::vector<NamedTensor>& named_params() { return params_; }
    const std::vector<NamedTensor>& named_params() const { return params_; }
    Tensor find_param(const std::string& name) const; // lookup_error if absent

    // -- task slots -------------------------------------------------------
    void set_task_names(std::vector<std::string> names);
    const std::vector<std::string>& task_names() const { return task_names_; }
    int task_slot(const std::string& task) const;
    bool has_task(const std::string& task) const;
    // Appends a task slot whose embedding copies `source_task` (or random
    // N(0, 0.02^2) init from `rng` when source_task is empty).
    int add_task(const std::string& new_task, const std::string& source_task, Rng* rng = nullptr);

    // -- forward ----------------------------------------------------------
    struct PackSet {
        PrefixPack prefixes;
        AdapterSet adapters;
    };

    // Builds the generated prefixes/adapters for one (task, image) pairing
    // on the given graph. Absent in full mode.
    PackSet build_packs(Graph& g, int task_slot, const VisualFeatures* visual) const;

    Seq2SeqOutput forward(Graph& g, int task_slot, const std::vector<int>& ids_in,
                          const std::vector<int>& ids_out, const VisualFeatures* visual) const;

    std::vector<int> greedy(int task_slot, const std::vector<int>& ids_in,
                            const VisualFeatures* visual, int max_len, int eos_id) const;

    // -- tuning -----------------------------------------------------------
    FreezeMask freeze_mask(TuningMode tune_mode, const std::string& target_task = {}) const;
    void apply_mask(const FreezeMask& mask); // sets requires_grad flags

    bool has_hyper() const { return cfg_.mode != TuningMode::full; }
    bool has_adapters() const;
    bool has_visual() const { return cfg_.mode == TuningMode::vl_hyperpelt; }

    const EmbeddingBank& bank() const { return bank_; }
    const BackboneParams& backbone() const { return backbone_; }

private:
    void collect_params();

    ModelConfig cfg_;
    BackboneParams backbone_;

    EmbeddingBank bank_;
    ProjectorMLP text_projector_;
    PrefixHypernet prefix_net_;
    AdapterHypernet adapter_net_;
    std::vector<AdapterSite> enc_adapter_sites_; // one per encoder layer
    std::vector<AdapterSite> dec_adapter_sites_;

    VisualProjection visual_proj_;
    ProjectorMLP visual_projector_;
    PrefixHypernet visual_prefix_net_;
    AdapterHypernet visual_adapter_net_;
    std::vector<AdapterSite> enc_visual_sites_;
    std::vector<AdapterSite> dec_visual_sites_;

    std::vector<std::string> task_names_;
    std::vector<NamedTensor> params_;
};

} // namespace hyperpelt
