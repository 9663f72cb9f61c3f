#pragma once

#include <map>
#include <string>
#include <vector>

#include "hyperpelt/model.hpp"

namespace hyperpelt {

enum class Method { prompt, prefix, adapter, mam, hyperformer, hyperprefix, hyperpelt };

Method method_from_string(const std::string& s);
const char* method_to_string(Method m);
std::vector<Method> all_methods();

// Tunable-parameter rows evaluated verbatim as tabulated, with B_attn = 3
// and B_ffn = 2. The hyperprefix row reproduces the printed formula even
// though its last term is dimensionally anomalous.
long long closed_form_count(Method m, const ModelConfig& cfg);

// This artifact's corrected variants: concatenated 3*d_t projector input,
// two-head prefix map, and every parameter the freeze mask actually trains
// (site gates, adapter layer norms, backbone layer norms, biases). Methods
// without a live variant return the as-printed value.
long long corrected_closed_form_count(Method m, const ModelConfig& cfg);

// Closed-form total trainable count for a tuning mode; must equal live
// introspection exactly on every config.
long long corrected_mode_count(TuningMode mode, const ModelConfig& cfg);

// Registry-walk count (independent of the closed-form arithmetic).
long long registry_trainable_count(const ModelConfig& cfg, TuningMode mode,
                                   int taskembed_slot = 0);

// Exact element sums over the live model under a mask.
long long introspect_count(const Model& model, const FreezeMask& mask);
std::map<ParamGroup, long long> introspect_breakdown(const Model& model, const FreezeMask& mask);

// Frozen backbone size (weights + backbone layer norms), closed form.
long long backbone_total_closed_form(const ModelConfig& cfg);

struct ParamReportRow {
    Method method;
    long long closed_form = 0;  // as printed
    long long corrected = 0;    // artifact variant
    long long introspected = 0; // registry walk for live variants, else closed_form
    double per_task = 0.0;
    double fraction_backbone = 0.0; // per_task / backbone total
    double fraction_with_new = 0.0; // per_task / (backbone + new params)
    std::string notes;
};

struct ParamReport {
    long long backbone_total = 0;
    std::vector<ParamReportRow> rows;
};

ParamReport compare_methods(const ModelConfig& cfg);
ParamReportRow method_report(Method m, const ModelConfig& cfg);

std::string format_table(const ParamReport& report);
// `method=<m> closed_form=<n> introspected=<n> fraction=<f>`
std::string machine_line(const ParamReportRow& row);

} // namespace hyperpelt
