#include "hyperpelt/budgeter.hpp"

#include <iomanip>
#include <sstream>

namespace hyperpelt {

Method method_from_string(const std::string& s) {
    if (s == "prompt") return Method::prompt;
    if (s == "prefix") return Method::prefix;
    if (s == "adapter") return Method::adapter;
    if (s == "mam") return Method::mam;
    if (s == "hyperformer") return Method::hyperformer;
    if (s == "hyperprefix") return Method::hyperprefix;
    if (s == "hyperpelt") return Method::hyperpelt;
    throw lookup_error("unknown method '" + s + "'");
}

const char* method_to_string(Method m) {
    switch (m) {
        case Method::prompt: return "prompt";
        case Method::prefix: return "prefix";
        case Method::adapter: return "adapter";
        case Method::mam: return "mam";
        case Method::hyperformer: return "hyperformer";
        case Method::hyperprefix: return "hyperprefix";
        case Method::hyperpelt: return "hyperpelt";
    }
    return "?";
}

std::vector<Method> all_methods() {
    return {Method::prompt, Method::prefix,      Method::adapter,   Method::mam,
            Method::hyperformer, Method::hyperprefix, Method::hyperpelt};
}

namespace {

using ll = long long;

constexpr ll kBAttn = kAttnBlockKinds;
constexpr ll kBFfn = kFfnBlockKinds;

// Shared building blocks of the corrected counts.

ll ln_elements(const ModelConfig& cfg) {
    // 2 norms per encoder layer, 3 per decoder layer, 2 stack-final norms;
    // each is scale + bias of width d.
    return (5LL * cfg.L + 2) * 2LL * cfg.d;
}

ll projector_elements(const ModelConfig& cfg) {
    return static_cast<ll>(cfg.d_I_mid) * (3LL * cfg.d_t) + cfg.d_I_mid +
           static_cast<ll>(cfg.d_I) * cfg.d_I_mid + cfg.d_I;
}

ll prefix_net_elements(const ModelConfig& cfg) { return 2LL * cfg.d * cfg.d_I; }

ll adapter_net_elements(const ModelConfig& cfg) {
    return 2LL * cfg.d * cfg.d_mid * cfg.d_I;
}

ll adapter_site_elements(const ModelConfig& cfg) {
    // lambda + LN scale/bias per feed-forward site.
    return kBFfn * cfg.L * (1LL + 2LL * cfg.d);
}

ll visual_elements(const ModelConfig& cfg) {
    return static_cast<ll>(cfg.d_t) * cfg.d_v + projector_elements(cfg) +
           prefix_net_elements(cfg) + adapter_net_elements(cfg) + adapter_site_elements(cfg);
}

ll bank_elements(const ModelConfig& cfg, ll block_embeddings) {
    return (static_cast<ll>(cfg.T_tasks) + cfg.L + block_embeddings) *
           static_cast<ll>(cfg.N) * cfg.d_t;
}

} // namespace

long long closed_form_count(Method m, const ModelConfig& cfg) {
    const ll N = cfg.N, d = cfg.d, d_mid = cfg.d_mid, d_t = cfg.d_t;
    const ll d_I = cfg.d_I, d_I_mid = cfg.d_I_mid, L = cfg.L;
    switch (m) {
        case Method::prompt:
            return N * d;
        case Method::prefix:
            return N * d + (1 + 2 * L) * d_mid * d * kBAttn;
        case Method::adapter:
            return 2 * d_mid * d * (kBAttn + kBFfn) * L;
        case Method::mam:
            return N * d + (1 + 2 * L) * d_mid * d * kBAttn + 2 * d_mid * d * kBFfn * L;
        case Method::hyperformer:
            return (N + kBAttn + kBFfn + L) * d_t + d_t * d_I_mid + d_I_mid * d_I +
                   2 * d_I * (d_mid * d);
        case Method::hyperprefix:
            // as printed; the trailing product is the tabulated anomaly
            return (N + kBAttn + L) * d_t + d_t * d_I_mid + d_I_mid * d_I * d_I * d;
        case Method::hyperpelt:
            return (N + kBAttn + kBFfn + L) * d_t + d_t * d_I_mid + d_I_mid * d_I +
                   2 * d_I * d + 2 * d_I * (d_mid * d);
    }
    return 0;
}

long long corrected_mode_count(TuningMode mode, const ModelConfig& cfg) {
    switch (mode) {
        case TuningMode::full:
            return backbone_total_closed_form(cfg);
        case TuningMode::taskembed:
            return static_cast<ll>(cfg.N) * cfg.d_t;
        case TuningMode::hyperprefix:
            // The two FFN block embeddings exist but stay frozen.
            return ln_elements(cfg) + bank_elements(cfg, kBAttn) + projector_elements(cfg) +
                   prefix_net_elements(cfg);
        case TuningMode::hyperpelt:
            return ln_elements(cfg) + bank_elements(cfg, kBlockKindCount) +
                   projector_elements(cfg) + prefix_net_elements(cfg) +
                   adapter_net_elements(cfg) + adapter_site_elements(cfg);
        case TuningMode::vl_hyperpelt:
            return corrected_mode_count(TuningMode::hyperpelt, cfg) + visual_elements(cfg);
    }
    return 0;
}

long long corrected_closed_form_count(Method m, const ModelConfig& cfg) {
    switch (m) {
        case Method::hyperprefix:
            return corrected_mode_count(TuningMode::hyperprefix, cfg);
        case Method::hyperpelt:
            return corrected_mode_count(TuningMode::hyperpelt, cfg);
        default:
            return closed_form_count(m, cfg);
    }
}

long long registry_trainable_count(const ModelConfig& cfg, TuningMode mode, int taskembed_slot) {
    ModelConfig structured = cfg;
    structured.mode = mode;
    ll total = 0;
    for (const auto& spec : param_registry(structured)) {
        if (trainable_in_mode(mode, spec.name, taskembed_slot)) {
            total += static_cast<ll>(shape_numel(spec.shape));
        }
    }
    return total;
}

long long introspect_count(const Model& model, const FreezeMask& mask) {
    ll total = 0;
    for (const auto& p : model.named_params()) {
        if (mask.is_trainable(p.name)) total += static_cast<ll>(p.tensor.numel());
    }
    return total;
}

std::map<ParamGroup, long long> introspect_breakdown(const Model& model, const FreezeMask& mask) {
    std::map<ParamGroup, long long> out;
    for (const auto& p : model.named_params()) {
        if (mask.is_trainable(p.name)) {
            out[param_group_of(p.name)] += static_cast<ll>(p.tensor.numel());
        }
    }
    return out;
}

long long backbone_total_closed_form(const ModelConfig& cfg) {
    const ll d = cfg.d, d_ff = cfg.d_ff, L = cfg.L;
    const ll emb = static_cast<ll>(cfg.vocab_size) * d;
    const ll enc_layer = 4 * d * d + 2 * d_ff * d + static_cast<ll>(cfg.rel_buckets) * cfg.n_heads;
    const ll dec_layer = 8 * d * d + 2 * d_ff * d + static_cast<ll>(cfg.rel_buckets) * cfg.n_heads;
    return emb + L * (enc_layer + dec_layer) + ln_elements(cfg);
}

ParamReportRow method_report(Method m, const ModelConfig& cfg) {
    ParamReportRow row;
    row.method = m;
    row.closed_form = closed_form_count(m, cfg);
    row.corrected = corrected_closed_form_count(m, cfg);

    const bool live = m == Method::hyperprefix || m == Method::hyperpelt;
    ll total_new = 0;
    if (live) {
        const TuningMode mode =
            m == Method::hyperprefix ? TuningMode::hyperprefix : TuningMode::hyperpelt;
        row.introspected = registry_trainable_count(cfg, mode);
        row.per_task = static_cast<double>(row.corrected) / cfg.T_tasks;
        total_new = row.corrected;
        row.notes = "corrected: 3*d_t projector input, two-head prefix map, "
                    "biases/gates/layer norms included";
        if (m == Method::hyperprefix) {
            row.notes += "; as-printed row is dimensionally anomalous";
        }
    } else {
        row.introspected = row.closed_form;
        row.per_task = static_cast<double>(row.closed_form);
        total_new = row.closed_form * cfg.T_tasks;
        row.notes = "closed-form only (no live variant)";
    }

    const double backbone = static_cast<double>(backbone_total_closed_form(cfg));
    row.fraction_backbone = row.per_task / backbone;
    row.fraction_with_new = row.per_task / (backbone + static_cast<double>(total_new));
    return row;
}

ParamReport compare_methods(const ModelConfig& cfg) {
    ParamReport report;
    report.backbone_total = backbone_total_closed_form(cfg);
    for (Method m : all_methods()) report.rows.push_back(method_report(m, cfg));
    return report;
}

std::string format_table(const ParamReport& report) {
    std::ostringstream os;
    os << "backbone total (frozen reference): " << report.backbone_total << "\n";
    os << std::left << std::setw(13) << "method" << std::right << std::setw(16) << "as-printed"
       << std::setw(16) << "corrected" << std::setw(16) << "introspected" << std::setw(14)
       << "per-task" << std::setw(12) << "frac" << std::setw(12) << "frac+new"
       << "  notes\n";
    for (const auto& row : report.rows) {
        os << std::left << std::setw(13) << method_to_string(row.method) << std::right
           << std::setw(16) << row.closed_form << std::setw(16) << row.corrected << std::setw(16)
           << row.introspected << std::setw(14) << static_cast<long long>(row.per_task)
           << std::setw(12) << std::fixed << std::setprecision(5) << row.fraction_backbone
           << std::setw(12) << row.fraction_with_new << "  " << row.notes << "\n";
        os.unsetf(std::ios::fixed);
    }
    return os.str();
}

std::string machine_line(const ParamReportRow& row) {
    std::ostringstream os;
    os << "method=" << method_to_string(row.method) << " closed_form=" << row.closed_form
       << " introspected=" << row.introspected << " fraction=" << std::setprecision(6)
       << row.fraction_backbone;
    return os.str();
}

} // namespace hyperpelt
