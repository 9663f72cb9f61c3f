#include "hyperpelt/hypernets.hpp"

#include <algorithm>
#include <cmath>

namespace hyperpelt {

PrefixHypernet init_prefix_hypernet(const ModelConfig& cfg, Rng& rng) {
    const float std = 1.0f / std::sqrt(static_cast<float>(cfg.d_I));
    PrefixHypernet net;
    net.w_k = Tensor::randn({cfg.d, cfg.d_I}, rng, std);
    net.w_v = Tensor::randn({cfg.d, cfg.d_I}, rng, std);
    return net;
}

AdapterHypernet init_adapter_hypernet(const ModelConfig& cfg, Rng& rng) {
    const float std = 1.0f / std::sqrt(static_cast<float>(cfg.d_I));
    AdapterHypernet net;
    net.w_up_gen = Tensor::randn({cfg.d * cfg.d_mid, cfg.d_I}, rng, std);
    net.w_down_gen = Tensor::randn({cfg.d_mid * cfg.d, cfg.d_I}, rng, std);
    return net;
}

std::pair<Tensor, Tensor> generate_prefix(Graph& g, const PrefixHypernet& net,
                                          const HyperEmbedding& I) {
    Tensor p_k = g.matmul(I.I, net.w_k, /*trans_b=*/true);
    Tensor p_v = g.matmul(I.I, net.w_v, /*trans_b=*/true);
    return {std::move(p_k), std::move(p_v)};
}

std::pair<Tensor, Tensor> generate_adapter_weights(Graph& g, const AdapterHypernet& net,
                                                   const Tensor& pooled, int d, int d_mid) {
    Tensor up_flat = g.matmul(pooled, net.w_up_gen, /*trans_b=*/true);     // 1 x (d*d_mid)
    Tensor down_flat = g.matmul(pooled, net.w_down_gen, /*trans_b=*/true); // 1 x (d_mid*d)
    Tensor w_up = g.reshape(up_flat, {d, d_mid});
    Tensor w_down = g.reshape(down_flat, {d_mid, d});
    return {std::move(w_up), std::move(w_down)};
}

Tensor adapter_delta(Graph& g, const AdapterWeights& w, const Tensor& x) {
    Tensor hidden = g.gelu(g.matmul(x, w.w_down, /*trans_b=*/true)); // T x d_mid
    Tensor up = g.matmul(hidden, w.w_up, /*trans_b=*/true);          // T x d
    Tensor normed = g.layernorm(up, w.ln_scale, w.ln_bias, w.ln_eps);
    return g.mul(normed, w.lambda);
}

Tensor apply_adapter(Graph& g, const AdapterWeights& w, const Tensor& x) {
    return g.add(adapter_delta(g, w, x), x);
}

// ------------------------------------------------------- prefix identity

namespace {

// q_out = x (1 x d) times W (d x d), plain orientation.
std::vector<double> row_times(const Tensor& x, const Tensor& w) {
    const int d_in = x.dim(x.rank() - 1);
    const int d_out = w.dim(1);
    const auto xd = x.data();
    const auto wd = w.data();
    std::vector<double> out(static_cast<std::size_t>(d_out), 0.0);
    for (int i = 0; i < d_in; ++i) {
        const double xi = static_cast<double>(xd[static_cast<std::size_t>(i)]);
        for (int j = 0; j < d_out; ++j) {
            out[static_cast<std::size_t>(j)] +=
                xi * static_cast<double>(wd[static_cast<std::size_t>(i) * d_out + j]);
        }
    }
    return out;
}

// rows (M x d) times W (d x d).
std::vector<std::vector<double>> mat_times(const Tensor& m, const Tensor& w) {
    const int rows = m.dim(0);
    const int d = m.dim(1);
    const int d_out = w.dim(1);
    const auto md = m.data();
    const auto wd = w.data();
    std::vector<std::vector<double>> out(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        out[static_cast<std::size_t>(r)].assign(static_cast<std::size_t>(d_out), 0.0);
        for (int i = 0; i < d; ++i) {
            const double v = static_cast<double>(md[static_cast<std::size_t>(r) * d + i]);
            for (int j = 0; j < d_out; ++j) {
                out[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)] +=
                    v * static_cast<double>(wd[static_cast<std::size_t>(i) * d_out + j]);
            }
        }
    }
    return out;
}

std::vector<std::vector<double>> tensor_rows(const Tensor& m) {
    const int rows = m.dim(0);
    const int cols = m.dim(1);
    const auto md = m.data();
    std::vector<std::vector<double>> out(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        out[static_cast<std::size_t>(r)].assign(md.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                                                md.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols);
    }
    return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// softmax(logits) . values
std::vector<double> attend(const std::vector<double>& logits,
                           const std::vector<std::vector<double>>& values) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> w(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp(logits[i] - m);
        s += w[i];
    }
    std::vector<double> out(values[0].size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double wi = w[i] / s;
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += wi * values[i][j];
    }
    return out;
}

} // namespace

double lambda_gate(const Tensor& x_row, const Tensor& w_q, const Tensor& p_k,
                   const Tensor& context_keys) {
    const bool has_prefix = p_k.defined();
    const bool has_ctx = context_keys.defined();
    if (!has_prefix && !has_ctx) {
        throw contract_error("lambda_gate: empty prefix and empty context");
    }
    const std::vector<double> q = row_times(x_row, w_q);

    std::vector<double> logits_p, logits_c;
    if (has_prefix) {
        for (const auto& row : tensor_rows(p_k)) logits_p.push_back(dot(q, row));
    }
    if (has_ctx) {
        for (const auto& row : tensor_rows(context_keys)) logits_c.push_back(dot(q, row));
    }
    if (logits_p.empty()) return 0.0; // empty sum over prefixes

    double m = logits_p[0];
    for (double v : logits_p) m = std::max(m, v);
    for (double v : logits_c) m = std::max(m, v);
    double s_p = 0.0, s_c = 0.0;
    for (double v : logits_p) s_p += std::exp(v - m);
    for (double v : logits_c) s_c += std::exp(v - m);
    return s_p / (s_p + s_c);
}

PrefixEquivInstance random_equiv_instance(Rng& rng, int n_prefix, int m_ctx, int d) {
    if (m_ctx < 1) throw contract_error("random_equiv_instance: need at least one context token");
    PrefixEquivInstance inst;
    const float wstd = 1.0f / std::sqrt(static_cast<float>(d));
    inst.x = Tensor::randn({1, d}, rng, 1.0f);
    inst.c = Tensor::randn({m_ctx, d}, rng, 1.0f);
    inst.w_q = Tensor::randn({d, d}, rng, wstd);
    inst.w_k = Tensor::randn({d, d}, rng, wstd);
    inst.w_v = Tensor::randn({d, d}, rng, wstd);
    if (n_prefix > 0) {
        inst.p_k = Tensor::randn({n_prefix, d}, rng, 1.0f);
        inst.p_v = Tensor::randn({n_prefix, d}, rng, 1.0f);
    }
    return inst;
}

EquivResult verify_prefix_equivalence(const PrefixEquivInstance& inst, double tol,
                                      const double* lambda_override) {
    const std::vector<double> q = row_times(inst.x, inst.w_q);
    const auto keys = mat_times(inst.c, inst.w_k);
    const auto values = mat_times(inst.c, inst.w_v);

    std::vector<double> ctx_logits;
    for (const auto& k : keys) ctx_logits.push_back(dot(q, k));

    std::vector<double> prefix_logits;
    std::vector<std::vector<double>> p_v_rows;
    if (inst.p_k.defined()) {
        for (const auto& row : tensor_rows(inst.p_k)) prefix_logits.push_back(dot(q, row));
        p_v_rows = tensor_rows(inst.p_v);
    }

    // Route 1: attention over the concatenated keys/values, prefixes first.
    std::vector<double> all_logits = prefix_logits;
    all_logits.insert(all_logits.end(), ctx_logits.begin(), ctx_logits.end());
    std::vector<std::vector<double>> all_values = p_v_rows;
    all_values.insert(all_values.end(), values.begin(), values.end());
    const std::vector<double> route1 = attend(all_logits, all_values);

    // Route 2: gated interpolation of the two standalone attentions. The
    // gate is the lambda_gate formula, kept on the double path.
    EquivResult result;
    {
        double m = ctx_logits[0];
        for (double v : ctx_logits) m = std::max(m, v);
        for (double v : prefix_logits) m = std::max(m, v);
        double s_c = 0.0, s_p = 0.0;
        for (double v : ctx_logits) s_c += std::exp(v - m);
        for (double v : prefix_logits) s_p += std::exp(v - m);
        result.lambda = prefix_logits.empty() ? 0.0 : s_p / (s_p + s_c);
    }
    const double lam = lambda_override ? *lambda_override : result.lambda;

    std::vector<double> route2 = attend(ctx_logits, values);
    for (auto& v : route2) v *= (1.0 - lam);
    if (!prefix_logits.empty()) {
        const std::vector<double> prefix_attn = attend(prefix_logits, p_v_rows);
        for (std::size_t j = 0; j < route2.size(); ++j) route2[j] += lam * prefix_attn[j];
    }

    for (std::size_t j = 0; j < route1.size(); ++j) {
        result.max_abs_dev = std::max(result.max_abs_dev, std::abs(route1[j] - route2[j]));
    }
    result.pass = result.max_abs_dev < tol;
    return result;
}

} // namespace hyperpelt
