#pragma once

#include <utility>

#include "hyperpelt/hyperembed.hpp"
#include "hyperpelt/tensor.hpp"

namespace hyperpelt {

// Linear maps from hyper-embeddings to prefix vectors. One instance serves
// every task, layer and block; conditioning flows only through I.
struct PrefixHypernet {
    Tensor w_k; // d x d_I
    Tensor w_v; // d x d_I
};

// Linear maps from the pooled hyper-embedding to flattened adapter weights.
struct AdapterHypernet {
    Tensor w_up_gen;   // (d * d_mid) x d_I
    Tensor w_down_gen; // (d_mid * d) x d_I
};

// Per-site adapter state: generated projections plus the site-owned scaled
// gate and layer norm.
struct AdapterWeights {
    Tensor w_up;     // d x d_mid
    Tensor w_down;   // d_mid x d
    Tensor lambda;   // trainable scalar, one per block site
    Tensor ln_scale; // d
    Tensor ln_bias;  // d
    float ln_eps = 1e-6f;
};

PrefixHypernet init_prefix_hypernet(const ModelConfig& cfg, Rng& rng);
AdapterHypernet init_adapter_hypernet(const ModelConfig& cfg, Rng& rng);

// P_k = I W_k^T, P_v = I W_v^T; both N x d.
std::pair<Tensor, Tensor> generate_prefix(Graph& g, const PrefixHypernet& net,
                                          const HyperEmbedding& I);

// Flattened linear generation reshaped to (d x d_mid) and (d_mid x d).
std::pair<Tensor, Tensor> generate_adapter_weights(Graph& g, const AdapterHypernet& net,
                                                   const Tensor& pooled, int d, int d_mid);

// lambda * LN(W_up GeLU(W_down x)) per token position (the non-residual
// part of the adapter function).
Tensor adapter_delta(Graph& g, const AdapterWeights& w, const Tensor& x);

// adapter_delta(x) + x.
Tensor apply_adapter(Graph& g, const AdapterWeights& w, const Tensor& x);

// Sum of normalized attention weights on the prefixes:
//   lambda(x) = sum_i exp(x W_q P_k^T)_i
//             / (sum_i exp(x W_q P_k^T)_i + sum_j exp(x W_q K_ctx^T)_j)
// `p_k` / `context_keys` may be undefined tensors to denote emptiness;
// both empty is a contract error. Evaluated in double.
double lambda_gate(const Tensor& x_row, const Tensor& w_q, const Tensor& p_k,
                   const Tensor& context_keys);

// One random single-head instance for the prefix/attention identity.
struct PrefixEquivInstance {
    Tensor x;   // 1 x d query row
    Tensor c;   // M x d context
    Tensor w_q; // d x d, applied as x W_q
    Tensor w_k; // d x d
    Tensor w_v; // d x d
    Tensor p_k; // N x d, undefined when N == 0
    Tensor p_v; // N x d, undefined when N == 0
};

PrefixEquivInstance random_equiv_instance(Rng& rng, int n_prefix, int m_ctx, int d);

struct EquivResult {
    bool pass = false;
    double max_abs_dev = 0.0;
    double lambda = 0.0;
};

// Evaluates the head both ways: concatenated-prefix attention versus
// (1 - lambda) Attn(q, K, V) + lambda Attn(q, P_k, P_v), and compares.
// `lambda_override` substitutes a wrong gate value (negative-control hook).
EquivResult verify_prefix_equivalence(const PrefixEquivInstance& inst, double tol,
                                      const double* lambda_override = nullptr);

} // namespace hyperpelt
