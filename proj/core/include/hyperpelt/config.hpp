#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "hyperpelt/error.hpp"

namespace hyperpelt {

enum class TuningMode {
    full,        // train every parameter, no generated modules
    hyperprefix, // generated attention prefixes only
    hyperpelt,   // prefixes + generated parallel adapters
    taskembed,   // hyperpelt structure, tune one task embedding only
    vl_hyperpelt // hyperpelt + visual conditioning path
};

TuningMode mode_from_string(const std::string& s);
const char* mode_to_string(TuningMode m);

// The five insertion sites of one encoder+decoder layer pair.
enum class BlockKind : int {
    enc_self_attn = 0,
    enc_ffn = 1,
    dec_self_attn = 2,
    dec_cross_attn = 3,
    dec_ffn = 4,
};

constexpr int kBlockKindCount = 5;
constexpr int kAttnBlockKinds = 3; // enc self, dec self, dec cross
constexpr int kFfnBlockKinds = 2;  // enc ffn, dec ffn

const char* block_kind_name(BlockKind k);
bool block_kind_is_attention(BlockKind k);

struct BlockId {
    int layer_index = 0;
    BlockKind kind = BlockKind::enc_self_attn;

    bool operator==(const BlockId&) const = default;
};

// Reserved ids of the desk vocabulary. Pad doubles as the decoder start
// token.
constexpr int kPadTokenId = 0;
constexpr int kEosTokenId = 1;
constexpr int kUnkTokenId = 2;

struct ModelConfig {
    int L = 2;          // encoder+decoder layer pairs
    int d = 32;         // model width
    int n_heads = 4;
    int d_ff = 64;
    int vocab_size = 64;
    int N = 4;          // prefix length (= hyper-embedding row count)
    int d_t = 16;       // task/layer/block embedding width
    int d_I_mid = 12;   // projector hidden width
    int d_I = 8;        // hyper-embedding width
    int d_mid = 8;      // adapter bottleneck (r = d / d_mid)
    int d_v = 16;       // visual feature width
    int T_tasks = 3;
    int rel_buckets = 8; // relative position bias bucket count
    TuningMode mode = TuningMode::hyperpelt;
    std::uint64_t seed = 1;
    float ln_eps = 1e-6f;

    void validate() const;

    // Desk-scale default exercising every shape in seconds.
    static ModelConfig c1();
};

// `key = value` lines, `#` comments, unknown keys rejected. The same keys
// round-trip through checkpoint config blocks.
ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::string& path);
std::string serialize_model_config(const ModelConfig& cfg);

// Key/value helpers shared with the trainer's plan parsing.
std::map<std::string, std::string> parse_kv_lines(const std::string& text);
ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv);

} // namespace hyperpelt
