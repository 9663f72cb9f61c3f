#include "hyperpelt/config.hpp"

#include <fstream>
#include <sstream>

namespace hyperpelt {

TuningMode mode_from_string(const std::string& s) {
    if (s == "full") return TuningMode::full;
    if (s == "hyperprefix") return TuningMode::hyperprefix;
    if (s == "hyperpelt") return TuningMode::hyperpelt;
    if (s == "taskembed") return TuningMode::taskembed;
    if (s == "vl_hyperpelt") return TuningMode::vl_hyperpelt;
    throw lookup_error("unknown tuning mode '" + s + "'");
}

const char* mode_to_string(TuningMode m) {
    switch (m) {
        case TuningMode::full: return "full";
        case TuningMode::hyperprefix: return "hyperprefix";
        case TuningMode::hyperpelt: return "hyperpelt";
        case TuningMode::taskembed: return "taskembed";
        case TuningMode::vl_hyperpelt: return "vl_hyperpelt";
    }
    return "?";
}

const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::enc_self_attn: return "enc_self_attn";
        case BlockKind::enc_ffn: return "enc_ffn";
        case BlockKind::dec_self_attn: return "dec_self_attn";
        case BlockKind::dec_cross_attn: return "dec_cross_attn";
        case BlockKind::dec_ffn: return "dec_ffn";
    }
    return "?";
}

bool block_kind_is_attention(BlockKind k) {
    return k == BlockKind::enc_self_attn || k == BlockKind::dec_self_attn ||
           k == BlockKind::dec_cross_attn;
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw contract_error(std::string("config: ") + name + " must be >= 1");
    };
    positive(L, "L");
    positive(d, "d");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(vocab_size, "vocab_size");
    positive(N, "N");
    positive(d_t, "d_t");
    positive(d_I_mid, "d_I_mid");
    positive(d_I, "d_I");
    positive(d_mid, "d_mid");
    positive(d_v, "d_v");
    positive(T_tasks, "T_tasks");
    positive(rel_buckets, "rel_buckets");
    if (d % n_heads != 0) throw contract_error("config: d must be divisible by n_heads");
    if (d_mid > d) throw contract_error("config: d_mid must not exceed d");
}

ModelConfig ModelConfig::c1() {
    return ModelConfig{}; // defaults are the C1 values
}

std::map<std::string, std::string> parse_kv_lines(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const char* ws = " \t\r";
        const auto b = s.find_first_not_of(ws);
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(ws);
        return s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw format_error("config line " + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw format_error("config line " + std::to_string(lineno) + ": empty key");
        }
        kv[key] = value;
    }
    return kv;
}

namespace {

int to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw format_error("config: key '" + key + "' has non-integer value '" + value + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw format_error("config: key '" + key + "' has non-integer value '" + value + "'");
    }
}

float to_float(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const float v = std::stof(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw format_error("config: key '" + key + "' has non-numeric value '" + value + "'");
    }
}

} // namespace

ModelConfig model_config_from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig cfg;
    for (const auto& [key, value] : kv) {
        if (key == "L") cfg.L = to_int(key, value);
        else if (key == "d") cfg.d = to_int(key, value);
        else if (key == "n_heads") cfg.n_heads = to_int(key, value);
        else if (key == "d_ff") cfg.d_ff = to_int(key, value);
        else if (key == "vocab_size") cfg.vocab_size = to_int(key, value);
        else if (key == "N") cfg.N = to_int(key, value);
        else if (key == "d_t") cfg.d_t = to_int(key, value);
        else if (key == "d_I_mid") cfg.d_I_mid = to_int(key, value);
        else if (key == "d_I") cfg.d_I = to_int(key, value);
        else if (key == "d_mid") cfg.d_mid = to_int(key, value);
        else if (key == "d_v") cfg.d_v = to_int(key, value);
        else if (key == "T_tasks") cfg.T_tasks = to_int(key, value);
        else if (key == "rel_buckets") cfg.rel_buckets = to_int(key, value);
        else if (key == "mode") cfg.mode = mode_from_string(value);
        else if (key == "seed") cfg.seed = to_u64(key, value);
        else if (key == "ln_eps") cfg.ln_eps = to_float(key, value);
        else throw format_error("config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

ModelConfig parse_model_config(const std::string& text) {
    return model_config_from_kv(parse_kv_lines(text));
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw format_error("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_model_config(buf.str());
}

std::string serialize_model_config(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "L = " << cfg.L << "\n"
       << "d = " << cfg.d << "\n"
       << "n_heads = " << cfg.n_heads << "\n"
       << "d_ff = " << cfg.d_ff << "\n"
       << "vocab_size = " << cfg.vocab_size << "\n"
       << "N = " << cfg.N << "\n"
       << "d_t = " << cfg.d_t << "\n"
       << "d_I_mid = " << cfg.d_I_mid << "\n"
       << "d_I = " << cfg.d_I << "\n"
       << "d_mid = " << cfg.d_mid << "\n"
       << "d_v = " << cfg.d_v << "\n"
       << "T_tasks = " << cfg.T_tasks << "\n"
       << "rel_buckets = " << cfg.rel_buckets << "\n"
       << "mode = " << mode_to_string(cfg.mode) << "\n"
       << "seed = " << cfg.seed << "\n";
    return os.str();
}

} // namespace hyperpelt
