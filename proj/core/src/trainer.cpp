#include "hyperpelt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "binio.hpp"

namespace hyperpelt {

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw lookup_error("unknown optimizer '" + s + "'");
}

const char* optimizer_to_string(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

std::vector<double> task_sampling_probs(const std::vector<std::size_t>& sizes, double temperature) {
    if (sizes.empty()) throw contract_error("task sampler: empty task set");
    if (temperature <= 0.0) throw contract_error("task sampler: temperature must be positive");
    std::size_t total = 0;
    for (std::size_t n : sizes) total += n;
    if (total == 0) throw contract_error("task sampler: no training samples");
    std::vector<double> q(sizes.size());
    double norm = 0.0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        const double p = static_cast<double>(sizes[i]) / static_cast<double>(total);
        q[i] = std::pow(p, 1.0 / temperature);
        norm += q[i];
    }
    for (auto& v : q) v /= norm;
    return q;
}

int sample_task(const std::vector<std::size_t>& sizes, double temperature, Rng& rng) {
    const auto q = task_sampling_probs(sizes, temperature);
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        acc += q[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(q.size()) - 1;
}

float training_step(Model& model, int task_slot, const std::vector<BatchItem>& batch,
                    OptState& opt) {
    if (batch.empty()) throw contract_error("training_step: empty batch");

    for (auto& p : model.named_params()) {
        if (p.tensor.requires_grad()) p.tensor.zero_grad();
    }

    Graph g;
    Tensor total;
    for (const auto& item : batch) {
        Seq2SeqOutput out = model.forward(g, task_slot, item.example->ids_in,
                                          item.example->ids_out, item.features);
        total = total.defined() ? g.add(total, out.loss) : out.loss;
    }
    Tensor loss = g.mul(total, Tensor::scalar(1.0f / static_cast<float>(batch.size())));
    const float loss_value = loss.value();
    g.backward(loss);

    opt.t += 1;
    for (auto& p : model.named_params()) {
        if (!p.tensor.requires_grad()) continue;
        auto data = p.tensor.data();
        auto grad = p.tensor.grad();
        if (opt.kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < data.size(); ++i) data[i] -= opt.lr * grad[i];
        } else {
            auto& [m, v] = opt.moments[p.name];
            if (m.size() != data.size()) {
                m.assign(data.size(), 0.0f);
                v.assign(data.size(), 0.0f);
            }
            const float bc1 = 1.0f - std::pow(opt.beta1, static_cast<float>(opt.t));
            const float bc2 = 1.0f - std::pow(opt.beta2, static_cast<float>(opt.t));
            for (std::size_t i = 0; i < data.size(); ++i) {
                m[i] = opt.beta1 * m[i] + (1.0f - opt.beta1) * grad[i];
                v[i] = opt.beta2 * v[i] + (1.0f - opt.beta2) * grad[i] * grad[i];
                const float mhat = m[i] / bc1;
                const float vhat = v[i] / bc2;
                data[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
            }
        }
    }
    return loss_value;
}

// ------------------------------------------------------------- evaluation

namespace {

std::vector<int> strip_eos(std::vector<int> ids, int eos_id) {
    while (!ids.empty() && ids.back() == eos_id) ids.pop_back();
    return ids;
}

} // namespace

VisualFeatures features_for(const Model& model, const TaskDataset& data, const Example& ex) {
    return synth_visual_features(ex.image_id, data.visual_seed, model.config().N,
                                 model.config().d_v);
}

double evaluate_task(const Model& model, const TaskDataset& data, Split split) {
    const auto& examples = data.split(split);
    if (examples.empty()) throw contract_error("evaluate: empty split for task " + data.task);
    const int slot = model.task_slot(data.task);
    std::size_t correct = 0;
    for (const auto& ex : examples) {
        VisualFeatures feats;
        const VisualFeatures* fp = nullptr;
        if (ex.has_image && model.has_visual()) {
            feats = features_for(model, data, ex);
            fp = &feats;
        }
        const int max_len = static_cast<int>(ex.ids_out.size()) + 2;
        const auto decoded =
            strip_eos(model.greedy(slot, ex.ids_in, fp, max_len, kEosTokenId), kEosTokenId);
        const auto target = strip_eos(ex.ids_out, kEosTokenId);
        if (decoded == target) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

MetricReport evaluate(const Model& model, const std::vector<TaskDataset>& data, Split split) {
    MetricReport report;
    double sum = 0.0;
    for (const auto& ds : data) {
        const double acc = evaluate_task(model, ds, split);
        report.per_task.emplace_back(ds.task, acc);
        sum += acc;
    }
    report.average = data.empty() ? 0.0 : sum / static_cast<double>(data.size());
    return report;
}

std::string MetricReport::str() const {
    std::ostringstream os;
    for (const auto& [task, acc] : per_task) os << task << "=" << acc << " ";
    os << "avg=" << average;
    return os.str();
}

// ------------------------------------------------------------ checkpoints

namespace {

constexpr char kCkptMagic[4] = {'H', 'P', 'L', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) out += ',';
        out += names[i];
    }
    return out;
}

std::vector<std::string> split_names(const std::string& joined) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : joined) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    binio::put_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::put_u8(os, static_cast<std::uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) binio::put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
    for (float v : t.data()) binio::put_f32(os, v);
}

} // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const std::array<std::uint64_t, 4>& rng_state, std::uint64_t step,
                     const OptState* opt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("checkpoint: cannot open '" + path + "' for writing");

    std::ostringstream cfg_block;
    cfg_block << serialize_model_config(model.config());
    cfg_block << "step = " << step << "\n";
    cfg_block << "tasks = " << join_names(model.task_names()) << "\n";
    if (opt) {
        cfg_block << "optimizer = " << optimizer_to_string(opt->kind) << "\n";
        cfg_block << "opt_t = " << opt->t << "\n";
    }
    const std::string cfg_str = cfg_block.str();

    os.write(kCkptMagic, 4);
    binio::put_u32(os, kCkptVersion);
    binio::put_u32(os, static_cast<std::uint32_t>(cfg_str.size()));
    os.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));
    for (std::uint64_t w : rng_state) binio::put_u64(os, w);

    std::uint32_t count = static_cast<std::uint32_t>(model.named_params().size());
    const bool with_moments = opt && opt->kind == OptimizerKind::adam && opt->t > 0;
    if (with_moments) count += static_cast<std::uint32_t>(2 * opt->moments.size());
    binio::put_u32(os, count);

    for (const auto& p : model.named_params()) write_tensor(os, p.name, p.tensor);
    if (with_moments) {
        for (const auto& [name, mv] : opt->moments) {
            Shape shape{static_cast<int>(mv.first.size())};
            write_tensor(os, "opt.m." + name, Tensor::from(shape, mv.first));
            write_tensor(os, "opt.v." + name, Tensor::from(shape, mv.second));
        }
    }
    if (!os) throw format_error("checkpoint: write to '" + path + "' failed");
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("checkpoint: cannot open '" + path + "'");

    char magic[4];
    if (!is.read(magic, 4)) throw format_error("checkpoint: truncated while reading magic");
    if (std::memcmp(magic, kCkptMagic, 4) != 0) {
        throw format_error("checkpoint: bad magic in '" + path + "'");
    }
    const std::uint32_t version = binio::get_u32(is, "version");
    if (version != kCkptVersion) {
        throw version_error("checkpoint: unsupported version " + std::to_string(version));
    }

    const std::uint32_t cfg_len = binio::get_u32(is, "config length");
    const std::string cfg_str = binio::get_bytes(is, cfg_len, "config block");
    auto kv = parse_kv_lines(cfg_str);

    CheckpointData ckpt;
    if (auto it = kv.find("step"); it != kv.end()) {
        ckpt.step = std::stoull(it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("tasks"); it != kv.end()) {
        ckpt.task_names = split_names(it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("optimizer"); it != kv.end()) {
        ckpt.optimizer = optimizer_from_string(it->second);
        kv.erase(it);
    }
    if (auto it = kv.find("opt_t"); it != kv.end()) {
        ckpt.opt_t = std::stoll(it->second);
        kv.erase(it);
    }
    ckpt.cfg = model_config_from_kv(kv);

    for (auto& w : ckpt.rng_state) w = binio::get_u64(is, "rng state");

    const std::uint32_t count = binio::get_u32(is, "tensor count");
    ckpt.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = binio::get_u16(is, "tensor name length");
        const std::string name = binio::get_bytes(is, name_len, "tensor name");
        const std::uint8_t rank = binio::get_u8(is, "tensor rank");
        Shape shape(rank);
        for (auto& e : shape) e = static_cast<int>(binio::get_u32(is, "tensor dims"));
        std::vector<float> values(shape_numel(shape));
        for (auto& v : values) v = binio::get_f32(is, "tensor payload");
        ckpt.tensors.push_back({name, Tensor::from(shape, std::move(values))});
    }
    return ckpt;
}

Model model_from_checkpoint(const CheckpointData& ckpt) {
    Model model(ckpt.cfg);
    if (!ckpt.task_names.empty()) model.set_task_names(ckpt.task_names);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : ckpt.tensors) by_name[t.name] = &t.tensor;
    for (auto& p : model.named_params()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) {
            throw format_error("checkpoint: missing tensor '" + p.name + "'");
        }
        if (it->second->shape() != p.tensor.shape()) {
            throw format_error("checkpoint: tensor '" + p.name + "' has shape " +
                               shape_str(it->second->shape()) + ", expected " +
                               shape_str(p.tensor.shape()));
        }
        auto dst = p.tensor.data();
        auto src = it->second->data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return model;
}

Model fewshot_init(const CheckpointData& ckpt, const std::string& new_task,
                   const std::string& source_task) {
    Model model = model_from_checkpoint(ckpt);
    if (!model.has_task(source_task)) {
        throw lookup_error("fewshot_init: unknown source task '" + source_task + "'");
    }
    model.add_task(new_task, source_task);
    return model;
}

// ---------------------------------------------------------------- Trainer

Trainer::Trainer(Model& model, TrainPlan plan, std::vector<TaskDataset> data)
    : model_(model), plan_(std::move(plan)), data_(std::move(data)), rng_(plan_.seed) {
    if (plan_.steps < 0) throw contract_error("train plan: steps must be >= 0");
    if (plan_.temperature <= 0.0) throw contract_error("train plan: temperature must be > 0");
    if (plan_.batch_size < 1) throw contract_error("train plan: batch_size must be >= 1");
    if (data_.empty()) throw contract_error("train plan: no task datasets");
    for (const auto& ds : data_) {
        sizes_.push_back(ds.train.size());
        slots_.push_back(model_.task_slot(ds.task));
    }
    model_.apply_mask(model_.freeze_mask(plan_.mode, plan_.target_task));
    opt_.kind = plan_.optimizer;
    opt_.lr = plan_.learning_rate;
    opt_.beta1 = plan_.adam_beta1;
    opt_.beta2 = plan_.adam_beta2;
    opt_.eps = plan_.adam_eps;
}

void Trainer::resume_from(const CheckpointData& ckpt) {
    rng_.set_state(ckpt.rng_state);
    step_count_ = ckpt.step;
    opt_.t = ckpt.opt_t;
    opt_.moments.clear();
    for (const auto& t : ckpt.tensors) {
        if (t.name.rfind("opt.m.", 0) == 0) {
            const std::string pname = t.name.substr(6);
            auto src = t.tensor.data();
            opt_.moments[pname].first.assign(src.begin(), src.end());
        } else if (t.name.rfind("opt.v.", 0) == 0) {
            const std::string pname = t.name.substr(6);
            auto src = t.tensor.data();
            opt_.moments[pname].second.assign(src.begin(), src.end());
        }
    }
}

const VisualFeatures* Trainer::cached_features(const TaskDataset& ds, const Example& ex) {
    if (!ex.has_image || !model_.has_visual()) return nullptr;
    auto it = feature_cache_.find(ex.image_id);
    if (it == feature_cache_.end()) {
        it = feature_cache_.emplace(ex.image_id, features_for(model_, ds, ex)).first;
    }
    return &it->second;
}

float Trainer::step() {
    const int task_idx = sample_task(sizes_, plan_.temperature, rng_);
    const TaskDataset& ds = dataset(task_idx);
    std::vector<BatchItem> batch;
    batch.reserve(static_cast<std::size_t>(plan_.batch_size));
    for (int b = 0; b < plan_.batch_size; ++b) {
        const auto idx = rng_.below(ds.train.size());
        const Example& ex = ds.train[idx];
        batch.push_back({&ex, cached_features(ds, ex)});
    }
    const float loss = training_step(model_, slots_[static_cast<std::size_t>(task_idx)], batch, opt_);
    ++step_count_;
    return loss;
}

Trainer::RunResult Trainer::run() {
    RunResult result;
    auto maybe_eval = [&]() -> bool {
        const MetricReport report = evaluate_split(Split::val);
        if (report.average > best_avg_val_) {
            best_avg_val_ = report.average;
            best_step_ = step_count_;
            best_snapshot_.clear();
            for (const auto& p : model_.named_params()) {
                auto d = p.tensor.data();
                best_snapshot_[p.name].assign(d.begin(), d.end());
            }
        }
        if (plan_.target_accuracy >= 0.0) {
            bool all = true;
            for (const auto& [task, acc] : report.per_task) all = all && acc >= plan_.target_accuracy;
            return all;
        }
        return false;
    };

    while (step_count_ < static_cast<std::uint64_t>(plan_.steps)) {
        result.final_loss = step();
        if (plan_.eval_every > 0 && step_count_ % static_cast<std::uint64_t>(plan_.eval_every) == 0) {
            if (maybe_eval()) {
                result.reached_target = true;
                break;
            }
        }
    }
    if (!result.reached_target) maybe_eval();
    result.best_avg_val = best_avg_val_;
    result.best_step = best_step_;
    result.steps_run = step_count_;
    return result;
}

void Trainer::restore_best() {
    if (best_snapshot_.empty()) return;
    for (auto& p : model_.named_params()) {
        auto it = best_snapshot_.find(p.name);
        if (it == best_snapshot_.end()) continue;
        auto d = p.tensor.data();
        std::copy(it->second.begin(), it->second.end(), d.begin());
    }
}

MetricReport Trainer::evaluate_split(Split split) const {
    return evaluate(model_, data_, split);
}

void Trainer::save(const std::string& path) const {
    save_checkpoint(path, model_, rng_.state(), step_count_, &opt_);
}

Trainer::RunResult fewshot_tune(Model& model, const TaskDataset& data, TuningMode tune_mode,
                                int steps, float lr, std::uint64_t seed, OptimizerKind opt,
                                int eval_every) {
    if (tune_mode != TuningMode::taskembed && tune_mode != TuningMode::hyperpelt &&
        tune_mode != TuningMode::vl_hyperpelt) {
        throw contract_error("fewshot_tune: mode must be taskembed or a full PELT mode");
    }
    TrainPlan plan;
    plan.tasks = {data.task};
    plan.steps = steps;
    plan.learning_rate = lr;
    plan.seed = seed;
    plan.mode = tune_mode;
    plan.target_task = data.task;
    plan.optimizer = opt;
    plan.eval_every = eval_every;
    plan.batch_size = std::min<int>(4, static_cast<int>(data.train.size()));
    Trainer trainer(model, plan, {data});
    auto result = trainer.run();
    trainer.restore_best();
    return result;
}

} // namespace hyperpelt
