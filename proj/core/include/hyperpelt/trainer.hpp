#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hyperpelt/model.hpp"
#include "hyperpelt/visual.hpp"

namespace hyperpelt {

struct Example {
    std::vector<int> ids_in;
    std::vector<int> ids_out; // includes the trailing eos token
    std::uint64_t image_id = 0;
    bool has_image = false;
};

enum class Split { train, val, test };

struct TaskDataset {
    std::string task;
    bool vision = false;
    std::uint64_t visual_seed = 0; // synthetic feature stream for this task
    std::vector<Example> train, val, test;
    // Preloaded features by image id; falls back to the synthetic stream
    // when an id is absent.
    std::map<std::uint64_t, VisualFeatures> features;

    const std::vector<Example>& split(Split s) const {
        switch (s) {
            case Split::train: return train;
            case Split::val: return val;
            case Split::test: return test;
        }
        return train;
    }
};

enum class OptimizerKind { sgd, adam };

OptimizerKind optimizer_from_string(const std::string& s);
const char* optimizer_to_string(OptimizerKind k);

struct TrainPlan {
    std::vector<std::string> tasks;
    double temperature = 2.0;
    int steps = 1000;
    int batch_size = 4;
    float learning_rate = 1e-3f;
    int eval_every = 250;
    std::uint64_t seed = 1;
    TuningMode mode = TuningMode::hyperpelt;
    std::string target_task; // taskembed mode only
    OptimizerKind optimizer = OptimizerKind::sgd;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    // When >= 0, run() stops once every task's validation accuracy reaches
    // this value.
    double target_accuracy = -1.0;
};

// q_tau = p_tau^(1/T) / sum p^(1/T), p_tau = N_tau / sum N.
std::vector<double> task_sampling_probs(const std::vector<std::size_t>& sizes, double temperature);

// Draws a task index with probability q_tau.
int sample_task(const std::vector<std::size_t>& sizes, double temperature, Rng& rng);

// First-order optimizer state; moments are keyed by parameter name.
struct OptState {
    OptimizerKind kind = OptimizerKind::sgd;
    float lr = 1e-3f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    long long t = 0;
    std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments;
};

struct BatchItem {
    const Example* example;
    const VisualFeatures* features; // null for text tasks
};

// Forward (mean loss over the batch), backward, and one optimizer step on
// the parameters whose requires_grad flag is set. Frozen parameters are
// never touched. Returns the batch loss.
float training_step(Model& model, int task_slot, const std::vector<BatchItem>& batch,
                    OptState& opt);

struct MetricReport {
    std::vector<std::pair<std::string, double>> per_task;
    double average = 0.0;

    std::string str() const;
};

// Deterministic exact-match accuracy of greedy decoding against the split's
// targets.
double evaluate_task(const Model& model, const TaskDataset& data, Split split);
MetricReport evaluate(const Model& model, const std::vector<TaskDataset>& data, Split split);

VisualFeatures features_for(const Model& model, const TaskDataset& data, const Example& ex);

// ---- checkpoints, binary little-endian ---------------------------------
// magic "HPLT", version u32=1, config block (u32 byte length + UTF-8
// key=value lines), RNG state u64 x4, tensor count u32, then per tensor:
// name (u16 length + UTF-8), rank u8, dims u32 x rank, float32 payload.

struct CheckpointData {
    ModelConfig cfg;
    std::vector<std::string> task_names;
    std::uint64_t step = 0;
    std::array<std::uint64_t, 4> rng_state{};
    OptimizerKind optimizer = OptimizerKind::sgd;
    long long opt_t = 0;
    std::vector<NamedTensor> tensors; // params plus optional opt.m./opt.v. entries
};

void save_checkpoint(const std::string& path, const Model& model,
                     const std::array<std::uint64_t, 4>& rng_state, std::uint64_t step,
                     const OptState* opt = nullptr);
CheckpointData load_checkpoint(const std::string& path);

// Rebuilds the model and overwrites its parameters from the checkpoint.
Model model_from_checkpoint(const CheckpointData& ckpt);

// New task's embedding starts as a copy of the source task's trained one;
// everything else loads as-is. `new_task == source_task` aliases a slot.
Model fewshot_init(const CheckpointData& ckpt, const std::string& new_task,
                   const std::string& source_task);

class Trainer {
public:
    Trainer(Model& model, TrainPlan plan, std::vector<TaskDataset> data);

    // Restores rng / step counter / optimizer moments from a checkpoint so
    // a resumed run continues the unbroken trajectory bit-exactly.
    void resume_from(const CheckpointData& ckpt);

    float step();

    struct RunResult {
        float final_loss = 0.0f;
        double best_avg_val = -1.0;
        std::uint64_t best_step = 0;
        std::uint64_t steps_run = 0;
        bool reached_target = false;
    };

    // Runs until plan.steps (or target_accuracy), evaluating every
    // eval_every steps and snapshotting the best-average-validation state.
    RunResult run();

    // Restores the best validation snapshot captured by run().
    void restore_best();

    MetricReport evaluate_split(Split split) const;
    void save(const std::string& path) const;

    std::uint64_t step_count() const { return step_count_; }
    Model& model() { return model_; }
    const TrainPlan& plan() const { return plan_; }
    Rng& rng() { return rng_; }

private:
    const TaskDataset& dataset(int idx) const { return data_[static_cast<std::size_t>(idx)]; }
    const VisualFeatures* cached_features(const TaskDataset& ds, const Example& ex);

    Model& model_;
    TrainPlan plan_;
    std::vector<TaskDataset> data_;
    std::vector<std::size_t> sizes_;
    std::vector<int> slots_; // model task slot per dataset
    Rng rng_;
    OptState opt_;
    std::uint64_t step_count_ = 0;
    std::map<std::uint64_t, VisualFeatures> feature_cache_;
    std::map<std::string, std::vector<float>> best_snapshot_;
    double best_avg_val_ = -1.0;
    std::uint64_t best_step_ = 0;
};

// Few-shot tuning with the restricted mask (taskembed trains exactly the
// target task's N*d_t elements; hyperpelt trains the full PELT set).
Trainer::RunResult fewshot_tune(Model& model, const TaskDataset& data, TuningMode tune_mode,
                                int steps, float lr, std::uint64_t seed,
                                OptimizerKind opt = OptimizerKind::sgd,
                                int eval_every = 25);

} // namespace hyperpelt
