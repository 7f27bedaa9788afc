#pragma once

#include <memory>
#include <string>
#include <vector>

#include "faceaug/dataio.hpp"
#include "faceaug/embedder.hpp"
#include "faceaug/generator.hpp"
#include "faceaug/optimizer.hpp"
#include "faceaug/saliency.hpp"

namespace faceaug {

struct TrainConfig {
    // optimization
    float learning_rate = 2e-4f;
    int batch_size = 16;
    int epochs = 100;
    float margin = 0.2f;
    float lambda_frob = 1e-3f;
    float lambda_adv = 0.1f;  // 0 disables the adversarial game: embedder-only training
    float noise_scale = 0.1f;
    uint64_t seed = 1;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    std::string triplet_strategy = "semi-hard";  // or "all"

    // architecture
    int image_size = 128;
    int channels = 3;
    int gen_channels = 64;
    int gen_residual_blocks = 6;
    int sn_steps = 5;
    int embed_dim = 128;
    int embed_blocks = 4;
    int embed_reductions = 3;
    int embed_base_channels = 16;

    void validate() const;  // throws ConfigError
    TripletStrategy strategy() const;
};

// Structured text round-trip (JSON file with every field above). Missing
// fields keep their defaults; unknown fields are a ConfigError.
TrainConfig load_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);
TrainConfig parse_train_config(const std::string& json_text, const std::string& where);
std::string train_config_json(const TrainConfig& cfg);
uint64_t train_config_hash(const TrainConfig& cfg);

struct RunRecord {
    int64_t step = 0;
    int epoch = 0;
    double gen_loss = 0.0;
    double disc_loss = 0.0;
    double mse_term = 0.0;   // logged terms carry their lambda weights
    double frob_term = 0.0;
    double adv_term = 0.0;
    double wall_time = 0.0;  // seconds since run start
};

struct RunLog {
    std::vector<RunRecord> records;
    std::vector<std::string> notes;  // skipped batches, failure diagnostics
    int skipped_batches = 0;
};

// Header `step,epoch,gen_loss,disc_loss,mse_term,frob_term,adv_term`.
void write_runlog_csv(const RunLog& log, const std::string& path);
RunLog read_runlog_csv(const std::string& path);

struct GenLossTerms {
    double total = 0.0;
    double mse = 0.0;   // weighted terms, total == mse + frob - adv
    double frob = 0.0;
    double adv = 0.0;
};

// Owns the three networks, both optimizers, and the run's random streams.
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg);

    // One adversarial round on a batch: generator forward with latent noise,
    // saliency, compose, discriminator step on real+generated, then a
    // generator/saliency step with the embedder frozen. Returns false (and
    // records the skip) when the batch yields no triplet.
    bool adversarial_round(const Batch& batch, RunRecord& out);

    // Embedder-only step on a real batch (the lambda_adv == 0 path).
    bool embedder_round(const Batch& batch, RunRecord& out);

    // Pre-step triplet loss on real+generated union; updates the embedder.
    double discriminator_step(const Batch& real, const Tensor& generated);

    // One optimizer step on the composite generator loss; embedder untouched.
    GenLossTerms generator_step(const Batch& batch);

    // Loss terms only (no update); exposed for tests and logging.
    GenLossTerms generator_loss_terms(const Tensor& x, const Tensor& x_adv,
                                      const Tensor& masked_perturbation);

    // Whole-run driver: epochs over deterministic batch plans, per-epoch
    // checkpoint `ckpt_last.bin` and final `ckpt_final.bin` under out_dir,
    // checkpoint-on-failure for non-finite losses. `stop_after_epoch` caps
    // the run early (a controlled interruption); resume picks up from
    // ckpt_last.bin.
    RunLog train(const LoadedDataset& ds, const std::string& out_dir, int stop_after_epoch = -1);

    const TrainConfig& config() const { return cfg_; }
    Generator& generator() { return gen_; }
    SaliencyExtractor& saliency() { return sal_; }
    Embedder& embedder() { return emb_; }
    Adam& generator_adam() { return adam_gen_; }
    Adam& embedder_adam() { return adam_emb_; }

    int64_t step_count() const { return step_; }
    int epoch_count() const { return epoch_; }

    // Deterministic per-epoch batch plan stream.
    std::vector<std::vector<int>> epoch_plan(const std::vector<std::string>& identities, int epoch);

    friend struct CheckpointCodec;

private:
    struct ForwardHandles {
        Tape* tape = nullptr;
        Var x, features, perturbation, saliency, masked, x_adv;
    };
    ForwardHandles generator_forward(Tape& t, const Tensor& images, bool with_noise);
    GenLossTerms generator_backward_and_step(ForwardHandles& h);

    TrainConfig cfg_;
    Generator gen_;
    SaliencyExtractor sal_;
    Embedder emb_;
    ModuleItems gen_items_;  // generator + saliency, canonical order
    ModuleItems emb_items_;
    Adam adam_gen_;
    Adam adam_emb_;
    Rng noise_rng_{0};
    int64_t step_ = 0;
    int epoch_ = 0;
};

struct TrainResult {
    RunLog log;
    std::string final_checkpoint;
};

// End-to-end: load + whiten the manifest, train per config, write RunLog CSV
// (`runlog.csv`) and checkpoints under out_dir.
TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg,
                  const std::string& out_dir);

// Resume from a checkpoint: continues at the next epoch with restored
// parameters, optimizer moments, batch-norm statistics, spectral-norm bases,
// rng streams, and counters.
TrainResult train_resume(const std::string& checkpoint_path, const DatasetManifest& manifest,
                         const std::string& out_dir);

}  // namespace faceaug
