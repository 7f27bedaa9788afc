#include "faceaug/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <set>

#include "faceaug/checkpoint.hpp"
#include "faceaug/errors.hpp"

namespace faceaug {

namespace {

using nlohmann::json;

bool triplets_possible(const std::vector<std::string>& ids) {
    std::set<std::string> uniq(ids.begin(), ids.end());
    if (uniq.size() < 2) return false;
    for (const std::string& u : uniq)
        if (std::count(ids.begin(), ids.end(), u) >= 2) return true;
    return false;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (b.empty()) return a;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != bs.size() || as.size() < 2 ||
        !std::equal(as.begin() + 1, as.end(), bs.begin() + 1))
        throw ShapeError("concat: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
    std::vector<int> shape = as;
    shape[0] = as[0] + bs[0];
    Tensor out(shape);
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

double mse_double(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double frob_double(const Tensor& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * x[i];
    return std::sqrt(s);
}

double mean_row_sqdist_double(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.dim(0));
}

// Temporarily marks parameters non-trainable so a tape binds them as frozen
// leaves; restores on scope exit.
class FreezeGuard {
public:
    explicit FreezeGuard(const std::vector<Parameter*>& params) : params_(params) {
        saved_.reserve(params.size());
        for (Parameter* p : params) {
            saved_.push_back(p->trainable);
            p->trainable = false;
        }
    }
    ~FreezeGuard() {
        for (size_t i = 0; i < params_.size(); ++i) params_[i]->trainable = saved_[i];
    }

private:
    const std::vector<Parameter*>& params_;
    std::vector<bool> saved_;
};

json config_to_json(const TrainConfig& c) {
    return json{{"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs},
                {"margin", c.margin},
                {"lambda_frob", c.lambda_frob},
                {"lambda_adv", c.lambda_adv},
                {"noise_scale", c.noise_scale},
                {"seed", c.seed},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"triplet_strategy", c.triplet_strategy},
                {"image_size", c.image_size},
                {"channels", c.channels},
                {"gen_channels", c.gen_channels},
                {"gen_residual_blocks", c.gen_residual_blocks},
                {"sn_steps", c.sn_steps},
                {"embed_dim", c.embed_dim},
                {"embed_blocks", c.embed_blocks},
                {"embed_reductions", c.embed_reductions},
                {"embed_base_channels", c.embed_base_channels}};
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text, const std::string& where) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(where + ": config must be a JSON object");
    TrainConfig c;
    const json defaults = config_to_json(c);
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key))
            throw ConfigError(where + ": unknown config field '" + key + "'");
        (void)value;
    }
    auto get = [&](const char* key, auto& field) {
        try {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const json::exception&) {
            throw ConfigError(where + ": bad value for '" + std::string(key) + "'");
        }
    };
    get("learning_rate", c.learning_rate);
    get("batch_size", c.batch_size);
    get("epochs", c.epochs);
    get("margin", c.margin);
    get("lambda_frob", c.lambda_frob);
    get("lambda_adv", c.lambda_adv);
    get("noise_scale", c.noise_scale);
    get("seed", c.seed);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("triplet_strategy", c.triplet_strategy);
    get("image_size", c.image_size);
    get("channels", c.channels);
    get("gen_channels", c.gen_channels);
    get("gen_residual_blocks", c.gen_residual_blocks);
    get("sn_steps", c.sn_steps);
    get("embed_dim", c.embed_dim);
    get("embed_blocks", c.embed_blocks);
    get("embed_reductions", c.embed_reductions);
    get("embed_base_channels", c.embed_base_channels);
    return c;
}

void TrainConfig::validate() const {
    if (learning_rate <= 0.0f) throw ConfigError("config: learning_rate must be > 0");
    if (batch_size < 2) throw ConfigError("config: batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (margin <= 0.0f) throw ConfigError("config: margin must be > 0");
    if (lambda_frob < 0.0f || lambda_adv < 0.0f)
        throw ConfigError("config: lambda weights must be >= 0");
    if (noise_scale < 0.0f) throw ConfigError("config: noise_scale must be >= 0");
    if (beta1 <= 0.0f || beta1 >= 1.0f || beta2 <= 0.0f || beta2 >= 1.0f)
        throw ConfigError("config: betas must lie in (0,1)");
    if (image_size < 8 || image_size % 4 != 0)
        throw ConfigError("config: image_size must be >= 8 and divisible by 4");
    if (channels != 1 && channels != 3) throw ConfigError("config: channels must be 1 or 3");
    if (gen_channels < 1 || gen_residual_blocks < 0 || sn_steps < 1)
        throw ConfigError("config: invalid generator architecture");
    if (embed_dim < 1 || embed_blocks < 1 || embed_reductions < 0 || embed_base_channels < 1)
        throw ConfigError("config: invalid embedder architecture");
    if (image_size % (1 << embed_reductions) != 0)
        throw ConfigError("config: image_size must be divisible by 2^embed_reductions");
    strategy();
}

TripletStrategy TrainConfig::strategy() const {
    if (triplet_strategy == "all") return TripletStrategy::All;
    if (triplet_strategy == "semi-hard") return TripletStrategy::SemiHard;
    throw ConfigError("config: triplet_strategy must be 'all' or 'semi-hard'");
}

std::string train_config_json(const TrainConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

uint64_t train_config_hash(const TrainConfig& cfg) { return fnv1a(train_config_json(cfg)); }

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    TrainConfig cfg = parse_train_config(text, path);
    cfg.validate();
    return cfg;
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config " + path);
    out << train_config_json(cfg);
    if (!out) throw IoError("failed writing config " + path);
}

void write_runlog_csv(const RunLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write run log " + path);
    out << "step,epoch,gen_loss,disc_loss,mse_term,frob_term,adv_term\n";
    char buf[256];
    for (const RunRecord& r : log.records) {
        std::snprintf(buf, sizeof(buf), "%lld,%d,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      static_cast<long long>(r.step), r.epoch, r.gen_loss, r.disc_loss, r.mse_term,
                      r.frob_term, r.adv_term);
        out << buf;
    }
    for (const std::string& note : log.notes) out << "# " << note << "\n";
    if (!out) throw IoError("failed writing run log " + path);
}

RunLog read_runlog_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read run log " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "step,epoch,gen_loss,disc_loss,mse_term,frob_term,adv_term")
        throw ConfigError(path + ":1: unexpected header '" + line + "'");
    RunLog log;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            log.notes.push_back(line.substr(line.size() > 1 && line[1] == ' ' ? 2 : 1));
            continue;
        }
        RunRecord r;
        long long step = 0;
        char extra = 0;
        if (std::sscanf(line.c_str(), "%lld,%d,%lf,%lf,%lf,%lf,%lf%c", &step, &r.epoch, &r.gen_loss,
                        &r.disc_loss, &r.mse_term, &r.frob_term, &r.adv_term, &extra) != 7)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed row");
        r.step = step;
        log.records.push_back(r);
    }
    return log;
}

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng init = Rng(cfg.seed).fork(1);
    GeneratorConfig gc;
    gc.in_channels = cfg.channels;
    gc.channels = cfg.gen_channels;
    gc.residual_blocks = cfg.gen_residual_blocks;
    gc.sn_steps = cfg.sn_steps;
    gen_ = Generator(gc, init);
    SaliencyConfig sc;
    sc.in_channels = cfg.channels;
    sc.channels = cfg.gen_channels;
    sal_ = SaliencyExtractor(sc, init);
    EmbedderConfig ec;
    ec.in_channels = cfg.channels;
    ec.embed_dim = cfg.embed_dim;
    ec.residual_blocks = cfg.embed_blocks;
    ec.reductions = cfg.embed_reductions;
    ec.base_channels = cfg.embed_base_channels;
    emb_ = Embedder(ec, init);

    gen_.collect("generator", gen_items_);
    sal_.collect("saliency", gen_items_);
    emb_.collect("embedder", emb_items_);

    AdamConfig ac{cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8f};
    adam_gen_ = Adam(gen_items_.params, ac);
    adam_emb_ = Adam(emb_items_.params, ac);
    noise_rng_ = Rng(cfg.seed).fork(2);
}

std::vector<std::vector<int>> Trainer::epoch_plan(const std::vector<std::string>& identities,
                                                  int epoch) {
    Rng rng = Rng(cfg_.seed).fork(100 + static_cast<uint64_t>(epoch));
    return batch_plan(identities, cfg_.batch_size, rng);
}

Trainer::ForwardHandles Trainer::generator_forward(Tape& t, const Tensor& images, bool with_noise) {
    const Fwd fwd = Fwd::train(true);
    ForwardHandles h;
    h.tape = &t;
    h.x = t.input(images);
    h.features = gen_.encode(t, h.x, fwd);
    if (with_noise && cfg_.noise_scale > 0.0f) {
        Tensor noise(h.features.shape());
        for (int64_t i = 0; i < noise.size(); ++i)
            noise[i] = cfg_.noise_scale * noise_rng_.normal_f();
        h.features = add(h.features, t.input(std::move(noise)));
    }
    h.perturbation = gen_.decode(t, h.features, fwd);
    h.saliency = sal_.extract(t, h.features, fwd);
    h.masked = mul_mask(h.perturbation, h.saliency);
    h.x_adv = clamp(add(h.x, h.masked), -3.0f, 3.0f);
    return h;
}

double Trainer::discriminator_step(const Batch& real, const Tensor& generated) {
    Tensor uni = concat_rows(real.images, generated);
    std::vector<std::string> ids = real.identities;
    if (!generated.empty()) {
        if (generated.dim(0) != static_cast<int>(real.identities.size()))
            throw ShapeError("discriminator_step: generated batch size mismatch");
        ids.insert(ids.end(), real.identities.begin(), real.identities.end());
    }

    Tape t(true);
    Var x = t.input(std::move(uni));
    Var e = emb_.embed(t, x, Fwd::train(true));
    if (!e.value().all_finite()) throw NumericalError("discriminator_step: non-finite embeddings");
    const std::vector<TripletIndex> triples =
        sample_triplets(ids, cfg_.strategy(), &e.value(), cfg_.margin);
    const double pre = triplet_loss(e.value(), triples, cfg_.margin);
    Var loss = triplet_hinge(e, triples, cfg_.margin);
    adam_emb_.zero_grad();
    t.backward(loss);
    adam_emb_.step();
    return pre;
}

GenLossTerms Trainer::generator_backward_and_step(ForwardHandles& h) {
    Tape& t = *h.tape;
    Var ea, ex;
    {
        FreezeGuard freeze(emb_items_.params);
        ea = emb_.embed(t, h.x_adv, Fwd::eval());
        ex = emb_.embed(t, h.x, Fwd::eval());
    }
    Var mse = mse_loss(h.x_adv, h.x);
    Var frob = frobenius_norm(h.masked);
    Var adv = mean_row_sqdist(ea, ex);
    Var total = sub(add(mse, scale(frob, cfg_.lambda_frob)), scale(adv, cfg_.lambda_adv));

    GenLossTerms terms;
    terms.mse = mse_double(h.x_adv.value(), h.x.value());
    terms.frob = static_cast<double>(cfg_.lambda_frob) * frob_double(h.masked.value());
    terms.adv =
        static_cast<double>(cfg_.lambda_adv) * mean_row_sqdist_double(ea.value(), ex.value());
    terms.total = terms.mse + terms.frob - terms.adv;
    if (!std::isfinite(terms.total))
        throw NumericalError("generator_step: non-finite loss");

    adam_gen_.zero_grad();
    t.backward(total);
    adam_gen_.step();
    return terms;
}

GenLossTerms Trainer::generator_step(const Batch& batch) {
    Tape t(true);
    ForwardHandles h = generator_forward(t, batch.images, true);
    return generator_backward_and_step(h);
}

GenLossTerms Trainer::generator_loss_terms(const Tensor& x, const Tensor& x_adv,
                                           const Tensor& masked_perturbation) {
    check_same_shape(x, x_adv, "generator_loss");
    GenLossTerms terms;
    terms.mse = mse_double(x_adv, x);
    terms.frob = static_cast<double>(cfg_.lambda_frob) * frob_double(masked_perturbation);
    const Tensor ea = emb_.embed_eval(x_adv);
    const Tensor ex = emb_.embed_eval(x);
    terms.adv = static_cast<double>(cfg_.lambda_adv) * mean_row_sqdist_double(ea, ex);
    terms.total = terms.mse + terms.frob - terms.adv;
    if (!std::isfinite(terms.total)) throw NumericalError("generator_loss: non-finite loss");
    return terms;
}

bool Trainer::adversarial_round(const Batch& batch, RunRecord& out) {
    if (!triplets_possible(batch.identities)) return false;
    Tape t(true);
    ForwardHandles h = generator_forward(t, batch.images, true);
    if (!h.x_adv.value().all_finite())
        throw NumericalError("adversarial_round: non-finite generated samples");
    out.disc_loss = discriminator_step(batch, h.x_adv.value());
    const GenLossTerms terms = generator_backward_and_step(h);
    out.gen_loss = terms.total;
    out.mse_term = terms.mse;
    out.frob_term = terms.frob;
    out.adv_term = terms.adv;
    return true;
}

bool Trainer::embedder_round(const Batch& batch, RunRecord& out) {
    if (!triplets_possible(batch.identities)) return false;
    out.disc_loss = discriminator_step(batch, Tensor());
    return true;
}

RunLog Trainer::train(const LoadedDataset& ds, const std::string& out_dir, int stop_after_epoch) {
    namespace fs = std::filesystem;
    const int last_epoch =
        stop_after_epoch < 0 ? cfg_.epochs : std::min(cfg_.epochs, stop_after_epoch);
    if (!triplets_possible(ds.identities))
        throw ConfigError("dataset too small for triplets: need >= 2 identities and one repeated");
    const auto& shape = ds.images.shape();
    if (shape[1] != cfg_.image_size || shape[3] != cfg_.channels)
        throw ShapeError("train: dataset is " + ds.images.shape_str() + ", config wants " +
                         std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
                         "x" + std::to_string(cfg_.channels));
    fs::create_directories(out_dir);

    RunLog log;
    const auto t0 = std::chrono::steady_clock::now();
    const bool adversarial = cfg_.lambda_adv > 0.0f;
    for (; epoch_ < last_epoch;) {
        const std::vector<std::vector<int>> plan = epoch_plan(ds.identities, epoch_);
        for (const std::vector<int>& indices : plan) {
            const Batch batch = ds.gather(indices);
            RunRecord rec;
            rec.epoch = epoch_ + 1;  // records are 1-based
            bool ran = false;
            try {
                ran = adversarial ? adversarial_round(batch, rec) : embedder_round(batch, rec);
            } catch (const NumericalError& e) {
                const std::string ckpt = (fs::path(out_dir) / "ckpt_failure.bin").string();
                save_checkpoint(*this, ckpt);
                log.notes.push_back(std::string("aborted: ") + e.what() + "; checkpoint " + ckpt);
                throw;
            }
            if (!ran) {
                ++log.skipped_batches;
                log.notes.push_back("epoch " + std::to_string(epoch_ + 1) +
                                    ": batch skipped, no triplet possible");
                continue;
            }
            rec.step = ++step_;
            rec.wall_time =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (!std::isfinite(rec.gen_loss) || !std::isfinite(rec.disc_loss)) {
                const std::string ckpt = (fs::path(out_dir) / "ckpt_failure.bin").string();
                save_checkpoint(*this, ckpt);
                log.notes.push_back("aborted: non-finite loss at step " + std::to_string(rec.step));
                throw NumericalError("train: non-finite loss at step " + std::to_string(rec.step));
            }
            log.records.push_back(rec);
        }
        ++epoch_;
        save_checkpoint(*this, (fs::path(out_dir) / "ckpt_last.bin").string());
    }
    if (epoch_ >= cfg_.epochs)
        save_checkpoint(*this, (fs::path(out_dir) / "ckpt_final.bin").string());
    return log;
}

TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg,
                  const std::string& out_dir) {
    namespace fs = std::filesystem;
    cfg.validate();
    const LoadedDataset ds = load_dataset(manifest);
    Trainer trainer(cfg);
    TrainResult result;
    try {
        result.log = trainer.train(ds, out_dir);
    } catch (...) {
        fs::create_directories(out_dir);
        write_runlog_csv(result.log, (fs::path(out_dir) / "runlog.csv").string());
        throw;
    }
    write_runlog_csv(result.log, (fs::path(out_dir) / "runlog.csv").string());
    result.final_checkpoint = (fs::path(out_dir) / "ckpt_final.bin").string();
    return result;
}

TrainResult train_resume(const std::string& checkpoint_path, const DatasetManifest& manifest,
                         const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::unique_ptr<Trainer> trainer = load_checkpoint(checkpoint_path);
    const LoadedDataset ds = load_dataset(manifest);
    TrainResult result;
    result.log = trainer->train(ds, out_dir);
    write_runlog_csv(result.log, (fs::path(out_dir) / "runlog.csv").string());
    result.final_checkpoint = (fs::path(out_dir) / "ckpt_final.bin").string();
    return result;
}

}  // namespace faceaug
