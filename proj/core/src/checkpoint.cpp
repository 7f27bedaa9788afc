#include "faceaug/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "faceaug/errors.hpp"

namespace faceaug {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'F', 'A', 'U', 'G', 'C', 'K', 'P', '1'};

void write_raw(std::ostream& out, const void* p, size_t bytes) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(bytes));
}

void read_raw(std::istream& in, void* p, size_t bytes, const std::string& path) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(bytes));
    if (in.gcount() != static_cast<std::streamsize>(bytes))
        throw IoError("checkpoint " + path + ": truncated");
}

void write_tensor(std::ostream& out, const Tensor& t) {
    write_raw(out, t.data(), static_cast<size_t>(t.size()) * sizeof(float));
}

void read_tensor(std::istream& in, Tensor& t, const std::string& path) {
    read_raw(in, t.data(), static_cast<size_t>(t.size()) * sizeof(float), path);
}

json shape_json(const std::vector<int>& shape) { return json(shape); }

json manifest_params(const std::vector<Parameter*>& params) {
    json arr = json::array();
    for (const Parameter* p : params) arr.push_back({p->name, shape_json(p->value.shape())});
    return arr;
}

json manifest_state(const std::vector<std::pair<std::string, Tensor*>>& state) {
    json arr = json::array();
    for (const auto& [name, t] : state) arr.push_back({name, shape_json(t->shape())});
    return arr;
}

void check_manifest_params(const json& manifest, const std::vector<Parameter*>& params,
                           const char* which, const std::string& path) {
    if (!manifest.is_array() || manifest.size() != params.size())
        throw ConfigError("checkpoint " + path + ": " + which + " manifest expects " +
                          std::to_string(params.size()) + " tensors");
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string name = manifest[i].at(0).get<std::string>();
        const std::vector<int> shape = manifest[i].at(1).get<std::vector<int>>();
        if (name != params[i]->name)
            throw ConfigError("checkpoint " + path + ": parameter " + std::to_string(i) +
                              " is '" + name + "', expected '" + params[i]->name + "'");
        if (shape != params[i]->value.shape())
            throw ConfigError("checkpoint " + path + ": parameter '" + name + "' has shape " +
                              Tensor::shape_str(shape) + ", expected " +
                              params[i]->value.shape_str());
    }
}

void check_manifest_state(const json& manifest,
                          const std::vector<std::pair<std::string, Tensor*>>& state,
                          const char* which, const std::string& path) {
    if (!manifest.is_array() || manifest.size() != state.size())
        throw ConfigError("checkpoint " + path + ": " + which + " manifest expects " +
                          std::to_string(state.size()) + " tensors");
    for (size_t i = 0; i < state.size(); ++i) {
        const std::string name = manifest[i].at(0).get<std::string>();
        const std::vector<int> shape = manifest[i].at(1).get<std::vector<int>>();
        if (name != state[i].first)
            throw ConfigError("checkpoint " + path + ": state " + std::to_string(i) + " is '" +
                              name + "', expected '" + state[i].first + "'");
        if (shape != state[i].second->shape())
            throw ConfigError("checkpoint " + path + ": state '" + name + "' has shape " +
                              Tensor::shape_str(shape) + ", expected " +
                              state[i].second->shape_str());
    }
}

json read_header(std::istream& in, const std::string& path) {
    char magic[8];
    read_raw(in, magic, sizeof(magic), path);
    if (std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw IoError("checkpoint " + path + ": bad magic, not a checkpoint file");
    uint32_t version = 0;
    read_raw(in, &version, sizeof(version), path);
    if (version != kCheckpointVersion)
        throw ConfigError("checkpoint " + path + ": format version " + std::to_string(version) +
                          ", supported " + std::to_string(kCheckpointVersion));
    uint64_t header_len = 0;
    read_raw(in, &header_len, sizeof(header_len), path);
    if (header_len == 0 || header_len > (64u << 20))
        throw IoError("checkpoint " + path + ": implausible header length");
    std::string text(header_len, '\0');
    read_raw(in, text.data(), header_len, path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw IoError("checkpoint " + path + ": bad header: " + e.what());
    }
}

}  // namespace

// Reaches the Trainer internals both directions; declared a friend there.
struct CheckpointCodec {
    static void save(const Trainer& tr, const std::string& path) {
        const std::string cfg_text = train_config_json(tr.cfg_);
        json header{{"version", kCheckpointVersion},
                    {"config", json::parse(cfg_text)},
                    {"config_hash", train_config_hash(tr.cfg_)},
                    {"step", tr.step_},
                    {"epoch", tr.epoch_},
                    {"adam_gen_t", tr.adam_gen_.t},
                    {"adam_emb_t", tr.adam_emb_.t},
                    {"noise_rng", tr.noise_rng_.save_state()},
                    {"gen_params", manifest_params(tr.gen_items_.params)},
                    {"emb_params", manifest_params(tr.emb_items_.params)},
                    {"gen_state", manifest_state(tr.gen_items_.state)},
                    {"emb_state", manifest_state(tr.emb_items_.state)}};
        const std::string header_text = header.dump();

        const std::string tmp = path + ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp);
        write_raw(out, kMagic, sizeof(kMagic));
        const uint32_t version = kCheckpointVersion;
        write_raw(out, &version, sizeof(version));
        const uint64_t header_len = header_text.size();
        write_raw(out, &header_len, sizeof(header_len));
        write_raw(out, header_text.data(), header_text.size());

        for (const Parameter* p : tr.gen_items_.params) write_tensor(out, p->value);
        for (const Parameter* p : tr.emb_items_.params) write_tensor(out, p->value);
        for (const auto& [name, t] : tr.gen_items_.state) write_tensor(out, *t);
        for (const auto& [name, t] : tr.emb_items_.state) write_tensor(out, *t);
        for (const Tensor& t : tr.adam_gen_.m) write_tensor(out, t);
        for (const Tensor& t : tr.adam_gen_.v) write_tensor(out, t);
        for (const Tensor& t : tr.adam_emb_.m) write_tensor(out, t);
        for (const Tensor& t : tr.adam_emb_.v) write_tensor(out, t);
        out.close();
        if (!out) throw IoError("failed writing checkpoint " + tmp);
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
    }

    static std::unique_ptr<Trainer> load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read checkpoint " + path);
        const json header = read_header(in, path);

        TrainConfig cfg = parse_train_config(header.at("config").dump(), path);
        cfg.validate();
        if (header.at("config_hash").get<uint64_t>() != train_config_hash(cfg))
            throw ConfigError("checkpoint " + path + ": config hash mismatch");

        auto tr = std::make_unique<Trainer>(cfg);
        check_manifest_params(header.at("gen_params"), tr->gen_items_.params, "generator", path);
        check_manifest_params(header.at("emb_params"), tr->emb_items_.params, "embedder", path);
        check_manifest_state(header.at("gen_state"), tr->gen_items_.state, "generator", path);
        check_manifest_state(header.at("emb_state"), tr->emb_items_.state, "embedder", path);

        for (Parameter* p : tr->gen_items_.params) read_tensor(in, p->value, path);
        for (Parameter* p : tr->emb_items_.params) read_tensor(in, p->value, path);
        for (auto& [name, t] : tr->gen_items_.state) read_tensor(in, *t, path);
        for (auto& [name, t] : tr->emb_items_.state) read_tensor(in, *t, path);
        for (Tensor& t : tr->adam_gen_.m) read_tensor(in, t, path);
        for (Tensor& t : tr->adam_gen_.v) read_tensor(in, t, path);
        for (Tensor& t : tr->adam_emb_.m) read_tensor(in, t, path);
        for (Tensor& t : tr->adam_emb_.v) read_tensor(in, t, path);
        if (in.peek() != std::char_traits<char>::eof())
            throw IoError("checkpoint " + path + ": trailing data");

        tr->step_ = header.at("step").get<int64_t>();
        tr->epoch_ = header.at("epoch").get<int>();
        tr->adam_gen_.t = header.at("adam_gen_t").get<int64_t>();
        tr->adam_emb_.t = header.at("adam_emb_t").get<int64_t>();
        tr->noise_rng_.load_state(header.at("noise_rng").get<std::string>());
        return tr;
    }
};

void save_checkpoint(const Trainer& trainer, const std::string& path) {
    CheckpointCodec::save(trainer, path);
}

std::unique_ptr<Trainer> load_checkpoint(const std::string& path) {
    return CheckpointCodec::load(path);
}

TrainConfig checkpoint_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path);
    const json header = read_header(in, path);
    TrainConfig cfg = parse_train_config(header.at("config").dump(), path);
    cfg.validate();
    return cfg;
}

}  // namespace faceaug
