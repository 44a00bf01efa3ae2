#include "poslab/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace poslab {

namespace {
constexpr char kMagic[4] = {'P', 'S', 'L', 'B'};
constexpr uint32_t kVersion = 1;
using json = nlohmann::json;

json config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},       {"max_positions", c.max_positions},
                {"scheme", to_string(c.scheme)}, {"rope_base", c.rope_base}, {"n_classes", c.n_classes}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.scheme = pos_scheme_from_string(j.at("scheme").get<std::string>());
    c.rope_base = j.at("rope_base").get<double>();
    c.n_classes = j.at("n_classes").get<int>();
    return c;
}
} // namespace

void save_model(ModelF& model, const std::string& path) {
    json header;
    header["config"] = config_to_json(model.config());
    header["lora_rank"] = model.lora_rank();
    header["lora_alpha"] = model.lora_alpha();
    json index = json::array();
    size_t offset = 0;
    auto params = model.parameters();
    for (auto& p : params) {
        index.push_back(json{{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
        offset += p.tensor.numel();
    }
    header["tensors"] = index;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_model: cannot open " + path);
    f.write(kMagic, 4);
    uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (auto& p : params)
        f.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                static_cast<std::streamsize>(p.tensor.numel() * sizeof(float)));
    if (!f) throw std::runtime_error("save_model: write failed for " + path);
}

ModelF load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_model: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("load_model: bad magic in " + path);
    uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
    if (ver != kVersion) throw std::runtime_error("load_model: unsupported version");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hs);

    ModelF model(config_from_json(header.at("config")), 0);
    const int lora_rank = header.at("lora_rank").get<int>();
    if (lora_rank > 0) model.apply_lora(lora_rank, header.at("lora_alpha").get<double>());

    auto params = model.parameters();
    size_t idx = 0;
    for (auto& entry : header.at("tensors")) {
        if (idx >= params.size()) throw std::runtime_error("load_model: tensor count mismatch");
        auto& p = params[idx++];
        if (entry.at("name").get<std::string>() != p.name)
            throw std::runtime_error("load_model: tensor order mismatch at " + p.name);
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != p.tensor.shape()) throw std::runtime_error("load_model: shape mismatch at " + p.name);
        f.read(reinterpret_cast<char*>(p.tensor.data().data()),
               static_cast<std::streamsize>(p.tensor.numel() * sizeof(float)));
    }
    if (idx != params.size() || !f) throw std::runtime_error("load_model: truncated checkpoint");
    return model;
}

} // namespace poslab
