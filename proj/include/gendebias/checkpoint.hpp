#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "gendebias/nn.hpp"
#include "gendebias/tensor.hpp"

namespace gendebias {

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path &path, const std::string &contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out << contents;
        if (!out) throw std::runtime_error("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline nlohmann::json read_json_file(const std::filesystem::path &path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error &e) {
        throw std::runtime_error("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

inline nlohmann::json to_json(const nn::ModelConfig &c) {
    return {{"d_model", c.d_model},         {"heads", c.heads},
            {"ff_width", c.ff_width},       {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers}, {"max_len", c.max_len},
            {"encoder_positions", to_string(c.encoder_positions)}};
}

inline nn::ModelConfig model_config_from_json(const nlohmann::json &j) {
    nn::ModelConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.ff_width = j.at("ff_width").get<std::size_t>();
    c.encoder_layers = j.at("encoder_layers").get<std::size_t>();
    c.decoder_layers = j.at("decoder_layers").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.encoder_positions = nn::parse_position_mode(j.value("encoder_positions", std::string("learned")));
    c.validate();
    return c;
}

/// Parameter arrays keyed by name. Doubles are written in shortest
/// round-trip form, so save -> load is bit-exact.
template <class Model>
nlohmann::json parameters_to_json(Model &model) {
    nlohmann::json params = nlohmann::json::array();
    model.visit_parameters([&](const std::string &name, Tensor &t) {
        params.push_back({{"name", name}, {"shape", t.shape}, {"data", t.data}});
    });
    return params;
}

template <class Model>
void parameters_from_json(Model &model, const nlohmann::json &params) {
    std::unordered_map<std::string, const nlohmann::json *> by_name;
    for (const auto &p : params) by_name[p.at("name").get<std::string>()] = &p;
    std::size_t seen = 0;
    model.visit_parameters([&](const std::string &name, Tensor &t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint lacks parameter '" + name + "'");
        const auto shape = it->second->at("shape").get<Shape>();
        if (shape != t.shape) {
            throw std::runtime_error("checkpoint parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                     shape_str(t.shape));
        }
        t.data = it->second->at("data").get<std::vector<double>>();
        if (t.data.size() != shape_numel(shape)) throw std::runtime_error("checkpoint parameter '" + name + "' is truncated");
        ++seen;
    });
    if (seen != by_name.size()) throw std::runtime_error("checkpoint holds parameters the model does not define");
}

inline void require_format(const nlohmann::json &j, const std::string &expected) {
    const auto fmt = j.value("format", std::string{});
    if (fmt != expected) throw std::runtime_error("checkpoint format '" + fmt + "' is not '" + expected + "'");
}

} // namespace gendebias
