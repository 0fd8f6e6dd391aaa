#include "rmfat/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rmfat {
namespace {

constexpr char kMagic[8] = {'R', 'M', 'F', 'A', 'T', 'C', 'K', '1'};
constexpr int kFormatVersion = 1;

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return "float32";
        case torch::kFloat64: return "float64";
        default: throw IoError("checkpoint: unsupported tensor dtype");
    }
}

torch::ScalarType dtype_from(const std::string& name) {
    if (name == "float32") return torch::kFloat32;
    if (name == "float64") return torch::kFloat64;
    throw IoError("checkpoint: unknown dtype '" + name + "'");
}

std::string shape_string(torch::IntArrayRef sizes) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < sizes.size(); ++i) os << (i ? ", " : "") << sizes[i];
    os << ']';
    return os.str();
}

void put_u64(std::string& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& buf, std::size_t at) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

uint32_t crc_of(const std::string& buf, std::size_t len) {
    uLong c = crc32(0L, Z_NULL, 0);
    std::size_t done = 0;
    while (done < len) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(len - done, 1u << 30));
        c = crc32(c, reinterpret_cast<const Bytef*>(buf.data() + done), chunk);
        done += chunk;
    }
    return static_cast<uint32_t>(c);
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const fs::path& file) {
    json tensors = json::array();
    std::string payload;
    auto append = [&](const NamedTensors& list, const char* section) {
        for (const auto& [name, tensor] : list) {
            auto t = tensor.detach().cpu().contiguous();
            const auto nbytes = static_cast<std::size_t>(t.nbytes());
            tensors.push_back({{"name", name},
                               {"section", section},
                               {"dtype", dtype_name(t.scalar_type())},
                               {"shape", t.sizes().vec()},
                               {"offset", payload.size()},
                               {"nbytes", nbytes}});
            payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
        }
    };
    append(ck.parameters, "param");
    append(ck.optimizer.first_moment, "adam_m");
    append(ck.optimizer.second_moment, "adam_v");

    json config = json::array();
    for (const auto& [k, v] : ck.config) config.push_back({k, v});
    json header = {{"version", kFormatVersion},
                   {"config", config},
                   {"epoch", ck.epoch},
                   {"best_score", std::isfinite(ck.best_score) ? json(ck.best_score) : json(nullptr)},
                   {"rng_state", ck.rng_state},
                   {"optimizer", {{"step", ck.optimizer.step}}},
                   {"tensors", tensors}};
    const std::string header_text = header.dump();

    std::string buf(kMagic, sizeof(kMagic));
    put_u64(buf, header_text.size());
    buf += header_text;
    buf += payload;
    const uint32_t crc = crc_of(buf, buf.size());
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((crc >> (8 * i)) & 0xff));

    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    const fs::path tmp = file.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + file.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("failed writing checkpoint " + file.string());
    }
    std::error_code ec;
    fs::rename(tmp, file, ec);
    if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + file.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string where = " (" + file.string() + ")";
    if (buf.size() < sizeof(kMagic) + 8 + 4 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError("not a checkpoint file" + where);
    }
    const std::size_t body = buf.size() - 4;
    uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<uint32_t>(static_cast<unsigned char>(buf[body + i])) << (8 * i);
    if (crc_of(buf, body) != stored) throw IoError("checkpoint checksum mismatch" + where);

    const uint64_t header_len = get_u64(buf, sizeof(kMagic));
    const std::size_t header_at = sizeof(kMagic) + 8;
    if (header_len > body - header_at) throw IoError("truncated checkpoint header" + where);
    json header;
    try {
        header = json::parse(buf.substr(header_at, header_len));
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint header" + where + ": " + e.what());
    }
    const std::size_t payload_at = header_at + header_len;
    const std::size_t payload_len = body - payload_at;

    Checkpoint ck;
    try {
        if (header.at("version").get<int>() != kFormatVersion) {
            throw IoError("unsupported checkpoint version" + where);
        }
        for (const auto& kv : header.at("config")) {
            ck.config.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
        }
        ck.epoch = header.at("epoch").get<int64_t>();
        const auto& best = header.at("best_score");
        if (!best.is_null()) ck.best_score = best.get<double>();
        ck.rng_state = header.at("rng_state").get<std::string>();
        ck.optimizer.step = header.at("optimizer").at("step").get<int64_t>();
        for (const auto& t : header.at("tensors")) {
            const auto offset = t.at("offset").get<std::size_t>();
            const auto nbytes = t.at("nbytes").get<std::size_t>();
            if (offset > payload_len || nbytes > payload_len - offset) {
                throw IoError("tensor extends past payload" + where);
            }
            auto shape = t.at("shape").get<std::vector<int64_t>>();
            auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(t.at("dtype"))));
            if (static_cast<std::size_t>(tensor.nbytes()) != nbytes) {
                throw IoError("tensor size disagrees with its shape" + where);
            }
            std::memcpy(tensor.data_ptr(), buf.data() + payload_at + offset, nbytes);
            const auto section = t.at("section").get<std::string>();
            auto name = t.at("name").get<std::string>();
            if (section == "param") ck.parameters.emplace_back(std::move(name), tensor);
            else if (section == "adam_m") ck.optimizer.first_moment.emplace_back(std::move(name), tensor);
            else if (section == "adam_v") ck.optimizer.second_moment.emplace_back(std::move(name), tensor);
            else throw IoError("unknown tensor section '" + section + "'" + where);
        }
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint header" + where + ": " + e.what());
    }
    return ck;
}

NamedTensors snapshot_parameters(const torch::nn::Module& module) {
    NamedTensors out;
    for (const auto& item : module.named_parameters(true)) {
        out.emplace_back(item.key(), item.value().detach().clone().contiguous());
    }
    return out;
}

void apply_parameters(torch::nn::Module& module, const NamedTensors& tensors) {
    std::map<std::string, const torch::Tensor*> by_name;
    for (const auto& [name, t] : tensors) by_name[name] = &t;
    auto params = module.named_parameters(true);
    for (const auto& item : params) {
        auto it = by_name.find(item.key());
        if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor '" + item.key() + "'");
        if (!it->second->sizes().equals(item.value().sizes())) {
            throw ConfigError("tensor '" + item.key() + "' has shape " +
                              shape_string(it->second->sizes()) + " in the checkpoint but " +
                              shape_string(item.value().sizes()) + " in the model");
        }
    }
    for (const auto& [name, t] : tensors) {
        if (!params.contains(name)) throw ConfigError("checkpoint tensor '" + name + "' has no counterpart in the model");
    }
    torch::NoGradGuard guard;
    for (auto& item : params) item.value().copy_(*by_name.at(item.key()));
}

const std::string* find_value(const KeyValues& values, const std::string& key) {
    for (const auto& [k, v] : values) {
        if (k == key) return &v;
    }
    return nullptr;
}

}  // namespace rmfat
