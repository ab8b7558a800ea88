#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "dtl/vit.hpp"
#include "json.hpp"

namespace dtl {

using nlohmann::json;

namespace {

std::vector<unsigned char> encode(const Tensor& t) {
    std::vector<unsigned char> out(t.nbytes());
    if (t.dtype() == DType::F32) {
        for (long i = 0; i < t.numel(); ++i) {
            float f = static_cast<float>(t[i]);
            std::memcpy(out.data() + i * 4, &f, 4);
        }
    } else {
        for (long i = 0; i < t.numel(); ++i) {
            double d = t[i];
            std::memcpy(out.data() + i * 8, &d, 8);
        }
    }
    return out;
}

void decode(Tensor& t, const unsigned char* src) {
    if (t.dtype() == DType::F32) {
        for (long i = 0; i < t.numel(); ++i) {
            float f;
            std::memcpy(&f, src + i * 4, 4);
            t[i] = static_cast<double>(f);
        }
    } else {
        for (long i = 0; i < t.numel(); ++i) {
            double d;
            std::memcpy(&d, src + i * 8, 8);
            t[i] = d;
        }
    }
}

}  // namespace

void save_weights(const ParamStore& store, const std::string& path) {
    json manifest;
    manifest["data_file"] = path.substr(path.find_last_of('/') + 1) + ".bin";
    manifest["tensors"] = json::array();
    std::ofstream bin(path + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_weights: cannot open " + path + ".bin");
    std::size_t offset = 0;
    for (const Param* p : store.all()) {
        auto bytes = encode(p->tensor);
        bin.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        manifest["tensors"].push_back({{"name", p->name},
                                       {"shape", p->tensor.shape()},
                                       {"dtype", dtype_name(p->tensor.dtype())},
                                       {"offset", offset},
                                       {"nbytes", bytes.size()}});
        offset += bytes.size();
    }
    std::ofstream mf(path + ".json");
    if (!mf) throw std::runtime_error("save_weights: cannot open " + path + ".json");
    mf << manifest.dump(2) << "\n";
}

std::vector<std::string> load_weights(ParamStore& store, const std::string& path,
                                      const ManifestOptions& opts) {
    std::ifstream mf(path + ".json");
    if (!mf) throw std::runtime_error("load_weights: cannot open " + path + ".json");
    json manifest = json::parse(mf);

    std::string data_path = path.substr(0, path.find_last_of('/') + 1) +
                            manifest.at("data_file").get<std::string>();
    std::ifstream bin(data_path, std::ios::binary);
    if (!bin) throw std::runtime_error("load_weights: cannot open " + data_path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(bin)),
                                   std::istreambuf_iterator<char>());

    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    std::set<std::string> seen;
    std::set<std::string> loaded;

    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        if (!seen.insert(name).second) {
            errors.push_back("duplicate entry: " + name);
            continue;
        }
        if (!store.contains(name)) {
            warnings.push_back("unknown entry: " + name);
            continue;
        }
        Param& p = store.get(name);
        auto shape = entry.at("shape").get<std::vector<long>>();
        std::string dt = entry.at("dtype").get<std::string>();
        std::size_t offset = entry.at("offset").get<std::size_t>();
        std::size_t nbytes = entry.at("nbytes").get<std::size_t>();
        if (shape != p.tensor.shape()) {
            errors.push_back("shape mismatch for " + name + ": manifest " + shape_str(shape) +
                             " vs model " + shape_str(p.tensor.shape()));
            continue;
        }
        if (dt != dtype_name(p.tensor.dtype())) {
            errors.push_back("dtype mismatch for " + name + ": manifest " + dt + " vs model " +
                             dtype_name(p.tensor.dtype()));
            continue;
        }
        if (offset + nbytes > buf.size() || nbytes != p.tensor.nbytes()) {
            errors.push_back("truncated buffer for " + name);
            continue;
        }
        decode(p.tensor, buf.data() + offset);
        loaded.insert(name);
    }
    for (const Param* p : store.all())
        if (!loaded.count(p->name)) errors.push_back("missing entry: " + p->name);

    if (opts.strict && !warnings.empty())
        errors.insert(errors.end(), warnings.begin(), warnings.end());
    if (!errors.empty()) {
        std::string msg = "load_weights(" + path + "):";
        for (const auto& e : errors) msg += "\n  " + e;
        throw std::runtime_error(msg);
    }
    return warnings;
}

}  // namespace dtl
