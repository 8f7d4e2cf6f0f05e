#include "weakseg/checkpoint.hpp"

#include <fstream>

#include "json.hpp"
#include "weakseg/common.hpp"

namespace weakseg {

using nlohmann::json;

void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::string& path_base) {
    std::ofstream bin(path_base + ".bin", std::ios::binary);
    if (!bin) throw IoError("cannot open for writing: " + path_base + ".bin");
    json index = json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        index.push_back({{"name", t.name}, {"shape", t.tensor.shape}, {"offset", offset}});
        const std::size_t bytes = t.tensor.values.size() * sizeof(float);
        bin.write(reinterpret_cast<const char*>(t.tensor.values.data()),
                  static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    if (!bin) throw IoError("write failed: " + path_base + ".bin");
    bin.close();

    std::ofstream idx(path_base + ".json");
    if (!idx) throw IoError("cannot open for writing: " + path_base + ".json");
    idx << index.dump(2) << "\n";
    if (!idx) throw IoError("write failed: " + path_base + ".json");
}

std::vector<NamedTensor> load_checkpoint(const std::string& path_base) {
    std::ifstream idx(path_base + ".json");
    if (!idx) throw IoError("cannot open for reading: " + path_base + ".json");
    json index;
    try {
        idx >> index;
    } catch (const std::exception& e) {
        throw IoError("malformed checkpoint index " + path_base + ".json: " + e.what());
    }

    std::ifstream bin(path_base + ".bin", std::ios::binary);
    if (!bin) throw IoError("cannot open for reading: " + path_base + ".bin");

    std::vector<NamedTensor> out;
    for (const auto& e : index) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<std::vector<int>>();
        t.tensor = Tensor::zeros(shape);
        bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
        bin.read(reinterpret_cast<char*>(t.tensor.values.data()),
                 static_cast<std::streamsize>(t.tensor.values.size() * sizeof(float)));
        if (!bin) throw IoError("checkpoint payload truncated: " + path_base + ".bin");
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace weakseg
