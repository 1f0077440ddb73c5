#pragma once

#include <fstream>
#include <string>

#include "json.hpp"
#include "smedit/errors.hpp"
#include "smedit/matrix.hpp"

namespace smedit {

// ordered_json keeps emission byte-deterministic across runs
using Json = nlohmann::ordered_json;

inline Json matrix_to_json(const Matrix& m) {
    Json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    std::vector<double> data(m.data(), m.data() + m.size());
    j["data"] = std::move(data);
    return j;
}

inline Matrix matrix_from_json(const Json& j) {
    if (!j.contains("rows") || !j.contains("cols") || !j.contains("data")) {
        throw_error(ErrorKind::io, "matrix json missing fields");
    }
    const int rows = j.at("rows").get<int>();
    const int cols = j.at("cols").get<int>();
    std::vector<double> data = j.at("data").get<std::vector<double>>();
    std::vector<real_t> typed(data.begin(), data.end());
    if (typed.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
        throw_error(ErrorKind::io, "matrix json data length mismatch");
    }
    return Matrix(rows, cols, std::move(typed));
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw_error(ErrorKind::io, "cannot open for writing: " + path);
    out << content;
    if (!out) throw_error(ErrorKind::io, "write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw_error(ErrorKind::io, "cannot open for reading: " + path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return content;
}

inline Json parse_json_file(const std::string& path) {
    const std::string text = read_text_file(path);
    Json j = Json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw_error(ErrorKind::io, "invalid json in " + path);
    return j;
}

// 64-bit FNV-1a, used for config hashes embedded in artifacts.
inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace smedit
