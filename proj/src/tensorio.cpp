#include "utf/tensorio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "utf/errors.hpp"

namespace utf {

namespace {

constexpr char kMagic[4] = {'U', 'F', 'P', 'M'};
constexpr unsigned char kVersion = 0x01;

void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32_le(out, bits);
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32_le(const unsigned char* p) {
    const std::uint32_t bits = get_u32_le(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw IoFailure("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoFailure("read failed: " + path.string());
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.is_open()) throw IoFailure("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out.good()) throw IoFailure("write failed: " + path.string());
}

}  // namespace

void UnembeddingMatrix::validate() const {
    if (rows < 1 || cols < 1) throw SizeMismatch("matrix must have rows >= 1, cols >= 1");
    if (static_cast<std::int64_t>(data.size()) != rows * cols)
        throw SizeMismatch("data length != rows*cols");
    if (!token_labels.empty() && static_cast<std::int64_t>(token_labels.size()) != rows)
        throw SizeMismatch("token_labels length != rows");
    for (float v : data)
        if (!std::isfinite(v)) throw NonFiniteValue("matrix contains NaN/Inf");
}

UnembeddingMatrix load_matrix(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 9) throw MalformedHeader("file too short for UFPM header");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw MalformedHeader("bad magic");
    if (static_cast<unsigned char>(bytes[4]) != kVersion)
        throw MalformedHeader("unsupported UFPM version");

    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t header_len = get_u32_le(p + 5);
    if (bytes.size() < 9 + static_cast<std::size_t>(header_len))
        throw MalformedHeader("truncated JSON header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(9, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeader(std::string("bad JSON header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("rows") || !header.contains("cols") ||
        !header["rows"].is_number_integer() || !header["cols"].is_number_integer())
        throw MalformedHeader("header must declare integer rows and cols");

    UnembeddingMatrix m;
    m.rows = header["rows"].get<std::int64_t>();
    m.cols = header["cols"].get<std::int64_t>();
    if (m.rows < 1 || m.cols < 1) throw MalformedHeader("rows/cols must be positive");
    if (header.contains("labels")) {
        if (!header["labels"].is_array()) throw MalformedHeader("labels must be an array");
        m.token_labels = header["labels"].get<std::vector<std::string>>();
        if (static_cast<std::int64_t>(m.token_labels.size()) != m.rows)
            throw MalformedHeader("labels length != rows");
    }

    const std::size_t payload_off = 9 + header_len;
    const std::size_t payload_len = bytes.size() - payload_off;
    const std::size_t expected = static_cast<std::size_t>(m.rows * m.cols) * 4;
    if (payload_len != expected)
        throw SizeMismatch("payload is " + std::to_string(payload_len) + " bytes, expected " +
                           std::to_string(expected));

    m.data.resize(static_cast<std::size_t>(m.rows * m.cols));
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = get_f32_le(p + payload_off + 4 * i);

    for (float v : m.data)
        if (!std::isfinite(v)) throw NonFiniteValue("payload contains NaN/Inf");
    return m;
}

void save_matrix(const UnembeddingMatrix& m, const std::filesystem::path& path) {
    m.validate();

    nlohmann::json header = {{"rows", m.rows}, {"cols", m.cols}};
    if (!m.token_labels.empty()) header["labels"] = m.token_labels;
    const std::string header_str = header.dump();

    std::string bytes;
    bytes.reserve(9 + header_str.size() + m.data.size() * 4);
    bytes.append(kMagic, 4);
    bytes.push_back(static_cast<char>(kVersion));
    put_u32_le(bytes, static_cast<std::uint32_t>(header_str.size()));
    bytes += header_str;
    for (float v : m.data) put_f32_le(bytes, v);

    write_file(path, bytes);
}

std::vector<TokenSeq> load_corpus(const std::filesystem::path& path, std::int64_t vocab_size) {
    std::ifstream in(path);
    if (!in.is_open()) throw IoFailure("cannot open " + path.string());

    std::vector<TokenSeq> corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;

        TokenSeq seq;
        std::istringstream fields(line);
        std::string field;
        while (fields >> field) {
            std::size_t consumed = 0;
            long long id = 0;
            try {
                id = std::stoll(field, &consumed);
            } catch (const std::exception&) {
                throw ParseError("line " + std::to_string(line_no) + ": non-integer field '" +
                                 field + "'");
            }
            if (consumed != field.size() || id < 0)
                throw ParseError("line " + std::to_string(line_no) + ": non-integer field '" +
                                 field + "'");
            if (id >= vocab_size)
                throw TokenOutOfRange("line " + std::to_string(line_no) + ": token " +
                                      std::to_string(id) + " >= vocab size " +
                                      std::to_string(vocab_size));
            seq.push_back(static_cast<TokenId>(id));
        }
        if (!seq.empty()) corpus.push_back(std::move(seq));
    }
    if (in.bad()) throw IoFailure("read failed: " + path.string());
    return corpus;
}

void save_corpus(const std::vector<TokenSeq>& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out.is_open()) throw IoFailure("cannot open for writing: " + path.string());
    for (const auto& seq : corpus) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i) out << ' ';
            out << seq[i];
        }
        out << '\n';
    }
    out.flush();
    if (!out.good()) throw IoFailure("write failed: " + path.string());
}

}  // namespace utf
