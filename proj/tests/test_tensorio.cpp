#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "utf/errors.hpp"
#include "utf/rng.hpp"
#include "utf/tensorio.hpp"

using namespace utf;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    const fs::path dir = fs::temp_directory_path() / "utf_tensorio_tests";
    fs::create_directories(dir);
    return dir;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

void write_bytes(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace

TEST_CASE("identity matrix round trips") {
    UnembeddingMatrix m;
    m.rows = 2;
    m.cols = 2;
    m.data = {1.0f, 0.0f, 0.0f, 1.0f};
    const fs::path path = tmp_dir() / "identity.ufpm";
    save_matrix(m, path);
    CHECK(load_matrix(path) == m);
}

TEST_CASE("single value matrix round trips") {
    UnembeddingMatrix m;
    m.rows = 1;
    m.cols = 1;
    m.data = {42.0f};
    const fs::path path = tmp_dir() / "one.ufpm";
    save_matrix(m, path);
    const UnembeddingMatrix back = load_matrix(path);
    CHECK(back.data == std::vector<float>{42.0f});
}

TEST_CASE("labels round trip") {
    UnembeddingMatrix m;
    m.rows = 2;
    m.cols = 1;
    m.data = {1.0f, 2.0f};
    m.token_labels = {"<a>", "<unused_7>"};
    const fs::path path = tmp_dir() / "labels.ufpm";
    save_matrix(m, path);
    CHECK(load_matrix(path) == m);
}

TEST_CASE("random matrices round trip bitwise") {
    Rng shape_rng(7);
    for (int i = 0; i < 20; ++i) {
        const auto rows = shape_rng.range(1, 120);
        const auto cols = shape_rng.range(1, 24);
        const UnembeddingMatrix m =
            oracle::random_matrix(rows, cols, shape_rng.next_u64());
        const fs::path path = tmp_dir() / ("rand" + std::to_string(i) + ".ufpm");
        save_matrix(m, path);
        const UnembeddingMatrix back = load_matrix(path);
        REQUIRE(back.rows == m.rows);
        REQUIRE(back.cols == m.cols);
        CHECK(std::memcmp(back.data.data(), m.data.data(), m.data.size() * 4) == 0);
    }
}

TEST_CASE("512x64 matrix round trips bitwise") {
    const UnembeddingMatrix m = oracle::random_matrix(512, 64, 99);
    const fs::path path = tmp_dir() / "big.ufpm";
    save_matrix(m, path);
    CHECK(load_matrix(path) == m);
}

TEST_CASE("declared shape must match payload") {
    // header says 3x4 but only 10 floats follow
    std::string bytes = "UFPM";
    bytes.push_back(0x01);
    const std::string header = R"({"rows":3,"cols":4})";
    for (int i = 0; i < 4; ++i)
        bytes.push_back(static_cast<char>((header.size() >> (8 * i)) & 0xFF));
    bytes += header;
    bytes.append(10 * 4, '\0');
    const fs::path path = tmp_dir() / "short.ufpm";
    write_bytes(path, bytes);
    CHECK_THROWS_AS(load_matrix(path), SizeMismatch);
}

TEST_CASE("trailing bytes are rejected") {
    UnembeddingMatrix m;
    m.rows = 2;
    m.cols = 2;
    m.data = {1.0f, 2.0f, 3.0f, 4.0f};
    const fs::path path = tmp_dir() / "trailing.ufpm";
    save_matrix(m, path);
    write_bytes(path, read_bytes(path) + "xx");
    CHECK_THROWS_AS(load_matrix(path), SizeMismatch);
}

TEST_CASE("bad magic and version rejected") {
    const fs::path path = tmp_dir() / "magic.ufpm";
    write_bytes(path, "NOPE\x01\x00\x00\x00\x00");
    CHECK_THROWS_AS(load_matrix(path), MalformedHeader);

    std::string bytes = "UFPM";
    bytes.push_back(0x02);
    bytes.append(4, '\0');
    write_bytes(path, bytes);
    CHECK_THROWS_AS(load_matrix(path), MalformedHeader);
}

TEST_CASE("non-finite payload rejected both ways") {
    UnembeddingMatrix m;
    m.rows = 1;
    m.cols = 2;
    m.data = {1.0f, std::numeric_limits<float>::quiet_NaN()};
    CHECK_THROWS_AS(save_matrix(m, tmp_dir() / "nan.ufpm"), NonFiniteValue);

    // craft a file with an Inf in the payload
    std::string bytes = "UFPM";
    bytes.push_back(0x01);
    const std::string header = R"({"rows":1,"cols":1})";
    for (int i = 0; i < 4; ++i)
        bytes.push_back(static_cast<char>((header.size() >> (8 * i)) & 0xFF));
    bytes += header;
    const float inf = std::numeric_limits<float>::infinity();
    std::uint32_t bits;
    std::memcpy(&bits, &inf, 4);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    const fs::path path = tmp_dir() / "inf.ufpm";
    write_bytes(path, bytes);
    CHECK_THROWS_AS(load_matrix(path), NonFiniteValue);
}

TEST_CASE("saving to an unwritable path fails") {
    UnembeddingMatrix m;
    m.rows = 1;
    m.cols = 1;
    m.data = {1.0f};
    CHECK_THROWS_AS(save_matrix(m, tmp_dir()), IoFailure);  // target is a directory
}

TEST_CASE("corpus lines parse to token sequences") {
    const fs::path path = tmp_dir() / "corpus.txt";
    write_bytes(path, "# comment\n3 1 4\n\n1 5\n");
    const auto corpus = load_corpus(path, 10);
    REQUIRE(corpus.size() == 2);
    CHECK(corpus[0] == TokenSeq{3, 1, 4});
    CHECK(corpus[1] == TokenSeq{1, 5});
}

TEST_CASE("corpus id at or above vocab size is rejected") {
    const fs::path path = tmp_dir() / "corpus_oob.txt";
    write_bytes(path, "3 99\n");
    CHECK_THROWS_AS(load_corpus(path, 10), TokenOutOfRange);
}

TEST_CASE("corpus non-integer field is rejected") {
    const fs::path path = tmp_dir() / "corpus_bad.txt";
    write_bytes(path, "3 x 4\n");
    CHECK_THROWS_AS(load_corpus(path, 10), ParseError);
    write_bytes(path, "3 -2\n");
    CHECK_THROWS_AS(load_corpus(path, 10), ParseError);
}

TEST_CASE("generated corpus survives save/load with lengths preserved") {
    Rng rng(11);
    std::vector<TokenSeq> corpus;
    for (int i = 0; i < 1000; ++i) {
        TokenSeq seq;
        const auto len = rng.range(1, 40);
        for (std::int64_t j = 0; j < len; ++j)
            seq.push_back(static_cast<TokenId>(rng.below(300)));
        corpus.push_back(seq);
    }
    const fs::path path = tmp_dir() / "gen.txt";
    save_corpus(corpus, path);
    const auto back = load_corpus(path, 300);
    REQUIRE(back.size() == corpus.size());
    CHECK(back == corpus);
}

TEST_CASE("missing file raises IoFailure") {
    CHECK_THROWS_AS(load_matrix(tmp_dir() / "absent.ufpm"), IoFailure);
    CHECK_THROWS_AS(load_corpus(tmp_dir() / "absent.txt", 10), IoFailure);
}
