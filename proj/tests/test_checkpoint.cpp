#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kp3d/checkpoint.hpp"

using namespace kp3d;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

Checkpoint make_sample() {
    Checkpoint ck;
    ck.put("weights", {2, 3}, {0.1f, -0.2f, 0.3f, 1e-30f, -1e30f, 0.0f});
    ck.put("bias", {3}, {1.0f, 2.0f, 3.0f});
    ck.put_bytes("blob", std::string("hello\0world", 11));
    return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    std::string p1 = tmp_path("ck_rt1.kp3d");
    std::string p2 = tmp_path("ck_rt2.kp3d");
    Checkpoint ck = make_sample();
    ck.save(p1);
    Checkpoint loaded = Checkpoint::load(p1);
    loaded.save(p2);
    EXPECT_EQ(read_file(p1), read_file(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Checkpoint, PreservesValuesAndOrder) {
    std::string p = tmp_path("ck_vals.kp3d");
    make_sample().save(p);
    Checkpoint ck = Checkpoint::load(p);
    ASSERT_EQ(ck.names().size(), 3u);
    EXPECT_EQ(ck.names()[0], "weights");
    EXPECT_EQ(ck.names()[1], "bias");
    const auto& rec = ck.get("weights");
    EXPECT_EQ(rec.shape, Shape({2, 3}));
    EXPECT_FLOAT_EQ(rec.data[1], -0.2f);
    EXPECT_FLOAT_EQ(rec.data[4], -1e30f);
    std::remove(p.c_str());
}

TEST(Checkpoint, ByteRecordsRoundTrip) {
    std::string p = tmp_path("ck_bytes.kp3d");
    Checkpoint ck;
    ck.put_bytes("empty", "");
    ck.put_bytes("odd", "abc");
    ck.put_bytes("nul", std::string("a\0b", 3));
    ck.save(p);
    Checkpoint loaded = Checkpoint::load(p);
    EXPECT_EQ(loaded.get_bytes("empty"), "");
    EXPECT_EQ(loaded.get_bytes("odd"), "abc");
    EXPECT_EQ(loaded.get_bytes("nul"), std::string("a\0b", 3));
    std::remove(p.c_str());
}

TEST(Checkpoint, MagicStartsFile) {
    std::string p = tmp_path("ck_magic.kp3d");
    make_sample().save(p);
    std::string bytes = read_file(p);
    ASSERT_GE(bytes.size(), 8u);
    EXPECT_EQ(bytes.substr(0, 4), "KP3D");
    std::remove(p.c_str());
}

TEST(Checkpoint, BadMagicThrows) {
    std::string p = tmp_path("ck_badmagic.kp3d");
    std::ofstream f(p, std::ios::binary);
    f << "NOPE" << std::string(16, '\0');
    f.close();
    EXPECT_THROW(Checkpoint::load(p), CheckpointError);
    std::remove(p.c_str());
}

TEST(Checkpoint, BadVersionThrows) {
    std::string p = tmp_path("ck_badver.kp3d");
    std::ofstream f(p, std::ios::binary);
    f << "KP3D";
    std::uint32_t ver = 999;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.close();
    EXPECT_THROW(Checkpoint::load(p), CheckpointError);
    std::remove(p.c_str());
}

TEST(Checkpoint, TruncatedFileThrows) {
    std::string p = tmp_path("ck_trunc.kp3d");
    make_sample().save(p);
    std::string bytes = read_file(p);
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
    f.close();
    EXPECT_THROW(Checkpoint::load(p), CheckpointError);
    std::remove(p.c_str());
}

TEST(Checkpoint, MissingFileThrows) {
    EXPECT_THROW(Checkpoint::load(tmp_path("ck_does_not_exist.kp3d")), CheckpointError);
}

TEST(Checkpoint, MissingRecordThrows) {
    Checkpoint ck = make_sample();
    EXPECT_THROW(ck.get("nope"), CheckpointError);
}

TEST(Checkpoint, DuplicateRecordThrows) {
    Checkpoint ck;
    ck.put("a", {1}, {1.0f});
    EXPECT_THROW(ck.put("a", {1}, {2.0f}), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchOnLoadIntoThrows) {
    Checkpoint ck = make_sample();
    Tensor<float> t = Tensor<float>::zeros({4});
    EXPECT_THROW(ck.load_into("bias", t), CheckpointError);
    Tensor<float> ok = Tensor<float>::zeros({3});
    ck.load_into("bias", ok);
    EXPECT_FLOAT_EQ(ok.data()[2], 3.0f);
}

TEST(Checkpoint, PayloadLengthMismatchThrows) {
    Checkpoint ck;
    EXPECT_THROW(ck.put("bad", {2, 2}, {1.0f, 2.0f}), ContractViolation);
}
