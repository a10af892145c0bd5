#include <gtest/gtest.h>

#include <filesystem>

#include "ilu/checkpoint.hpp"
#include "test_support.hpp"

namespace ilu {
namespace {

TEST(Checkpoint, RoundTripsAtStoredPrecision) {
  for (auto c : {testing::small_lm(), testing::small_mlp()}) {
    auto p = init_model(c, RngStream(1, 0));
    auto back = decode_checkpoint(encode_checkpoint(p));
    EXPECT_EQ(back.config(), c);
    EXPECT_EQ(back, to_stored_precision(p));
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(p));
  }
}

TEST(Checkpoint, SavesAndLoadsFromDisk) {
  auto dir = std::filesystem::temp_directory_path() / "ilu_ckpt_test" / "nested";
  std::filesystem::remove_all(dir.parent_path());
  auto p = init_model(testing::small_lm(), RngStream(2, 0));
  save_checkpoint(p, dir / "model.ckpt");
  EXPECT_EQ(load_checkpoint(dir / "model.ckpt"), to_stored_precision(p));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir.parent_path());
}

TEST(Checkpoint, BadMagicNamesExpectedValue) {
  auto bytes = encode_checkpoint(init_model(testing::small_mlp(), RngStream(3, 0)));
  bytes[0] = 'X';
  try {
    decode_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("ILUCKPT1"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Checkpoint, AnyFlippedByteIsDetected) {
  auto bytes = encode_checkpoint(init_model(testing::small_mlp(), RngStream(4, 0)));
  for (std::size_t i = 8; i < bytes.size(); i += 7) {
    auto copy = bytes;
    copy[i] = static_cast<char>(copy[i] ^ 0x5A);
    EXPECT_THROW(decode_checkpoint(copy), FormatError) << "byte " << i;
  }
}

TEST(Checkpoint, TruncationIsAFormatError) {
  auto bytes = encode_checkpoint(init_model(testing::small_mlp(), RngStream(5, 0)));
  for (std::size_t n : {std::size_t{0}, std::size_t{5}, std::size_t{12}, bytes.size() / 2,
                        bytes.size() - 1}) {
    std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(decode_checkpoint(cut), FormatError) << n;
  }
}

}  // namespace
}  // namespace ilu
