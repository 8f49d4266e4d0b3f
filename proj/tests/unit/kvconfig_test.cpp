#include <gtest/gtest.h>

#include "vdet/error.hpp"
#include "vdet/kvconfig.hpp"

using vdet::KeyValueConfig;

TEST(KeyValueConfig, ParsesValuesAndComments) {
  const auto kv = KeyValueConfig::parse("# comment\nlr = 0.5\n\nname=abc  # trailing\nflag = true\nlist = a, b ,c\n",
                                        {"lr", "name", "flag", "list", "unused"});
  EXPECT_DOUBLE_EQ(kv.get_double("lr", 0), 0.5);
  EXPECT_EQ(kv.get_string("name", ""), "abc");
  EXPECT_TRUE(kv.get_bool("flag", false));
  EXPECT_EQ(kv.get_list("list"), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(kv.get_int("unused", 7), 7);
}

TEST(KeyValueConfig, RejectsUnknownDuplicateAndMalformed) {
  EXPECT_THROW(KeyValueConfig::parse("bogus = 1\n", {"lr"}), vdet::ParseError);
  EXPECT_THROW(KeyValueConfig::parse("lr = 1\nlr = 2\n", {"lr"}), vdet::ParseError);
  EXPECT_THROW(KeyValueConfig::parse("lr\n", {"lr"}), vdet::ParseError);
  try {
    KeyValueConfig::parse("lr = 1\n\nbogus = 2\n", {"lr"});
    FAIL();
  } catch (const vdet::ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(KeyValueConfig, TypedGettersValidate) {
  const auto kv = KeyValueConfig::parse("a = 1.5x\nb = maybe\nc = -3\n", {"a", "b", "c"});
  EXPECT_THROW(kv.get_double("a", 0), vdet::ConfigError);
  EXPECT_THROW(kv.get_bool("b", false), vdet::ConfigError);
  EXPECT_THROW(kv.get_u64("c", 0), vdet::ConfigError);
  EXPECT_EQ(kv.get_int("c", 0), -3);
  EXPECT_THROW(kv.get("missing"), vdet::ConfigError);
}
