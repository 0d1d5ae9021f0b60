#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cdt/util.hpp"
#include "support.hpp"

using namespace cdt;

TEST_CASE("string helpers") {
  CHECK(util::trim("  a b \n") == "a b");
  CHECK(util::to_lower("OLED Pro") == "oled pro");
  CHECK(util::normalize_whitespace("  a\t\tb \n c ") == "a b c");
  CHECK(util::split("a,b,,c", ',') == std::vector<std::string>{"a", "b", "", "c"});
  CHECK(util::join({"x", "y", "z"}, "|") == "x|y|z");
}

TEST_CASE("format_utc") {
  CHECK(util::format_utc(0) == "1970-01-01T00:00:00Z");
  CHECK(util::format_utc(1700000000) == "2023-11-14T22:13:20Z");
}

TEST_CASE("sha256 of known inputs") {
  CHECK(util::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(util::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("csv escaping round-trips through the parser") {
  const std::vector<std::string> fields{"plain", "with,comma", "with \"quote\"", "multi\nline", ""};
  const auto rows = util::parse_csv(util::csv_row(fields) + util::csv_row({"a", "b"}));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == fields);
  CHECK(rows[1] == std::vector<std::string>{"a", "b"});
  CHECK(util::csv_escape("x") == "x");
  CHECK(util::csv_escape("a,b") == "\"a,b\"");
}

TEST_CASE("file writes are atomic and create parents") {
  testing::ScratchDir dir("util");
  const auto p = dir.path() / "a" / "b" / "f.txt";
  util::write_file(p, "hello");
  CHECK(util::read_file(p) == "hello");
  util::write_file(p, "again");
  CHECK(util::read_file(p) == "again");
  CHECK(util::sha256_file(p) == util::sha256_hex("again"));
  CHECK_THROWS(util::read_file(dir.path() / "missing"));
}

TEST_CASE("unit_double stays in [0, 1)") {
  CHECK(util::unit_double(0) == 0.0);
  CHECK(util::unit_double(~0ULL) < 1.0);
  CHECK(util::mix64(1) != util::mix64(2));
  CHECK(util::fnv1a64("") == 0xcbf29ce484222325ULL);
}
