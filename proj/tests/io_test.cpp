#include <limits>

#include <gtest/gtest.h>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"
#include "fourstep/rng.hpp"
#include "fourstep/zones.hpp"
#include "test_util.hpp"

using namespace fourstep;
using namespace fourstep::io;

TEST(Csv, QuotingBomAndCrlf) {
  const auto t = parse_csv("\xEF\xBB\xBFid,name,note\r\n1,\"Smith, J\",\"said \"\"hi\"\"\"\r\n2,plain,\r\n", "q.csv");
  EXPECT_EQ(t.header(), (std::vector<std::string>{"id", "name", "note"}));
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.cell(0, "name"), "Smith, J");
  EXPECT_EQ(t.cell(0, "note"), "said \"hi\"");
  EXPECT_EQ(t.cell(1, "note"), "");
  EXPECT_EQ(t.integer(1, "id"), 2);
}

TEST(Csv, LineNumbersSurviveBlankLinesAndEmbeddedNewlines) {
  const auto t = parse_csv("a,b\n\"x\ny\",1\n\n3,zz\n", "l.csv");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.cell(0, "a"), "x\ny");
  EXPECT_EQ(t.line_of(0), 2u);
  EXPECT_EQ(t.line_of(1), 5u);
  try {
    t.number(1, "b");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(std::string(e.what()), "l.csv, row 5: column 'b' is not a number: 'zz'");
  }
}

TEST(Csv, ErrorsAndShortRows) {
  EXPECT_THROW(parse_csv("", "e.csv"), ParseError);
  EXPECT_THROW(parse_csv("a\n\"open\n", "e.csv"), ParseError);
  const auto t = parse_csv("a,b,c\n1\n");
  EXPECT_EQ(t.cell(0, "c"), "");
  EXPECT_FALSE(t.optional_number(0, 2));
  EXPECT_THROW(t.column("d"), ParseError);
  EXPECT_FALSE(t.find_column("d"));
  EXPECT_THROW(t.integer(0, "b"), ParseError);
}

TEST(Csv, WriterRoundTrip) {
  CsvWriter w({"k", "v"});
  w.row({"a,b", "line\nbreak"}).row({"q\"uote", "x"});
  const auto t = parse_csv(w.str());
  EXPECT_EQ(t.cell(0, "k"), "a,b");
  EXPECT_EQ(t.cell(0, "v"), "line\nbreak");
  EXPECT_EQ(t.cell(1, "k"), "q\"uote");
}

TEST(Numbers, ShortestRoundTripFormatting) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(-0.0), "0");
  EXPECT_EQ(format_double(3.0), "3");
  EXPECT_EQ(format_double(1e-20), "1e-20");
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double v = (rng.uniform() - 0.5) * std::pow(10.0, double(rng.below(30)) - 15.0);
    EXPECT_EQ(*try_parse_double(format_double(v)), v);
  }
  EXPECT_EQ(try_parse_double(" +2.5 "), 2.5);
  EXPECT_FALSE(try_parse_double("2.5x"));
  EXPECT_FALSE(try_parse_double(""));
  EXPECT_EQ(try_parse_int("42"), 42);
  EXPECT_FALSE(try_parse_int("4.2"));
  EXPECT_EQ(split("a, b ,c", ','), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(hex64(fnv1a64("")), "cbf29ce484222325");
}

TEST(Rng, DeterministicStreams) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform(), b.uniform());
  EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
  EXPECT_EQ(derive_seed(9, 3), derive_seed(9, 3));
  Rng r(1);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.below(7), 7u);
  const std::vector<double> cum = {0, 1, 1, 3};
  Rng w(11);
  for (int i = 0; i < 1000; ++i) {
    const auto k = draw_weighted(w, cum);
    EXPECT_TRUE(k == 1 || k == 3);  // zero weights never drawn
  }
}

TEST(Errors, StepErrorNamesTheStep) {
  const StepError e("distribution", "no reachable destination");
  EXPECT_EQ(std::string(e.what()), "distribution: no reachable destination");
  EXPECT_EQ(e.step(), "distribution");
}

TEST(Zones, RegistryAndValueFiles) {
  testutil::TempDir dir;
  testutil::write(dir / "zones.csv", "zone_id,lat,lon,name\nZ2,47.6,-122.3,Two\nZ1,47.7,-122.4,One\n");
  const auto reg = load_zones(dir / "zones.csv");
  EXPECT_EQ(reg.ids(), (std::vector<std::string>{"Z2", "Z1"}));
  EXPECT_EQ(reg.index_of("Z1"), 1u);
  EXPECT_THROW(reg.index_of("Z9"), NotFound);
  EXPECT_EQ(reg[0].name, "Two");

  testutil::write(dir / "jobs.csv", "zone_id,jobs\nZ1,5\nZ1,2\n");
  EXPECT_EQ(load_zone_values(dir / "jobs.csv", reg.ids(), "jobs"), (std::vector<double>{0, 7}));
  testutil::write(dir / "bad.csv", "zone_id,jobs\nZ1,5\nZ7,2\n");
  EXPECT_THROW(load_zone_values(dir / "bad.csv", reg.ids(), "jobs"), ParseError);
  testutil::write(dir / "neg.csv", "zone_id,jobs\nZ1,-5\n");
  EXPECT_THROW(load_zone_values(dir / "neg.csv", reg.ids(), "jobs"), ParseError);

  EXPECT_THROW(ZoneRegistry({{"A", "", 0, 0}, {"A", "", 1, 1}}), InvalidArgument);
  EXPECT_THROW(ZoneRegistry({{"A", "", 91, 0}}), InvalidArgument);
  EXPECT_THROW(ZoneRegistry(std::vector<Zone>{}), InvalidArgument);
  EXPECT_EQ(parse_csv(zones_to_csv(reg)).cell(1, "name"), "One");
}
