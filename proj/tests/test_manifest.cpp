#include <doctest.h>

#include <set>
#include <sstream>

#include "flowforge/manifest.hpp"
#include "support.hpp"

using namespace flowforge;

TEST_SUITE("manifest") {

TEST_CASE("empty file yields empty sequence") {
    std::istringstream in("");
    CHECK(parse_manifest(in, "mem").empty());
}

TEST_CASE("one valid edit record with two refs") {
    std::istringstream in(
        R"({"id":"a","task":"edit","refs":[[512,512],[640,480]],"target":[512,512],"instruction":"merge"})"
        "\n");
    const auto records = parse_manifest(in, "mem");
    REQUIRE(records.size() == 1);
    CHECK(records[0].refs.size() == 2);
    CHECK(records[0].task == TaskType::edit);
    CHECK(records[0].refs[1].width == 480);
}

TEST_CASE("edit record without references is rejected") {
    std::istringstream in(R"({"id":"a","task":"edit","refs":[],"target":[512,512],"instruction":"x"})" "\n");
    CHECK_THROWS_WITH_AS(parse_manifest(in, "mem"),
                         doctest::Contains("edit record without references"), DataError);
}

TEST_CASE("t2i record with references is rejected") {
    std::istringstream in(R"({"id":"a","task":"t2i","refs":[[64,64]],"target":[512,512],"instruction":"x"})" "\n");
    CHECK_THROWS_AS(parse_manifest(in, "mem"), DataError);
}

TEST_CASE("malformed line reports its line number") {
    std::istringstream in(
        R"({"id":"a","task":"t2i","refs":[],"target":[512,512],"instruction":"x"})" "\n"
        "{not json\n");
    CHECK_THROWS_WITH_AS(parse_manifest(in, "mem"), doctest::Contains("mem:2"), DataError);
}

TEST_CASE("duplicate ids are rejected") {
    const std::string rec = R"({"id":"a","task":"t2i","refs":[],"target":[512,512],"instruction":"x"})";
    std::istringstream in(rec + "\n" + rec + "\n");
    CHECK_THROWS_WITH_AS(parse_manifest(in, "mem"), doctest::Contains("duplicate id"), DataError);
}

TEST_CASE("unknown keys and schema violations are rejected") {
    std::istringstream a(R"({"id":"a","task":"t2i","refs":[],"target":[512,512],"instruction":"x","bogus":1})" "\n");
    CHECK_THROWS_WITH_AS(parse_manifest(a, "mem"), doctest::Contains("unknown key"), DataError);
    std::istringstream b(R"({"id":"a","task":"t2i","refs":[],"target":[0,512],"instruction":"x"})" "\n");
    CHECK_THROWS_AS(parse_manifest(b, "mem"), DataError);
    std::istringstream c(R"({"id":"a","task":"paint","refs":[],"target":[512,512],"instruction":"x"})" "\n");
    CHECK_THROWS_AS(parse_manifest(c, "mem"), DataError);
}

TEST_CASE("glyph invariants") {
    std::istringstream bad_scale(
        R"({"id":"a","task":"t2i","refs":[],"target":[64,64],"instruction":"x","glyphs":[{"char":"S","cx":0.5,"cy":0.5,"scale":0}]})"
        "\n");
    CHECK_THROWS_AS(parse_manifest(bad_scale, "mem"), DataError);
    std::istringstream multi_char(
        R"({"id":"a","task":"t2i","refs":[],"target":[64,64],"instruction":"x","glyphs":[{"char":"AB","cx":0.5,"cy":0.5,"scale":0.1}]})"
        "\n");
    CHECK_THROWS_AS(parse_manifest(multi_char, "mem"), DataError);
    // One multi-byte character is a single scalar and is fine.
    std::istringstream cjk(
        R"({"id":"a","task":"t2i","refs":[],"target":[64,64],"instruction":"x","glyphs":[{"char":"中","cx":0.5,"cy":0.5,"scale":0.1}]})"
        "\n");
    CHECK(parse_manifest(cjk, "mem").size() == 1);
}

TEST_CASE("load_manifest is deterministic on identical bytes") {
    testsupport::TempDir dir("manifest_det");
    const std::string body =
        R"({"id":"a","task":"edit","refs":[[512,512]],"target":[512,512],"instruction":"Fix Fig 1"})" "\n"
        R"({"id":"b","task":"t2i","refs":[],"target":[384,640],"instruction":"A cat"})" "\n";
    testsupport::write_file(dir.file("m.jsonl"), body);
    const auto r1 = load_manifest(dir.file("m.jsonl"));
    const auto r2 = load_manifest(dir.file("m.jsonl"));
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) {
        CHECK(r1[i].id == r2[i].id);
        CHECK(r1[i].instruction == r2[i].instruction);
    }
}

TEST_CASE("rope coordinates: degenerate grid") {
    const auto coords = assign_rope_coordinates({}, GridDims{1, 1});
    REQUIRE(coords.size() == 1);
    REQUIRE(coords[0].size() == 1);
    CHECK(coords[0][0] == TokenCoordinate{0, 0, 0});
}

TEST_CASE("rope coordinates: ref and target share spatial indices, differ in tau") {
    const auto coords = assign_rope_coordinates({GridDims{2, 2}}, GridDims{2, 2});
    REQUIRE(coords.size() == 2);
    const std::vector<TokenCoordinate> ref_want = {{1, 0, 0}, {1, 0, 1}, {1, 1, 0}, {1, 1, 1}};
    const std::vector<TokenCoordinate> tgt_want = {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}};
    CHECK(coords[0] == ref_want);
    CHECK(coords[1] == tgt_want);
}

TEST_CASE("rope coordinates: taus count references from 1") {
    const auto coords = assign_rope_coordinates({GridDims{1, 2}, GridDims{1, 2}}, GridDims{1, 2});
    REQUIRE(coords.size() == 3);
    for (const auto& c : coords[0]) CHECK(c.tau == 1);
    for (const auto& c : coords[1]) CHECK(c.tau == 2);
    for (const auto& c : coords[2]) CHECK(c.tau == 0);
}

TEST_CASE("rope coordinates: counts and uniqueness over random shapes") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<GridDims> refs;
        const int n = static_cast<int>(rng.next_below(4));
        size_t expected = 0;
        for (int i = 0; i < n; ++i) {
            GridDims g{1 + static_cast<int>(rng.next_below(5)), 1 + static_cast<int>(rng.next_below(5))};
            expected += static_cast<size_t>(g.rows) * static_cast<size_t>(g.cols);
            refs.push_back(g);
        }
        GridDims target{1 + static_cast<int>(rng.next_below(5)), 1 + static_cast<int>(rng.next_below(5))};
        expected += static_cast<size_t>(target.rows) * static_cast<size_t>(target.cols);

        const auto coords = assign_rope_coordinates(refs, target);
        std::set<std::tuple<int, int, int>> seen;
        size_t total = 0;
        for (const auto& image : coords)
            for (const auto& c : image) {
                ++total;
                CHECK(seen.insert({c.tau, c.row, c.col}).second);
            }
        CHECK(total == expected);
    }
}

}  // TEST_SUITE
