#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <fstream>
#include <sstream>

#include "instruct_fixtures.hpp"
#include "loctok/instruct.hpp"
#include "loctok/testing/oracles.hpp"

using namespace loctok;
namespace lt = loctok::testing;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<RegionAnnotation> grid_regions(std::size_t n) {
  std::vector<RegionAnnotation> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) * 20.0;
    out.push_back({{x, 0, x + 10, 10}, "thing " + std::to_string(i)});
  }
  return out;
}

// Replies in request order but after a delay that reverses completion order.
class SlowEchoClient : public VlmClient {
 public:
  std::string complete(const VlmRequest& req) override {
    std::this_thread::sleep_for(std::chrono::milliseconds(20 - 2 * (req.marked_image.image_id % 10)));
    ++calls;
    return std::to_string(req.marked_image.image_id);
  }
  std::atomic<int> calls{0};
};

class FailingClient : public VlmClient {
 public:
  std::string complete(const VlmRequest&) override { throw std::runtime_error("endpoint down"); }
};

}  // namespace

TEST(FilterOverlaps, TruncatesToTen) {
  const auto r = filter_overlaps(grid_regions(15));
  EXPECT_EQ(r.regions.size(), 10u);
  EXPECT_TRUE(r.truncated);
  EXPECT_FALSE(r.sparse);
  EXPECT_EQ(r.regions.back().description, "thing 9");
}

TEST(FilterOverlaps, IdenticalBoxesKeepFirst) {
  const std::vector<RegionAnnotation> regions = {{{0, 0, 10, 10}, "first"}, {{0, 0, 10, 10}, "second"}};
  const auto r = filter_overlaps(regions);
  ASSERT_EQ(r.regions.size(), 1u);
  EXPECT_EQ(r.regions[0].description, "first");
  EXPECT_EQ(r.dropped_overlap, 1u);
  EXPECT_TRUE(r.sparse);
}

TEST(FilterOverlaps, ModerateOverlapKept) {
  // IoU = 40 / 100.
  const std::vector<RegionAnnotation> regions = {{{0, 0, 10, 10}, "a"}, {{0, 0, 10, 4}, "b"}};
  ASSERT_EQ(iou(regions[0].box, regions[1].box), 0.4);
  EXPECT_EQ(filter_overlaps(regions).regions.size(), 2u);
}

TEST(FilterOverlaps, Properties) {
  const auto images = synthetic_vg_images(100, 3);
  for (const auto& img : images) {
    for (double thr : {0.3, 0.5, 0.7}) {
      FilterConfig cfg;
      cfg.iou_threshold = thr;
      const auto r = filter_overlaps(img.regions, cfg);
      EXPECT_LE(r.regions.size(), 10u);
      EXPECT_GE(r.regions.size(), 1u);
      for (std::size_t i = 0; i < r.regions.size(); ++i) {
        for (std::size_t j = i + 1; j < r.regions.size(); ++j) EXPECT_LE(iou(r.regions[i].box, r.regions[j].box), thr);
      }
    }
  }
}

TEST(FilterOverlaps, Errors) {
  FilterConfig cfg;
  cfg.iou_threshold = 1.0;
  EXPECT_THROW(filter_overlaps(grid_regions(2), cfg), Error);
  const std::vector<RegionAnnotation> blank = {{{0, 0, 1, 1}, ""}};
  EXPECT_THROW(filter_overlaps(blank), Error);
}

TEST(Markers, CenterAndLabels) {
  const std::vector<RegionAnnotation> one = {{{0, 0, 10, 20}, "x"}};
  const auto m = place_markers(1, one);
  EXPECT_EQ(m.markers[0].center_x, 5.0);
  EXPECT_EQ(m.markers[0].center_y, 10.0);
  const auto four = place_markers(2, grid_regions(4));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(four.markers[i].label, i + 1);
  EXPECT_FALSE(four.ambiguous);
}

TEST(Markers, CoincidentCentersAreAmbiguous) {
  const std::vector<RegionAnnotation> regions = {{{0, 0, 10, 10}, "a"}, {{2, 2, 8, 8}, "b"}};
  const auto m = place_markers(1, regions);
  EXPECT_EQ(m.markers.size(), 2u);
  EXPECT_TRUE(m.ambiguous);
}

TEST(Markers, Bounds) {
  EXPECT_THROW(place_markers(1, {}), Error);
  EXPECT_THROW(place_markers(1, grid_regions(11)), Error);
}

TEST(Markers, RasterizedDiscsAtCenters) {
  const auto spec = place_markers(1, grid_regions(3));
  RgbImage img(80, 40);
  draw_markers(img, spec);
  const auto ppm = encode_ppm(img);
  EXPECT_TRUE(ppm.starts_with("P6\n80 40\n255\n"));
  EXPECT_EQ(ppm.size(), std::string("P6\n80 40\n255\n").size() + 80 * 40 * 3);
  auto pixel = [&](std::size_t x, std::size_t y) {
    const auto* p = &img.pixels[(y * img.width + x) * 3];
    return std::array<std::uint8_t, 3>{p[0], p[1], p[2]};
  };
  EXPECT_EQ(pixel(79, 39), (std::array<std::uint8_t, 3>{0, 0, 0}));
  for (const auto& m : spec.markers) {
    // Below the numeral but inside the disc.
    EXPECT_EQ(pixel(static_cast<std::size_t>(m.center_x), static_cast<std::size_t>(m.center_y) + 8), MarkerStyle{}.fill);
  }
}

TEST(Request, MatchesGoldenFile) {
  const auto text = render_request(three_label_request());
  EXPECT_EQ(text, slurp(std::string(LOCTOK_GOLDEN_DIR) + "/request_3labels.txt"));
  EXPECT_NE(text.find("### REGIONS\n1: a brown dog\n2: a red frisbee\n3: a man lying on the grass\n"), std::string::npos);
}

TEST(Request, DeterministicAndNoExampleSectionWhenEmpty) {
  EXPECT_EQ(render_request(three_label_request()), render_request(three_label_request()));
  auto req = three_label_request();
  req = assemble_request(req.marked_image, req.context, {}, 7);
  EXPECT_EQ(render_request(req).find("### EXAMPLE"), std::string::npos);
}

TEST(Request, UncoveredMarker) {
  auto req = three_label_request();
  req.context.region_descriptions.erase(2);
  try {
    assemble_request(req.marked_image, req.context, {}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::uncovered_marker);
  }
}

TEST(Request, FewShotOrderIsSeeded) {
  const auto base = three_label_request();
  std::vector<FewShotExample> shots;
  for (int i = 0; i < 5; ++i) shots.push_back({{{"user", "q" + std::to_string(i)}, {"assistant", "a"}}});
  std::set<std::string> orders;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = render_request(assemble_request(base.marked_image, base.context, shots, s));
    EXPECT_EQ(a, render_request(assemble_request(base.marked_image, base.context, shots, s)));
    orders.insert(a);
  }
  EXPECT_GT(orders.size(), 1u);
}

TEST(Postfilter, Examples) {
  const auto ok = postfilter_one(1, "USER: Where is the dog?\nASSISTANT: <p>the dog</p> <roi><r2></roi> is on the left.", 3);
  EXPECT_TRUE(ok.valid) << ok.error;
  EXPECT_EQ(ok.referenced_labels, (std::set<std::size_t>{2}));

  const auto bad_ref = postfilter_one(1, "USER: hi\nASSISTANT: <p>x</p> <roi><r7></roi>", 3);
  EXPECT_FALSE(bad_ref.valid);
  EXPECT_TRUE(bad_ref.error.starts_with("unknown referent")) << bad_ref.error;

  const auto ungrounded = postfilter_one(1, "USER: hi\nASSISTANT: hello there", 3);
  EXPECT_FALSE(ungrounded.valid);
  EXPECT_EQ(ungrounded.error, "no grounding");
  EXPECT_EQ(ungrounded.turns.size(), 2u);
}

TEST(Postfilter, FormatViolations) {
  EXPECT_FALSE(postfilter_one(1, "", 3).valid);
  EXPECT_FALSE(postfilter_one(1, "preamble\nUSER: a\nASSISTANT: <p>x</p> <roi><r1></roi>", 3).valid);
  EXPECT_FALSE(postfilter_one(1, "ASSISTANT: <p>x</p> <roi><r1></roi>", 3).valid);
  EXPECT_FALSE(postfilter_one(1, "USER: a\nUSER: b\nASSISTANT: <p>x</p> <roi><r1></roi>", 3).valid);
  EXPECT_FALSE(postfilter_one(1, "USER: a\nASSISTANT: <p>x</p>", 3).valid);
  // Continuation lines and loose whitespace are fine.
  const auto multi = postfilter_one(1, "USER: a\r\nASSISTANT: <p>x</p><roi> <r1> </roi>\nmore text\n", 3);
  ASSERT_TRUE(multi.valid) << multi.error;
  EXPECT_EQ(multi.turns[1].text, "<p>x</p> <roi><r1></roi>\nmore text");
}

TEST(Postfilter, AcceptedRecordsAreFixedPoints) {
  Rng rng(81);
  for (int i = 0; i < 300; ++i) {
    const std::size_t m = static_cast<std::size_t>(rng.between(1, 10));
    GroundedResponse reply = lt::random_response(rng, m);
    reply.add_span({"anchor", {1}});
    std::string raw = "USER: question " + std::to_string(i) + "\nASSISTANT: " + serialize(reply) + "\n";
    const auto rec = postfilter_one(1, raw, m);
    ASSERT_TRUE(rec.valid) << rec.error << "\n" << raw;
    for (auto l : rec.referenced_labels) EXPECT_LE(l, m);
    std::string again;
    for (const auto& t : rec.turns) again += (t.role == "user" ? "USER: " : "ASSISTANT: ") + t.text + "\n";
    EXPECT_EQ(postfilter_one(1, again, m), rec);
  }
}

TEST(Postfilter, BatchLengthsMustAgree) {
  const std::vector<RawResponse> raw = {{1, "x"}};
  EXPECT_THROW(postfilter(raw, {}), Error);
}

TEST(MockClient, DeterministicAndPassesPostfilter) {
  MockVlmClient mock;
  const auto req = three_label_request();
  const auto a = mock.complete(req);
  EXPECT_EQ(a, mock.complete(req));
  const auto rec = postfilter_one(42, a, 3);
  EXPECT_TRUE(rec.valid) << rec.error;
  EXPECT_EQ(rec.referenced_labels, (std::set<std::size_t>{1, 2, 3}));
}

TEST(CompleteAll, KeepsInputOrder) {
  std::vector<VlmRequest> reqs;
  for (int i = 0; i < 10; ++i) {
    VlmRequest r;
    r.marked_image.image_id = i;
    reqs.push_back(r);
  }
  SlowEchoClient client;
  const auto out = complete_all(client, reqs, 4);
  ASSERT_EQ(out.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(out[static_cast<std::size_t>(i)].text, std::to_string(i));
  EXPECT_EQ(client.calls.load(), 10);

  FailingClient failing;
  const auto errs = complete_all(failing, reqs, 3);
  for (const auto& e : errs) EXPECT_EQ(e.error.value_or(""), "endpoint down");
}

TEST(Relabel, MapsLabelsToProxies) {
  const auto spec = place_markers(5, grid_regions(3));
  ProxyRegistry reg(5);
  // Registry holds the marked boxes in reverse order after an unrelated box.
  reg.add({{0.0}, {500, 500, 600, 600}, 0, RegionOrigin::proposed, 0.9, false});
  for (int i = 2; i >= 0; --i) reg.add({{0.0}, spec.markers[static_cast<std::size_t>(i)].box, 0, RegionOrigin::user, 1.0, false});
  const auto map = label_proxy_map(spec, reg);
  EXPECT_EQ(map, (std::map<std::size_t, std::size_t>{{1, 4}, {2, 3}, {3, 2}}));

  const auto rec = postfilter_one(5, "USER: a\nASSISTANT: <p>x</p> <roi><r1><r3></roi> near <p>y</p> <roi><r2></roi>", 3);
  const auto out = relabel_to_proxies(rec, map, "registry.json", reg.size());
  EXPECT_EQ(out.turns[1].text, "<p>x</p> <roi><r4><r2></roi> near <p>y</p> <roi><r3></roi>");
  EXPECT_EQ(out.registry_ref.value_or(""), "registry.json");
  EXPECT_EQ(out.referenced_labels, (std::set<std::size_t>{2, 3, 4}));
  EXPECT_THROW(relabel_to_proxies(postfilter_one(5, "USER: a", 3), map, "r", 4), Error);
}

TEST(Records, JsonRoundTrip) {
  const auto rec = postfilter_one(9, "USER: a\nASSISTANT: <p>x</p> <roi><r1></roi>", 2);
  const auto j = record_to_json(rec, 0.5);
  EXPECT_EQ(j["iou_threshold"], 0.5);
  EXPECT_EQ(record_from_json(nlohmann::json::parse(j.dump())), rec);
  const auto bad = postfilter_one(9, "USER: a", 2);
  EXPECT_EQ(record_to_json(bad, 0.5)["error"], bad.error);
  EXPECT_THROW(record_from_json(nlohmann::json::parse("{\"turns\":[]}")), Error);
}

TEST(Inputs, ParseVgCaptionsQa) {
  const auto vg = parse_vg_regions(nlohmann::json::parse(R"([
    {"id": 7, "coco_id": 70, "regions": [{"x": 1, "y": 2, "width": 10, "height": 20, "phrase": "a cat"},
                                         {"x": 0, "y": 0, "width": 5, "height": 5, "phrase": ""}]}])"));
  ASSERT_EQ(vg.size(), 1u);
  EXPECT_EQ(vg[0].coco_id.value_or(0), 70);
  ASSERT_EQ(vg[0].regions.size(), 1u);
  EXPECT_EQ(vg[0].regions[0].box, (BoundingBox{1, 2, 11, 22}));
  EXPECT_THROW(parse_vg_regions(nlohmann::json::parse(R"([{"id": 1, "regions": [{"x": 1}]}])")), Error);

  const auto caps = parse_coco_captions(nlohmann::json::parse(R"({"annotations": [{"image_id": 70, "caption": "c"}]})"));
  const auto qa = parse_vg_qa(nlohmann::json::parse(R"([{"id": 7, "qas": [{"question": "q?", "answer": "a."}]}])"));
  const auto filtered = filter_overlaps(vg[0].regions);
  const auto ctx = build_context(vg[0], filtered, {caps, qa});
  EXPECT_EQ(ctx.image_descriptions, (std::vector<std::string>{"c"}));
  ASSERT_EQ(ctx.qa_pairs.size(), 1u);
  EXPECT_EQ(ctx.region_descriptions.at(1), "a cat");
}

TEST(RunInstruct, EndToEndWithMock) {
  const auto images = synthetic_vg_images(50, 4);
  MockVlmClient mock;
  InstructConfig cfg;
  cfg.seed = 4;
  const auto a = run_instruct(images, {}, mock, cfg);
  cfg.max_in_flight = 8;
  const auto b = run_instruct(images, {}, mock, cfg);
  ASSERT_EQ(a.size(), 50u);
  std::size_t generated = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].record.has_value(), b[i].record.has_value());
    if (!a[i].record) {
      EXPECT_EQ(a[i].skip_reason, "sparse image");
      continue;
    }
    ++generated;
    EXPECT_TRUE(a[i].record->valid) << a[i].record->error;
    EXPECT_EQ(*a[i].record, *b[i].record);
  }
  EXPECT_GT(generated, 25u);
}

TEST(RunInstruct, SparseImagesOptIn) {
  const std::vector<VgImage> images = {{1, std::nullopt, grid_regions(2)}};
  MockVlmClient mock;
  InstructConfig cfg;
  EXPECT_FALSE(run_instruct(images, {}, mock, cfg)[0].record.has_value());
  cfg.include_sparse = true;
  EXPECT_TRUE(run_instruct(images, {}, mock, cfg)[0].record->valid);
}

TEST(RunInstruct, ClientErrorsBecomeRejectedRecords) {
  const auto images = synthetic_vg_images(3, 5);
  FailingClient failing;
  InstructConfig cfg;
  cfg.include_sparse = true;
  for (const auto& r : run_instruct(images, {}, failing, cfg)) {
    ASSERT_TRUE(r.record.has_value());
    EXPECT_FALSE(r.record->valid);
    EXPECT_EQ(r.record->error, "client error: endpoint down");
  }
}
