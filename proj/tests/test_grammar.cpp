#include <gtest/gtest.h>

#include <optional>
#include <set>

#include "grammar_fixtures.hpp"
#include "loctok/grammar.hpp"
#include "loctok/testing/oracles.hpp"

using namespace loctok;
namespace lt = loctok::testing;

namespace {

const std::string kDogFrisbee =
    "<p>A dog</p> <roi><r4></roi> is jumping to catch <p>a frisbee</p> <roi><r7></roi> over "
    "<p>a fallen man</p> <roi><r1></roi>.";

ProxyRegistry registry_of(std::size_t n) {
  ProxyRegistry reg(0);
  for (std::size_t i = 0; i < n; ++i) {
    RegionToken t;
    t.embedding = {static_cast<double>(i)};
    t.source_box = {0, 0, 1, 1};
    reg.add(t);
  }
  return reg;
}

std::optional<Errc> parse_error_code(const std::string& text, std::size_t limit, ParseMode mode = ParseMode::strict) {
  try {
    parse(text, limit, mode);
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace

TEST(RenderPrompt, GroundedTwoRegions) {
  EXPECT_EQ(render_prompt(2, "Please briefly describe the image content.", true),
            "Here is an image with region crops from it. Image: <image>. Regions: <r1><region>, <r2><region>. "
            "[grounding] Please briefly describe the image content.");
}

TEST(RenderPrompt, ReferringMention) {
  const auto p = render_prompt(registry_of(10), "What is <r10><region>?", false);
  EXPECT_TRUE(p.ends_with("<r9><region>, <r10><region>. What is <r10><region>?"));
  EXPECT_EQ(p.find("[grounding]"), std::string::npos);
}

TEST(RenderPrompt, EmptyRegistryOmitsClause) {
  EXPECT_EQ(render_prompt(0, "Describe the image.", false),
            "Here is an image with region crops from it. Image: <image>. Describe the image.");
}

TEST(RenderPrompt, UnknownReferent) {
  try {
    render_prompt(3, "What is <r4><region>?", false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unknown_referent);
    EXPECT_STREQ(e.what(), "unknown referent, 4, registry size 3");
  }
  EXPECT_THROW(render_prompt(3, "What is <region>?", false), Error);
  EXPECT_THROW(render_prompt(3, "Compare <image> with this.", false), Error);
}

TEST(RenderPrompt, ParsesBack) {
  Rng rng(61);
  const char* instructions[] = {"Describe the image.", "What is <r1><region>?", "Is <r2><region> left of <r1><region>?",
                                "[grounding] Tell me more.", ""};
  for (int i = 0; i < 200; ++i) {
    const auto n = static_cast<std::size_t>(rng.between(2, 12));
    const std::string instr = instructions[rng.below(std::size(instructions))];
    const bool grounding = rng.chance(0.5);
    const auto text = render_prompt(n, instr, grounding);
    const auto p = parse_prompt(text);
    EXPECT_EQ(p.registry_size, n);
    const bool folded = instr.starts_with("[grounding] ");
    EXPECT_EQ(p.grounding, grounding || folded);
    EXPECT_EQ(p.instruction, folded ? instr.substr(12) : instr);
    EXPECT_EQ(render_prompt(p.registry_size, p.instruction, p.grounding), text);
  }
}

TEST(ParsePrompt, Rejects) {
  EXPECT_THROW(parse_prompt("Image: <image>."), Error);
  EXPECT_THROW(parse_prompt("Here is an image with region crops from it. Image: <image>. Regions: <r2><region>. x"),
               Error);
  EXPECT_THROW(parse_prompt("Here is an image with region crops from it. Image: <image>. Regions: <r1><region> x"),
               Error);
}

TEST(Templates, Examples) {
  EXPECT_EQ(apply_template_variant(Task::multi_ground, {{"object class", "cat"}}, 0), "Locate all <p>cat</p> in this image.");
  EXPECT_EQ(apply_template_variant(Task::grounded_caption, {}, 0), "[grounding] Give me a short description of the image.");
  EXPECT_EQ(apply_template_variant(Task::rec, {{"expression", "a red mug"}}, 0), "Locate <p>a red mug</p> in the image.");
  EXPECT_EQ(apply_template_variant(Task::region_caption, {{"region", "<r3><region>"}}, 0), "What is <r3><region>?");
}

TEST(Templates, SeededChoiceIsDeterministicAndCoversVariants) {
  std::set<std::string> seen;
  for (std::uint64_t s = 0; s < 64; ++s) {
    const auto a = apply_template(Task::image_caption, {}, s);
    EXPECT_EQ(a, apply_template(Task::image_caption, {}, s));
    seen.insert(a);
  }
  EXPECT_EQ(seen.size(), templates_for(Task::image_caption).size());
}

TEST(Templates, MissingPlaceholder) {
  try {
    apply_template(Task::rec, {}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::missing_placeholder);
  }
  EXPECT_THROW(task_from_string("caption"), Error);
  EXPECT_EQ(task_from_string("grounded_chat"), Task::grounded_chat);
}

TEST(Serialize, DogFrisbee) {
  GroundedResponse r;
  r.add_span({"A dog", {4}}).add_text(" is jumping to catch ").add_span({"a frisbee", {7}});
  r.add_text(" over ").add_span({"a fallen man", {1}}).add_text(".");
  EXPECT_EQ(serialize(r), kDogFrisbee);
}

TEST(Serialize, PlainAndMultiReferent) {
  GroundedResponse plain;
  plain.add_text("just text");
  EXPECT_EQ(serialize(plain), "just text");
  GroundedResponse two;
  two.add_span({"two cats", {2, 5}});
  EXPECT_EQ(serialize(two), "<p>two cats</p> <roi><r2><r5></roi>");
  EXPECT_EQ(parse(serialize(two), 5), two);
}

TEST(Serialize, Errors) {
  GroundedResponse empty_refs;
  empty_refs.add_span({"x", {}});
  EXPECT_THROW(serialize(empty_refs), Error);
  GroundedResponse too_big;
  too_big.add_span({"x", {4}});
  EXPECT_THROW(serialize(too_big, std::size_t{3}), Error);
  GroundedResponse markup;
  markup.add_text("a <p> b");
  EXPECT_THROW(serialize(markup), Error);
}

TEST(Parse, DogFrisbee) {
  const auto r = parse(kDogFrisbee, registry_of(7));
  const auto spans = r.spans();
  ASSERT_EQ(spans.size(), 3u);
  EXPECT_EQ(spans[0], (GroundedSpan{"A dog", {4}}));
  EXPECT_EQ(spans[1], (GroundedSpan{"a frisbee", {7}}));
  EXPECT_EQ(spans[2], (GroundedSpan{"a fallen man", {1}}));
  EXPECT_EQ(r.segments().size(), 6u);
}

TEST(Parse, PlainText) {
  const auto r = parse("hello world", 0);
  ASSERT_EQ(r.segments().size(), 1u);
  EXPECT_EQ(std::get<std::string>(r.segments()[0]), "hello world");
  EXPECT_TRUE(parse("", 0).segments().empty());
  EXPECT_EQ(parse("a < b <rx> <region>", 0).segments().size(), 1u);
}

TEST(Parse, MalformedFixtures) {
  ASSERT_EQ(malformed_cases().size(), 10u);
  for (const auto& c : malformed_cases()) {
    EXPECT_EQ(parse_error_code(c.text, 7), c.expected) << c.text;
  }
}

TEST(Parse, ErrorMessages) {
  try {
    parse("<p>dog</p>", 7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_TRUE(std::string(e.what()).starts_with("malformed markup"));
  }
  try {
    parse("<p>dog</p> <roi><r9></roi>", 7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "unknown referent, 9, registry size 7");
  }
}

TEST(Parse, LenientAcceptsWhitespaceVariants) {
  const std::string loose = "<p>A dog</p><roi> <r4> </roi> and <p>cats</p>\n  <roi><r1>\t<r2></roi>";
  EXPECT_EQ(parse_error_code(loose, 7), Errc::malformed_markup);
  const auto r = parse(loose, 7, ParseMode::lenient);
  EXPECT_EQ(serialize(r), "<p>A dog</p> <roi><r4></roi> and <p>cats</p> <roi><r1><r2></roi>");
  // Lenient mode still enforces structure and referents.
  EXPECT_EQ(parse_error_code("<p>dog</p>", 7, ParseMode::lenient), Errc::malformed_markup);
  EXPECT_EQ(parse_error_code("<p>dog</p> <roi><r8></roi>", 7, ParseMode::lenient), Errc::unknown_referent);
}

TEST(Parse, RoundTripRandomResponses) {
  Rng rng(71);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = static_cast<std::size_t>(rng.between(1, 100));
    const auto r = lt::random_response(rng, n);
    const auto text = serialize(r, n);
    ASSERT_EQ(parse(text, n), r) << text;
    ASSERT_EQ(serialize(parse(text, n)), text);
    for (std::size_t ref : r.referents()) {
      EXPECT_GE(ref, 1u);
      EXPECT_LE(ref, n);
    }
  }
}

TEST(Response, CoalescesText) {
  GroundedResponse r;
  r.add_text("a").add_text("").add_text("b");
  ASSERT_EQ(r.segments().size(), 1u);
  EXPECT_EQ(std::get<std::string>(r.segments()[0]), "ab");
}

TEST(AssembleSequence, FullBudget) {
  const auto reg = registry_of(100);
  const auto seq = assemble_sequence(render_prompt(reg, "Describe.", false), 256, reg);
  EXPECT_EQ(seq.visual_tokens(), 356u);
  EXPECT_FALSE(seq.over_budget);
  std::size_t next = 1;
  for (const auto& e : seq.elements) {
    if (e.kind == ElementKind::region_token) {
      EXPECT_EQ(e.index, next++);
    }
  }
}

TEST(AssembleSequence, NoRegions) {
  const auto seq = assemble_sequence(render_prompt(0, "Describe.", false), 256, registry_of(0));
  EXPECT_EQ(seq.visual_tokens(), 256u);
  EXPECT_EQ(seq.region_tokens, 0u);
}

TEST(AssembleSequence, NoMergeOverBudget) {
  const auto reg = registry_of(40);
  const auto seq = assemble_sequence(render_prompt(reg, "Describe.", false), 1024, reg);
  EXPECT_EQ(seq.visual_tokens(), 1064u);
  EXPECT_TRUE(seq.over_budget);
  ASSERT_EQ(seq.warnings.size(), 1u);
  EXPECT_NE(seq.warnings[0].find("over default budget"), std::string::npos);
}

TEST(AssembleSequence, ReferringMentionAddsToken) {
  const auto reg = registry_of(3);
  const auto seq = assemble_sequence(render_prompt(reg, "What is <r2><region>?", false), 4, reg);
  EXPECT_EQ(seq.region_tokens, 4u);
  EXPECT_EQ(seq.elements.back().kind, ElementKind::text);
  EXPECT_EQ(seq.elements.back().text, "?");
}

TEST(AssembleSequence, PlaceholderMismatch) {
  const auto reg = registry_of(3);
  auto code = [&](const std::string& prompt) -> std::optional<Errc> {
    try {
      assemble_sequence(prompt, 4, reg);
    } catch (const Error& e) {
      return e.code();
    }
    return std::nullopt;
  };
  EXPECT_EQ(code(render_prompt(2, "x", false)), Errc::placeholder_mismatch);
  EXPECT_EQ(code("no image <r1><region><r2><region><r3><region>"), Errc::placeholder_mismatch);
  EXPECT_EQ(code("<image><image><r1><region><r2><region><r3><region>"), Errc::placeholder_mismatch);
  EXPECT_EQ(code("<image><r2><region><r1><region><r3><region>"), Errc::placeholder_mismatch);
  EXPECT_EQ(code(render_prompt(4, "x", false)), Errc::unknown_referent);
}

TEST(VisualEmbeddings, SequenceOrder) {
  const auto reg = registry_of(2);
  const auto seq = assemble_sequence(render_prompt(reg, "What is <r1><region>?", false), 3, reg);
  TokenMatrix image(3, 1), regions(2, 1);
  image.data = {10, 11, 12};
  regions.data = {20, 21};
  EXPECT_EQ(visual_embeddings(seq, image, regions).data, (std::vector<double>{10, 11, 12, 20, 21, 20}));
}
