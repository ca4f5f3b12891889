#pragma once

// Prompt and grounded-response markup.
//
//   prompt    := PREFIX [ "Regions: " region ( ", " region )* ". " ]
//                [ "[grounding] " ] instruction
//   PREFIX    := "Here is an image with region crops from it. Image: <image>. "
//   region    := "<r" INDEX "><region>"          (INDEX = 1, 2, ... in order)
//
//   response  := ( text | span )*
//   span      := "<p>" phrase "</p>" " " "<roi>" proxy+ "</roi>"
//   proxy     := "<r" INDEX ">"                  (INDEX >= 1, no leading zeros)
//   text      := any characters not forming <p>, </p>, <roi>, </roi> or a proxy
//   phrase    := non-empty text
//
// Strict parsing accepts exactly the canonical form above. Lenient parsing
// additionally accepts any run of whitespace (including none) between
// "</p>" and "<roi>" and around proxies inside a roi block.

#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "loctok/error.hpp"
#include "loctok/region_pipeline.hpp"
#include "loctok/rng.hpp"

namespace loctok {

inline constexpr std::string_view kImageToken = "<image>";
inline constexpr std::string_view kRegionToken = "<region>";
inline constexpr std::string_view kPhraseOpen = "<p>";
inline constexpr std::string_view kPhraseClose = "</p>";
inline constexpr std::string_view kRoiOpen = "<roi>";
inline constexpr std::string_view kRoiClose = "</roi>";
inline constexpr std::string_view kGroundingFlag = "[grounding]";
inline constexpr std::string_view kPromptPrefix =
    "Here is an image with region crops from it. Image: <image>. ";
inline constexpr std::string_view kRegionsLead = "Regions: ";

// Default visual-token budget: 256 merged image tokens + 100 regions.
inline constexpr std::size_t kVisualTokenBudget = 356;

inline std::string proxy_token(std::size_t index) { return "<r" + std::to_string(index) + ">"; }

namespace detail {

enum class TagKind { none, phrase_open, phrase_close, roi_open, roi_close, proxy };

struct Tag {
  TagKind kind = TagKind::none;
  std::size_t length = 0;
  std::size_t index = 0;       // proxies only
  bool well_formed = true;     // proxies only: false for leading zeros / overflow
};

// Recognizes a markup tag starting at text[pos] (which must be '<').
inline Tag match_tag(std::string_view text, std::size_t pos) {
  auto rest = text.substr(pos);
  if (rest.starts_with(kPhraseOpen)) return {TagKind::phrase_open, kPhraseOpen.size()};
  if (rest.starts_with(kPhraseClose)) return {TagKind::phrase_close, kPhraseClose.size()};
  if (rest.starts_with(kRoiOpen)) return {TagKind::roi_open, kRoiOpen.size()};
  if (rest.starts_with(kRoiClose)) return {TagKind::roi_close, kRoiClose.size()};
  if (rest.size() >= 4 && rest[1] == 'r' && std::isdigit(static_cast<unsigned char>(rest[2]))) {
    std::size_t i = 2;
    while (i < rest.size() && std::isdigit(static_cast<unsigned char>(rest[i]))) ++i;
    if (i < rest.size() && rest[i] == '>') {
      Tag t{TagKind::proxy, i + 1};
      const auto digits = rest.substr(2, i - 2);
      t.well_formed = digits.size() <= 9 && (digits.front() != '0' || digits.size() == 1);
      if (t.well_formed) t.index = std::stoul(std::string(digits));
      return t;
    }
  }
  return {};
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

}  // namespace detail

// True when `text` contains no response markup (tags or proxies).
inline bool is_plain_text(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '<' && detail::match_tag(text, i).kind != detail::TagKind::none) return false;
  }
  return true;
}

struct GroundedSpan {
  std::string phrase;
  std::vector<std::size_t> referents;

  friend bool operator==(const GroundedSpan&, const GroundedSpan&) = default;
};

class GroundedResponse {
 public:
  using Segment = std::variant<std::string, GroundedSpan>;

  // Empty text is dropped; text following text is merged into one segment.
  GroundedResponse& add_text(std::string_view text) {
    if (text.empty()) return *this;
    if (!segments_.empty() && std::holds_alternative<std::string>(segments_.back())) {
      std::get<std::string>(segments_.back()).append(text);
    } else {
      segments_.emplace_back(std::string(text));
    }
    return *this;
  }

  GroundedResponse& add_span(GroundedSpan span) {
    segments_.emplace_back(std::move(span));
    return *this;
  }

  const std::vector<Segment>& segments() const { return segments_; }

  std::vector<GroundedSpan> spans() const {
    std::vector<GroundedSpan> out;
    for (const auto& s : segments_) {
      if (const auto* span = std::get_if<GroundedSpan>(&s)) out.push_back(*span);
    }
    return out;
  }

  std::set<std::size_t> referents() const {
    std::set<std::size_t> out;
    for (const auto& s : segments_) {
      if (const auto* span = std::get_if<GroundedSpan>(&s)) out.insert(span->referents.begin(), span->referents.end());
    }
    return out;
  }

  friend bool operator==(const GroundedResponse&, const GroundedResponse&) = default;

 private:
  std::vector<Segment> segments_;
};

inline Error unknown_referent(std::size_t index, std::size_t limit) {
  return Error(Errc::unknown_referent, "unknown referent, " + std::to_string(index) +
                                           ", registry size " + std::to_string(limit));
}

// Canonical text of a response. When `referent_limit` is given every
// referent must lie in 1..limit.
inline std::string serialize(const GroundedResponse& response,
                             std::optional<std::size_t> referent_limit = std::nullopt) {
  std::string out;
  for (const auto& seg : response.segments()) {
    if (const auto* text = std::get_if<std::string>(&seg)) {
      if (!is_plain_text(*text)) throw Error(Errc::malformed_markup, "malformed markup: markup inside plain text");
      out += *text;
      continue;
    }
    const auto& span = std::get<GroundedSpan>(seg);
    if (span.referents.empty()) throw Error(Errc::invalid_argument, "span with empty referents");
    if (span.phrase.empty() || !is_plain_text(span.phrase)) {
      throw Error(Errc::malformed_markup, "malformed markup: bad phrase");
    }
    out += kPhraseOpen;
    out += span.phrase;
    out += kPhraseClose;
    out += ' ';
    out += kRoiOpen;
    for (std::size_t r : span.referents) {
      if (r == 0 || (referent_limit && r > *referent_limit)) throw unknown_referent(r, referent_limit.value_or(0));
      out += proxy_token(r);
    }
    out += kRoiClose;
  }
  return out;
}

inline std::string serialize(const GroundedResponse& response, const ProxyRegistry& registry) {
  return serialize(response, registry.size());
}

enum class ParseMode { strict, lenient };

// Parses response markup; referents must lie in 1..referent_limit.
inline GroundedResponse parse(std::string_view text, std::size_t referent_limit,
                              ParseMode mode = ParseMode::strict) {
  using detail::TagKind;
  const bool lenient = mode == ParseMode::lenient;
  auto malformed = [](const std::string& why) { return Error(Errc::malformed_markup, "malformed markup: " + why); };

  GroundedResponse out;
  std::string plain;
  std::size_t i = 0;
  while (i < text.size()) {
    const detail::Tag tag = text[i] == '<' ? detail::match_tag(text, i) : detail::Tag{};
    switch (tag.kind) {
      case TagKind::none:
        plain.push_back(text[i++]);
        continue;
      case TagKind::proxy:
        if (!tag.well_formed) throw malformed("bad proxy token");
        throw Error(Errc::stray_proxy, "stray proxy " + proxy_token(tag.index) + " outside roi block");
      case TagKind::phrase_close:
      case TagKind::roi_open:
      case TagKind::roi_close:
        throw malformed("unexpected tag at offset " + std::to_string(i));
      case TagKind::phrase_open:
        break;
    }

    // <p> phrase </p>
    i += tag.length;
    GroundedSpan span;
    bool closed = false;
    while (i < text.size()) {
      const detail::Tag inner = text[i] == '<' ? detail::match_tag(text, i) : detail::Tag{};
      if (inner.kind == TagKind::none) {
        span.phrase.push_back(text[i++]);
        continue;
      }
      if (inner.kind == TagKind::phrase_close) {
        i += inner.length;
        closed = true;
        break;
      }
      if (inner.kind == TagKind::proxy && inner.well_formed) {
        throw Error(Errc::stray_proxy, "stray proxy " + proxy_token(inner.index) + " inside phrase");
      }
      throw malformed("tag inside phrase at offset " + std::to_string(i));
    }
    if (!closed) throw malformed("unterminated phrase");
    if (span.phrase.empty()) throw malformed("empty phrase");

    // separator
    if (lenient) {
      while (i < text.size() && detail::is_space(text[i])) ++i;
    } else {
      if (i >= text.size() || text[i] != ' ') throw malformed("phrase not followed by roi block");
      ++i;
    }
    if (!text.substr(i).starts_with(kRoiOpen)) throw malformed("phrase not followed by roi block");
    i += kRoiOpen.size();

    // proxies </roi>
    bool roi_closed = false;
    while (i < text.size()) {
      if (lenient) {
        while (i < text.size() && detail::is_space(text[i])) ++i;
        if (i >= text.size()) break;
      }
      const detail::Tag inner = text[i] == '<' ? detail::match_tag(text, i) : detail::Tag{};
      if (inner.kind == TagKind::roi_close) {
        i += inner.length;
        roi_closed = true;
        break;
      }
      if (inner.kind != TagKind::proxy || !inner.well_formed) throw malformed("non-proxy content in roi block");
      if (inner.index < 1 || inner.index > referent_limit) throw unknown_referent(inner.index, referent_limit);
      span.referents.push_back(inner.index);
      i += inner.length;
    }
    if (!roi_closed) throw malformed("unterminated roi block");
    if (span.referents.empty()) throw malformed("empty roi block");

    out.add_text(plain);
    plain.clear();
    out.add_span(std::move(span));
  }
  out.add_text(plain);
  return out;
}

inline GroundedResponse parse(std::string_view text, const ProxyRegistry& registry,
                              ParseMode mode = ParseMode::strict) {
  return parse(text, registry.size(), mode);
}

struct Prompt {
  bool grounding = false;
  std::string instruction;
  std::size_t registry_size = 0;

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

// Checks referring mentions in an instruction: every proxy must be registered
// and every <region> must directly follow a proxy.
inline void validate_instruction(std::string_view instruction, std::size_t registry_size) {
  if (instruction.find(kImageToken) != std::string_view::npos) {
    throw Error(Errc::malformed_markup, "malformed markup: <image> inside instruction");
  }
  std::size_t last_proxy_end = std::string_view::npos;
  for (std::size_t i = 0; i < instruction.size(); ++i) {
    if (instruction[i] != '<') continue;
    if (instruction.substr(i).starts_with(kRegionToken)) {
      if (last_proxy_end != i) {
        throw Error(Errc::malformed_markup, "malformed markup: <region> without a proxy token");
      }
      continue;
    }
    const auto tag = detail::match_tag(instruction, i);
    if (tag.kind != detail::TagKind::proxy) continue;
    if (!tag.well_formed) throw Error(Errc::malformed_markup, "malformed markup: bad proxy token");
    if (tag.index < 1 || tag.index > registry_size) throw unknown_referent(tag.index, registry_size);
    last_proxy_end = i + tag.length;
  }
}

// A leading "[grounding] " in the instruction is folded into the flag so the
// rendered text always parses back to the same Prompt.
inline std::string render_prompt(std::size_t registry_size, std::string_view instruction, bool grounding) {
  const std::string flag_prefix = std::string(kGroundingFlag) + " ";
  if (instruction.starts_with(flag_prefix)) {
    grounding = true;
    instruction.remove_prefix(flag_prefix.size());
  }
  validate_instruction(instruction, registry_size);
  std::string out(kPromptPrefix);
  if (registry_size > 0) {
    out += kRegionsLead;
    for (std::size_t i = 1; i <= registry_size; ++i) {
      if (i > 1) out += ", ";
      out += proxy_token(i);
      out += kRegionToken;
    }
    out += ". ";
  }
  if (grounding) out += flag_prefix;
  out += instruction;
  return out;
}

inline std::string render_prompt(const ProxyRegistry& registry, std::string_view instruction, bool grounding) {
  return render_prompt(registry.size(), instruction, grounding);
}

inline Prompt parse_prompt(std::string_view text) {
  auto malformed = [](const std::string& why) { return Error(Errc::malformed_markup, "malformed markup: " + why); };
  if (!text.starts_with(kPromptPrefix)) throw malformed("missing prompt prefix");
  text.remove_prefix(kPromptPrefix.size());
  Prompt p;
  if (text.starts_with(kRegionsLead)) {
    text.remove_prefix(kRegionsLead.size());
    while (true) {
      const std::string expect = proxy_token(p.registry_size + 1) + std::string(kRegionToken);
      if (!text.starts_with(expect)) throw malformed("region list out of order");
      text.remove_prefix(expect.size());
      ++p.registry_size;
      if (text.starts_with(", ")) {
        text.remove_prefix(2);
        continue;
      }
      if (text.starts_with(". ")) {
        text.remove_prefix(2);
        break;
      }
      throw malformed("unterminated region list");
    }
  }
  const std::string flag_prefix = std::string(kGroundingFlag) + " ";
  if (text.starts_with(flag_prefix)) {
    p.grounding = true;
    text.remove_prefix(flag_prefix.size());
  }
  p.instruction = std::string(text);
  validate_instruction(p.instruction, p.registry_size);
  return p;
}

// Instruction templates per task. Placeholders are written {name}.
enum class Task { image_caption, region_caption, rec, multi_ground, grounded_caption, grounded_chat };

inline const std::vector<std::string>& templates_for(Task task) {
  static const std::map<Task, std::vector<std::string>> table = {
      {Task::image_caption,
       {"What is this photo about?", "Describe the following image.",
        "Analyze the image in a comprehensive and detailed manner."}},
      {Task::region_caption,
       {"What is {region}?", "Please briefly describe {region}.", "Give a concise description of {region}."}},
      {Task::rec,
       {"Locate <p>{expression}</p> in the image.", "Which region matches <p>{expression}</p>?",
        "Identify the region that corresponds to <p>{expression}</p>."}},
      {Task::multi_ground,
       {"Locate all <p>{object class}</p> in this image.",
        "Find out all instances of <p>{object class}</p> in the image.",
        "Detect and list each <p>{object class}</p> that appears in the picture."}},
      {Task::grounded_caption,
       {"[grounding] Give me a short description of the image.",
        "[grounding] Succinctly summarize what you see in the image.",
        "[grounding] Please summarize the content of this image in brief."}},
      {Task::grounded_chat, {"[grounding] {instruction}"}},
  };
  return table.at(task);
}

inline Task task_from_string(std::string_view name) {
  static const std::map<std::string, Task, std::less<>> names = {
      {"image_caption", Task::image_caption},   {"region_caption", Task::region_caption},
      {"rec", Task::rec},                       {"multi_ground", Task::multi_ground},
      {"grounded_caption", Task::grounded_caption}, {"grounded_chat", Task::grounded_chat},
  };
  auto it = names.find(name);
  if (it == names.end()) throw Error(Errc::invalid_argument, "unknown task " + std::string(name));
  return it->second;
}

using TemplateArgs = std::map<std::string, std::string, std::less<>>;

inline std::string fill_template(std::string_view tmpl, const TemplateArgs& args) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] != '{') {
      out.push_back(tmpl[i++]);
      continue;
    }
    const auto close = tmpl.find('}', i);
    if (close == std::string_view::npos) throw Error(Errc::invalid_argument, "unterminated placeholder");
    const auto name = tmpl.substr(i + 1, close - i - 1);
    auto it = args.find(name);
    if (it == args.end()) throw Error(Errc::missing_placeholder, "missing placeholder: " + std::string(name));
    out += it->second;
    i = close + 1;
  }
  return out;
}

inline std::string apply_template_variant(Task task, const TemplateArgs& args, std::size_t variant) {
  const auto& variants = templates_for(task);
  if (variant >= variants.size()) throw Error(Errc::invalid_argument, "template variant out of range");
  return fill_template(variants[variant], args);
}

// Uniform seeded choice among the task's variants.
inline std::string apply_template(Task task, const TemplateArgs& args, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "template"));
  return apply_template_variant(task, args, static_cast<std::size_t>(rng.below(templates_for(task).size())));
}

enum class ElementKind { text, image_token, region_token };

struct SequenceElement {
  ElementKind kind = ElementKind::text;
  std::string text;       // text elements
  std::size_t index = 0;  // image token index, or proxy index of a region

  friend bool operator==(const SequenceElement&, const SequenceElement&) = default;
};

struct MultimodalSequence {
  std::vector<SequenceElement> elements;
  std::size_t image_tokens = 0;
  std::size_t region_tokens = 0;
  bool over_budget = false;
  std::vector<std::string> warnings;

  std::size_t visual_tokens() const { return image_tokens + region_tokens; }
};

// Replaces <image> by the image tokens and each <rN><region> by region token
// N. The first occurrences of each proxy must enumerate 1..n in order (the
// region list); later repeats are referring mentions and insert the same
// region token again.
inline MultimodalSequence assemble_sequence(std::string_view prompt, std::size_t image_token_count,
                                            const ProxyRegistry& registry,
                                            std::size_t budget = kVisualTokenBudget) {
  auto mismatch = [](const std::string& why) { return Error(Errc::placeholder_mismatch, "placeholder mismatch: " + why); };
  MultimodalSequence seq;
  std::string text;
  auto flush = [&] {
    if (!text.empty()) seq.elements.push_back({ElementKind::text, std::move(text), 0});
    text.clear();
  };
  std::size_t images_seen = 0;
  std::size_t next_new = 1;
  std::size_t pending_proxy = 0;
  std::size_t pending_end = std::string_view::npos;
  for (std::size_t i = 0; i < prompt.size();) {
    if (prompt.substr(i).starts_with(kImageToken)) {
      if (++images_seen > 1) throw mismatch("more than one <image>");
      flush();
      for (std::size_t k = 0; k < image_token_count; ++k) seq.elements.push_back({ElementKind::image_token, {}, k});
      seq.image_tokens = image_token_count;
      i += kImageToken.size();
      continue;
    }
    if (prompt.substr(i).starts_with(kRegionToken)) {
      if (pending_end != i) throw mismatch("<region> without a proxy token");
      if (!registry.contains(pending_proxy)) throw unknown_referent(pending_proxy, registry.size());
      if (pending_proxy == next_new) {
        ++next_new;
      } else if (pending_proxy > next_new) {
        throw mismatch("region placeholders out of registry order");
      }
      flush();
      seq.elements.push_back({ElementKind::region_token, {}, pending_proxy});
      ++seq.region_tokens;
      i += kRegionToken.size();
      continue;
    }
    if (prompt[i] == '<') {
      const auto tag = detail::match_tag(prompt, i);
      if (tag.kind == detail::TagKind::proxy && tag.well_formed) {
        text.append(prompt.substr(i, tag.length));
        pending_proxy = tag.index;
        pending_end = i + tag.length;
        i += tag.length;
        continue;
      }
    }
    text.push_back(prompt[i++]);
  }
  flush();
  if (images_seen != 1) throw mismatch("prompt must contain exactly one <image>");
  if (next_new - 1 != registry.size()) {
    throw mismatch(std::to_string(next_new - 1) + " region placeholders for registry of " +
                   std::to_string(registry.size()));
  }
  if (seq.visual_tokens() > budget) {
    seq.over_budget = true;
    seq.warnings.push_back("over default budget: " + std::to_string(seq.visual_tokens()) + " visual tokens > " +
                           std::to_string(budget));
  }
  return seq;
}

// Visual embeddings in sequence order (image rows, then region rows as they
// are referenced). Both inputs must already share one width.
inline TokenMatrix visual_embeddings(const MultimodalSequence& seq, const TokenMatrix& image,
                                     const TokenMatrix& regions) {
  if (image.count != seq.image_tokens) throw Error(Errc::invalid_argument, "image token count mismatch");
  if (seq.region_tokens > 0 && regions.width != image.width) {
    throw Error(Errc::invalid_argument, "image and region widths differ");
  }
  TokenMatrix out(seq.visual_tokens(), image.width);
  std::size_t row = 0;
  for (const auto& e : seq.elements) {
    if (e.kind == ElementKind::text) continue;
    const auto src = e.kind == ElementKind::image_token ? image.row(e.index) : regions.row(e.index - 1);
    std::copy(src.begin(), src.end(), out.row(row++).begin());
  }
  return out;
}

}  // namespace loctok
