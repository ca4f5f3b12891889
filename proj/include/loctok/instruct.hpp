#pragma once

// Grounded conversation construction: region de-overlap, numbered markers,
// request assembly for an external vision-language model, and format
// post-filtering of its replies.
//
// Reply format (also stated in every request):
//   USER: <text>
//   ASSISTANT: <text with <p>phrase</p> <roi><rN></roi> spans>
//   ...
// Lines that do not start with a role prefix continue the previous turn.
// Referents are marker labels 1..m.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/error.hpp"
#include "loctok/geometry.hpp"
#include "loctok/grammar.hpp"
#include "loctok/region_pipeline.hpp"
#include "loctok/rng.hpp"

namespace loctok {

struct RegionAnnotation {
  BoundingBox box;
  std::string description;

  friend bool operator==(const RegionAnnotation&, const RegionAnnotation&) = default;
};

struct FilterConfig {
  double iou_threshold = 0.5;
  std::size_t max_regions = 10;
  std::size_t min_regions = 3;  // fewer survivors marks the image sparse
};

struct FilterResult {
  std::vector<RegionAnnotation> regions;
  std::size_t dropped_overlap = 0;
  bool truncated = false;
  bool sparse = false;
};

// Greedy keep-first: a region is dropped when its IoU with an already kept
// region exceeds the threshold. Survivors beyond max_regions are cut.
inline FilterResult filter_overlaps(std::span<const RegionAnnotation> regions, const FilterConfig& cfg = {}) {
  if (!(cfg.iou_threshold > 0.0 && cfg.iou_threshold < 1.0)) {
    throw Error(Errc::invalid_argument, "overlap threshold must lie in (0,1)");
  }
  FilterResult out;
  for (const auto& r : regions) {
    if (r.description.empty()) throw Error(Errc::invalid_argument, "region description must be non-empty");
    const bool overlaps = std::any_of(out.regions.begin(), out.regions.end(), [&](const RegionAnnotation& k) {
      return iou(k.box, r.box) > cfg.iou_threshold;
    });
    if (overlaps) {
      ++out.dropped_overlap;
    } else {
      out.regions.push_back(r);
    }
  }
  if (out.regions.size() > cfg.max_regions) {
    out.regions.resize(cfg.max_regions);
    out.truncated = true;
  }
  out.sparse = out.regions.size() < cfg.min_regions;
  return out;
}

struct Marker {
  std::size_t label = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  BoundingBox box;
};

struct MarkedImageSpec {
  std::int64_t image_id = 0;
  std::vector<Marker> markers;
  bool ambiguous = false;  // two marker centers closer than the ambiguity radius
};

inline constexpr std::size_t kMaxMarkers = 10;

inline MarkedImageSpec place_markers(std::int64_t image_id, std::span<const RegionAnnotation> regions,
                                     double ambiguity_radius = 1.0) {
  if (regions.empty() || regions.size() > kMaxMarkers) {
    throw Error(Errc::invalid_argument, "place_markers needs 1..10 regions");
  }
  MarkedImageSpec spec{image_id, {}, false};
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& b = regions[i].box;
    spec.markers.push_back({i + 1, b.center_x(), b.center_y(), b});
  }
  for (std::size_t i = 0; i < spec.markers.size(); ++i) {
    for (std::size_t j = i + 1; j < spec.markers.size(); ++j) {
      const double dx = spec.markers[i].center_x - spec.markers[j].center_x;
      const double dy = spec.markers[i].center_y - spec.markers[j].center_y;
      if (std::hypot(dx, dy) < ambiguity_radius || (dx == 0.0 && dy == 0.0)) spec.ambiguous = true;
    }
  }
  return spec;
}

// --- marker rasterization -------------------------------------------------

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // RGB, row-major

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

  void set(long x, long y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || static_cast<std::size_t>(x) >= width || static_cast<std::size_t>(y) >= height) return;
    auto* p = &pixels[(static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
};

struct MarkerStyle {
  double radius = 11.0;
  std::array<std::uint8_t, 3> fill = {255, 235, 0};
  std::array<std::uint8_t, 3> ink = {0, 0, 0};
  int glyph_scale = 2;
};

namespace detail {

// 3x5 digit glyphs, one row per entry, bit 2 = leftmost column.
inline constexpr std::uint8_t kDigitFont[10][5] = {
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
};

}  // namespace detail

// Draws a filled disc with the label numeral at each marker center.
inline void draw_markers(RgbImage& img, const MarkedImageSpec& spec, const MarkerStyle& style = {}) {
  for (const auto& m : spec.markers) {
    const long cx = std::lround(m.center_x);
    const long cy = std::lround(m.center_y);
    const long r = std::lround(style.radius);
    for (long y = cy - r; y <= cy + r; ++y) {
      for (long x = cx - r; x <= cx + r; ++x) {
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) img.set(x, y, style.fill);
      }
    }
    const std::string digits = std::to_string(m.label);
    const long s = style.glyph_scale;
    const long text_w = static_cast<long>(digits.size()) * 4 * s - s;
    const long x0 = cx - text_w / 2;
    const long y0 = cy - 5 * s / 2;
    for (std::size_t d = 0; d < digits.size(); ++d) {
      const auto& glyph = detail::kDigitFont[digits[d] - '0'];
      for (long gy = 0; gy < 5; ++gy) {
        for (long gx = 0; gx < 3; ++gx) {
          if (!(glyph[gy] & (4 >> gx))) continue;
          for (long py = 0; py < s; ++py) {
            for (long px = 0; px < s; ++px) {
              img.set(x0 + static_cast<long>(d) * 4 * s + gx * s + px, y0 + gy * s + py, style.ink);
            }
          }
        }
      }
    }
  }
}

inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

// --- request assembly ------------------------------------------------------

struct Turn {
  std::string role;  // "user" or "assistant"
  std::string text;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct FewShotExample {
  std::vector<Turn> turns;
};

struct VlmContext {
  std::map<std::size_t, std::string> region_descriptions;  // marker label -> description
  std::vector<std::string> image_descriptions;
  std::vector<std::pair<std::string, std::string>> qa_pairs;
};

struct VlmRequest {
  MarkedImageSpec marked_image;
  VlmContext context;
  std::vector<FewShotExample> fewshot;
  std::string instruction;
  std::string marked_image_ref;  // path of a rasterized marked image, if any
};

inline const std::string& default_system_instruction() {
  static const std::string text =
      "You are shown an image in which numbered markers are placed at the centers of regions of interest. "
      "Write a multi-turn conversation between a user and an assistant about the image.\n"
      "Output format:\n"
      "- Every turn starts on a new line with \"USER: \" or \"ASSISTANT: \".\n"
      "- Turns alternate and the first turn is a USER turn.\n"
      "- In ASSISTANT turns, write every phrase that refers to a marked region as <p>phrase</p> followed by one "
      "space and <roi><rN></roi>, where N is the marker number. Several regions share one block: "
      "<roi><r1><r2></roi>.\n"
      "- Only use marker numbers that appear in the image.";
  return text;
}

inline const std::vector<FewShotExample>& default_fewshot() {
  static const std::vector<FewShotExample> examples = {
      {{{"user", "What is happening in this picture?"},
        {"assistant",
         "<p>A man</p> <roi><r1></roi> is throwing <p>a red frisbee</p> <roi><r2></roi> to <p>his dog</p> "
         "<roi><r3></roi> in a park."},
        {"user", "Is anyone else nearby?"},
        {"assistant", "Yes, <p>two people</p> <roi><r4><r5></roi> are sitting on <p>a bench</p> <roi><r6></roi>."}}},
  };
  return examples;
}

// Few-shot exemplars are ordered by a seeded shuffle.
inline VlmRequest assemble_request(const MarkedImageSpec& spec, const VlmContext& context,
                                   std::vector<FewShotExample> fewshot, std::uint64_t seed) {
  for (const auto& m : spec.markers) {
    auto it = context.region_descriptions.find(m.label);
    if (it == context.region_descriptions.end() || it->second.empty()) {
      throw Error(Errc::uncovered_marker, "uncovered marker " + std::to_string(m.label));
    }
  }
  Rng rng(derive_seed(seed, "assemble_request"));
  rng.shuffle(fewshot);
  return {spec, context, std::move(fewshot), default_system_instruction(), {}};
}

namespace detail {

inline std::string number_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string role_prefix(const std::string& role) { return role == "user" ? "USER: " : "ASSISTANT: "; }

}  // namespace detail

// Byte-stable text form of a request.
inline std::string render_request(const VlmRequest& req) {
  std::string out;
  out += "### SYSTEM\n" + req.instruction + "\n";
  for (std::size_t i = 0; i < req.fewshot.size(); ++i) {
    out += "\n### EXAMPLE " + std::to_string(i + 1) + "\n";
    for (const auto& t : req.fewshot[i].turns) out += detail::role_prefix(t.role) + t.text + "\n";
  }
  out += "\n### REGIONS\n";
  for (const auto& m : req.marked_image.markers) {
    out += std::to_string(m.label) + ": " + req.context.region_descriptions.at(m.label) + "\n";
  }
  if (!req.context.image_descriptions.empty()) {
    out += "\n### IMAGE DESCRIPTIONS\n";
    for (const auto& d : req.context.image_descriptions) out += "- " + d + "\n";
  }
  if (!req.context.qa_pairs.empty()) {
    out += "\n### QUESTIONS AND ANSWERS\n";
    for (const auto& [q, a] : req.context.qa_pairs) out += "Q: " + q + "\nA: " + a + "\n";
  }
  out += "\n### IMAGE\n";
  out += "image_id: " + std::to_string(req.marked_image.image_id) + "\n";
  if (!req.marked_image_ref.empty()) out += "marked_image: " + req.marked_image_ref + "\n";
  for (const auto& m : req.marked_image.markers) {
    out += "marker " + std::to_string(m.label) + " at (" + detail::number_text(m.center_x) + ", " +
           detail::number_text(m.center_y) + ") box [" + detail::number_text(m.box.x_min) + ", " +
           detail::number_text(m.box.y_min) + ", " + detail::number_text(m.box.x_max) + ", " +
           detail::number_text(m.box.y_max) + "]\n";
  }
  return out;
}

// --- model clients ---------------------------------------------------------

class VlmClient {
 public:
  virtual ~VlmClient() = default;
  virtual std::string complete(const VlmRequest& request) = 0;
};

// Answers every request with a templated grounded conversation over the
// request's marker labels; output depends only on the request.
class MockVlmClient : public VlmClient {
 public:
  std::string complete(const VlmRequest& req) override {
    const auto& markers = req.marked_image.markers;
    auto phrase = [&](std::size_t label) {
      std::string d = req.context.region_descriptions.count(label) ? req.context.region_descriptions.at(label) : "";
      while (!d.empty() && (d.back() == '.' || d.back() == ' ')) d.pop_back();
      if (d.empty() || !is_plain_text(d) || d.find('\n') != std::string::npos) d = "region " + std::to_string(label);
      return "<p>" + d + "</p> <roi>" + proxy_token(label) + "</roi>";
    };
    std::string out = "USER: What can you see in this image?\nASSISTANT: I can see ";
    for (std::size_t i = 0; i < markers.size(); ++i) {
      if (i > 0) out += i + 1 == markers.size() ? " and " : ", ";
      out += phrase(markers[i].label);
    }
    out += ".\n";
    const std::size_t pick = static_cast<std::size_t>(fnv1a64(render_request(req)) % markers.size());
    out += "USER: Which one stands out the most?\nASSISTANT: " + phrase(markers[pick].label) +
           " stands out the most.\n";
    return out;
  }
};

struct CompletionResult {
  std::string text;
  std::optional<std::string> error;
};

// Runs requests with at most `max_in_flight` concurrent calls; results are in
// request order whatever the completion order.
inline std::vector<CompletionResult> complete_all(VlmClient& client, std::span<const VlmRequest> requests,
                                                  std::size_t max_in_flight = 1) {
  std::vector<CompletionResult> results(requests.size());
  auto run_one = [&](std::size_t i) {
    try {
      results[i].text = client.complete(requests[i]);
    } catch (const std::exception& e) {
      results[i].error = e.what();
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(max_in_flight, 1, std::max<std::size_t>(1, requests.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < requests.size(); ++i) run_one(i);
    return results;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= requests.size()) return;
          i = next++;
        }
        run_one(i);
      }
    });
  }
  for (auto& t : pool) t.join();
  return results;
}

// --- post-filtering --------------------------------------------------------

struct ConversationRecord {
  std::int64_t image_id = 0;
  std::vector<Turn> turns;
  std::set<std::size_t> referenced_labels;
  std::size_t num_markers = 0;
  bool valid = false;
  std::string error;                        // first rejection reason
  std::optional<std::string> registry_ref;  // set once referents are proxies

  friend bool operator==(const ConversationRecord&, const ConversationRecord&) = default;
};

inline std::vector<Turn> split_turns(std::string_view raw) {
  std::vector<Turn> turns;
  std::size_t pos = 0;
  while (pos < raw.size()) {
    auto nl = raw.find('\n', pos);
    auto line = raw.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? raw.size() : nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.starts_with("USER:")) {
      line.remove_prefix(5);
      turns.push_back({"user", std::string(line)});
    } else if (line.starts_with("ASSISTANT:")) {
      line.remove_prefix(10);
      turns.push_back({"assistant", std::string(line)});
    } else if (line.find_first_not_of(" \t") == std::string_view::npos) {
      continue;
    } else if (turns.empty()) {
      throw Error(Errc::malformed_markup, "malformed markup: text before the first turn");
    } else {
      turns.back().text += "\n";
      turns.back().text += line;
    }
  }
  for (auto& t : turns) {
    const auto b = t.text.find_first_not_of(" \t");
    const auto e = t.text.find_last_not_of(" \t\n");
    t.text = b == std::string::npos ? std::string() : t.text.substr(b, e - b + 1);
  }
  return turns;
}

// Accepts a reply iff it splits into alternating user/assistant turns
// (user first), every turn parses leniently with referents in 1..m, and at
// least one grounded span exists. Accepted turns are stored canonicalized.
inline ConversationRecord postfilter_one(std::int64_t image_id, std::string_view raw, std::size_t num_markers) {
  ConversationRecord rec;
  rec.image_id = image_id;
  rec.num_markers = num_markers;
  try {
    auto turns = split_turns(raw);
    if (turns.empty()) throw Error(Errc::malformed_markup, "malformed markup: no turns");
    std::size_t spans = 0;
    for (std::size_t i = 0; i < turns.size(); ++i) {
      const char* expected = i % 2 == 0 ? "user" : "assistant";
      if (turns[i].role != expected) throw Error(Errc::malformed_markup, "malformed markup: turns do not alternate");
      if (turns[i].text.empty()) throw Error(Errc::malformed_markup, "malformed markup: empty turn");
      const auto parsed = parse(turns[i].text, num_markers, ParseMode::lenient);
      for (std::size_t r : parsed.referents()) rec.referenced_labels.insert(r);
      spans += parsed.spans().size();
      rec.turns.push_back({turns[i].role, serialize(parsed, num_markers)});
    }
    if (spans == 0) throw Error(Errc::invalid_argument, "no grounding");
    rec.valid = true;
  } catch (const Error& e) {
    rec.valid = false;
    rec.error = e.what();
    rec.referenced_labels.clear();
    rec.turns.clear();
    try {
      rec.turns = split_turns(raw);
    } catch (const Error&) {
      rec.turns = {{"raw", std::string(raw)}};
    }
  }
  return rec;
}

struct RawResponse {
  std::int64_t image_id = 0;
  std::string text;
};

inline std::vector<ConversationRecord> postfilter(std::span<const RawResponse> raw,
                                                  std::span<const MarkedImageSpec> specs) {
  if (raw.size() != specs.size()) throw Error(Errc::invalid_argument, "responses and marker specs differ in length");
  std::vector<ConversationRecord> out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out.push_back(postfilter_one(raw[i].image_id, raw[i].text, specs[i].markers.size()));
  return out;
}

// Rewrites label referents to proxy indices (label -> proxy map).
inline ConversationRecord relabel_to_proxies(const ConversationRecord& rec,
                                             const std::map<std::size_t, std::size_t>& label_to_proxy,
                                             const std::string& registry_ref, std::size_t registry_size) {
  if (!rec.valid) throw Error(Errc::invalid_argument, "cannot relabel a rejected record");
  ConversationRecord out = rec;
  out.referenced_labels.clear();
  out.turns.clear();
  for (const auto& t : rec.turns) {
    const auto parsed = parse(t.text, rec.num_markers, ParseMode::strict);
    GroundedResponse mapped;
    for (const auto& seg : parsed.segments()) {
      if (const auto* text = std::get_if<std::string>(&seg)) {
        mapped.add_text(*text);
        continue;
      }
      GroundedSpan span = std::get<GroundedSpan>(seg);
      for (auto& r : span.referents) {
        auto it = label_to_proxy.find(r);
        if (it == label_to_proxy.end()) throw Error(Errc::unknown_referent, "no proxy for marker " + std::to_string(r));
        r = it->second;
        out.referenced_labels.insert(r);
      }
      mapped.add_span(std::move(span));
    }
    out.turns.push_back({t.role, serialize(mapped, registry_size)});
  }
  out.num_markers = registry_size;
  out.registry_ref = registry_ref;
  return out;
}

// Maps marker labels to registry proxies by box: exact match first, else
// the highest-IoU entry (which must reach 0.5).
inline std::map<std::size_t, std::size_t> label_proxy_map(const MarkedImageSpec& spec, const ProxyRegistry& reg) {
  std::map<std::size_t, std::size_t> out;
  for (const auto& m : spec.markers) {
    std::size_t best = 0;
    double best_iou = -1.0;
    for (const auto& e : reg.entries()) {
      if (e.source_box == m.box) {
        best = e.proxy_index;
        best_iou = 2.0;
        break;
      }
      const double v = iou(e.source_box, m.box);
      if (v > best_iou) {
        best_iou = v;
        best = e.proxy_index;
      }
    }
    if (best == 0 || best_iou < 0.5) throw Error(Errc::unknown_referent, "no registry entry for marker " + std::to_string(m.label));
    out[m.label] = best;
  }
  return out;
}

inline nlohmann::json record_to_json(const ConversationRecord& r, double iou_threshold) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : r.turns) turns.push_back({{"role", t.role}, {"text", t.text}});
  nlohmann::json j = {{"image_id", r.image_id},
                      {"turns", turns},
                      {"referenced_labels", r.referenced_labels},
                      {"num_markers", r.num_markers},
                      {"valid", r.valid},
                      {"registry_ref", r.registry_ref ? nlohmann::json(*r.registry_ref) : nlohmann::json(nullptr)},
                      {"iou_threshold", iou_threshold},
                      {"generator", kGeneratorId}};
  if (!r.valid) j["error"] = r.error;
  return j;
}

inline ConversationRecord record_from_json(const nlohmann::json& j) {
  try {
    ConversationRecord r;
    r.image_id = j.at("image_id").get<std::int64_t>();
    for (const auto& t : j.at("turns")) r.turns.push_back({t.at("role").get<std::string>(), t.at("text").get<std::string>()});
    r.referenced_labels = j.value("referenced_labels", std::set<std::size_t>{});
    r.num_markers = j.value("num_markers", std::size_t{0});
    r.valid = j.value("valid", false);
    r.error = j.value("error", std::string{});
    if (j.contains("registry_ref") && j["registry_ref"].is_string()) r.registry_ref = j["registry_ref"].get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("conversation record: ") + e.what());
  }
}

// --- inputs ----------------------------------------------------------------

struct VgImage {
  std::int64_t image_id = 0;
  std::optional<std::int64_t> coco_id;
  std::vector<RegionAnnotation> regions;
};

// Visual Genome style: [{"id"|"image_id", "coco_id"?, "regions": [{"x","y",
// "width","height","phrase"}]}].
inline std::vector<VgImage> parse_vg_regions(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(Errc::parse_error, "region file: top level must be an array");
  std::vector<VgImage> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    const auto& im = j[i];
    if (!im.is_object() || !im.contains("regions") || !im["regions"].is_array()) {
      throw Error(Errc::parse_error, where + ": needs a regions array");
    }
    VgImage v;
    if (im.contains("id")) {
      v.image_id = im["id"].get<std::int64_t>();
    } else if (im.contains("image_id")) {
      v.image_id = im["image_id"].get<std::int64_t>();
    } else {
      throw Error(Errc::parse_error, where + ": needs id or image_id");
    }
    if (im.contains("coco_id") && im["coco_id"].is_number_integer()) v.coco_id = im["coco_id"].get<std::int64_t>();
    for (std::size_t r = 0; r < im["regions"].size(); ++r) {
      const auto& reg = im["regions"][r];
      const std::string rw = where + ".regions[" + std::to_string(r) + "]";
      if (!reg.is_object() || !reg.contains("x") || !reg.contains("y") || !reg.contains("width") ||
          !reg.contains("height") || !reg.contains("phrase") || !reg["phrase"].is_string()) {
        throw Error(Errc::parse_error, rw + ": needs x, y, width, height, phrase");
      }
      const double w = reg["width"].get<double>();
      const double h = reg["height"].get<double>();
      if (!(w >= 0.0 && h >= 0.0)) throw Error(Errc::parse_error, rw + ": negative size");
      auto phrase = reg["phrase"].get<std::string>();
      if (phrase.empty()) continue;
      v.regions.push_back({from_xywh(reg["x"].get<double>(), reg["y"].get<double>(), w, h), std::move(phrase)});
    }
    out.push_back(std::move(v));
  }
  return out;
}

// COCO captions keyed by COCO image id.
inline std::map<std::int64_t, std::vector<std::string>> parse_coco_captions(const nlohmann::json& j) {
  std::map<std::int64_t, std::vector<std::string>> out;
  if (!j.is_object() || !j.contains("annotations") || !j["annotations"].is_array()) {
    throw Error(Errc::parse_error, "captions: expected {\"annotations\": [...]}");
  }
  for (const auto& a : j["annotations"]) {
    if (!a.contains("image_id") || !a.contains("caption")) throw Error(Errc::parse_error, "captions: entry needs image_id and caption");
    out[a["image_id"].get<std::int64_t>()].push_back(a["caption"].get<std::string>());
  }
  return out;
}

// VG question answers keyed by VG image id.
inline std::map<std::int64_t, std::vector<std::pair<std::string, std::string>>> parse_vg_qa(const nlohmann::json& j) {
  std::map<std::int64_t, std::vector<std::pair<std::string, std::string>>> out;
  if (!j.is_array()) throw Error(Errc::parse_error, "qa file: top level must be an array");
  for (const auto& im : j) {
    const auto id = im.contains("id") ? im["id"].get<std::int64_t>() : im.at("image_id").get<std::int64_t>();
    for (const auto& qa : im.value("qas", nlohmann::json::array())) {
      out[id].emplace_back(qa.at("question").get<std::string>(), qa.at("answer").get<std::string>());
    }
  }
  return out;
}

// Synthetic VG-style images: 4..15 regions, some of them near-duplicates of
// earlier ones so the de-overlap step has work to do.
inline std::vector<VgImage> synthetic_vg_images(std::size_t count, std::uint64_t seed, double width = 640.0,
                                                double height = 480.0) {
  static const char* kNouns[] = {"dog", "man", "frisbee", "bench", "tree", "car", "woman", "bicycle",
                                 "cup", "table", "window", "cat", "umbrella", "lamp", "boat"};
  static const char* kAdjectives[] = {"red", "small", "wooden", "white", "large", "old", "striped", "shiny"};
  Rng rng(derive_seed(seed, "synthetic_vg"));
  std::vector<VgImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    VgImage v;
    v.image_id = static_cast<std::int64_t>(i + 1);
    v.coco_id = static_cast<std::int64_t>(100000 + i);
    const auto n = static_cast<std::size_t>(rng.between(4, 15));
    for (std::size_t r = 0; r < n; ++r) {
      BoundingBox b;
      if (!v.regions.empty() && rng.chance(0.3)) {
        const auto& src = v.regions[rng.below(v.regions.size())].box;
        const double dx = rng.uniform(-0.05, 0.05) * src.width();
        const double dy = rng.uniform(-0.05, 0.05) * src.height();
        b = clamp_to({src.x_min + dx, src.y_min + dy, src.x_max + dx, src.y_max + dy}, width, height);
      } else {
        const double w = rng.uniform(20.0, width / 2.0);
        const double h = rng.uniform(20.0, height / 2.0);
        const double x = rng.uniform(0.0, width - w);
        const double y = rng.uniform(0.0, height - h);
        b = {x, y, x + w, y + h};
      }
      const std::string desc = std::string("a ") + kAdjectives[rng.below(std::size(kAdjectives))] + " " +
                               kNouns[rng.below(std::size(kNouns))];
      v.regions.push_back({b, desc});
    }
    out.push_back(std::move(v));
  }
  return out;
}

// --- end-to-end generation -------------------------------------------------

struct InstructConfig {
  FilterConfig filter;
  bool include_sparse = false;
  bool use_fewshot = true;
  std::uint64_t seed = 0;
  std::size_t max_in_flight = 1;
};

struct InstructImageResult {
  std::int64_t image_id = 0;
  FilterResult filtered;
  std::optional<MarkedImageSpec> markers;
  std::optional<ConversationRecord> record;  // empty when skipped
  std::string skip_reason;
};

struct ContextSources {
  std::map<std::int64_t, std::vector<std::string>> captions_by_coco_id;
  std::map<std::int64_t, std::vector<std::pair<std::string, std::string>>> qa_by_image_id;
};

inline VlmContext build_context(const VgImage& img, const FilterResult& filtered, const ContextSources& sources) {
  VlmContext ctx;
  for (std::size_t i = 0; i < filtered.regions.size(); ++i) ctx.region_descriptions[i + 1] = filtered.regions[i].description;
  if (img.coco_id) {
    if (auto it = sources.captions_by_coco_id.find(*img.coco_id); it != sources.captions_by_coco_id.end()) {
      ctx.image_descriptions = it->second;
    }
  }
  if (auto it = sources.qa_by_image_id.find(img.image_id); it != sources.qa_by_image_id.end()) ctx.qa_pairs = it->second;
  return ctx;
}

inline std::vector<InstructImageResult> run_instruct(std::span<const VgImage> images, const ContextSources& sources,
                                                     VlmClient& client, const InstructConfig& cfg) {
  std::vector<InstructImageResult> results(images.size());
  std::vector<VlmRequest> requests;
  std::vector<std::size_t> request_owner;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto& res = results[i];
    res.image_id = images[i].image_id;
    res.filtered = filter_overlaps(images[i].regions, cfg.filter);
    if (res.filtered.regions.empty()) {
      res.skip_reason = "no regions";
      continue;
    }
    if (res.filtered.sparse && !cfg.include_sparse) {
      res.skip_reason = "sparse image";
      continue;
    }
    res.markers = place_markers(images[i].image_id, res.filtered.regions);
    const auto ctx = build_context(images[i], res.filtered, sources);
    requests.push_back(assemble_request(*res.markers, ctx, cfg.use_fewshot ? default_fewshot() : std::vector<FewShotExample>{},
                                        derive_seed(cfg.seed, "image/" + std::to_string(images[i].image_id))));
    request_owner.push_back(i);
  }
  const auto replies = complete_all(client, requests, cfg.max_in_flight);
  for (std::size_t r = 0; r < replies.size(); ++r) {
    auto& res = results[request_owner[r]];
    if (replies[r].error) {
      ConversationRecord rec;
      rec.image_id = res.image_id;
      rec.num_markers = res.markers->markers.size();
      rec.error = "client error: " + *replies[r].error;
      res.record = rec;
    } else {
      res.record = postfilter_one(res.image_id, replies[r].text, res.markers->markers.size());
    }
  }
  return results;
}

}  // namespace loctok
