#pragma once

// Grounding evaluation: REC accuracy and multi-target recall under the ANY,
// MERGED-BOXES and AS-MANY protocols, averaged over IoU 0.50:0.05:0.95.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/error.hpp"
#include "loctok/geometry.hpp"
#include "loctok/rng.hpp"

namespace loctok {

struct GroundingItem {
  std::int64_t image_id = 0;
  std::string query;
  std::vector<BoundingBox> gt_boxes;

  friend bool operator==(const GroundingItem&, const GroundingItem&) = default;
};

using PredictionList = std::vector<ScoredBox>;

enum class Protocol { any, merged, as_many };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::any: return "any";
    case Protocol::merged: return "merged";
    case Protocol::as_many: return "as_many";
  }
  return "?";
}

inline Protocol protocol_from_string(std::string_view s) {
  if (s == "any") return Protocol::any;
  if (s == "merged" || s == "merged_boxes" || s == "merged-boxes") return Protocol::merged;
  if (s == "as_many" || s == "as-many") return Protocol::as_many;
  throw Error(Errc::invalid_argument, "unknown protocol " + std::string(s));
}

inline constexpr std::size_t kNumThresholds = 10;
inline constexpr std::array<double, kNumThresholds> kIouThresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                                      0.75, 0.80, 0.85, 0.90, 0.95};
inline constexpr double kRecThreshold = 0.5;

// Predictions sorted by descending score, ties in input order, cut to k.
inline PredictionList top_k(std::span<const ScoredBox> preds, std::size_t k) {
  const auto order = order_by_score(preds);
  PredictionList out;
  for (std::size_t i = 0; i < order.size() && i < k; ++i) out.push_back(preds[order[i]]);
  return out;
}

// Score-ordered one-to-one matching: each prediction takes the unmatched GT
// with the highest IoU (lowest index on ties) if that IoU reaches t.
inline std::size_t greedy_match(std::span<const ScoredBox> preds_sorted, std::span<const BoundingBox> gts,
                                double t) {
  std::vector<bool> taken(gts.size(), false);
  std::size_t matched = 0;
  for (const auto& p : preds_sorted) {
    double best = -1.0;
    std::size_t best_idx = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(p.box, gts[g]);
      if (v > best) {
        best = v;
        best_idx = g;
      }
    }
    if (best_idx < gts.size() && iou_hits(best, t)) {
      taken[best_idx] = true;
      ++matched;
    }
  }
  return matched;
}

// Maximum-cardinality matching over pairs with IoU >= t (augmenting paths).
inline std::size_t optimal_match(std::span<const ScoredBox> preds, std::span<const BoundingBox> gts, double t) {
  std::vector<std::vector<std::size_t>> adj(preds.size());
  for (std::size_t p = 0; p < preds.size(); ++p) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (iou_hits(iou(preds[p].box, gts[g]), t)) adj[p].push_back(g);
    }
  }
  std::vector<std::size_t> owner(gts.size(), preds.size());
  std::vector<bool> seen;
  auto augment = [&](auto&& self, std::size_t p) -> bool {
    for (std::size_t g : adj[p]) {
      if (seen[g]) continue;
      seen[g] = true;
      if (owner[g] == preds.size() || self(self, owner[g])) {
        owner[g] = p;
        return true;
      }
    }
    return false;
  };
  std::size_t matched = 0;
  for (std::size_t p = 0; p < preds.size(); ++p) {
    seen.assign(gts.size(), false);
    if (augment(augment, p)) ++matched;
  }
  return matched;
}

struct MatchOptions {
  bool optimal = false;  // maximum matching instead of greedy
};

inline double recall_any(const GroundingItem& item, std::span<const ScoredBox> preds, double t) {
  for (const auto& p : preds) {
    for (const auto& g : item.gt_boxes) {
      if (iou_hits(iou(p.box, g), t)) return 1.0;
    }
  }
  return 0.0;
}

inline double recall_merged(const GroundingItem& item, std::span<const ScoredBox> preds, double t) {
  if (preds.empty() || item.gt_boxes.empty()) return 0.0;
  const auto best = top_k(preds, 1);
  return iou_hits(iou(best.front().box, enclosing_box(item.gt_boxes)), t) ? 1.0 : 0.0;
}

inline double recall_as_many(const GroundingItem& item, std::span<const ScoredBox> preds, double t,
                             MatchOptions opts = {}) {
  const std::size_t k = item.gt_boxes.size();
  if (k == 0) return 0.0;
  const auto chosen = top_k(preds, k);
  const std::size_t matched =
      opts.optimal ? optimal_match(chosen, item.gt_boxes, t) : greedy_match(chosen, item.gt_boxes, t);
  return static_cast<double>(matched) / static_cast<double>(k);
}

inline double recall(Protocol protocol, const GroundingItem& item, std::span<const ScoredBox> preds, double t,
                     MatchOptions opts = {}) {
  switch (protocol) {
    case Protocol::any: return recall_any(item, preds, t);
    case Protocol::merged: return recall_merged(item, preds, t);
    case Protocol::as_many: return recall_as_many(item, preds, t, opts);
  }
  return 0.0;
}

inline void require_rec_item(const GroundingItem& item) {
  if (item.gt_boxes.size() != 1) {
    throw Error(Errc::not_a_rec_item, "not a REC item: image " + std::to_string(item.image_id) + " has " +
                                          std::to_string(item.gt_boxes.size()) + " gt boxes");
  }
}

inline bool rec_hit(const GroundingItem& item, std::span<const ScoredBox> preds) {
  require_rec_item(item);
  if (preds.empty()) return false;
  return iou_hits(iou(top_k(preds, 1).front().box, item.gt_boxes.front()), kRecThreshold);
}

inline double rec_accuracy(std::span<const GroundingItem> items, std::span<const PredictionList> preds) {
  if (items.size() != preds.size()) throw Error(Errc::invalid_argument, "items and predictions differ in length");
  if (items.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) hits += rec_hit(items[i], preds[i]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

using ThresholdRecalls = std::array<double, kNumThresholds>;

struct ItemRecord {
  std::int64_t image_id = 0;
  std::string query;
  std::size_t num_gt = 0;
  std::size_t num_preds = 0;
  ThresholdRecalls recalls{};
  // Per size bucket (small, medium, large); empty when the item has no GT
  // in that bucket or the protocol is not AS-MANY.
  std::array<std::optional<ThresholdRecalls>, 3> bucket_recalls;
  std::optional<bool> rec_hit;
};

struct ReportOptions {
  MatchOptions match;
  bool rec = false;       // also compute Acc@0.5 (every item must have one GT)
  std::size_t jobs = 1;   // worker threads for per-item evaluation
};

struct EvalReport {
  Protocol protocol = Protocol::as_many;
  bool optimal_matching = false;
  std::size_t num_items = 0;
  double ar = 0.0;
  double ar_at_50 = 0.0;
  double ar_at_75 = 0.0;
  std::array<std::optional<double>, 3> ar_bucket;  // small, medium, large
  std::array<std::size_t, 3> bucket_items{};
  std::optional<double> acc_at_50;
  ThresholdRecalls per_threshold{};
  std::vector<ItemRecord> items;
};

inline ItemRecord evaluate_item(const GroundingItem& item, std::span<const ScoredBox> preds, Protocol protocol,
                                const ReportOptions& opts) {
  ItemRecord rec;
  rec.image_id = item.image_id;
  rec.query = item.query;
  rec.num_gt = item.gt_boxes.size();
  rec.num_preds = preds.size();
  for (std::size_t t = 0; t < kNumThresholds; ++t) {
    rec.recalls[t] = recall(protocol, item, preds, kIouThresholds[t], opts.match);
  }
  if (protocol == Protocol::as_many) {
    for (int b = 0; b < 3; ++b) {
      GroundingItem sub{item.image_id, item.query, {}};
      for (const auto& g : item.gt_boxes) {
        if (static_cast<int>(size_bucket(g)) == b) sub.gt_boxes.push_back(g);
      }
      if (sub.gt_boxes.empty()) continue;
      ThresholdRecalls r{};
      for (std::size_t t = 0; t < kNumThresholds; ++t) {
        r[t] = recall_as_many(sub, preds, kIouThresholds[t], opts.match);
      }
      rec.bucket_recalls[static_cast<std::size_t>(b)] = r;
    }
  }
  if (opts.rec) rec.rec_hit = rec_hit(item, preds);
  return rec;
}

namespace detail {

// Order-independent mean: values are summed in sorted order.
inline double canonical_mean(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

inline double mean_over_thresholds(std::span<const std::vector<double>> per_threshold) {
  double sum = 0.0;
  for (const auto& v : per_threshold) sum += canonical_mean(v);
  return sum / static_cast<double>(per_threshold.size());
}

}  // namespace detail

// Per-item evaluation may run on several threads; aggregation sums sorted
// values, so the report does not depend on item order or worker count.
inline EvalReport compute_report(std::span<const GroundingItem> items, std::span<const PredictionList> preds,
                                 Protocol protocol, const ReportOptions& opts = {}) {
  if (items.size() != preds.size()) throw Error(Errc::invalid_argument, "items and predictions differ in length");
  if (opts.rec) {
    for (const auto& it : items) require_rec_item(it);
  }
  EvalReport report;
  report.protocol = protocol;
  report.optimal_matching = opts.match.optimal;
  report.num_items = items.size();
  report.items.resize(items.size());

  const std::size_t jobs = std::clamp<std::size_t>(opts.jobs, 1, std::max<std::size_t>(1, items.size()));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) report.items[i] = evaluate_item(items[i], preds[i], protocol, opts);
  };
  if (jobs == 1) {
    work(0, items.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (items.size() + jobs - 1) / jobs;
    for (std::size_t j = 0; j < jobs; ++j) {
      const std::size_t begin = j * chunk;
      const std::size_t end = std::min(items.size(), begin + chunk);
      if (begin >= end) break;
      pool.emplace_back(work, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  std::vector<std::vector<double>> by_threshold(kNumThresholds);
  std::array<std::vector<std::vector<double>>, 3> by_bucket;
  for (auto& b : by_bucket) b.resize(kNumThresholds);
  std::size_t hits = 0;
  for (const auto& rec : report.items) {
    for (std::size_t t = 0; t < kNumThresholds; ++t) by_threshold[t].push_back(rec.recalls[t]);
    for (std::size_t b = 0; b < 3; ++b) {
      if (!rec.bucket_recalls[b]) continue;
      for (std::size_t t = 0; t < kNumThresholds; ++t) by_bucket[b][t].push_back((*rec.bucket_recalls[b])[t]);
    }
    if (rec.rec_hit && *rec.rec_hit) ++hits;
  }
  for (std::size_t t = 0; t < kNumThresholds; ++t) report.per_threshold[t] = detail::canonical_mean(by_threshold[t]);
  report.ar = detail::mean_over_thresholds(by_threshold);
  report.ar_at_50 = report.per_threshold[0];
  report.ar_at_75 = report.per_threshold[5];
  if (protocol == Protocol::as_many) {
    for (std::size_t b = 0; b < 3; ++b) {
      report.bucket_items[b] = by_bucket[b][0].size();
      report.ar_bucket[b] = detail::mean_over_thresholds(by_bucket[b]);
    }
  }
  if (opts.rec) {
    report.acc_at_50 = items.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(items.size());
  }
  return report;
}

namespace detail {

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& rec : r.items) {
    nlohmann::json j = {{"image_id", rec.image_id}, {"query", rec.query}, {"num_gt", rec.num_gt},
                        {"num_preds", rec.num_preds}, {"recalls", rec.recalls}};
    if (rec.rec_hit) j["rec_hit"] = *rec.rec_hit;
    items.push_back(std::move(j));
  }
  return {{"format", "loctok-eval-report/1"},
          {"protocol", to_string(r.protocol)},
          {"matching", r.optimal_matching ? "optimal" : "greedy"},
          {"iou_thresholds", kIouThresholds},
          {"num_items", r.num_items},
          {"ar", r.ar},
          {"ar_at_50", r.ar_at_50},
          {"ar_at_75", r.ar_at_75},
          {"ar_small", detail::optional_json(r.ar_bucket[0])},
          {"ar_medium", detail::optional_json(r.ar_bucket[1])},
          {"ar_large", detail::optional_json(r.ar_bucket[2])},
          {"bucket_items", r.bucket_items},
          {"acc_at_50", detail::optional_json(r.acc_at_50)},
          {"per_threshold", r.per_threshold},
          {"items", items}};
}

// One `key=value` line per metric, fixed 6-decimal formatting.
inline std::string report_metrics_text(const EvalReport& r) {
  std::ostringstream out;
  out << "protocol=" << to_string(r.protocol) << '\n';
  out << "matching=" << (r.optimal_matching ? "optimal" : "greedy") << '\n';
  out << "items=" << r.num_items << '\n';
  out << "AR=" << detail::fixed6(r.ar) << '\n';
  out << "AR@0.5=" << detail::fixed6(r.ar_at_50) << '\n';
  out << "AR@0.75=" << detail::fixed6(r.ar_at_75) << '\n';
  const char* names[3] = {"AR@s", "AR@m", "AR@l"};
  for (std::size_t b = 0; b < 3; ++b) {
    if (r.ar_bucket[b]) out << names[b] << '=' << detail::fixed6(*r.ar_bucket[b]) << '\n';
  }
  if (r.acc_at_50) out << "Acc@0.5=" << detail::fixed6(*r.acc_at_50) << '\n';
  return out.str();
}

// --- benchmark construction ---------------------------------------------

struct Category {
  std::int64_t id = 0;
  std::string name;
};

struct ImageInfo {
  std::int64_t id = 0;
  double width = 0.0;
  double height = 0.0;
};

struct Annotation {
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  BoundingBox box;
};

struct AnnotatedDataset {
  std::vector<Category> categories;
  std::vector<ImageInfo> images;
  std::vector<Annotation> annotations;
};

struct BenchmarkSpec {
  std::size_t max_images_per_category = 5;
  std::uint64_t seed = 0;
};

struct Benchmark {
  std::vector<GroundingItem> items;
  std::vector<std::string> notes;  // skipped categories etc.
  std::size_t num_categories = 0;  // categories contributing items
  std::size_t num_images = 0;      // distinct images across items

  double mean_gt_per_item() const {
    if (items.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& it : items) n += it.gt_boxes.size();
    return static_cast<double>(n) / static_cast<double>(items.size());
  }
};

// For each category (ascending id) sample min(max, available) images with
// Rng(derive_seed(seed, "bench/<category id>")); one item per sampled image
// holding every box of that category. Items are ordered by category id, then
// image id.
inline Benchmark build_benchmark(const AnnotatedDataset& data, const BenchmarkSpec& spec) {
  std::map<std::int64_t, std::map<std::int64_t, std::vector<BoundingBox>>> boxes;  // cat -> image -> boxes
  for (const auto& a : data.annotations) boxes[a.category_id][a.image_id].push_back(a.box);

  std::vector<Category> cats = data.categories;
  std::sort(cats.begin(), cats.end(), [](const Category& a, const Category& b) { return a.id < b.id; });

  Benchmark bench;
  std::set<std::int64_t> images;
  for (const auto& cat : cats) {
    auto it = boxes.find(cat.id);
    if (it == boxes.end() || it->second.empty()) {
      bench.notes.push_back("category " + std::to_string(cat.id) + " (" + cat.name + ") has no images; skipped");
      continue;
    }
    std::vector<std::int64_t> candidates;
    for (const auto& [image_id, _] : it->second) candidates.push_back(image_id);
    Rng rng(derive_seed(spec.seed, "bench/" + std::to_string(cat.id)));
    const std::size_t k = std::min(spec.max_images_per_category, candidates.size());
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
      std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(k);
    std::sort(candidates.begin(), candidates.end());
    for (auto image_id : candidates) {
      bench.items.push_back({image_id, cat.name, it->second.at(image_id)});
      images.insert(image_id);
    }
    ++bench.num_categories;
  }
  bench.num_images = images.size();
  return bench;
}

inline nlohmann::json item_to_json(const GroundingItem& it) {
  return {{"image_id", it.image_id}, {"query", it.query}, {"gt_boxes", it.gt_boxes}};
}

inline nlohmann::json benchmark_to_json(const Benchmark& b, const BenchmarkSpec& spec) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : b.items) items.push_back(item_to_json(it));
  return {{"format", "loctok-benchmark/1"},
          {"generator", kGeneratorId},
          {"seed", spec.seed},
          {"max_images_per_category", spec.max_images_per_category},
          {"num_categories", b.num_categories},
          {"num_images", b.num_images},
          {"items", items}};
}

namespace detail {

inline std::int64_t json_id(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number_integer()) throw Error(Errc::parse_error, where + ": expected integer id");
  return j.get<std::int64_t>();
}

inline BoundingBox json_xywh(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4 || !std::all_of(j.begin(), j.end(), [](const auto& v) { return v.is_number(); })) {
    throw Error(Errc::parse_error, where + ": bbox must be [x, y, w, h]");
  }
  const double w = j[2].get<double>();
  const double h = j[3].get<double>();
  if (!(w >= 0.0) || !(h >= 0.0)) throw Error(Errc::parse_error, where + ": negative bbox size");
  return from_xywh(j[0].get<double>(), j[1].get<double>(), w, h);
}

inline const nlohmann::json& require_array(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    throw Error(Errc::parse_error, std::string("missing array \"") + key + "\"");
  }
  return j.at(key);
}

}  // namespace detail

inline nlohmann::json parse_json_text(std::string_view text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // Report the line containing the failing byte.
    const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw Error(Errc::parse_error, what + ": line " + std::to_string(line) + ": " + e.what());
  }
}

// COCO/LVIS-style annotations: images, annotations (bbox = [x, y, w, h]),
// categories.
inline AnnotatedDataset parse_coco(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(Errc::parse_error, "annotations: top level must be an object");
  AnnotatedDataset d;
  const auto& cats = detail::require_array(j, "categories");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    const auto& c = cats[i];
    if (!c.is_object() || !c.contains("id") || !c.contains("name") || !c["name"].is_string()) {
      throw Error(Errc::parse_error, where + ": needs id and name");
    }
    d.categories.push_back({detail::json_id(c["id"], where + ".id"), c["name"].get<std::string>()});
  }
  const auto& imgs = detail::require_array(j, "images");
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    const auto& im = imgs[i];
    if (!im.is_object() || !im.contains("id")) throw Error(Errc::parse_error, where + ": needs id");
    d.images.push_back({detail::json_id(im["id"], where + ".id"), im.value("width", 0.0), im.value("height", 0.0)});
  }
  const auto& anns = detail::require_array(j, "annotations");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    const auto& a = anns[i];
    if (!a.is_object() || !a.contains("image_id") || !a.contains("category_id") || !a.contains("bbox")) {
      throw Error(Errc::parse_error, where + ": needs image_id, category_id and bbox");
    }
    d.annotations.push_back({detail::json_id(a["image_id"], where + ".image_id"),
                             detail::json_id(a["category_id"], where + ".category_id"),
                             detail::json_xywh(a["bbox"], where + ".bbox")});
  }
  return d;
}

// Every (image, category) pair present in the dataset, without sampling.
inline std::vector<GroundingItem> items_from_dataset(const AnnotatedDataset& d) {
  BenchmarkSpec all{SIZE_MAX, 0};
  return build_benchmark(d, all).items;
}

inline std::vector<GroundingItem> items_from_json(const nlohmann::json& j) {
  if (j.is_object() && j.contains("images")) return items_from_dataset(parse_coco(j));
  if (!j.is_object() || !j.contains("items") || !j["items"].is_array()) {
    throw Error(Errc::parse_error, "annotations: expected a benchmark file (items) or COCO json (images)");
  }
  std::vector<GroundingItem> items;
  const auto& arr = j["items"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "items[" + std::to_string(i) + "]";
    const auto& it = arr[i];
    if (!it.is_object() || !it.contains("image_id") || !it.contains("query") || !it.contains("gt_boxes") ||
        !it["gt_boxes"].is_array() || !it["query"].is_string()) {
      throw Error(Errc::parse_error, where + ": needs image_id, query, gt_boxes");
    }
    GroundingItem g{detail::json_id(it["image_id"], where + ".image_id"), it["query"].get<std::string>(), {}};
    for (std::size_t b = 0; b < it["gt_boxes"].size(); ++b) {
      try {
        g.gt_boxes.push_back(it["gt_boxes"][b].get<BoundingBox>());
      } catch (const Error& e) {
        throw Error(Errc::parse_error, where + ".gt_boxes[" + std::to_string(b) + "]: " + e.what());
      }
    }
    if (g.gt_boxes.empty()) throw Error(Errc::parse_error, where + ": gt_boxes must be non-empty");
    items.push_back(std::move(g));
  }
  return items;
}

// Synthetic COCO-style dataset: category c gets between min_images and
// max_images images (drawn per category), each with 1..4 boxes of it. Images
// are shared across categories so that items overlap like real data.
inline AnnotatedDataset synthetic_dataset(std::size_t num_categories, std::size_t min_images, std::size_t max_images,
                                          std::uint64_t seed, std::size_t num_images = 0) {
  if (min_images < 1 || max_images < min_images) throw Error(Errc::invalid_argument, "need 1 <= min_images <= max_images");
  if (num_images == 0) num_images = std::max<std::size_t>(max_images, 2 * max_images);
  if (num_images < max_images) throw Error(Errc::invalid_argument, "num_images below max_images");
  Rng rng(derive_seed(seed, "synthetic_dataset"));
  AnnotatedDataset d;
  for (std::size_t i = 0; i < num_images; ++i) d.images.push_back({static_cast<std::int64_t>(i + 1), 640.0, 480.0});
  for (std::size_t c = 0; c < num_categories; ++c) {
    const auto cat_id = static_cast<std::int64_t>(c + 1);
    d.categories.push_back({cat_id, "category " + std::to_string(cat_id)});
    const auto n = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(min_images), static_cast<std::int64_t>(max_images)));
    std::vector<std::int64_t> ids;
    for (const auto& im : d.images) ids.push_back(im.id);
    rng.shuffle(ids);
    for (std::size_t k = 0; k < n; ++k) {
      const auto boxes = rng.between(1, 4);
      for (std::int64_t b = 0; b < boxes; ++b) {
        const double w = std::floor(rng.uniform(8.0, 240.0));
        const double h = std::floor(rng.uniform(8.0, 200.0));
        const double x = std::floor(rng.uniform(0.0, 640.0 - w));
        const double y = std::floor(rng.uniform(0.0, 480.0 - h));
        d.annotations.push_back({ids[k], cat_id, {x, y, x + w, y + h}});
      }
    }
  }
  return d;
}

// Noisy detector output: jittered copies of most GT boxes plus a few random
// boxes, with random scores.
inline std::vector<PredictionList> synthetic_predictions(std::span<const GroundingItem> items, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synthetic_predictions"));
  std::vector<PredictionList> out;
  for (const auto& it : items) {
    PredictionList preds;
    for (const auto& g : it.gt_boxes) {
      if (!rng.chance(0.8)) continue;
      const double s = rng.uniform(0.0, 0.25);
      BoundingBox b{g.x_min + rng.uniform(-s, s) * g.width(), g.y_min + rng.uniform(-s, s) * g.height(),
                    g.x_max + rng.uniform(-s, s) * g.width(), g.y_max + rng.uniform(-s, s) * g.height()};
      if (b.x_min > b.x_max) std::swap(b.x_min, b.x_max);
      if (b.y_min > b.y_max) std::swap(b.y_min, b.y_max);
      preds.push_back({b, rng.uniform(0.3, 1.0)});
    }
    const auto extra = rng.between(0, 3);
    for (std::int64_t e = 0; e < extra; ++e) {
      const double x = rng.uniform(0.0, 600.0);
      const double y = rng.uniform(0.0, 440.0);
      preds.push_back({{x, y, x + rng.uniform(5.0, 40.0), y + rng.uniform(5.0, 40.0)}, rng.uniform(0.0, 0.6)});
    }
    out.push_back(std::move(preds));
  }
  return out;
}

inline nlohmann::json dataset_to_coco(const AnnotatedDataset& d) {
  nlohmann::json images = nlohmann::json::array(), cats = nlohmann::json::array(), anns = nlohmann::json::array();
  for (const auto& im : d.images) images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}});
  for (const auto& c : d.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  std::int64_t next = 1;
  for (const auto& a : d.annotations) {
    anns.push_back({{"id", next++},
                    {"image_id", a.image_id},
                    {"category_id", a.category_id},
                    {"bbox", {a.box.x_min, a.box.y_min, a.box.width(), a.box.height()}}});
  }
  return {{"images", images}, {"categories", cats}, {"annotations", anns}};
}

using PredictionKey = std::pair<std::int64_t, std::string>;

// JSON Lines: {"image_id", "query", "boxes": [[x1,y1,x2,y2]...], "scores": [...]}.
inline std::map<PredictionKey, PredictionList> parse_predictions_jsonl(std::string_view text) {
  std::map<PredictionKey, PredictionList> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "predictions line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::parse_error, where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("image_id") || !j.contains("query") || !j.contains("boxes") ||
        !j.contains("scores") || !j["boxes"].is_array() || !j["scores"].is_array() || !j["query"].is_string()) {
      throw Error(Errc::parse_error, where + ": needs image_id, query, boxes, scores");
    }
    if (j["boxes"].size() != j["scores"].size()) throw Error(Errc::parse_error, where + ": boxes/scores length differ");
    PredictionKey key{detail::json_id(j["image_id"], where + " image_id"), j["query"].get<std::string>()};
    PredictionList list;
    for (std::size_t i = 0; i < j["boxes"].size(); ++i) {
      const auto& s = j["scores"][i];
      if (!s.is_number() || !std::isfinite(s.get<double>())) throw Error(Errc::parse_error, where + ": bad score");
      try {
        list.push_back({j["boxes"][i].get<BoundingBox>(), s.get<double>()});
      } catch (const Error& e) {
        throw Error(Errc::parse_error, where + ": boxes[" + std::to_string(i) + "]: " + e.what());
      }
    }
    if (!out.emplace(key, std::move(list)).second) {
      throw Error(Errc::parse_error, where + ": duplicate prediction for image " + std::to_string(key.first) +
                                         " query \"" + key.second + "\"");
    }
  }
  return out;
}

// Predictions aligned to items; items without predictions get an empty list.
inline std::vector<PredictionList> align_predictions(std::span<const GroundingItem> items,
                                                     const std::map<PredictionKey, PredictionList>& preds) {
  std::vector<PredictionList> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    auto found = preds.find({it.image_id, it.query});
    out.push_back(found == preds.end() ? PredictionList{} : found->second);
  }
  return out;
}

inline std::string predictions_to_jsonl(std::span<const GroundingItem> items, std::span<const PredictionList> preds) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    nlohmann::json boxes = nlohmann::json::array();
    nlohmann::json scores = nlohmann::json::array();
    for (const auto& p : preds[i]) {
      boxes.push_back(p.box);
      scores.push_back(p.score);
    }
    out += nlohmann::json{{"image_id", items[i].image_id}, {"query", items[i].query}, {"boxes", boxes},
                          {"scores", scores}}
               .dump();
    out += '\n';
  }
  return out;
}

}  // namespace loctok
