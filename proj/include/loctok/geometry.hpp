#pragma once

// Axis-aligned box arithmetic. Boxes are corner form (x_min, y_min, x_max,
// y_max) in absolute continuous pixel units.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/error.hpp"
#include "loctok/testing/hooks.hpp"

namespace loctok {

struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min <= x_max && y_min <= y_max;
  }

  bool contains(const BoundingBox& o) const {
    return x_min <= o.x_min && y_min <= o.y_min && x_max >= o.x_max && y_max >= o.y_max;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct ScoredBox {
  BoundingBox box;
  double score = 0.0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

enum class SizeBucket { small, medium, large };

inline const char* to_string(SizeBucket b) {
  switch (b) {
    case SizeBucket::small: return "small";
    case SizeBucket::medium: return "medium";
    case SizeBucket::large: return "large";
  }
  return "?";
}

inline BoundingBox make_box(double x_min, double y_min, double x_max, double y_max) {
  BoundingBox b{x_min, y_min, x_max, y_max};
  if (!b.valid()) throw Error(Errc::invalid_argument, "invalid box");
  return b;
}

// COCO [x, y, w, h] to corner form.
inline BoundingBox from_xywh(double x, double y, double w, double h) {
  return make_box(x, y, x + w, y + h);
}

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline BoundingBox enclosing_box(std::span<const BoundingBox> boxes) {
  if (boxes.empty()) throw Error(Errc::empty_box_set);
  BoundingBox out = boxes.front();
  for (const auto& b : boxes.subspan(1)) {
    out.x_min = std::min(out.x_min, b.x_min);
    out.y_min = std::min(out.y_min, b.y_min);
    out.x_max = std::max(out.x_max, b.x_max);
    out.y_max = std::max(out.y_max, b.y_max);
  }
  return out;
}

inline BoundingBox clamp_to(const BoundingBox& b, double width, double height) {
  return {std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height),
          std::clamp(b.x_max, 0.0, width), std::clamp(b.y_max, 0.0, height)};
}

// Indices sorted by descending score; equal scores keep input order.
inline std::vector<std::size_t> order_by_score(std::span<const ScoredBox> boxes) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  return order;
}

// Greedy non-maximum suppression. A candidate is suppressed when its IoU with
// an already-kept box is strictly greater than the threshold. Returns kept
// input indices in descending-score order.
inline std::vector<std::size_t> nms(std::span<const ScoredBox> candidates, double iou_threshold) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw Error(Errc::invalid_argument, "nms threshold outside [0,1]");
  }
  std::vector<std::size_t> kept;
  for (std::size_t idx : order_by_score(candidates)) {
    const auto& box = candidates[idx].box;
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(candidates[k].box, box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

inline constexpr double kSmallAreaLimit = 32.0 * 32.0;
inline constexpr double kLargeAreaLimit = 96.0 * 96.0;

inline SizeBucket size_bucket(const BoundingBox& box) {
  const double a = box.area();
  if (a < kSmallAreaLimit) return SizeBucket::small;
  if (a > kLargeAreaLimit) return SizeBucket::large;
  return SizeBucket::medium;
}

// IoU threshold test used by every matching rule: inclusive at the boundary.
inline bool iou_hits(double iou_value, double threshold) {
  if (testing::hooks().corrupt_iou_boundary.load(std::memory_order_relaxed)) {
    return iou_value > threshold;
  }
  return iou_value >= threshold;
}

// JSON: [x_min, y_min, x_max, y_max].
inline void to_json(nlohmann::json& j, const BoundingBox& b) {
  j = nlohmann::json::array({b.x_min, b.y_min, b.x_max, b.y_max});
}

inline void from_json(const nlohmann::json& j, BoundingBox& b) {
  if (!j.is_array() || j.size() != 4) {
    throw Error(Errc::parse_error, "box must be an array of 4 numbers");
  }
  for (const auto& v : j) {
    if (!v.is_number()) throw Error(Errc::parse_error, "box must be an array of 4 numbers");
  }
  b = BoundingBox{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw Error(Errc::parse_error, "box coordinates out of order or not finite");
}

}  // namespace loctok
