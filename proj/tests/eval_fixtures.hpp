#pragma once

#include <vector>

#include "loctok/eval.hpp"

// Five disjoint GT boxes; the top-5 predictions hit three of them. A sixth,
// low-scoring prediction would hit a fourth but falls outside the top-k.
inline loctok::GroundingItem three_of_five_item() {
  return {1, "cup", {{0, 0, 10, 10}, {20, 0, 30, 10}, {40, 0, 50, 10}, {60, 0, 70, 10}, {80, 0, 90, 10}}};
}

inline loctok::PredictionList three_of_five_preds() {
  return {{{0, 0, 10, 10}, 0.9},     {{20, 0, 30, 10}, 0.8},     {{40, 0, 50, 10}, 0.7},
          {{200, 200, 210, 210}, 0.6}, {{300, 300, 310, 310}, 0.5}, {{60, 0, 70, 10}, 0.1}};
}

// One GT and one prediction at IoU exactly 0.70.
inline loctok::GroundingItem iou70_item() { return {2, "book", {{0, 0, 10, 10}}}; }
inline loctok::PredictionList iou70_preds() { return {{{0, 0, 10, 7}, 1.0}}; }

// Two far-apart GT boxes; the prediction covers only one of them.
inline loctok::GroundingItem two_cluster_item() { return {3, "bird", {{0, 0, 1, 1}, {9, 9, 10, 10}}}; }
inline loctok::PredictionList two_cluster_preds() { return {{{0, 0, 1, 1}, 1.0}}; }
