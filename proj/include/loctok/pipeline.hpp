#pragma once

// End-to-end tokenization run: image -> toy encoder -> pyramids -> proposals
// -> post-processing -> proxy registry -> prompt -> multimodal sequence.
// Returns every artifact as bytes; the caller decides where to write them.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/config.hpp"
#include "loctok/grammar.hpp"
#include "loctok/region_pipeline.hpp"
#include "loctok/vision_tokenizer.hpp"

namespace loctok {

struct Fixture {
  ImageArray image;
  std::vector<BoundingBox> gt_boxes;
};

// Gradient background with one flat-coloured rectangle per box.
inline Fixture make_fixture(std::size_t size, std::size_t num_boxes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "fixture"));
  Fixture f{ImageArray(size, size, 3), {}};
  const double s = static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      f.image.at(y, x, 0) = static_cast<double>(x) / s;
      f.image.at(y, x, 1) = static_cast<double>(y) / s;
      f.image.at(y, x, 2) = 0.5;
    }
  }
  for (std::size_t i = 0; i < num_boxes; ++i) {
    const double w = std::floor(rng.uniform(0.05, 0.45) * s);
    const double h = std::floor(rng.uniform(0.05, 0.45) * s);
    const double x = std::floor(rng.uniform(0.0, s - w));
    const double y = std::floor(rng.uniform(0.0, s - h));
    const double colour[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    f.gt_boxes.push_back({x, y, x + w, y + h});
    for (auto yy = static_cast<std::size_t>(y); yy < static_cast<std::size_t>(y + h); ++yy) {
      for (auto xx = static_cast<std::size_t>(x); xx < static_cast<std::size_t>(x + w); ++xx) {
        for (std::size_t c = 0; c < 3; ++c) f.image.at(yy, xx, c) = colour[c];
      }
    }
  }
  return f;
}

// Binary PPM (P6, maxval 255) to an RGB array in [0, 1].
inline ImageArray decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P6") throw Error(Errc::parse_error, "image: only binary PPM (P6) is supported");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw Error(Errc::parse_error, "image: bad PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw Error(Errc::parse_error, "image: PPM must be 8-bit and non-empty");
  ++pos;
  if (bytes.size() < pos + w * h * 3) throw Error(Errc::parse_error, "image: truncated PPM data");
  ImageArray img(h, w, 3);
  for (std::size_t i = 0; i < w * h * 3; ++i) img.data[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return img;
}

inline std::vector<RegionProposal> proposals_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(Errc::parse_error, "proposals: expected an array");
  std::vector<RegionProposal> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& p = j[i];
    if (!p.is_object() || !p.contains("box") || !p.contains("objectness") || !p["objectness"].is_number()) {
      throw Error(Errc::parse_error, "proposals[" + std::to_string(i) + "]: needs box and objectness");
    }
    out.push_back({p["box"].get<BoundingBox>(), p["objectness"].get<double>(), false});
  }
  return out;
}

inline std::vector<BoundingBox> boxes_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(Errc::parse_error, "user boxes: expected an array of [x1,y1,x2,y2]");
  std::vector<BoundingBox> out;
  for (const auto& b : j) out.push_back(b.get<BoundingBox>());
  return out;
}

struct PipelineInputs {
  std::optional<ImageArray> image;                     // default: synthetic fixture
  std::optional<std::vector<RegionProposal>> proposals;  // default: synthetic proposer
  std::vector<BoundingBox> user_boxes;
  std::int64_t image_id = 0;
};

struct PipelineResult {
  ProxyRegistry registry;
  std::string prompt;
  MultimodalSequence sequence;
  TokenMatrix visual;
  nlohmann::json summary;
  std::map<std::string, std::string> artifacts;  // file name -> bytes
};

inline PipelineResult run_pipeline(const RunConfig& cfg, const PipelineInputs& in) {
  cfg.validate();
  ImageArray image;
  std::vector<BoundingBox> gt;
  if (in.image) {
    image = *in.image;
  } else {
    auto f = make_fixture(cfg.image_size, cfg.fixture_boxes, cfg.module_seed("fixture"));
    image = std::move(f.image);
    gt = std::move(f.gt_boxes);
  }
  const ImageSize size{image.height, image.width};

  EncoderConfig enc{cfg.patch_size, cfg.encoder_depth, cfg.encoder_dim, cfg.module_seed("encoder")};
  const auto layers = toy_encode(image, enc);
  const auto proposer_pyramid = build_pyramid(last_layers(layers, kProposerLayers), kProposerScales);
  const auto encoder_pyramid = build_pyramid(last_layers(layers, kEncoderLayers), kEncoderScales);

  std::vector<RegionProposal> raw = in.proposals
                                        ? *in.proposals
                                        : synthetic_propose(gt, cfg.jitter, cfg.proposer.num_proposals,
                                                            cfg.module_seed("proposer"), size);
  const auto kept = postprocess(raw, cfg.proposer);

  const auto encoder = RegionEncoder::seeded(cfg.encoder_dim, cfg.embed_dim, cfg.module_seed("region_encoder"), size,
                                             cfg.bins, cfg.samples);
  PipelineResult r;
  r.registry = build_registry(in.image_id, kept, in.user_boxes, encoder_pyramid, encoder, cfg.proposer.max_keep);
  r.prompt = render_prompt(r.registry, cfg.instruction, cfg.grounding);

  const TokenGrid& last = layers.back();
  const TokenGrid image_grid = cfg.merge ? merge_2x2(last) : last;
  const auto image_tokens = project(image_grid, cfg.embed_dim, cfg.module_seed("projector"));
  r.sequence = assemble_sequence(r.prompt, image_tokens.count, r.registry);
  r.visual = visual_embeddings(r.sequence, image_tokens, r.registry.embeddings());

  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : proposer_pyramid.levels) levels.push_back({{"scale", l.scale}, {"rows", l.grid.rows}, {"cols", l.grid.cols}});
  TokenGrid visual_grid(r.visual.count, 1, r.visual.width);
  visual_grid.data = r.visual.data;

  r.summary = {{"image_id", in.image_id},
               {"image", {{"height", image.height}, {"width", image.width}}},
               {"image_tokens", r.sequence.image_tokens},
               {"image_grid", {image_grid.rows, image_grid.cols, image_grid.dim}},
               {"merge", cfg.merge},
               {"proposer_pyramid", levels},
               {"proposals_in", raw.size()},
               {"proposals_kept", kept.size()},
               {"user_boxes", in.user_boxes.size()},
               {"region_tokens", r.sequence.region_tokens},
               {"visual_tokens", r.sequence.visual_tokens()},
               {"budget", kVisualTokenBudget},
               {"over_budget", r.sequence.over_budget},
               {"warnings", r.sequence.warnings},
               {"embed_dim", cfg.embed_dim},
               {"visual_embeddings_hash", content_hash(encode_grid(visual_grid))},
               {"generator", kGeneratorId},
               {"manifest", kManifestFile}};

  auto registry_json = registry_to_json(r.registry, "registry.bin");
  registry_json["manifest"] = kManifestFile;
  r.artifacts["registry.json"] = registry_json.dump(2) + "\n";
  r.artifacts["registry.bin"] = encode_grid(registry_embeddings_grid(r.registry));
  r.artifacts["prompt.txt"] = r.prompt + "\n";
  r.artifacts["summary.json"] = r.summary.dump(2) + "\n";
  return r;
}

}  // namespace loctok
