#pragma once

// Run configuration and the manifest written next to every command output.
// Module seeds are derive_seed(seed, "<module>"), see rng.hpp.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loctok/region_pipeline.hpp"
#include "loctok/rng.hpp"

namespace loctok {

inline constexpr std::string_view kToolVersion = "0.1.0";

struct RunConfig {
  std::size_t image_size = kDefaultImageSize;
  std::size_t patch_size = 14;
  bool merge = true;
  std::size_t encoder_dim = 32;
  std::size_t encoder_depth = 6;
  std::size_t embed_dim = 64;  // shared width of projected image and region tokens
  ProposerConfig proposer;
  BinShape bins;
  SampleShape samples;
  double jitter = 0.05;
  std::size_t fixture_boxes = 3;
  std::string instruction = "Describe the image.";
  bool grounding = false;
  std::uint64_t seed = 0;

  void validate() const {
    proposer.validate();
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw Error(Errc::patch_mismatch, "patch mismatch: image " + std::to_string(image_size) + " vs patch " +
                                            std::to_string(patch_size));
    }
    if (bins.rows == 0 || bins.cols == 0 || samples.y == 0 || samples.x == 0) {
      throw Error(Errc::invalid_argument, "bins and samples must be positive");
    }
    if (encoder_dim == 0 || embed_dim == 0) throw Error(Errc::invalid_argument, "dims must be positive");
    if (!(jitter >= 0.0)) throw Error(Errc::invalid_argument, "jitter must be non-negative");
  }

  std::uint64_t module_seed(std::string_view module) const { return derive_seed(seed, module); }
};

inline nlohmann::json config_to_json(const RunConfig& c) {
  return {{"image_size", c.image_size},
          {"patch_size", c.patch_size},
          {"merge", c.merge},
          {"encoder_dim", c.encoder_dim},
          {"encoder_depth", c.encoder_depth},
          {"embed_dim", c.embed_dim},
          {"num_proposals", c.proposer.num_proposals},
          {"score_threshold", c.proposer.score_threshold},
          {"nms_threshold", c.proposer.nms_threshold},
          {"max_keep", c.proposer.max_keep},
          {"bins", {c.bins.rows, c.bins.cols}},
          {"samples", {c.samples.y, c.samples.x}},
          {"jitter", c.jitter},
          {"fixture_boxes", c.fixture_boxes},
          {"instruction", c.instruction},
          {"grounding", c.grounding},
          {"seed", c.seed}};
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string content_hash(std::string_view bytes) { return "fnv1a64:" + hex64(fnv1a64(bytes)); }

// Timestamps live only here so that all other outputs are byte-reproducible.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> input_hashes;  // path -> content hash
  std::map<std::string, std::string> outputs;       // file -> content hash
  std::string started_at;
  std::string finished_at;

  static std::string now_utc() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  nlohmann::json to_json() const {
    return {{"format", "loctok-manifest/1"},
            {"command", command},
            {"tool_version", kToolVersion},
            {"generator", kGeneratorId},
            {"config", config},
            {"input_hashes", input_hashes},
            {"outputs", outputs},
            {"started_at", started_at},
            {"finished_at", finished_at}};
  }
};

inline constexpr std::string_view kManifestFile = "manifest.json";

}  // namespace loctok
