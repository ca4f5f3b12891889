// loctok: command-line front end for the tokenizer pipeline, grounded markup,
// evaluation protocols and instruct-data generation.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "loctok/config.hpp"
#include "loctok/eval.hpp"
#include "loctok/grammar.hpp"
#include "loctok/instruct.hpp"
#include "loctok/instruct_http.hpp"
#include "loctok/pipeline.hpp"
#include "loctok/testing/hooks.hpp"
#include "loctok/testing/selftest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace loctok;

namespace {

int exit_code(Errc c) {
  switch (c) {
    case Errc::io_error: return 3;
    case Errc::parse_error:
    case Errc::malformed_markup:
    case Errc::stray_proxy:
    case Errc::unknown_referent: return 2;
    default: return 1;
  }
}

std::string read_input(const std::string& path) {
  if (path == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
  }
  return read_file(path);
}

void write_output(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path.string(), bytes);
}

json read_json(const std::string& path, const std::string& what) { return parse_json_text(read_input(path), what); }

// Manifest for outputs written by one command; `outputs` maps file -> bytes.
void write_manifest(const fs::path& path, const std::string& command, json config,
                    const std::map<std::string, std::string>& inputs, const std::map<std::string, std::string>& outputs,
                    const std::string& started) {
  RunManifest m;
  m.command = command;
  m.config = std::move(config);
  for (const auto& [p, bytes] : inputs) m.input_hashes[p] = content_hash(bytes);
  for (const auto& [name, bytes] : outputs) m.outputs[name] = content_hash(bytes);
  m.started_at = started;
  m.finished_at = RunManifest::now_utc();
  write_output(path, m.to_json().dump(2) + "\n");
}

// Fills options that were not given on the command line from a flat
// `key = value` file (keys are long option names without dashes).
void apply_config_file(CLI::App& sub, const std::string& path) {
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(path);
  } catch (const CLI::FileError& e) {
    throw Error(Errc::io_error, e.what());
  } catch (const CLI::ParseError& e) {
    throw Error(Errc::parse_error, path + ": " + e.what());
  }
  for (const auto& item : items) {
    if (!item.parents.empty() || item.name == "++" || item.name == "--") {
      throw Error(Errc::parse_error, path + ": sections are not supported (" + item.fullname() + ")");
    }
    auto* opt = sub.get_option_no_throw("--" + item.name);
    if (opt == nullptr || opt == sub.get_option_no_throw("--config") || opt == sub.get_option_no_throw("--out")) {
      throw Error(Errc::parse_error, path + ": unknown key " + item.name);
    }
    if (opt->count() > 0) continue;
    opt->add_result(item.inputs);
    opt->run_callback();
  }
}

// --- pipeline ----------------------------------------------------------------

struct PipelineArgs {
  RunConfig cfg;
  std::string config;
  std::string out_dir;
  std::string image;
  std::string proposals;
  std::string user_boxes;
  std::int64_t image_id = 0;
  bool no_merge = false;
  std::vector<std::size_t> bins;
  std::vector<std::size_t> samples;
};

void add_pipeline(CLI::App& app, PipelineArgs& a, std::function<int()>& run) {
  auto* sub = app.add_subcommand("pipeline", "Tokenize one image (or the synthetic fixture) into a prompt and sequence");
  sub->add_option("--config", a.config, "Flat key = value settings file; flags override it");
  sub->add_option("--out", a.out_dir, "Output directory")->required();
  sub->add_option("--image", a.image, "Binary PPM image (default: synthetic fixture)");
  sub->add_option("--proposals", a.proposals, "JSON proposals [{box, objectness}] (default: synthetic proposer)");
  sub->add_option("--user-boxes", a.user_boxes, "JSON array of user boxes [x1,y1,x2,y2]");
  sub->add_option("--image-id", a.image_id);
  sub->add_option("--seed", a.cfg.seed)->capture_default_str();
  sub->add_option("--image-size", a.cfg.image_size, "Fixture image side")->capture_default_str();
  sub->add_option("--patch-size", a.cfg.patch_size)->capture_default_str();
  sub->add_flag("--no-merge", a.no_merge, "Keep all patch tokens instead of merging 2x2 blocks");
  sub->add_option("--encoder-dim", a.cfg.encoder_dim)->capture_default_str();
  sub->add_option("--encoder-depth", a.cfg.encoder_depth)->capture_default_str();
  sub->add_option("--embed-dim", a.cfg.embed_dim)->capture_default_str();
  sub->add_option("--num-proposals", a.cfg.proposer.num_proposals)->capture_default_str();
  sub->add_option("--score-thresh", a.cfg.proposer.score_threshold)->capture_default_str();
  sub->add_option("--nms-thresh", a.cfg.proposer.nms_threshold)->capture_default_str();
  sub->add_option("--max-keep", a.cfg.proposer.max_keep)->capture_default_str();
  sub->add_option("--bins", a.bins, "ROIAlign bins: rows cols")->expected(2);
  sub->add_option("--samples", a.samples, "Samples per bin: y x")->expected(2);
  sub->add_option("--jitter", a.cfg.jitter)->capture_default_str();
  sub->add_option("--fixture-boxes", a.cfg.fixture_boxes, "Objects in the synthetic fixture")->capture_default_str();
  sub->add_option("--instruction", a.cfg.instruction)->capture_default_str();
  sub->add_flag("--grounding", a.cfg.grounding);
  run = [&a, sub] {
    const auto started = RunManifest::now_utc();
    if (!a.config.empty()) apply_config_file(*sub, a.config);
    if (a.no_merge) a.cfg.merge = false;
    if (!a.bins.empty()) a.cfg.bins = {a.bins[0], a.bins[1]};
    if (!a.samples.empty()) a.cfg.samples = {a.samples[0], a.samples[1]};
    std::map<std::string, std::string> inputs;
    if (!a.config.empty()) inputs[a.config] = read_file(a.config);
    PipelineInputs in;
    in.image_id = a.image_id;
    if (!a.image.empty()) {
      inputs[a.image] = read_file(a.image);
      in.image = decode_ppm(inputs[a.image]);
    }
    if (!a.proposals.empty()) {
      inputs[a.proposals] = read_file(a.proposals);
      in.proposals = proposals_from_json(parse_json_text(inputs[a.proposals], a.proposals));
    }
    if (!a.user_boxes.empty()) {
      inputs[a.user_boxes] = read_file(a.user_boxes);
      in.user_boxes = boxes_from_json(parse_json_text(inputs[a.user_boxes], a.user_boxes));
    }
    const auto r = run_pipeline(a.cfg, in);
    const fs::path dir(a.out_dir);
    for (const auto& [name, bytes] : r.artifacts) write_output(dir / name, bytes);
    write_manifest(dir / kManifestFile, "pipeline", config_to_json(a.cfg), inputs, r.artifacts, started);
    std::cout << "image_tokens=" << r.sequence.image_tokens << "\n"
              << "region_tokens=" << r.sequence.region_tokens << "\n"
              << "visual_tokens=" << r.sequence.visual_tokens() << "\n"
              << "proposals_kept=" << r.summary["proposals_kept"].get<std::size_t>() << "\n";
    for (const auto& w : r.sequence.warnings) std::cerr << "warning: " << w << "\n";
    return 0;
  };
}

// --- grammar ---------------------------------------------------------------

json response_to_json(const GroundedResponse& r) {
  json segs = json::array();
  for (const auto& s : r.segments()) {
    if (const auto* t = std::get_if<std::string>(&s)) {
      segs.push_back({{"text", *t}});
    } else {
      const auto& span = std::get<GroundedSpan>(s);
      segs.push_back({{"phrase", span.phrase}, {"referents", span.referents}});
    }
  }
  return {{"segments", segs}, {"referents", r.referents()}};
}

std::size_t registry_size_from(const std::string& registry_path, std::optional<std::size_t> size) {
  if (!registry_path.empty()) return read_json(registry_path, registry_path).at("size").get<std::size_t>();
  if (size) return *size;
  throw Error(Errc::invalid_argument, "give --registry or --registry-size");
}

// --- instruct --------------------------------------------------------------

struct InstructArgs {
  std::string regions;
  std::size_t synthetic = 0;
  std::string captions;
  std::string qa;
  double iou_thresh = 0.5;
  std::size_t max_regions = 10;
  bool include_sparse = false;
  bool no_fewshot = false;
  std::uint64_t seed = 0;
  std::string out;
  bool mock = false;
  std::size_t jobs = 1;
  std::string markers_dir;
  std::string input;
};

std::vector<VgImage> load_images(const InstructArgs& a, std::map<std::string, std::string>& inputs) {
  if (!a.regions.empty()) {
    inputs[a.regions] = read_input(a.regions);
    return parse_vg_regions(parse_json_text(inputs[a.regions], a.regions));
  }
  if (a.synthetic > 0) return synthetic_vg_images(a.synthetic, a.seed);
  throw Error(Errc::invalid_argument, "give --regions or --synthetic N");
}

ContextSources load_sources(const InstructArgs& a, std::map<std::string, std::string>& inputs) {
  ContextSources s;
  if (!a.captions.empty()) {
    inputs[a.captions] = read_file(a.captions);
    s.captions_by_coco_id = parse_coco_captions(parse_json_text(inputs[a.captions], a.captions));
  }
  if (!a.qa.empty()) {
    inputs[a.qa] = read_file(a.qa);
    s.qa_by_image_id = parse_vg_qa(parse_json_text(inputs[a.qa], a.qa));
  }
  return s;
}

InstructConfig instruct_config(const InstructArgs& a) {
  InstructConfig c;
  c.filter.iou_threshold = a.iou_thresh;
  c.filter.max_regions = a.max_regions;
  c.include_sparse = a.include_sparse;
  c.use_fewshot = !a.no_fewshot;
  c.seed = a.seed;
  c.max_in_flight = a.jobs;
  return c;
}

json instruct_config_json(const InstructArgs& a) {
  return {{"iou_threshold", a.iou_thresh}, {"max_regions", a.max_regions}, {"include_sparse", a.include_sparse},
          {"fewshot", !a.no_fewshot},      {"seed", a.seed},               {"mock", a.mock},
          {"synthetic", a.synthetic}};
}

void emit(const InstructArgs& a, const std::string& command, const std::string& text,
          const std::map<std::string, std::string>& inputs, const std::string& started) {
  if (a.out.empty() || a.out == "-") {
    std::cout << text;
    return;
  }
  write_output(a.out, text);
  write_manifest(a.out + ".manifest.json", command, instruct_config_json(a), inputs,
                 {{fs::path(a.out).filename().string(), text}}, started);
}

void add_instruct(CLI::App& app, InstructArgs& a, std::function<int()>& run) {
  auto* sub = app.add_subcommand("instruct", "Grounded conversation generation");
  sub->require_subcommand(1);
  auto common = [&a](CLI::App* s) {
    s->add_option("--regions", a.regions, "VG-style region JSON");
    s->add_option("--synthetic", a.synthetic, "Use N synthetic VG-style images instead");
    s->add_option("--iou-thresh", a.iou_thresh, "De-overlap IoU threshold")->capture_default_str();
    s->add_option("--max-regions", a.max_regions)->capture_default_str();
    s->add_option("--seed", a.seed)->capture_default_str();
    s->add_option("--out", a.out, "Output file (default stdout)");
  };

  auto* filter = sub->add_subcommand("filter", "De-overlap regions and report survivors");
  common(filter);
  filter->callback([&] {
    run = [&a] {
      const auto started = RunManifest::now_utc();
      std::map<std::string, std::string> inputs;
      const auto images = load_images(a, inputs);
      const auto cfg = instruct_config(a);
      std::string out;
      for (const auto& im : images) {
        const auto f = filter_overlaps(im.regions, cfg.filter);
        json regions = json::array();
        for (const auto& r : f.regions) regions.push_back({{"box", r.box}, {"description", r.description}});
        out += json{{"image_id", im.image_id},     {"input_regions", im.regions.size()},
                    {"kept", f.regions.size()},    {"dropped_overlap", f.dropped_overlap},
                    {"truncated", f.truncated},    {"sparse", f.sparse},
                    {"iou_threshold", a.iou_thresh}, {"regions", regions}}
                   .dump() +
               "\n";
      }
      emit(a, "instruct filter", out, inputs, started);
      return 0;
    };
  });

  auto* prompt = sub->add_subcommand("prompt", "Assemble model requests");
  common(prompt);
  prompt->add_option("--captions", a.captions, "COCO captions JSON");
  prompt->add_option("--qa", a.qa, "VG question-answer JSON");
  prompt->add_flag("--no-fewshot", a.no_fewshot);
  prompt->add_flag("--include-sparse", a.include_sparse);
  prompt->add_option("--markers-dir", a.markers_dir, "Also write marker overlays (PPM) here");
  prompt->callback([&] {
    run = [&a] {
      const auto started = RunManifest::now_utc();
      std::map<std::string, std::string> inputs;
      const auto images = load_images(a, inputs);
      const auto sources = load_sources(a, inputs);
      const auto cfg = instruct_config(a);
      std::string out;
      for (const auto& im : images) {
        const auto f = filter_overlaps(im.regions, cfg.filter);
        if (f.regions.empty() || (f.sparse && !cfg.include_sparse)) continue;
        const auto spec = place_markers(im.image_id, f.regions);
        auto req = assemble_request(spec, build_context(im, f, sources),
                                    cfg.use_fewshot ? default_fewshot() : std::vector<FewShotExample>{},
                                    derive_seed(cfg.seed, "image/" + std::to_string(im.image_id)));
        if (!a.markers_dir.empty()) {
          double w = 1.0, h = 1.0;
          for (const auto& m : spec.markers) {
            w = std::max(w, m.box.x_max);
            h = std::max(h, m.box.y_max);
          }
          RgbImage canvas(static_cast<std::size_t>(std::ceil(w)), static_cast<std::size_t>(std::ceil(h)), 128);
          draw_markers(canvas, spec);
          const auto path = fs::path(a.markers_dir) / ("markers_" + std::to_string(im.image_id) + ".ppm");
          write_output(path, encode_ppm(canvas));
          req.marked_image_ref = path.filename().string();
        }
        out += json{{"image_id", im.image_id}, {"ambiguous_markers", spec.ambiguous}, {"request", render_request(req)}}.dump() + "\n";
      }
      emit(a, "instruct prompt", out, inputs, started);
      return 0;
    };
  });

  auto* generate = sub->add_subcommand("generate", "Generate and post-filter conversations");
  common(generate);
  generate->add_option("--captions", a.captions, "COCO captions JSON");
  generate->add_option("--qa", a.qa, "VG question-answer JSON");
  generate->add_flag("--no-fewshot", a.no_fewshot);
  generate->add_flag("--include-sparse", a.include_sparse);
  generate->add_flag("--mock", a.mock, "Use the deterministic offline model");
  generate->add_option("--jobs", a.jobs, "Concurrent model requests")->capture_default_str();
  generate->callback([&] {
    run = [&a] {
      const auto started = RunManifest::now_utc();
      std::map<std::string, std::string> inputs;
      const auto images = load_images(a, inputs);
      const auto sources = load_sources(a, inputs);
      std::unique_ptr<VlmClient> client;
      if (a.mock) {
        client = std::make_unique<MockVlmClient>();
      } else {
        client = std::make_unique<HttpVlmClient>(HttpVlmConfig::from_env());
      }
      const auto results = run_instruct(images, sources, *client, instruct_config(a));
      std::string out;
      std::size_t accepted = 0, rejected = 0, skipped = 0;
      for (const auto& r : results) {
        if (!r.record) {
          ++skipped;
          continue;
        }
        (r.record->valid ? accepted : rejected)++;
        out += record_to_json(*r.record, a.iou_thresh).dump() + "\n";
      }
      emit(a, "instruct generate", out, inputs, started);
      std::cerr << "accepted=" << accepted << " rejected=" << rejected << " skipped=" << skipped << "\n";
      return 0;
    };
  });

  auto* validate = sub->add_subcommand("validate", "Post-filter raw replies or re-check conversation records");
  validate->add_option("input", a.input, "JSONL: {image_id, num_markers, text} or conversation records")->required();
  validate->add_option("--out", a.out, "Output file (default stdout)");
  validate->add_option("--iou-thresh", a.iou_thresh, "Recorded in the output")->capture_default_str();
  validate->callback([&] {
    run = [&a] {
      const auto started = RunManifest::now_utc();
      std::map<std::string, std::string> inputs;
      inputs[a.input] = read_input(a.input);
      std::istringstream lines(inputs[a.input]);
      std::string line, out;
      std::size_t line_no = 0, accepted = 0, rejected = 0;
      while (std::getline(lines, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto j = parse_json_text(line, a.input + " line " + std::to_string(line_no));
        ConversationRecord rec;
        if (j.contains("text")) {
          rec = postfilter_one(j.at("image_id").get<std::int64_t>(), j.at("text").get<std::string>(),
                               j.at("num_markers").get<std::size_t>());
        } else {
          const auto in = record_from_json(j);
          std::string raw;
          for (const auto& t : in.turns) raw += (t.role == "user" ? "USER: " : "ASSISTANT: ") + t.text + "\n";
          rec = postfilter_one(in.image_id, raw, in.num_markers);
          rec.registry_ref = in.registry_ref;
        }
        (rec.valid ? accepted : rejected)++;
        out += record_to_json(rec, a.iou_thresh).dump() + "\n";
      }
      emit(a, "instruct validate", out, inputs, started);
      std::cerr << "accepted=" << accepted << " rejected=" << rejected << "\n";
      return 0;
    };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"loctok: region-token tokenizer, grounded markup and evaluation tools"};
  app.require_subcommand(1);

  PipelineArgs pipeline_args;
  std::function<int()> run_pipeline_cmd;
  add_pipeline(app, pipeline_args, run_pipeline_cmd);

  // parse
  std::string parse_input = "-";
  std::string parse_registry;
  std::optional<std::size_t> parse_size;
  bool lenient = false;
  auto* parse_cmd = app.add_subcommand("parse", "Parse grounded markup into spans");
  parse_cmd->add_option("input", parse_input, "Text file, or - for stdin")->capture_default_str();
  parse_cmd->add_option("--registry", parse_registry, "registry.json bounding the referents");
  parse_cmd->add_option("--registry-size", parse_size, "Referent bound n (proxies 1..n)");
  parse_cmd->add_flag("--lenient", lenient, "Accept extra whitespace around roi blocks");

  // render
  std::string render_registry;
  std::optional<std::size_t> render_size;
  std::string render_instruction;
  bool render_grounding = false;
  auto* render_cmd = app.add_subcommand("render", "Render the model prompt for a registry");
  render_cmd->add_option("--registry", render_registry, "registry.json");
  render_cmd->add_option("--registry-size", render_size);
  render_cmd->add_option("--instruction", render_instruction)->required();
  render_cmd->add_flag("--grounding", render_grounding);

  // template
  std::string task_name;
  std::optional<std::size_t> variant;
  std::uint64_t template_seed = 0;
  std::vector<std::string> template_args;
  auto* template_cmd = app.add_subcommand("template", "Fill a task instruction template");
  template_cmd->add_option("--task", task_name,
                           "image_caption|region_caption|rec|multi_ground|grounded_caption|grounded_chat")
      ->required();
  template_cmd->add_option("--variant", variant, "Template index (default: seeded choice)");
  template_cmd->add_option("--seed", template_seed)->capture_default_str();
  template_cmd->add_option("--arg", template_args, "Placeholder value, name=value (repeatable)");

  // eval
  std::string protocol_name = "as-many";
  std::string annotations, predictions, report_out;
  bool eval_rec = false, eval_optimal = false;
  std::size_t jobs = 1;
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against a grounding benchmark");
  eval_cmd->add_option("--protocol", protocol_name, "any|merged|as-many")->capture_default_str();
  eval_cmd->add_option("--annotations", annotations, "Benchmark JSON or COCO-style annotations")->required();
  eval_cmd->add_option("--predictions", predictions, "Predictions JSONL")->required();
  eval_cmd->add_option("--out", report_out, "Report JSON path");
  eval_cmd->add_flag("--rec", eval_rec, "Also compute Acc@0.5 (single-box items)");
  eval_cmd->add_flag("--optimal", eval_optimal, "Maximum matching instead of greedy for AS-MANY");
  eval_cmd->add_option("--jobs", jobs, "Worker threads")->capture_default_str();

  // bench-build
  std::string bench_annotations, bench_out, bench_predictions;
  std::size_t per_category = 5;
  std::uint64_t bench_seed = 0;
  std::size_t synth_categories = 0, synth_min = 1, synth_max = 12;
  auto* bench_cmd = app.add_subcommand("bench-build", "Build a grounding benchmark (<= N images per category)");
  bench_cmd->add_option("--annotations", bench_annotations, "COCO/LVIS-style annotations");
  bench_cmd->add_option("--synthetic-categories", synth_categories, "Use a synthetic dataset with this many categories");
  bench_cmd->add_option("--min-images", synth_min, "Synthetic: fewest images per category")->capture_default_str();
  bench_cmd->add_option("--max-images", synth_max, "Synthetic: most images per category")->capture_default_str();
  bench_cmd->add_option("--per-category", per_category)->capture_default_str();
  bench_cmd->add_option("--seed", bench_seed)->capture_default_str();
  bench_cmd->add_option("--out", bench_out, "Benchmark JSON path")->required();
  bench_cmd->add_option("--write-predictions", bench_predictions, "Also write synthetic predictions JSONL");

  InstructArgs instruct_args;
  std::function<int()> run_instruct_cmd;
  add_instruct(app, instruct_args, run_instruct_cmd);

  // selftest
  std::string corrupt;
  std::uint64_t selftest_seed = 0;
  auto* selftest_cmd = app.add_subcommand("selftest", "Run the seeded oracle suites");
  selftest_cmd->add_option("--corrupt", corrupt, "Negative control: merge-order|iou-boundary")
      ->check(CLI::IsMember({"merge-order", "iou-boundary"}));
  selftest_cmd->add_option("--seed", selftest_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (app.got_subcommand("pipeline")) return run_pipeline_cmd();
    if (app.got_subcommand("instruct")) return run_instruct_cmd();

    if (*parse_cmd) {
      const auto limit = registry_size_from(parse_registry, parse_size);
      const auto r = parse(read_input(parse_input), limit, lenient ? ParseMode::lenient : ParseMode::strict);
      std::cout << response_to_json(r).dump(2) << "\n";
      return 0;
    }
    if (*render_cmd) {
      std::cout << render_prompt(registry_size_from(render_registry, render_size), render_instruction, render_grounding)
                << "\n";
      return 0;
    }
    if (*template_cmd) {
      TemplateArgs args;
      for (const auto& kv : template_args) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error(Errc::invalid_argument, "--arg needs name=value");
        args[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      const auto task = task_from_string(task_name);
      std::cout << (variant ? apply_template_variant(task, args, *variant) : apply_template(task, args, template_seed))
                << "\n";
      return 0;
    }
    if (*eval_cmd) {
      const auto started = RunManifest::now_utc();
      std::map<std::string, std::string> inputs;
      inputs[annotations] = read_file(annotations);
      inputs[predictions] = read_file(predictions);
      const auto items = items_from_json(parse_json_text(inputs[annotations], annotations));
      const auto preds = align_predictions(items, parse_predictions_jsonl(inputs[predictions]));
      ReportOptions opts;
      opts.match.optimal = eval_optimal;
      opts.rec = eval_rec;
      opts.jobs = jobs;
      const auto report = compute_report(items, preds, protocol_from_string(protocol_name), opts);
      if (!report_out.empty()) {
        auto j = report_to_json(report);
        const std::string manifest_name = fs::path(report_out).filename().string() + ".manifest.json";
        j["manifest"] = manifest_name;
        const std::string bytes = j.dump(2) + "\n";
        write_output(report_out, bytes);
        write_manifest(report_out + ".manifest.json", "eval",
                       {{"protocol", protocol_name}, {"rec", eval_rec}, {"optimal", eval_optimal}}, inputs,
                       {{fs::path(report_out).filename().string(), bytes}}, started);
      }
      std::cout << report_metrics_text(report);
      return 0;
    }
    if (*bench_cmd) {
      const auto started = RunManifest::now_utc();
      std::map<std::string, std::string> inputs;
      AnnotatedDataset data;
      if (!bench_annotations.empty()) {
        inputs[bench_annotations] = read_file(bench_annotations);
        data = parse_coco(parse_json_text(inputs[bench_annotations], bench_annotations));
      } else if (synth_categories > 0) {
        data = synthetic_dataset(synth_categories, synth_min, synth_max, bench_seed);
      } else {
        throw Error(Errc::invalid_argument, "give --annotations or --synthetic-categories");
      }
      const BenchmarkSpec spec{per_category, bench_seed};
      const auto bench = build_benchmark(data, spec);
      auto j = benchmark_to_json(bench, spec);
      j["manifest"] = fs::path(bench_out).filename().string() + ".manifest.json";
      const std::string bytes = j.dump(2) + "\n";
      write_output(bench_out, bytes);
      std::map<std::string, std::string> outputs = {{fs::path(bench_out).filename().string(), bytes}};
      if (!bench_predictions.empty()) {
        const auto preds = synthetic_predictions(bench.items, bench_seed);
        const auto text = predictions_to_jsonl(bench.items, preds);
        write_output(bench_predictions, text);
        outputs[fs::path(bench_predictions).filename().string()] = text;
      }
      write_manifest(bench_out + ".manifest.json", "bench-build",
                     {{"per_category", per_category}, {"seed", bench_seed}, {"synthetic_categories", synth_categories},
                      {"min_images", synth_min}, {"max_images", synth_max}},
                     inputs, outputs, started);
      for (const auto& n : bench.notes) std::cerr << "note: " << n << "\n";
      std::cout << "categories=" << bench.num_categories << "\nimages=" << bench.num_images
                << "\nitems=" << bench.items.size() << "\n";
      return 0;
    }
    if (*selftest_cmd) {
      testing::ScopedHooksReset reset;
      if (corrupt == "merge-order") testing::hooks().corrupt_merge_order = true;
      if (corrupt == "iou-boundary") testing::hooks().corrupt_iou_boundary = true;
      const auto report = testing::run_selftest(selftest_seed);
      for (const auto& c : report.checks) {
        std::printf("%s  %-42s %6.2fs%s%s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.seconds,
                    c.detail.empty() ? "" : "  ", c.detail.c_str());
      }
      std::printf("%s\n", report.passed() ? "selftest passed" : "selftest FAILED");
      return report.passed() ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
