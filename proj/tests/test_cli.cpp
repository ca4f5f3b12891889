#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "loctok/eval.hpp"
#include "loctok/tensor.hpp"

#include "cli_run.hpp"

namespace fs = std::filesystem;

namespace {

CliRun run(const std::string& args) { return run_command(std::string(LOCTOK_CLI_PATH) + " " + args); }

std::string slurp(const fs::path& p) { return loctok::read_file(p.string()); }

std::string sample(const std::string& name) { return std::string(LOCTOK_SAMPLES_DIR) + "/" + name; }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("loctok_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, PipelineDefaults) {
  const auto r = run("pipeline --out " + path("a"));
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("image_tokens=256\n"), std::string::npos);
  const auto summary = nlohmann::json::parse(slurp(path("a") + "/summary.json"));
  EXPECT_EQ(summary["image_tokens"], 256);
  EXPECT_LE(summary["region_tokens"].get<int>(), 100);
  EXPECT_LE(summary["visual_tokens"].get<int>(), 356);
  EXPECT_EQ(summary["manifest"], "manifest.json");
  EXPECT_TRUE(fs::exists(path("a") + "/manifest.json"));
}

TEST_F(Cli, PipelineNoMerge) {
  const auto r = run("pipeline --no-merge --out " + path("a"));
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("image_tokens=1024\n"), std::string::npos);
}

TEST_F(Cli, PipelineIsByteReproducible) {
  ASSERT_EQ(run("pipeline --seed 11 --out " + path("a")).exit_code, 0);
  ASSERT_EQ(run("pipeline --seed 11 --out " + path("b")).exit_code, 0);
  for (const char* f : {"registry.json", "registry.bin", "prompt.txt", "summary.json"}) {
    EXPECT_EQ(slurp(path("a") + "/" + f), slurp(path("b") + "/" + f)) << f;
  }
  ASSERT_EQ(run("pipeline --seed 12 --out " + path("c")).exit_code, 0);
  EXPECT_NE(slurp(path("a") + "/registry.bin"), slurp(path("c") + "/registry.bin"));
}

TEST_F(Cli, PipelineConfigFileAndOverride) {
  ASSERT_EQ(run("pipeline --config " + sample("pipeline.conf") + " --out " + path("a")).exit_code, 0);
  EXPECT_NE(slurp(path("a") + "/prompt.txt").find("[grounding] "), std::string::npos);
  const auto m = nlohmann::json::parse(slurp(path("a") + "/manifest.json"));
  EXPECT_EQ(m["config"]["seed"], 7);
  EXPECT_EQ(m["config"]["fixture_boxes"], 5);
  const auto r = run("pipeline --config " + sample("pipeline.conf") + " --fixture-boxes 2 --out " + path("b"));
  EXPECT_NE(r.out.find("region_tokens=2\n"), std::string::npos);

  std::ofstream(path("bad.conf")) << "no-such-setting = 1\n";
  EXPECT_EQ(run("pipeline --config " + path("bad.conf") + " --out " + path("c")).exit_code, 2);
}

TEST_F(Cli, PipelineUserBoxesAndErrors) {
  std::ofstream(path("user.json")) << "[[10, 10, 60, 60]]";
  const auto r = run("pipeline --user-boxes " + path("user.json") + " --out " + path("a"));
  ASSERT_EQ(r.exit_code, 0);
  const auto reg = nlohmann::json::parse(slurp(path("a") + "/registry.json"));
  EXPECT_EQ(reg["entries"].back()["origin"], "user");

  EXPECT_EQ(run("pipeline --image " + path("missing.ppm") + " --out " + path("b")).exit_code, 3);
  std::ofstream(path("bad.json")) << "[[10, 10, 60]]";
  EXPECT_EQ(run("pipeline --user-boxes " + path("bad.json") + " --out " + path("c")).exit_code, 2);
  EXPECT_NE(run("pipeline --nms-thresh 2 --out " + path("d")).exit_code, 0);
}

TEST_F(Cli, ParseAndRender) {
  std::ofstream(path("ok.txt")) << "<p>A dog</p> <roi><r2></roi> runs.";
  auto r = run("parse " + path("ok.txt") + " --registry-size 3");
  ASSERT_EQ(r.exit_code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NE(j.dump().find("A dog"), std::string::npos);

  std::ofstream(path("bad.txt")) << "<p>dog</p>";
  EXPECT_EQ(run("parse " + path("bad.txt") + " --registry-size 3").exit_code, 2);
  std::ofstream(path("unknown.txt")) << "<p>dog</p> <roi><r9></roi>";
  EXPECT_EQ(run("parse " + path("unknown.txt") + " --registry-size 3").exit_code, 2);

  r = run("render --registry-size 2 --grounding --instruction 'Please briefly describe the image content.'");
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.out,
            "Here is an image with region crops from it. Image: <image>. Regions: <r1><region>, <r2><region>. "
            "[grounding] Please briefly describe the image content.\n");
}

TEST_F(Cli, Template) {
  const auto r = run("template --task multi_ground --variant 0 --arg 'object class=cat'");
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.out, "Locate all <p>cat</p> in this image.\n");
  EXPECT_NE(run("template --task rec --variant 0").exit_code, 0);
}

TEST_F(Cli, EvalSampleFixtures) {
  auto r = run("eval --annotations " + sample("three_of_five.json") + " --predictions " +
               sample("three_of_five_predictions.jsonl") + " --protocol as-many");
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("AR@0.5=0.600000\n"), std::string::npos) << r.out;

  r = run("eval --annotations " + sample("two_cluster.json") + " --predictions " +
          sample("two_cluster_predictions.jsonl") + " --protocol merged");
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("AR=0.000000\n"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalSelfIsPerfectAndDeterministic) {
  ASSERT_EQ(run("bench-build --synthetic-categories 30 --min-images 1 --max-images 12 --seed 4 --out " +
                path("bench.json"))
                .exit_code,
            0);
  const auto items = loctok::items_from_json(nlohmann::json::parse(slurp(path("bench.json"))));
  std::vector<loctok::PredictionList> perfect;
  for (const auto& it : items) {
    loctok::PredictionList p;
    for (const auto& g : it.gt_boxes) p.push_back({g, 1.0});
    perfect.push_back(p);
  }
  std::ofstream(path("self.jsonl")) << loctok::predictions_to_jsonl(items, perfect);
  for (const char* proto : {"any", "as-many"}) {
    const auto r = run("eval --protocol " + std::string(proto) + " --annotations " + path("bench.json") +
                       " --predictions " + path("self.jsonl"));
    ASSERT_EQ(r.exit_code, 0);
    EXPECT_NE(r.out.find("\nAR=1.000000\n"), std::string::npos) << r.out;
  }

  // Outputs name their manifest, so reruns go to a sibling directory under the same file name.
  fs::create_directories(path("again"));
  ASSERT_EQ(run("bench-build --synthetic-categories 30 --min-images 1 --max-images 12 --seed 4 --out " +
                path("again/bench.json") + " --write-predictions " + path("noisy.jsonl"))
                .exit_code,
            0);
  EXPECT_EQ(slurp(path("bench.json")), slurp(path("again/bench.json")));
  const std::string common = " --annotations " + path("bench.json") + " --predictions " + path("noisy.jsonl");
  ASSERT_EQ(run("eval --jobs 1 --out " + path("report.json") + common).exit_code, 0);
  ASSERT_EQ(run("eval --jobs 8 --out " + path("again/report.json") + common).exit_code, 0);
  EXPECT_EQ(slurp(path("report.json")), slurp(path("again/report.json")));
  EXPECT_TRUE(fs::exists(path("report.json.manifest.json")));
}

TEST_F(Cli, EvalErrors) {
  std::ofstream(path("broken.jsonl")) << "{\"image_id\": 1, \"query\": \"a\", \"boxes\": [], \"scores\": []}\n{\n";
  EXPECT_EQ(run("eval --annotations " + sample("two_cluster.json") + " --predictions " + path("broken.jsonl")).exit_code,
            2);
  EXPECT_EQ(run("eval --annotations " + path("none.json") + " --predictions " + path("broken.jsonl")).exit_code, 3);
  // Acc@0.5 needs single-box items.
  EXPECT_NE(run("eval --rec --annotations " + sample("two_cluster.json") + " --predictions " +
                sample("two_cluster_predictions.jsonl"))
                .exit_code,
            0);
}

TEST_F(Cli, InstructGenerateIsReproducible) {
  const auto a = run("instruct generate --synthetic 20 --mock --seed 3 --out " + path("a.jsonl"));
  ASSERT_EQ(a.exit_code, 0);
  ASSERT_EQ(run("instruct generate --synthetic 20 --mock --seed 3 --jobs 4 --out " + path("b.jsonl")).exit_code, 0);
  EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
  std::istringstream lines(slurp(path("a.jsonl")));
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    EXPECT_TRUE(nlohmann::json::parse(line)["valid"].get<bool>());
    ++n;
  }
  EXPECT_GT(n, 0);
  const auto v = run("instruct validate " + path("a.jsonl"));
  EXPECT_EQ(v.exit_code, 0);
}

TEST_F(Cli, InstructSamples) {
  const auto r = run("instruct generate --regions " + sample("vg_regions.json") + " --captions " +
                     sample("coco_captions.json") + " --qa " + sample("vg_qa.json") + " --mock --include-sparse");
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("a red frisbee"), std::string::npos);
  const auto f = run("instruct filter --regions " + sample("vg_regions.json"));
  ASSERT_EQ(f.exit_code, 0);
  const auto p = run("instruct prompt --regions " + sample("vg_regions.json") + " --captions " +
                     sample("coco_captions.json") + " --qa " + sample("vg_qa.json") + " --markers-dir " + path("m"));
  ASSERT_EQ(p.exit_code, 0);
  EXPECT_NE(p.out.find("A dog leaps"), std::string::npos);
  EXPECT_TRUE(fs::exists(path("m")));
}

TEST_F(Cli, SelftestExitCodes) {
  const auto ok = run("selftest");
  EXPECT_EQ(ok.exit_code, 0);
  EXPECT_NE(ok.out.find("selftest passed"), std::string::npos);
  const auto merge = run("selftest --corrupt merge-order");
  EXPECT_EQ(merge.exit_code, 1);
  EXPECT_NE(merge.out.find("FAIL  merge_2x2 block order"), std::string::npos);
  const auto boundary = run("selftest --corrupt iou-boundary");
  EXPECT_EQ(boundary.exit_code, 1);
  EXPECT_NE(boundary.out.find("FAIL  IoU 0.5 REC boundary"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_NE(run("").exit_code, 0);
  EXPECT_NE(run("no-such-command").exit_code, 0);
  EXPECT_NE(run("pipeline").exit_code, 0);
}
