#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int status = -1;
  std::string output;
};

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "dmue_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Runs the CLI with stdout and stderr captured together.
CliRun cli(const std::string& args) {
  static int counter = 0;
  const fs::path out = scratch() / ("out" + std::to_string(counter++) + ".txt");
  const std::string cmd = std::string(DMUE_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CliRun r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(out);
  std::stringstream buf;
  buf << in.rdbuf();
  r.output = buf.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

const std::string kSmall =
    " --samples-per-class 30 --test-per-class 10 --dim 8 --max-epoch 2 --iters-per-epoch 2 --batch-size 16";

}  // namespace

TEST(Cli, HelpSucceeds) {
  const CliRun r = cli("--help");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.output.find("noise-bench"), std::string::npos);
}

TEST(Cli, UnknownFlagFails) {
  const CliRun r = cli("mc-verify --no-such-flag");
  EXPECT_NE(r.status, 0);
}

TEST(Cli, MissingSeedIsAnError) {
  const CliRun r = cli("gen-data --out " + (scratch() / "x.ds").string());
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("--seed"), std::string::npos);
  EXPECT_NE(cli("noise-bench" + kSmall + " --output-dir " + (scratch() / "nb").string()).status, 0);
}

TEST(Cli, UnreadableConfigIsAnError) {
  const CliRun r = cli("gen-data --seed 1 --config /nonexistent/file.cfg --out " + (scratch() / "y.ds").string());
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("error"), std::string::npos);
}

TEST(Cli, MalformedOverrideIsAnError) {
  const CliRun r = cli("gen-data --seed 1 --noise-ratio lots --out " + (scratch() / "z.ds").string());
  EXPECT_NE(r.status, 0);
}

TEST(Cli, McVerifyRightAngleReportsSmallGap) {
  const CliRun r = cli("mc-verify --alpha 1.5708 --sigma 0.5 --dim 32 --samples 100000 --seed 7");
  ASSERT_EQ(r.status, 0) << r.output;
  const auto pos = r.output.find("gap=");
  ASSERT_NE(pos, std::string::npos);
  EXPECT_LT(std::stod(r.output.substr(pos + 4)), 0.01);
}

TEST(Cli, TrainEvalStripPipeline) {
  const fs::path data = scratch() / "pipe.ds", model = scratch() / "pipe.ckpt", small = scratch() / "pipe_small.ckpt";
  ASSERT_EQ(cli("gen-data --seed 3 --noise-ratio 0.2" + kSmall + " --out " + data.string()).status, 0);
  const CliRun t = cli("train --seed 3" + kSmall + " --data " + data.string() + " --out " + model.string());
  ASSERT_EQ(t.status, 0) << t.output;
  const CliRun e = cli("eval --model " + model.string() + " --data " + data.string() + " --split test");
  ASSERT_EQ(e.status, 0) << e.output;
  ASSERT_EQ(cli("strip --in " + model.string() + " --out " + small.string()).status, 0);
  const CliRun es = cli("eval --model " + small.string() + " --data " + data.string() + " --split test");
  ASSERT_EQ(es.status, 0) << es.output;
  EXPECT_EQ(e.output, es.output);
  EXPECT_LT(fs::file_size(small), fs::file_size(model));
  const CliRun bad = cli("inspect --seed 3 --model " + small.string() + " --data " + data.string());
  EXPECT_EQ(bad.status, 1);
  EXPECT_NE(bad.output.find("error"), std::string::npos);
}

TEST(Cli, TrainLogIsDeterministic) {
  const fs::path data = scratch() / "det.ds";
  ASSERT_EQ(cli("gen-data --seed 4 --noise-ratio 0.3" + kSmall + " --out " + data.string()).status, 0);
  for (int i = 0; i < 2; ++i) {
    const std::string tag = std::to_string(i);
    const CliRun r = cli("train --seed 4" + kSmall + " --data " + data.string() + " --out " +
                      (scratch() / ("det" + tag + ".ckpt")).string() + " --log " +
                      (scratch() / ("det" + tag + ".log")).string());
    ASSERT_EQ(r.status, 0) << r.output;
  }
  EXPECT_EQ(slurp(scratch() / "det0.log"), slurp(scratch() / "det1.log"));
  EXPECT_EQ(slurp(scratch() / "det0.ckpt"), slurp(scratch() / "det1.ckpt"));
  EXPECT_FALSE(slurp(scratch() / "det0.log").empty());
}

TEST(Cli, NoiseBenchOutputsAreDeterministic) {
  const fs::path dir = scratch() / "bench";
  const std::vector<std::string> files = {"noise_bench.tsv", "noise_bench.txt", "noise_bench_cells.tsv"};
  std::vector<std::string> first;
  for (int run = 0; run < 2; ++run) {
    const CliRun r = cli("noise-bench --seeds 1,2 --ratios 0.1,0.3 --jobs 2" + kSmall + " --output-dir " + dir.string());
    ASSERT_EQ(r.status, 0) << r.output;
    for (std::size_t i = 0; i < files.size(); ++i) {
      const std::string text = slurp(dir / files[i]);
      EXPECT_FALSE(text.empty()) << files[i];
      if (run == 0) {
        first.push_back(text);
      } else {
        EXPECT_EQ(text, first[i]) << files[i];
      }
    }
    fs::remove_all(dir);
  }
}

TEST(Cli, AblateWritesEightRows) {
  const fs::path dir = scratch() / "ablate";
  const CliRun r = cli("ablate --seed 1" + kSmall + " --output-dir " + dir.string());
  ASSERT_EQ(r.status, 0) << r.output;
  bool found = false;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.find("ablation") == std::string::npos || entry.path().extension() != ".tsv" ||
        name.find("cells") != std::string::npos) {
      continue;
    }
    found = true;
    std::istringstream in(slurp(entry.path()));
    int rows = 0;
    for (std::string line; std::getline(in, line);) rows += (!line.empty() && line[0] != '#') ? 1 : 0;
    EXPECT_EQ(rows, 9);  // column header plus eight combinations
  }
  EXPECT_TRUE(found);
}
