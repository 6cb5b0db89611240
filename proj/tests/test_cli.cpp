#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hesskit/io.hpp"
#include "hesskit/model.hpp"

namespace fs = std::filesystem;
using hesskit::Tensor;

namespace {

const std::string kCli = HESSKIT_CLI_PATH;

struct CliResult {
  int code = -1;
  std::string err;
};

fs::path workspace() {
  const fs::path p = fs::temp_directory_path() / "hesskit_cli_tests";
  fs::create_directories(p);
  return p;
}

CliResult run_cli(const std::string& args) {
  const fs::path errfile = workspace() / "stderr.txt";
  const std::string cmd = kCli + " " + args + " > /dev/null 2> " + errfile.string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(errfile);
  std::ostringstream ss;
  ss << f.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, ExactWritesExpectedShapes) {
  const fs::path out = workspace() / "exact_shapes";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("exact --subset single-layer --layer 1 --t 25 --batch 2 --out " + out.string())
                .code,
            0);
  const Tensor h = hesskit::read_csv_matrix_file((out / "hessian.csv").string());
  EXPECT_EQ(h.rows(), 25);
  EXPECT_EQ(h.cols(), 25);

  const fs::path out2 = workspace() / "exact_all";
  fs::remove_all(out2);
  ASSERT_EQ(run_cli("exact --subset all-layers --t 2 --batch 1 --out " + out2.string()).code, 0);
  const Tensor h2 = hesskit::read_csv_matrix_file((out2 / "hessian.csv").string());
  EXPECT_EQ(h2.rows(), 24);  // L*t = 12*2
  EXPECT_EQ(h2.cols(), 24);
}

TEST(Cli, CsvRoundTripIsBitExact) {
  const fs::path out = workspace() / "roundtrip";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("exact --subset block --block 2 --t 6 --batch 2 --out " + out.string()).code,
            0);
  const Tensor h = hesskit::read_csv_matrix_file((out / "hessian.csv").string());

  // writing the parsed matrix again reproduces the file byte for byte
  const fs::path copy = workspace() / "roundtrip_copy.csv";
  hesskit::write_csv_matrix_file(copy.string(), h);
  EXPECT_EQ(slurp(out / "hessian.csv"), slurp(copy));
}

TEST(Cli, HeaderFlagAddsIndexLabels) {
  const fs::path out = workspace() / "header";
  fs::remove_all(out);
  ASSERT_EQ(
      run_cli("exact --subset single-layer --layer 2 --t 3 --header --batch 1 --out " + out.string())
          .code,
      0);
  std::ifstream f(out / "hessian.csv");
  std::string first;
  std::getline(f, first);
  EXPECT_EQ(first, "l2:o1,l2:o2,l2:o3");
  const Tensor h = hesskit::read_csv_matrix_file((out / "hessian.csv").string(), /*header=*/true);
  EXPECT_EQ(h.rows(), 3);
}

TEST(Cli, DeterministicAcrossRunsAndThreadCounts) {
  const fs::path a = workspace() / "det_a", b = workspace() / "det_b", c = workspace() / "det_c";
  for (const auto& p : {a, b, c}) fs::remove_all(p);
  const std::string common = "exact --subset kind-all-blocks --kind fc1 --t 10 --batch 3 --seed 5 ";
  ASSERT_EQ(run_cli(common + "--threads 1 --out " + a.string()).code, 0);
  ASSERT_EQ(run_cli(common + "--threads 1 --out " + b.string()).code, 0);
  ASSERT_EQ(run_cli(common + "--threads 4 --out " + c.string()).code, 0);
  EXPECT_EQ(slurp(a / "hessian.csv"), slurp(b / "hessian.csv"));
  EXPECT_EQ(slurp(a / "hessian.csv"), slurp(c / "hessian.csv"));
  EXPECT_EQ(slurp(a / "hessian.pgm"), slurp(c / "hessian.pgm"));
}

TEST(Cli, DiagHistoryRowsMatchK) {
  const fs::path out = workspace() / "diag_hist";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("diag --layer 1 --K 17 --batch 1 --out " + out.string()).code, 0);
  std::ifstream f(out / "history.csv");
  std::string line;
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 17);

  // diagonal reshaped to the layer's matrix shape
  const Tensor diag = hesskit::read_csv_matrix_file((out / "diag.csv").string());
  EXPECT_EQ(diag.rows(), 16);
  EXPECT_EQ(diag.cols(), 16);
}

TEST(Cli, DiagTruthRowsAddLossColumn) {
  const fs::path out = workspace() / "diag_truth";
  fs::remove_all(out);
  ASSERT_EQ(
      run_cli("diag --layer 1 --K 5 --batch 1 --truth-rows 1 --header --out " + out.string()).code,
      0);
  std::ifstream f(out / "history.csv");
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "k,rel_l2_diff,partial_rel_l2_loss");
}

TEST(Cli, FdCompareGridAndQuadraticMode) {
  const fs::path out = workspace() / "fd_grid";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("fd-compare --h-min 1e-6 --h-max 1e-1 --h-steps 8 --batch 1 --out " +
                    out.string())
                .code,
            0);
  const Tensor grid = hesskit::read_csv_matrix_file((out / "fd_errors.csv").string());
  EXPECT_EQ(grid.rows(), 8);
  EXPECT_EQ(grid.cols(), 2);
  EXPECT_DOUBLE_EQ(grid.at(0, 0), 1e-1);  // descending grid
  EXPECT_NEAR(grid.at(7, 0), 1e-6, 1e-18);

  const fs::path qout = workspace() / "fd_quad";
  fs::remove_all(qout);
  ASSERT_EQ(run_cli("fd-compare --quadratic 5 --h-steps 6 --out " + qout.string()).code, 0);
  const Tensor qgrid = hesskit::read_csv_matrix_file((qout / "fd_errors.csv").string());
  for (std::int64_t i = 0; i < qgrid.rows(); ++i) EXPECT_LT(qgrid.at(i, 1), 1e-8);
}

TEST(Cli, BatchSweepTable) {
  const fs::path out = workspace() / "sweep";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("batch-sweep --b-list 1,2,4 --t 10 --out " + out.string()).code, 0);
  std::ifstream f(out / "batch_metrics.csv");
  std::string l1, l2, l3;
  std::getline(f, l1);
  std::getline(f, l2);
  std::getline(f, l3);
  EXPECT_EQ(l1.substr(0, 2), "1,");
  EXPECT_EQ(l1.back(), ',');  // empty difference column on the first row
  EXPECT_EQ(l3.substr(0, 4), "4,0,");  // reference row has zero loss
}

TEST(Cli, DiagMicroBatchMatchesWholeBatch) {
  const fs::path a = workspace() / "diag_whole", b = workspace() / "diag_micro";
  for (const auto& p : {a, b}) fs::remove_all(p);
  const std::string common = "diag --layer 1 --K 8 --batch 2 --probe-seed 4 --out ";
  ASSERT_EQ(run_cli(common + a.string()).code, 0);
  ASSERT_EQ(run_cli(common + b.string() + " --micro-batch 1").code, 0);
  const Tensor da = hesskit::read_csv_matrix_file((a / "diag.csv").string());
  const Tensor db = hesskit::read_csv_matrix_file((b / "diag.csv").string());
  ASSERT_EQ(da.data.size(), db.data.size());
  for (std::size_t i = 0; i < da.data.size(); ++i)
    EXPECT_NEAR(da.data[i], db.data[i], 1e-10 * (1.0 + std::abs(da.data[i])));
}

TEST(Cli, ConfigFileIsHonored) {
  const fs::path cfg = workspace() / "toy.cfg";
  {
    std::ofstream f(cfg);
    f << "blocks = 1\nn_heads = 2\nd_model = 8\nd_ffn = 16\nvocab = 32\nseq_len = 8\nseed = 3\n";
  }
  const fs::path out = workspace() / "cfg_run";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("exact --config " + cfg.string() + " --subset all-layers --t 2 --batch 1 --out " +
                    out.string())
                .code,
            0);
  const Tensor h = hesskit::read_csv_matrix_file((out / "hessian.csv").string());
  EXPECT_EQ(h.rows(), 12);  // L*t = 6*2
}

TEST(Cli, CorpusFileIsHonored) {
  hesskit::ModelConfig cfg;
  const fs::path corpus = workspace() / "corpus.txt";
  {
    std::ofstream f(corpus);
    hesskit::Rng rng(12);
    for (int line = 0; line < 3; ++line) {
      for (std::int64_t j = 0; j < cfg.seq_len; ++j) f << rng.below(cfg.vocab) << ' ';
      f << '\n';
    }
  }
  const fs::path a = workspace() / "corpus_a", b = workspace() / "corpus_b";
  for (const auto& p : {a, b}) fs::remove_all(p);
  const std::string common =
      "exact --corpus " + corpus.string() + " --t 5 --batch 3 --out ";
  ASSERT_EQ(run_cli(common + a.string()).code, 0);
  ASSERT_EQ(run_cli(common + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "hessian.csv"), slurp(b / "hessian.csv"));

  // asking for more samples than the corpus holds is a usage error
  EXPECT_EQ(run_cli("exact --corpus " + corpus.string() + " --t 5 --batch 9 --out " +
                    (workspace() / "corpus_c").string())
                .code,
            2);
}

TEST(Cli, RerunReproducesEveryCommand) {
  const struct {
    const char* name;
    std::string args;
    std::vector<std::string> files;
  } cases[] = {
      {"fd", "fd-compare --h-steps 4 --batch 1", {"fd_errors.csv"}},
      {"sweep", "batch-sweep --b-list 1,2 --t 8", {"batch_metrics.csv"}},
  };
  for (const auto& c : cases) {
    const fs::path first = workspace() / (std::string("rerun_") + c.name);
    const fs::path second = workspace() / (std::string("rerun2_") + c.name);
    fs::remove_all(first);
    fs::remove_all(second);
    ASSERT_EQ(run_cli(c.args + " --out " + first.string()).code, 0) << c.name;
    ASSERT_EQ(run_cli("rerun --manifest " + (first / "manifest.json").string() + " --out " +
                      second.string())
                  .code,
              0)
        << c.name;
    for (const auto& file : c.files) EXPECT_EQ(slurp(first / file), slurp(second / file)) << file;
  }
}

TEST(Cli, ExitCodeContract) {
  // 2: invalid flags / unusable configuration
  EXPECT_EQ(run_cli("exact --subset nonsense --out " + (workspace() / "x1").string()).code, 2);
  EXPECT_EQ(run_cli("exact --no-such-flag --out " + (workspace() / "x2").string()).code, 2);
  EXPECT_EQ(run_cli("exact --subset single-layer --layer 99 --t 2 --out " +
                    (workspace() / "x3").string())
                .code,
            2);
  EXPECT_EQ(run_cli("exact --t 100000 --out " + (workspace() / "x4").string()).code, 2);

  // 3: dense cap exceeded
  const CliResult cap = run_cli("exact --subset single-layer --t 25 --cap 10 --batch 1 --out " +
                                (workspace() / "x5").string());
  EXPECT_EQ(cap.code, 3);
  EXPECT_NE(cap.err.find("cap"), std::string::npos);

  // 4: numerical failure (finite-difference step so large the loss overflows)
  const CliResult num = run_cli("fd-compare --quadratic 4 --h-min 1e200 --h-max 1e200 --h-steps 1 --out " +
                                (workspace() / "x6").string());
  EXPECT_EQ(num.code, 4);
  EXPECT_NE(num.err.find("non-finite"), std::string::npos);

  // each failure prints a one-line diagnostic
  for (const CliResult& r : {cap, num}) {
    EXPECT_FALSE(r.err.empty());
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
    EXPECT_EQ(r.err.rfind("error: ", 0), 0u);
  }
}

TEST(Cli, EnvThreadFallbackKeepsResultsIdentical) {
  const fs::path a = workspace() / "env_a", b = workspace() / "env_b";
  for (const auto& p : {a, b}) fs::remove_all(p);
  ASSERT_EQ(run_cli("exact --t 12 --batch 2 --threads 1 --out " + a.string()).code, 0);
  const std::string cmd = "HESSKIT_THREADS=3 " + kCli + " exact --t 12 --batch 2 --out " +
                          b.string() + " > /dev/null 2>&1";
  ASSERT_EQ(WEXITSTATUS(std::system(cmd.c_str())), 0);
  EXPECT_EQ(slurp(a / "hessian.csv"), slurp(b / "hessian.csv"));
}

TEST(Cli, PgmIsWellFormed) {
  const fs::path out = workspace() / "pgm";
  fs::remove_all(out);
  ASSERT_EQ(run_cli("exact --t 8 --batch 1 --out " + out.string()).code, 0);
  std::ifstream f(out / "hessian.pgm");
  std::string magic;
  std::int64_t w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 8);
  EXPECT_EQ(h, 8);
  EXPECT_EQ(maxval, 255);
  int pixel = 0, count = 0, top = -1;
  while (f >> pixel) {
    EXPECT_GE(pixel, 0);
    EXPECT_LE(pixel, 255);
    top = std::max(top, pixel);
    ++count;
  }
  EXPECT_EQ(count, 64);
  EXPECT_EQ(top, 255);  // the largest magnitude maps to full scale
}
