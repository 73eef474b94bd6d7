#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oracles.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CliResult bigl_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    const auto dir = fs::temp_directory_path();
    const auto tag = std::to_string(::getpid()) + "_" + std::to_string(counter++);
    const auto out = dir / ("bigl_cli_" + tag + ".out"), err = dir / ("bigl_cli_" + tag + ".err");
    const std::string cmd = env + " '" BIGL_CLI_PATH "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    fs::remove(out);
    fs::remove(err);
    return r;
}

const std::string kSmall =
    " --batch-size 4 --set image_height=32 --set image_width=32 --set seg_base_width=2"
    " --set gen_base_width=4 --set disc_base_width=4 --set align_disc_width=4";

json manifest(const fs::path& dir) { return json::parse(slurp(dir / "manifest.json")); }

class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        work_ = new fs::path(oracle::scratch_dir("cli"));
        const CliResult r = bigl_cli("phantom --out '" + data().string() + "' --cases 10 --size 32 --depth 3 --seed 2");
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        fs::remove_all(*work_);
        delete work_;
    }
    static fs::path data() { return *work_ / "data"; }
    static std::string data_arg() { return " --data '" + data().string() + "'"; }

    static fs::path* work_;
};

fs::path* CliTest::work_ = nullptr;

}  // namespace

TEST_F(CliTest, PhantomRecordsSettingsInManifest) {
    const json m = manifest(data());
    EXPECT_EQ(m["phantom"]["cases"], 10);
    EXPECT_EQ(m["phantom"]["image_size"], 32);
    EXPECT_TRUE(fs::exists(m["phantom"]["pairing_manifest"].get<std::string>()));
    EXPECT_TRUE(m.contains("code_hash"));
}

TEST_F(CliTest, UsageErrorsExitWithTwo) {
    EXPECT_EQ(bigl_cli("").code, 2);
    EXPECT_EQ(bigl_cli("frobnicate").code, 2);
    EXPECT_EQ(bigl_cli("phantom --out '" + (*work_ / "zero").string() + "' --cases 0").code, 2);
    EXPECT_EQ(bigl_cli("train-syn --out x").code, 2);

    const CliResult missing = bigl_cli("train-syn --data '" + (*work_ / "nowhere").string() + "' --out '" +
                                 (*work_ / "r0").string() + "'");
    EXPECT_EQ(missing.code, 2);
    EXPECT_NE(missing.err.find("nowhere"), std::string::npos) << missing.err;

    const CliResult typo = bigl_cli("train-syn" + data_arg() + " --out '" + (*work_ / "r1").string() + "' --set lambda_typo=1");
    EXPECT_EQ(typo.code, 2);
    EXPECT_NE(typo.err.find("lambda_typo"), std::string::npos) << typo.err;

    const CliResult device = bigl_cli("train-syn" + data_arg() + " --out '" + (*work_ / "r2").string() + "'",
                                "BIGL_DEVICE=cuda");
    EXPECT_EQ(device.code, 2);
    EXPECT_NE(device.err.find("cpu"), std::string::npos);
}

TEST_F(CliTest, TrainUdaWithoutStageOneIsRejected) {
    const auto out = *work_ / "no_stage1";
    const CliResult r = bigl_cli("train-uda" + data_arg() + " --out '" + out.string() + "'" + kSmall);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("stage-1"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(out / "stage2"));
}

TEST_F(CliTest, TwoStagePipelineEvaluateAndReport) {
    const auto run = *work_ / "bigl";
    const std::string out = " --out '" + run.string() + "'";
    CliResult r = bigl_cli("train-syn" + data_arg() + out + kSmall + " --syn-epochs 1");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("syn_epochs = 1 (flag)"), std::string::npos);
    const auto ckpt = run / "stage1" / "g_st_1.ckpt";
    ASSERT_TRUE(fs::exists(ckpt));
    const auto bytes = slurp(ckpt);

    // Re-running a finished stage with --resume is a no-op.
    r = bigl_cli("train-syn" + data_arg() + out + kSmall + " --syn-epochs 1 --resume");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("already complete"), std::string::npos) << r.out;
    EXPECT_EQ(slurp(ckpt), bytes);

    r = bigl_cli("train-uda" + data_arg() + out + kSmall + " --epochs 1");
    ASSERT_EQ(r.code, 0) << r.err;
    const json m = manifest(run);
    EXPECT_EQ(m["stage1"]["status"], "complete");
    EXPECT_EQ(m["stage2"]["method"], "bigl");
    EXPECT_EQ(m["config"]["epochs"], "1");
    EXPECT_TRUE(fs::exists(run / "stage2" / "segnet_1.ckpt"));
    EXPECT_TRUE(fs::exists(run / "stage2" / "train_log.jsonl"));

    const auto eval_dir = *work_ / "eval_bigl";
    r = bigl_cli("eval --checkpoint '" + run.string() + "'" + data_arg() + " --out '" + eval_dir.string() +
                 "' --overlays");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("WT"), std::string::npos);
    EXPECT_TRUE(fs::exists(eval_dir / "records.csv"));
    EXPECT_FALSE(manifest(eval_dir)["eval"]["overlays"].empty());

    const auto self_dir = *work_ / "eval_self";
    r = bigl_cli("eval --self-test" + data_arg() + " --out '" + self_dir.string() + "'" + kSmall);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("100.00$\\pm$0.00"), std::string::npos) << r.out;

    const auto table = *work_ / "table.txt";
    r = bigl_cli("report '" + eval_dir.string() + "' '" + self_dir.string() + "' --names ours gt --out '" +
                 table.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string t = slurp(table);
    EXPECT_NE(t.find("\\textbf{100.00$\\pm$0.00}"), std::string::npos) << t;
    EXPECT_NE(t.find("ours"), std::string::npos);
    EXPECT_EQ(bigl_cli("report '" + eval_dir.string() + "' --names a b").code, 2);
}

TEST_F(CliTest, SourceOnlyManifestAndCorruptCheckpoint) {
    const auto run = *work_ / "source_only";
    CliResult r = bigl_cli("train-uda --source-only" + data_arg() + " --out '" + run.string() + "'" + kSmall + " --epochs 1");
    ASSERT_EQ(r.code, 0) << r.err;
    const json m = manifest(run);
    EXPECT_EQ(m["stage2"]["method"], "source_only");
    EXPECT_FALSE(m["stage2"].contains("stage1"));
    EXPECT_FALSE(m.contains("stage1"));

    const auto ckpt = run / "stage2" / "segnet_1.ckpt";
    fs::resize_file(ckpt, fs::file_size(ckpt) / 2);
    r = bigl_cli("eval --checkpoint '" + ckpt.string() + "'" + data_arg() + " --out '" + (*work_ / "e").string() + "'");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("segnet_1.ckpt"), std::string::npos) << r.err;
}

TEST_F(CliTest, ReportRejectsMismatchedRegions) {
    const auto a = *work_ / "a.csv", b = *work_ / "b.csv";
    std::ofstream(a) << "case_id,region,metric,value\nc1,WT,dsc,0.5\nc1,WT,hd95,1\nc1,WT,asd,1\n";
    std::ofstream(b) << "case_id,region,metric,value\nc1,MYO,dsc,0.5\nc1,MYO,hd95,1\nc1,MYO,asd,1\n";
    const CliResult r = bigl_cli("report '" + a.string() + "' '" + b.string() + "'");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("MYO"), std::string::npos) << r.err;
    const CliResult one = bigl_cli("report '" + a.string() + "'");
    EXPECT_EQ(one.code, 0) << one.err;
    EXPECT_NE(one.out.find("50.00$\\pm$0.00"), std::string::npos);
}
