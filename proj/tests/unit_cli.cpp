#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "testutil.hpp"

// End-to-end coverage of the command-line tool as a child process; FACEAUG_CLI
// is injected by the build as the path to the built binary.

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string("\"") + FACEAUG_CLI + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

int count_files(const std::string& root, const std::string& ext) {
    if (!std::filesystem::exists(root)) return -1;
    int n = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().extension() == ext) ++n;
    return n;
}

const char* kTinyConfig = R"({
  "image_size": 16,
  "channels": 1,
  "gen_channels": 16,
  "gen_residual_blocks": 2,
  "embed_dim": 16,
  "embed_blocks": 1,
  "embed_reductions": 2,
  "embed_base_channels": 8,
  "batch_size": 4,
  "epochs": 1,
  "triplet_strategy": "all",
  "seed": 3
})";

}  // namespace

TEST_CASE("cli argument errors exit with code 1") {
    CHECK(run("") == 1);
    CHECK(run("frobnicate") == 1);
    CHECK(run("train --bogus-flag 1") == 1);
    CHECK(run("prepare --out /tmp/nowhere_xyz") == 1);  // needs --data or --synthetic
    CHECK(run("--help") == 0);
}

TEST_CASE("cli runtime failures exit with code 2") {
    tu::TempDir tmp("cli2");
    {
        std::ofstream f(tmp.sub("tiny.json"));
        f << kTinyConfig;
    }
    CHECK(run("train --config " + tmp.sub("tiny.json") + " --data " + tmp.sub("no_such_dir") +
              " --out " + tmp.sub("out")) == 2);
    CHECK(run("plot --input " + tmp.sub("missing.csv") + " --out " + tmp.sub("plots")) == 2);
}

TEST_CASE("cli pipeline: prepare, train, augment, evaluate, min-images, plot") {
    tu::TempDir tmp("clipipe");
    const std::string prep = tmp.sub("prep");

    REQUIRE(run("prepare --out " + prep +
                " --synthetic --identities 3 --images-per-identity 4 --size 16 --channels 1"
                " --seed 3 --split-per-identity 2 --pairs-per-class 6") == 0);
    CHECK(count_files(prep + "/full", ".png") == 12);
    CHECK(count_files(prep + "/train", ".png") == 6);
    CHECK(count_files(prep + "/holdout", ".png") == 6);
    CHECK(std::filesystem::exists(prep + "/pairs.tsv"));
    CHECK(std::filesystem::exists(prep + "/run.json"));

    {
        std::ofstream f(tmp.sub("tiny.json"));
        f << kTinyConfig;
    }
    const std::string run1 = tmp.sub("run1");
    REQUIRE(run("train --config " + tmp.sub("tiny.json") + " --data " + prep + "/train --out " +
                run1) == 0);
    CHECK(std::filesystem::exists(run1 + "/runlog.csv"));
    CHECK(std::filesystem::exists(run1 + "/ckpt_final.bin"));
    CHECK(std::filesystem::exists(run1 + "/config.json"));
    CHECK(std::filesystem::exists(run1 + "/run.json"));

    const std::string ckpt = run1 + "/ckpt_final.bin";
    const std::string aug = tmp.sub("aug");
    REQUIRE(run("augment --checkpoint " + ckpt + " --data " + prep + "/train --out " + aug +
                " --k 2 --seed 4") == 0);
    CHECK(count_files(aug, ".png") == 12);
    CHECK(std::filesystem::exists(aug + "/manifest.tsv"));
    CHECK(run("augment --checkpoint " + ckpt + " --data " + prep + "/train --out " + aug +
              " --k 2 --seed 4") == 2);
    CHECK(run("augment --checkpoint " + ckpt + " --data " + prep + "/train --out " + aug +
              " --k 2 --seed 4 --overwrite") == 0);

    const std::string eval_dir = tmp.sub("eval");
    REQUIRE(run("evaluate --checkpoint " + ckpt + " --pairs " + prep + "/pairs.tsv --out " +
                eval_dir) == 0);
    CHECK(std::filesystem::exists(eval_dir + "/verification_report.csv"));
    CHECK(std::filesystem::exists(eval_dir + "/run.json"));

    const std::string mini = tmp.sub("mini");
    REQUIRE(run("min-images --checkpoint " + ckpt + " --data " + prep +
                "/full --out " + mini + " --target-accuracy 0.3 --seed 2") == 0);
    CHECK(std::filesystem::exists(mini + "/min_images_report.csv"));

    const std::string plots = tmp.sub("plots");
    REQUIRE(run("plot --input " + run1 + "/runlog.csv --out " + plots) == 0);
    CHECK(std::filesystem::exists(plots + "/loss_curve.png"));
    CHECK(std::filesystem::exists(plots + "/loss_curve.csv"));

    const std::string plots2 = tmp.sub("plots2");
    REQUIRE(run("plot --input " + eval_dir + "/verification_report.csv --out " + plots2) == 0);
    CHECK(std::filesystem::exists(plots2 + "/accuracy_curve.png"));
}

TEST_CASE("cli compare rejects a single seed") {
    tu::TempDir tmp("clicmp");
    const std::string prep = tmp.sub("prep");
    REQUIRE(run("prepare --out " + prep +
                " --synthetic --identities 3 --images-per-identity 4 --size 16 --channels 1"
                " --seed 5 --split-per-identity 2 --pairs-per-class 4") == 0);
    {
        std::ofstream f(tmp.sub("tiny.json"));
        f << kTinyConfig;
    }
    CHECK(run("compare --config " + tmp.sub("tiny.json") + " --data " + prep + "/train --pairs " +
              prep + "/pairs.tsv --out " + tmp.sub("out") + " --k 0 --seeds 7 --no-adversarial") ==
          2);
}

TEST_CASE("cli train resume continues from a checkpoint") {
    tu::TempDir tmp("cliresume");
    const std::string prep = tmp.sub("prep");
    REQUIRE(run("prepare --out " + prep +
                " --synthetic --identities 3 --images-per-identity 4 --size 16 --channels 1"
                " --seed 6") == 0);
    {
        std::ofstream f(tmp.sub("tiny.json"));
        f << kTinyConfig;
    }
    const std::string run1 = tmp.sub("run1");
    REQUIRE(run("train --config " + tmp.sub("tiny.json") + " --data " + prep + "/full --out " +
                run1) == 0);
    // A finished run resumes into an immediate no-op completion.
    const std::string run2 = tmp.sub("run2");
    CHECK(run("train --resume " + run1 + "/ckpt_final.bin --data " + prep + "/full --out " +
              run2) == 0);
    CHECK(run("train --config " + tmp.sub("tiny.json") + " --resume " + run1 +
              "/ckpt_final.bin --data " + prep + "/full --out " + tmp.sub("run3")) == 1);
}
