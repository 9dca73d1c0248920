// End-to-end checks of the carspeed executable. The binary path comes from
// the CARSPEED_CLI environment variable (set by ctest).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "doctest.h"

#include "carspeed/serialize.hpp"
#include "carspeed/util.hpp"

using carspeed::strfmt;

namespace {

namespace fs = std::filesystem;

std::string cli_path() {
    const char* p = std::getenv("CARSPEED_CLI");
    REQUIRE_MESSAGE(p != nullptr, "CARSPEED_CLI must point at the carspeed binary");
    return p;
}

struct RunResult {
    int exit_code;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path errfile =
        fs::temp_directory_path() / strfmt("carspeed_cli_err_%d_%d.txt", ::getpid(), counter++);
    const std::string cmd = cli_path() + " " + args + " 2>" + errfile.string();
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    char buf[4096];
    size_t n;
    while ((n = ::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
    const int status = ::pclose(pipe);
    std::ifstream ef(errfile);
    std::stringstream ss;
    ss << ef.rdbuf();
    fs::remove(errfile);
    return {WEXITSTATUS(status), out, ss.str()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               strfmt("carspeed_cli_%d_%d", ::getpid(), counter()++);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

size_t line_count(const std::string& text) {
    size_t n = 0;
    for (char c : text) {
        if (c == '\n') ++n;
    }
    return n;
}

// one tiny corpus shared by the heavier subcommand tests
const TempDir& shared_corpus() {
    static TempDir dir;
    static bool made = false;
    if (!made) {
        const auto r = run_cli("synth --hours 0.1 --sessions 3 --seed 7 --out " + dir.str());
        REQUIRE(r.exit_code == 0);
        made = true;
    }
    return dir;
}

}  // namespace

TEST_CASE("help and usage errors") {
    SUBCASE("--help exits 0 and documents flags with defaults and units") {
        const auto r = run_cli("--help");
        CHECK(r.exit_code == 0);
        CHECK(r.out.find("synth") != std::string::npos);
        CHECK(r.out.find("train") != std::string::npos);
        const auto h = run_cli("train --help");
        CHECK(h.exit_code == 0);
        CHECK(h.out.find("--batch-size") != std::string::npos);
        CHECK(h.out.find("--decay-steps") != std::string::npos);
        CHECK(h.out.find("30000") != std::string::npos);   // default shown
        CHECK(h.out.find("[Hz]") != std::string::npos);    // unit shown
        CHECK(h.out.find("--gdop-max") != std::string::npos);
    }
    SUBCASE("unknown subcommand exits 2") {
        CHECK(run_cli("frobnicate").exit_code == 2);
    }
    SUBCASE("unknown flag exits 2") {
        CHECK(run_cli("synth --does-not-exist 1 --out /tmp/x").exit_code == 2);
    }
    SUBCASE("operational failure exits 1") {
        const auto r = run_cli("preprocess --data /nonexistent-dir-xyz");
        CHECK(r.exit_code == 1);
        CHECK(r.err.find("error:") != std::string::npos);
    }
}

TEST_CASE("synth writes deterministic session pairs") {
    TempDir a, b;
    const auto ra = run_cli("synth --hours 0.05 --sessions 3 --seed 21 --out " + a.str());
    CHECK(ra.exit_code == 0);
    CHECK(ra.err.find("config") != std::string::npos);  // resolved config is logged
    const auto rb = run_cli("synth --hours 0.05 --sessions 3 --seed 21 --out " + b.str());
    CHECK(rb.exit_code == 0);
    int pairs = 0;
    for (const auto& entry : fs::directory_iterator(a.path)) {
        const std::string name = entry.path().filename().string();
        if (name.ends_with(".imu.csv")) {
            ++pairs;
            CHECK(slurp(entry.path().string()) == slurp((b.path / name).string()));
            const std::string gps = name.substr(0, name.size() - 8) + ".gps.csv";
            CHECK(fs::exists(a.path / gps));
            CHECK(slurp((a.path / gps).string()) == slurp((b.path / gps).string()));
        }
    }
    CHECK(pairs == 3);
}

TEST_CASE("preprocess reports per-session window counts") {
    const auto& corpus = shared_corpus();
    const auto r = run_cli("preprocess --data " + corpus.str() + " --window 80");
    CHECK(r.exit_code == 0);
    CHECK(r.out.rfind("session_id,segments,imu_samples,gps_labels,windows,skipped_labels\n", 0) == 0);
    CHECK(line_count(r.out) == 4);  // header + 3 sessions
}

TEST_CASE("train, eval, infer and trace work together") {
    const auto& corpus = shared_corpus();
    TempDir out;
    const std::string weights = out.file("m.csnw");
    const std::string history = out.file("hist.csv");
    const auto rt = run_cli("train --data " + corpus.str() +
                            " --model dnn_star --window 5 --epochs 2 --seed 3 --out " + weights +
                            " --history " + history);
    REQUIRE_MESSAGE(rt.exit_code == 0, rt.err);

    SUBCASE("the weights file loads and knows its shape") {
        auto m = carspeed::load_weights<float>(weights);
        CHECK(m.name == "dnn_star");
        CHECK(m.window_size == 5);
        CHECK(m.norm.fitted);
    }
    SUBCASE("history has the documented header") {
        const std::string h = slurp(history);
        CHECK(h.rfind("epoch,train_loss,val_loss,lr,seconds\n", 0) == 0);
        CHECK(line_count(h) == 3);
    }
    SUBCASE("eval emits one metrics row") {
        const auto re = run_cli("eval --weights " + weights + " --data " + corpus.str() +
                                " --seed 3 --reps 12");
        REQUIRE_MESSAGE(re.exit_code == 0, re.err);
        CHECK(re.out.rfind("model,window_samples,window_seconds,rmse_mps,mae_mps,latency_ms,"
                           "param_count\n", 0) == 0);
        CHECK(line_count(re.out) == 2);
    }
    SUBCASE("infer prints the trace to stdout") {
        const auto ri = run_cli("infer --weights " + weights + " --data " + corpus.str() +
                                " --session drive_0000");
        REQUIRE_MESSAGE(ri.exit_code == 0, ri.err);
        CHECK(ri.out.rfind("t,gt_speed,pred_speed\n", 0) == 0);
        CHECK(line_count(ri.out) == 1 + 109);  // 110 post-gate labels, 1 lacks history at w=5
    }
    SUBCASE("trace writes the same rows to a file") {
        const std::string tf = out.file("trace.csv");
        const auto rr = run_cli("trace --weights " + weights + " --data " + corpus.str() +
                                " --session drive_0000 --out " + tf);
        REQUIRE_MESSAGE(rr.exit_code == 0, rr.err);
        const auto ri = run_cli("infer --weights " + weights + " --data " + corpus.str() +
                                " --session drive_0000");
        CHECK(slurp(tf) == ri.out);
    }
    SUBCASE("missing session name with several sessions fails cleanly") {
        const auto ri = run_cli("infer --weights " + weights + " --data " + corpus.str());
        CHECK(ri.exit_code == 1);
        CHECK(ri.err.find("--session") != std::string::npos);
    }
}

TEST_CASE("sweep emits one row per window size") {
    const auto& corpus = shared_corpus();
    const auto r = run_cli("sweep --data " + corpus.str() +
                           " --model dnn_star --sizes 5,10,20,40,60,80 --epochs 1 --seed 3"
                           " --no-timing");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    CHECK(r.out.rfind("model,window_samples,window_seconds,rmse_mps,mae_mps,latency_ms,"
                      "param_count\n", 0) == 0);
    CHECK(line_count(r.out) == 7);  // header + six sizes
    CHECK(r.out.find("\ndnn_star,5,0.25,") != std::string::npos);
    CHECK(r.out.find("\ndnn_star,80,4.00,") != std::string::npos);
}

TEST_CASE("config file values apply but flags win") {
    const auto& corpus = shared_corpus();
    TempDir out;
    const std::string cfg = out.file("run.json");
    {
        std::ofstream f(cfg);
        f << R"({"window": 10, "epochs": 1, "model": "dnn_star"})";
    }
    const auto r = run_cli("preprocess --data " + corpus.str() + " --config " + cfg +
                           " --window 20");
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    // flag wins over the config document
    CHECK(r.err.find("\"window\":20") != std::string::npos);

    const auto r2 = run_cli("preprocess --data " + corpus.str() + " --config " + cfg);
    CHECK(r2.err.find("\"window\":10") != std::string::npos);

    SUBCASE("unknown keys are rejected") {
        const std::string bad = out.file("bad.json");
        {
            std::ofstream f(bad);
            f << R"({"windowsize": 10})";
        }
        const auto rb = run_cli("preprocess --data " + corpus.str() + " --config " + bad);
        CHECK(rb.exit_code == 1);
        CHECK(rb.err.find("unknown key") != std::string::npos);
    }
    SUBCASE("keys of other subcommands are tolerated") {
        const std::string shared = out.file("shared.json");
        {
            std::ofstream f(shared);
            f << R"({"hours": 2.0, "window": 10})";
        }
        const auto rs = run_cli("preprocess --data " + corpus.str() + " --config " + shared);
        CHECK(rs.exit_code == 0);
    }
}
