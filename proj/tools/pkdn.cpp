#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "pkdn/config.hpp"
#include "pkdn/metrics.hpp"
#include "pkdn/selftest.hpp"
#include "pkdn/trainer.hpp"

namespace fs = std::filesystem;
using namespace pkdn;

namespace {

template <class F>
int dispatch_mode(ElemMode mode, F&& fn) {
    if (mode == ElemMode::f32) return fn.template operator()<float>();
    return fn.template operator()<double>();
}

void write_config_echo(const RunConfig& cfg, const std::string& run_dir) {
    fs::create_directories(run_dir);
    std::ofstream os(fs::path(run_dir) / "config.echo");
    if (!os) throw Error(cat("cannot write config echo under '", run_dir, "'"));
    os << cfg.echo();
}

int cmd_synth(int count, int size, u64 seed, const std::string& out_dir, int n_classes) {
    fs::create_directories(fs::path(out_dir) / "hr");
    fs::create_directories(fs::path(out_dir) / "parsing");
    for (int i = 0; i < count; ++i) {
        auto [hr, parsing] = synth_face(mix_seed(seed, static_cast<u64>(i)), size, n_classes);
        std::ostringstream stem;
        stem << "synth_" << std::setw(4) << std::setfill('0') << i;
        save_image(hr, (fs::path(out_dir) / "hr" / (stem.str() + ".png")).string());
        save_label_map(parsing_to_labels(parsing), size, size,
                       (fs::path(out_dir) / "parsing" / (stem.str() + ".png")).string());
    }
    std::cout << "wrote " << count << " hr/parsing pairs under " << out_dir << "\n";
    return 0;
}

int cmd_train_teacher(const RunConfig& cfg, const std::string& run_dir, const std::string& resume) {
    write_config_echo(cfg, run_dir);
    const Dataset ds = cfg.make_dataset();
    return dispatch_mode(cfg.net.element_mode, [&]<class T>() {
        TrainConfig tc = cfg.train_config();
        tc.run_dir = run_dir;
        std::ofstream log(fs::path(run_dir) / "train.log");
        tc.log = &log;
        std::optional<Network<T>> net;
        if (!resume.empty()) {
            TrainExtras extras;
            net.emplace(checkpoint_load<T>(cfg.net, resume, &extras));
            if (net->kind() != NetKind::teacher)
                throw ValidationError(cat("'", resume, "' is not a teacher checkpoint"));
            if (extras.data_seed != cfg.seed)
                throw ValidationError(cat("resume data seed ", extras.data_seed,
                                          " does not match configured seed ", cfg.seed));
            tc.start_step = extras.step;
        } else {
            net.emplace(build_teacher<T>(cfg.net));
        }
        const TrainState st = train_teacher(*net, ds, tc);
        std::cout << "teacher trained to step " << st.step << ", final L_T = " << st.history.back().total
                  << "\n";
        return 0;
    });
}

int cmd_train_student(const RunConfig& cfg, const std::string& run_dir, const std::string& teacher_ckpt,
                      const std::string& resume) {
    write_config_echo(cfg, run_dir);
    const Dataset ds = cfg.make_dataset();
    const CheckpointInfo info = checkpoint_peek(teacher_ckpt);
    if (info.kind != NetKind::teacher)
        throw ValidationError(cat("'", teacher_ckpt, "' is not a teacher checkpoint"));
    if (info.cfg.element_mode != cfg.net.element_mode)
        throw ValidationError("teacher checkpoint element mode does not match configured element_mode");
    return dispatch_mode(cfg.net.element_mode, [&]<class T>() {
        Network<T> teacher = checkpoint_load<T>(info.cfg, teacher_ckpt);
        teacher.freeze();
        TrainConfig tc = cfg.train_config();
        tc.run_dir = run_dir;
        std::ofstream log(fs::path(run_dir) / "train.log");
        tc.log = &log;
        std::optional<Network<T>> student;
        if (!resume.empty()) {
            TrainExtras extras;
            student.emplace(checkpoint_load<T>(cfg.net, resume, &extras));
            if (student->kind() != NetKind::student)
                throw ValidationError(cat("'", resume, "' is not a student checkpoint"));
            if (extras.data_seed != cfg.seed)
                throw ValidationError(cat("resume data seed ", extras.data_seed,
                                          " does not match configured seed ", cfg.seed));
            tc.start_step = extras.step;
        } else {
            student.emplace(build_student<T>(cfg.net));
        }
        const TrainState st = train_student(*student, teacher, ds, tc);
        std::cout << "student trained to step " << st.step << ", final loss = " << st.history.back().total
                  << " (l_sr=" << st.history.back().l_sr << ", l_ts=" << st.history.back().l_ts
                  << ", l_fs=" << st.history.back().l_fs << ")\n";
        return 0;
    });
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir) {
    const CheckpointInfo info = checkpoint_peek(ckpt);
    const Dataset ds = Dataset::from_directory(data_dir, info.cfg.n_classes, info.cfg.scale);
    fs::create_directories(out_dir);
    return dispatch_mode(info.cfg.element_mode, [&]<class T>() {
        Network<T> net = checkpoint_load<T>(info.cfg, ckpt);
        net.freeze();
        auto model = [&](const Sample& s) -> Tensor64 {
            const Tensor<T> lr = cast_tensor<T>(s.lr);
            ForwardResult<T> fr;
            if (net.needs_parsing()) {
                const Tensor<T> parsing = cast_tensor<T>(s.parsing);
                fr = teacher_forward(net, lr, parsing);
            } else {
                fr = student_forward(net, lr);
            }
            return cast_tensor<double>(fr.sr);
        };
        const MetricReport rep = evaluate(model, ds);
        std::ofstream tsv(fs::path(out_dir) / "report.tsv");
        tsv << rep.to_tsv();
        std::ofstream js(fs::path(out_dir) / "report.json");
        js << rep.to_json().dump(2) << "\n";
        std::cout << rep.to_tsv();
        return 0;
    });
}

int cmd_infer(const std::string& ckpt, const std::string& in_path, const std::string& out_path,
              const std::string& parsing_path) {
    const CheckpointInfo info = checkpoint_peek(ckpt);
    return dispatch_mode(info.cfg.element_mode, [&]<class T>() {
        Network<T> net = checkpoint_load<T>(info.cfg, ckpt);
        net.freeze();
        const Tensor64 lr64 = load_image(in_path);
        const Tensor<T> lr = cast_tensor<T>(lr64);
        ForwardResult<T> fr;
        if (net.needs_parsing()) {
            if (parsing_path.empty())
                throw ValidationError(
                    "this is a teacher checkpoint: the teacher consumes an LR image plus a parsing map "
                    "extracted from the ground-truth HR image, so --parsing is required (use a student "
                    "checkpoint for LR-only inference)");
            const Tensor64 p64 = load_parsing(parsing_path, info.cfg.n_classes);
            fr = teacher_forward(net, lr, cast_tensor<T>(p64));
        } else {
            fr = student_forward(net, lr);
        }
        save_image(cast_tensor<double>(fr.sr), out_path);
        std::cout << "wrote " << out_path << " (" << fr.sr.h() << "x" << fr.sr.w() << ")\n";
        return 0;
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PKDN face super-resolution: teacher/student training, evaluation and inference"};
    app.require_subcommand(1);

    auto* sc_selftest = app.add_subcommand("selftest", "run the gradient-check and invariant suite (64-bit)");
    bool inject_fault = false;
    sc_selftest->add_flag("--inject-grad-fault", inject_fault,
                          "add a negative control with a corrupted backward rule");

    auto* sc_synth = app.add_subcommand("synth", "generate a synthetic face corpus (hr/ + parsing/)");
    int synth_count = 8, synth_size = 64, synth_classes = 4;
    u64 synth_seed = 1;
    std::string synth_out;
    sc_synth->add_option("--count", synth_count, "number of images")->required();
    sc_synth->add_option("--size", synth_size, "square image size (>= 32)");
    sc_synth->add_option("--seed", synth_seed, "corpus seed");
    sc_synth->add_option("--out", synth_out, "output directory")->required();
    sc_synth->add_option("--n-classes", synth_classes, "parsing classes");

    std::string cfg_path, run_dir, resume, teacher_ckpt;
    std::vector<std::string> overrides;
    auto add_cfg_opts = [&](CLI::App* sc) {
        sc->add_option("--config", cfg_path, "key=value config file");
        sc->add_option("--set", overrides, "override a config key (key=value, repeatable)");
        sc->add_option("--run-dir", run_dir, "run directory for logs and checkpoints")->required();
        sc->add_option("--resume", resume, "checkpoint to resume from");
    };
    auto* sc_teacher = app.add_subcommand("train-teacher", "stage one: train the parsing-guided teacher");
    add_cfg_opts(sc_teacher);
    auto* sc_student = app.add_subcommand("train-student", "stage two: distill into the LR-only student");
    add_cfg_opts(sc_student);
    sc_student->add_option("--teacher", teacher_ckpt, "frozen teacher checkpoint")->required();

    auto* sc_eval = app.add_subcommand("eval", "PSNR/SSIM report over a paired directory");
    std::string eval_ckpt, eval_data, eval_out;
    sc_eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
    sc_eval->add_option("--data", eval_data, "dataset directory (hr/ + parsing/)")->required();
    sc_eval->add_option("--out", eval_out, "report output directory")->required();

    auto* sc_infer = app.add_subcommand("infer", "super-resolve a single LR image");
    std::string infer_ckpt, infer_in, infer_out, infer_parsing;
    sc_infer->add_option("--ckpt", infer_ckpt, "checkpoint")->required();
    sc_infer->add_option("--in", infer_in, "LR input image")->required();
    sc_infer->add_option("--out", infer_out, "SR output image")->required();
    sc_infer->add_option("--parsing", infer_parsing, "HR parsing map (teacher checkpoints only)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (sc_selftest->parsed()) return run_selftest(std::cout, inject_fault) == 0 ? 0 : 1;
        if (sc_synth->parsed()) return cmd_synth(synth_count, synth_size, synth_seed, synth_out, synth_classes);
        if (sc_teacher->parsed())
            return cmd_train_teacher(RunConfig::resolve(cfg_path, overrides), run_dir, resume);
        if (sc_student->parsed())
            return cmd_train_student(RunConfig::resolve(cfg_path, overrides), run_dir, teacher_ckpt, resume);
        if (sc_eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out);
        if (sc_infer->parsed()) return cmd_infer(infer_ckpt, infer_in, infer_out, infer_parsing);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
