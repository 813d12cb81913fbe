// omnimix: train, sample and inspect the equirectangular mixer GAN.
//
// Exit codes: 0 success, 1 verification or usage failure, 2 data/format error.

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "omnimix/checkpoint.hpp"
#include "omnimix/cost.hpp"
#include "omnimix/gradcheck.hpp"
#include "omnimix/trainer.hpp"

namespace fs = std::filesystem;
using namespace omnimix;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", path, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "override one config key, e.g. --set train.iterations=10")
        ->take_all();
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig c = path.empty() ? base : load_config_file(path, base);
    for (const auto& kv : overrides) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    c.model.validate();
    c.train.validate();
    return c;
  }
};

bool deterministic_requested() {
  const char* v = std::getenv("OMNIMIX_DETERMINISTIC");
  return v && std::string(v) != "0";
}

std::vector<std::string> read_class_list(const std::string& path) {
  return detail::read_lines(path);
}

std::size_t resolve_label(const std::string& text, std::size_t num_classes,
                          const std::string& classes_file) {
  const std::string range = "valid labels are 0.." + std::to_string(num_classes - 1);
  if (text.empty()) throw UsageError("--label is required; " + range);
  std::size_t label = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), label);
  if (ec != std::errc() || p != text.data() + text.size()) {
    if (classes_file.empty()) {
      throw UsageError("label '" + text + "' is not an integer and no --classes file was given; " + range);
    }
    auto names = read_class_list(classes_file);
    auto it = std::find(names.begin(), names.end(), text);
    if (it == names.end()) throw UsageError("unknown class name '" + text + "'");
    label = static_cast<std::size_t>(it - names.begin());
  }
  if (label >= num_classes) {
    throw UsageError("label " + std::to_string(label) + " out of range; " + range);
  }
  return label;
}

int cmd_train(const ConfigArgs& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
  Checkpoint resume_ck;
  if (!resume.empty()) resume_ck = load_checkpoint_file(resume);
  // A resumed run starts from the stored config; any change to the model is
  // rejected by Trainer::restore.
  RunConfig config = resume.empty() ? cfg.resolve() : cfg.resolve(resume_ck.config);
  auto data = load_dataset<float>(data_dir, config.model.gen.height);
  if (data.empty()) throw DataError("dataset " + data_dir + " holds no images");
  if (data.class_names.size() > config.model.gen.num_classes) {
    throw UsageError("dataset has " + std::to_string(data.class_names.size()) +
                     " classes but gen.num_classes = " + std::to_string(config.model.gen.num_classes));
  }
  Trainer<float> trainer(config);
  if (!resume.empty()) trainer.restore(resume_ck);
  fs::create_directories(out_dir);
  std::ofstream cfg_out(out_dir + "/config.txt");
  cfg_out << to_config_text(config);
  std::ofstream log(out_dir + "/metrics.tsv", resume.empty() ? std::ios::trunc : std::ios::app);
  std::cerr << "training " << data.size() << " images, " << data.class_names.size()
            << " classes, iterations " << trainer.iteration() << " -> " << config.train.iterations
            << (deterministic_requested() ? " (deterministic)" : "") << "\n";
  trainer.fit(data, FitOptions{out_dir, &log});
  std::cerr << "wrote " << out_dir << "/final.omx\n";
  return kOk;
}

int cmd_generate(const ConfigArgs& cfg, const std::string& ckpt_path, const std::string& input, const std::string& label_text,
                 const std::string& classes_file, std::uint64_t seed, const std::string& out_path,
                 const std::string& views_dir) {
  auto ck = load_checkpoint_file(ckpt_path);
  const ModelConfig& model = ck.config.model;
  if (!cfg.path.empty() || !cfg.overrides.empty()) {
    if (!(cfg.resolve(ck.config).model == model)) {
      throw CheckpointError(CheckpointError::Kind::version,
                            "checkpoint was trained with a different model config");
    }
  }
  const std::size_t label = resolve_label(label_text, model.gen.num_classes, classes_file);
  Generator<float> gen(model, 0);
  restore_parameters(ck, gen.params());

  auto snapshot = read_png<float>(input);
  auto cond = condition_from_snapshot(snapshot, model);
  const std::size_t H = model.gen.height, W = model.gen.width();
  NoGradGuard no_grad;
  Rng rng(seed);
  auto x = reshape(cond.canvas.pixels, Shape{1, 3, H, W});
  auto canvas = reshape(gen.generate(x, gen.sample_latent(1, rng), {label}, false), Shape{3, H, W});
  write_png(out_path, canvas);
  if (!views_dir.empty()) {
    fs::create_directories(views_dir);
    const auto specs = eval_view_specs();
    const auto views = eval_views(canvas, model.eval_px(), model.eval_px(), model.geometry.eval_fov);
    for (std::size_t i = 0; i < specs.size(); ++i) {
      write_png(views_dir + "/" + specs[i].name + ".png", views[i]);
    }
  }
  return kOk;
}

int cmd_embed(const std::string& input, const std::string& out_path, const std::string& mask_path,
              std::size_t height, double yaw, double pitch, double fov) {
  auto snapshot = read_png<float>(input);
  auto emb = embed_snapshot(snapshot, CameraPose::make(yaw, pitch, fov, fov), height);
  write_png(out_path, emb.canvas.pixels);
  if (!mask_path.empty()) {
    // Mask written as white (inside) / black (outside).
    auto m = emb.mask.values;
    std::vector<float> rgb;
    for (int c = 0; c < 3; ++c) {
      for (float v : m.data()) rgb.push_back(v * 2 - 1);
    }
    write_png(mask_path, Tensor<float>(Shape{3, m.dim(1), m.dim(2)}, std::move(rgb)));
  }
  return kOk;
}

int cmd_extract_views(const std::string& input, const std::string& out_dir, std::size_t size,
                      double fov) {
  auto canvas = read_png<float>(input);
  if (canvas.dim(2) != 2 * canvas.dim(1)) {
    throw DataError(input + " is not a 2:1 equirectangular image");
  }
  if (size == 0) size = canvas.dim(1) / 2;
  fs::create_directories(out_dir);
  const auto specs = eval_view_specs();
  const auto views = eval_views(canvas, size, size, fov);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    write_png(out_dir + "/" + specs[i].name + ".png", views[i]);
  }
  std::cout << "wrote " << views.size() << " views to " << out_dir << "\n";
  return kOk;
}

int cmd_analyze(const ConfigArgs& cfg) {
  const RunConfig config = cfg.resolve();
  std::cout << format_cost_report("generator", generator_cost(config.model));
  std::cout << format_cost_report("discriminator", discriminator_cost(config.model));
  return kOk;
}

int cmd_grad_check(const std::string& only) {
  auto suites = default_grad_suites();
  const char* fixture = std::getenv("OMNIMIX_GRADCHECK_FIXTURE");
  if (fixture && std::string(fixture) != "0") suites.push_back(wrong_sign_fixture_suite());
  auto results = run_grad_suites(suites, only, std::cout);
  std::size_t failed = 0;
  for (const auto& r : results) {
    if (r.pass()) continue;
    ++failed;
    std::cerr << "gradient check failed: " << r.suite << "/" << r.op << " rel_error=" << r.rel_error
              << " (tolerance " << r.tolerance << ")\n";
  }
  std::cout << results.size() - failed << "/" << results.size() << " gradient checks passed\n";
  return failed ? kUsage : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Equirectangular image generation from one snapshot with a mixer GAN"};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 success, 1 verification/usage failure, 2 data/format error.\n"
      "OMNIMIX_DETERMINISTIC=1 requests deterministic execution (always the case: single thread).");

  app.set_help_all_flag("--help-all", "help for every subcommand");

  ConfigArgs train_cfg, analyze_cfg;
  std::string data_dir, out_dir, resume;
  auto* train = app.add_subcommand("train", "train on a dataset directory");
  train_cfg.attach(train);
  train->add_option("--data", data_dir, "dataset root (class-named subdirectories of PNGs)")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", out_dir, "output directory for checkpoints, samples and metrics.tsv")
      ->required();
  train->add_option("--resume", resume, "continue from a checkpoint (its config is the base)")->check(CLI::ExistingFile);

  ConfigArgs generate_cfg;
  std::string ckpt, input, label, classes, out_png, views_dir;
  std::uint64_t seed = 0;
  auto* generate = app.add_subcommand("generate", "generate an equirectangular image from a snapshot");
  generate_cfg.attach(generate);
  generate->add_option("--checkpoint", ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  generate->add_option("--input", input, "snapshot PNG (straight-ahead view)")->required()->check(CLI::ExistingFile);
  generate->add_option("--label", label, "scene label: integer id or class name (with --classes)");
  generate->add_option("--classes", classes, "class-list file, one name per line")->check(CLI::ExistingFile);
  generate->add_option("--seed", seed, "latent seed")->capture_default_str();
  generate->add_option("--out", out_png, "output PNG")->required();
  generate->add_option("--views", views_dir, "also write the 50 evaluation views here");

  std::string mask_png;
  std::size_t height = 64;
  double yaw = 0, pitch = 0, fov = 90;
  auto* embed = app.add_subcommand("embed", "place a snapshot on an empty equirectangular canvas");
  embed->add_option("--input", input, "snapshot PNG")->required()->check(CLI::ExistingFile);
  embed->add_option("--out", out_png, "canvas PNG")->required();
  embed->add_option("--mask", mask_png, "optional mask PNG");
  embed->add_option("--height", height, "canvas height (width is twice this)")->capture_default_str();
  embed->add_option("--yaw", yaw, "degrees")->capture_default_str();
  embed->add_option("--pitch", pitch, "degrees")->capture_default_str();
  embed->add_option("--fov", fov, "horizontal and vertical field of view, degrees")->capture_default_str();

  std::size_t view_size = 0;
  auto* extract = app.add_subcommand("extract-views", "write the 50 evaluation views of an equirectangular PNG");
  extract->add_option("--input", input, "equirectangular PNG")->required()->check(CLI::ExistingFile);
  extract->add_option("--out", out_dir, "output directory")->required();
  extract->add_option("--size", view_size, "view side in pixels (default: height / 2)");
  extract->add_option("--fov", fov, "field of view, degrees")->capture_default_str();

  auto* analyze = app.add_subcommand("analyze", "print parameter, MAC and activation-memory counts");
  analyze_cfg.attach(analyze);

  std::string only;
  auto* gradcheck = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gradcheck->add_option("--only", only, "run a single suite by name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return cmd_train(train_cfg, data_dir, out_dir, resume);
    if (*generate) return cmd_generate(generate_cfg, ckpt, input, label, classes, seed, out_png, views_dir);
    if (*embed) return cmd_embed(input, out_png, mask_png, height, yaw, pitch, fov);
    if (*extract) return cmd_extract_views(input, out_dir, view_size, fov);
    if (*analyze) return cmd_analyze(analyze_cfg);
    if (*gradcheck) return cmd_grad_check(only);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NonFiniteLoss& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
