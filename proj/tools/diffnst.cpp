// diffnst command line: stylize, sweep, interp, heatmap, train, evaluate,
// plus toy-corpus and pretrain for building a desk-scale backbone.

#include <torch/torch.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffnst/corpus.hpp"
#include "diffnst/error.hpp"
#include "diffnst/image_io.hpp"
#include "diffnst/metrics.hpp"
#include "diffnst/pipeline.hpp"
#include "diffnst/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace diffnst;

namespace {

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Request flags shared by every inference subcommand. A --config JSON file
// supplies defaults; flags given on the command line win.
struct RequestArgs {
  std::string checkpoint;
  std::string config;
  std::string content;
  std::string style;
  std::string output = "out";
  int noise_start = 0;
  int noise_end = 0;
  int attn_stop = 0;
  bool color_match = true;
  uint64_t seed = 0;
  int steps = 0;

  CLI::Option* noise_start_opt = nullptr;
  CLI::Option* noise_end_opt = nullptr;
  CLI::Option* attn_stop_opt = nullptr;
  CLI::Option* color_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* content_opt = nullptr;
  CLI::Option* style_opt = nullptr;
  CLI::Option* output_opt = nullptr;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "trained checkpoint directory (default: $DIFFNST_CHECKPOINT)");
    app->add_option("--config", config, "JSON file with request fields");
    content_opt = app->add_option("--content", content, "content image (PNG)");
    style_opt = app->add_option("--style", style, "style image (PNG)");
    output_opt = app->add_option("--output", output, "output root directory");
    noise_start_opt = app->add_option("--noise-start", noise_start, "first step that replays content noise");
    noise_end_opt = app->add_option("--noise-end", noise_end, "step after the last replayed content noise");
    attn_stop_opt = app->add_option("--attn-stop", attn_stop, "hijack V only before this step");
    color_opt = app->add_flag("--color-match,!--no-color-match", color_match, "match content colours to the style");
    seed_opt = app->add_option("--seed", seed, "seed recorded with the request");
    app->add_option("--steps", steps, "sampling steps (default: the checkpoint's)");
  }

  StylizeRequest resolve() const {
    nlohmann::json j = config.empty() ? nlohmann::json::object() : read_json(config);
    StylizeRequest r;
    r.content = content_opt->count() ? content : j.value("content", content);
    r.style = style_opt->count() ? style : j.value("style", style);
    r.output = output_opt->count() ? output : j.value("output", output);
    auto pick = [&](CLI::Option* opt, int flag, const char* key) -> std::optional<int> {
      if (opt->count()) return flag;
      if (j.contains(key) && !j.at(key).is_null()) return j.at(key).get<int>();
      return std::nullopt;
    };
    r.options.noise_start = pick(noise_start_opt, noise_start, "noise_start");
    r.options.noise_end = pick(noise_end_opt, noise_end, "noise_end");
    r.options.attn_stop = pick(attn_stop_opt, attn_stop, "attn_stop");
    r.options.color_match = color_opt->count() ? color_match : j.value("color_match", true);
    r.options.seed = seed_opt->count() ? seed : j.value("seed", uint64_t{0});
    if (r.content.empty() || r.style.empty()) throw ConfigError("--content and --style are required");
    return r;
  }

  Pipeline pipeline() const {
    std::string path = checkpoint;
    if (path.empty()) {
      if (const char* env = std::getenv("DIFFNST_CHECKPOINT")) path = env;
    }
    if (path.empty()) throw ConfigError("no checkpoint: pass --checkpoint or set DIFFNST_CHECKPOINT");
    return Pipeline::load(path, steps);
  }
};

std::vector<int> parse_ints(const std::string& list) {
  std::vector<int> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("not an integer: " + item);
    }
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("not a number: " + item);
    }
  }
  return out;
}

std::string value_tag(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1, torch::get_num_threads()));
  CLI::App app{"Diffusion-based neural style transfer with attention hijacking"};
  app.require_subcommand(1);

  // stylize
  RequestArgs stylize_args;
  auto* stylize = app.add_subcommand("stylize", "stylize one content/style pair");
  stylize_args.attach(stylize);

  // sweep
  RequestArgs sweep_args;
  std::string sweep_axis = "noise_start";
  std::string sweep_values;
  auto* sweep = app.add_subcommand("sweep", "stylize over a range of one control");
  sweep_args.attach(sweep);
  sweep->add_option("--axis", sweep_axis, "noise_start or attn_stop");
  sweep->add_option("--values", sweep_values, "comma separated, ascending")->required();

  // interp
  RequestArgs interp_args;
  std::string interp_alphas = "0,0.25,0.5,0.75,1,1.5";
  auto* interp = app.add_subcommand("interp", "interpolate decoder V between content and stylized runs");
  interp_args.attach(interp);
  interp->add_option("--alphas", interp_alphas, "comma separated weights; values above 1 over-drive");

  // heatmap
  RequestArgs heat_args;
  std::string trace_a, trace_b;
  int heat_cell = 12;
  auto* heatmap = app.add_subcommand("heatmap", "per site/step attention difference between content and stylized runs");
  heat_args.attach(heatmap);
  heatmap->add_option("--trace-a", trace_a, "saved attention trace (instead of a content/style pair)");
  heatmap->add_option("--trace-b", trace_b, "saved attention trace to compare against");
  heatmap->add_option("--cell", heat_cell, "pixels per matrix cell");

  // train
  std::string train_config;
  int64_t train_max_steps = -1;
  std::string train_resume, train_output;
  auto* train_cmd = app.add_subcommand("train", "train hijack MLPs, discriminators and heads");
  train_cmd->add_option("--config", train_config, "training config JSON")->required();
  train_cmd->add_option("--max-steps", train_max_steps, "override max_steps");
  train_cmd->add_option("--resume", train_resume, "checkpoint to resume from");
  train_cmd->add_option("--output-dir", train_output, "override output_dir");

  // evaluate
  std::string eval_results, eval_out = "report.json";
  MetricsConfig metrics_config;
  auto* evaluate = app.add_subcommand("evaluate", "SIFID, Chamfer colour and perceptual distance over a result set");
  evaluate->add_option("--results", eval_results, "directory of <content>__<style> results")->required();
  evaluate->add_option("--out", eval_out, "report path");
  evaluate->add_option("--sifid-layer", metrics_config.sifid_layer, "feature layer for SIFID");
  evaluate->add_option("--chamfer-samples", metrics_config.chamfer_samples, "pixels sampled per image");
  evaluate->add_option("--seed", metrics_config.seed, "sampling seed");

  // toy-corpus
  std::string toy_out;
  int toy_content = 200, toy_style = 60, toy_size = 64;
  uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("toy-corpus", "write a procedural content/style corpus");
  toy->add_option("--out", toy_out, "corpus root")->required();
  toy->add_option("--content-count", toy_content);
  toy->add_option("--style-count", toy_style);
  toy->add_option("--size", toy_size);
  toy->add_option("--seed", toy_seed);

  // pretrain
  std::vector<std::string> pretrain_images;
  std::string pretrain_out, pretrain_config;
  int pretrain_ae = -1, pretrain_dn = -1;
  auto* pretrain = app.add_subcommand("pretrain", "pretrain and freeze the autoencoder and denoiser");
  pretrain->add_option("--images", pretrain_images, "image directories")->required();
  pretrain->add_option("--out", pretrain_out, "backbone directory")->required();
  pretrain->add_option("--config", pretrain_config, "pretraining config JSON");
  pretrain->add_option("--autoencoder-steps", pretrain_ae);
  pretrain->add_option("--denoiser-steps", pretrain_dn);

  CLI11_PARSE(app, argc, argv);

  try {
    if (stylize->parsed()) {
      auto request = stylize_args.resolve();
      auto pipeline = stylize_args.pipeline();
      pipeline.stylize(request);
      std::cout << result_dir(request.output, request.content, request.style).string() << '\n';
    } else if (sweep->parsed()) {
      auto request = sweep_args.resolve();
      auto pipeline = sweep_args.pipeline();
      const auto axis = parse_sweep_axis(sweep_axis);
      const auto values = parse_ints(sweep_values);
      auto content = read_png(request.content);
      auto style = read_png(request.style);
      auto result = pipeline.sweep(content, style, request.options, axis, values);
      const auto dir = result_dir(request.output, request.content, request.style) / ("sweep_" + to_string(axis));
      fs::create_directories(dir);
      auto reference = pipeline.prepare(content, style, false).first;
      nlohmann::json meta = request.to_json();
      meta["axis"] = to_string(axis);
      meta["values"] = values;
      nlohmann::json distances = nlohmann::json::array();
      for (std::size_t i = 0; i < values.size(); ++i) {
        write_png(dir / (to_string(axis) + "_" + std::to_string(values[i]) + ".png"), result.images[i]);
        distances.push_back(perceptual_distance(*default_extractor(), result.images[i], reference));
      }
      meta["perceptual_to_content"] = distances;
      write_png(dir / "grid.png", result.grid);
      write_json(dir / "meta.json", meta);
      std::cout << dir.string() << '\n';
    } else if (interp->parsed()) {
      auto request = interp_args.resolve();
      auto pipeline = interp_args.pipeline();
      auto traces = pipeline.interpolation_traces(read_png(request.content), read_png(request.style), request.options);
      const auto dir = result_dir(request.output, request.content, request.style) / "interp";
      fs::create_directories(dir);
      std::vector<torch::Tensor> frames;
      const auto alphas = parse_doubles(interp_alphas);
      if (alphas.empty()) throw ConfigError("--alphas is empty");
      for (double a : alphas) {
        frames.push_back(pipeline.v_interpolate(traces, a));
        write_png(dir / ("alpha_" + value_tag(a) + ".png"), frames.back());
      }
      write_png(dir / "strip.png", hconcat(frames));
      traces.content_trace.save(dir / "traces" / "content");
      traces.stylized_trace.save(dir / "traces" / "stylized");
      auto meta = request.to_json();
      meta["alphas"] = alphas;
      write_json(dir / "meta.json", meta);
      std::cout << dir.string() << '\n';
    } else if (heatmap->parsed()) {
      Heatmap h;
      fs::path dir;
      if (!trace_a.empty() || !trace_b.empty()) {
        if (trace_a.empty() || trace_b.empty()) throw ConfigError("--trace-a and --trace-b go together");
        auto a = AttentionTrace::load(trace_a);
        auto b = AttentionTrace::load(trace_b);
        // compare on the cells of b; a may hold more (e.g. a full content trace)
        AttentionTrace a_on_b(a.source_fingerprint(), a.steps());
        for (const auto& [key, v] : b.entries()) {
          if (!a.contains(key.first, key.second)) {
            throw ConfigError("--trace-a has no entry for site " + key.first + " step " +
                              std::to_string(key.second));
          }
          a_on_b.insert(key.first, key.second, a.at(key.first, key.second));
        }
        h = attention_diff_heatmap(a_on_b, b);
        dir = heat_args.output_opt->count() ? fs::path(heat_args.output) : fs::path(trace_b).parent_path();
      } else {
        auto request = heat_args.resolve();
        auto pipeline = heat_args.pipeline();
        h = pipeline.attention_heatmap(read_png(request.content), read_png(request.style), request.options);
        dir = result_dir(request.output, request.content, request.style);
      }
      fs::create_directories(dir);
      write_png(dir / "heatmap.png", h.render(heat_cell));
      write_json(dir / "heatmap.json", h.to_json());
      std::cout << (dir / "heatmap.png").string() << '\n';
    } else if (train_cmd->parsed()) {
      auto config = TrainConfig::load(train_config);
      if (train_max_steps >= 0) config.max_steps = train_max_steps;
      if (!train_resume.empty()) config.resume = train_resume;
      if (!train_output.empty()) config.output_dir = train_output;
      config.validate();
      auto result = train(config, &std::cout);
      std::cout << "final checkpoint: " << (config.output_dir / "final").string() << '\n';
    } else if (evaluate->parsed()) {
      auto report = evaluate_corpus(eval_results, metrics_config);
      report.save(eval_out);
      std::cout << "pairs " << report.pairs.size() << " skipped " << report.skipped << " sifid " << report.mean_sifid
                << " chamfer " << report.mean_chamfer << " perceptual " << report.mean_perceptual << '\n';
    } else if (toy->parsed()) {
      auto paths = write_toy_corpus(toy_out, toy_content, toy_style, toy_size, toy_seed);
      std::cout << paths.content_dir.string() << '\n' << paths.style_dir.string() << '\n';
    } else if (pretrain->parsed()) {
      PretrainConfig config = pretrain_config.empty() ? PretrainConfig{} : PretrainConfig::from_json(read_json(pretrain_config));
      if (pretrain_ae >= 0) config.autoencoder_steps = pretrain_ae;
      if (pretrain_dn >= 0) config.denoiser_steps = pretrain_dn;
      std::vector<torch::Tensor> images;
      for (const auto& dir : pretrain_images) {
        auto batch = load_image_dir(dir, config.backbone.image_size);
        images.insert(images.end(), batch.begin(), batch.end());
      }
      PretrainReport report;
      auto backbone = pretrain_backbone(images, config, &report, &std::cout);
      backbone->save(pretrain_out);
      write_json(fs::path(pretrain_out) / "pretrain_report.json", report.to_json());
      std::cout << "holdout MAE " << report.holdout_mae << '\n';
    }
  } catch (const diffnst::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
