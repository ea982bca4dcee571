#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pointrnn/data.hpp"
#include "pointrnn/errors.hpp"
#include "pointrnn/model.hpp"
#include "pointrnn/training.hpp"

namespace fs = std::filesystem;
using namespace pointrnn;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitMismatch = 4;

/// Checkpoint or config does not fit the model it is applied to.
struct Mismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad flag values discovered after parsing.
struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string synth_text(const SynthConfig& c, std::uint64_t seed, std::size_t count) {
  std::ostringstream out;
  out << "digits = " << c.digits << "\nsamples = " << c.sample_count() << "\nlength = " << c.length
      << "\nmin_speed = " << c.min_speed << "\nmax_speed = " << c.max_speed
      << "\nthreshold = " << int(c.threshold) << "\nfirst_image = " << c.first_image
      << "\nimage_count = " << c.image_count << "\nseed = " << seed << "\ncount = " << count << '\n';
  return out.str();
}

std::string fnv_digest(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelConfig resolve_config(const std::string& config, const std::string& preset) {
  if (!config.empty()) return load_model_config(config);
  auto cell_of = [&](const std::string& name) {
    if (name.ends_with("rnn")) return CellKind::rnn;
    if (name.ends_with("gru")) return CellKind::gru;
    if (name.ends_with("lstm")) return CellKind::lstm;
    throw Usage("unknown preset '" + preset + "'");
  };
  if (preset.starts_with("mnist-basic-")) return ModelConfig::mnist_basic(cell_of(preset));
  if (preset.starts_with("mnist-advanced-")) return ModelConfig::mnist_advanced(cell_of(preset));
  if (preset.starts_with("driving-advanced-")) return ModelConfig::driving_advanced(cell_of(preset));
  throw Usage("give --config or --preset (mnist-basic-lstm, mnist-advanced-gru, ...)");
}

Model model_from_checkpoint(const Checkpoint& ckpt, const std::string& config_path) {
  const ModelConfig config = config_path.empty() ? ckpt.config : load_model_config(config_path);
  Model model(config, 0);
  try {
    load_parameters(model, ckpt);
  } catch (const ShapeError& e) {
    throw Mismatch(e.what());
  }
  return model;
}

std::vector<Tensor> input_frames(const std::string& path, std::size_t input_length) {
  std::vector<Tensor> frames = coordinates_of(read_pcseq(path));
  if (frames.size() > input_length) frames.resize(input_length);
  return frames;
}

void print_metrics(const char* label, const Metrics& m) {
  std::printf("%-10s chamfer=%.6f emd=%.6f\n", label, m.chamfer, m.emd);
}

MetricNormalization parse_normalization(const std::string& s) {
  if (s == "frame_sum") return MetricNormalization::frame_sum;
  if (s == "per_point") return MetricNormalization::per_point;
  throw Usage("unknown normalization '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point recurrent networks for moving point cloud prediction"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Synthesize moving-digit point cloud sequences");
  std::string mnist_path, synth_out;
  std::size_t digits = 1, count = 1, first_image = 0, image_count = 0, samples = 0;
  std::uint64_t synth_seed = 0;
  synth->add_option("--mnist", mnist_path, "MNIST IDX image file")->required()->check(CLI::ExistingFile);
  synth->add_option("--digits", digits, "digits per sequence")->check(CLI::Range(1, 2));
  synth->add_option("--count", count, "number of sequences")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "random seed");
  synth->add_option("--first-image", first_image, "first eligible image");
  synth->add_option("--image-count", image_count, "eligible image count (0: all)");
  synth->add_option("--samples", samples, "points per frame (0: 128 per digit)");

  // train
  auto* trn = app.add_subcommand("train", "Train a model on a directory of sequences");
  std::string train_config, train_preset, train_data, train_out, train_log, resume;
  TrainConfig tc;
  std::size_t iters = 0;
  trn->add_option("--config", train_config, "model config file")->check(CLI::ExistingFile);
  trn->add_option("--preset", train_preset, "built-in model config, e.g. mnist-basic-lstm");
  trn->add_option("--data", train_data, "directory of .pcseq files")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--iters", iters, "total iterations")->required();
  trn->add_option("--out", train_out, "checkpoint path")->required();
  trn->add_option("--log", train_log, "log path (default: <out>.log)");
  trn->add_option("--lr", tc.learning_rate, "learning rate");
  trn->add_option("--batch", tc.batch, "batch size");
  trn->add_option("--seed", tc.seed, "random seed");
  trn->add_option("--clip", tc.clip, "elementwise gradient bound");
  trn->add_option("--alpha", tc.loss.alpha, "chamfer weight");
  trn->add_option("--beta", tc.loss.beta, "EMD weight");
  trn->add_option("--exact-emd-limit", tc.loss.exact_emd_limit, "largest n solved exactly");
  trn->add_option("--checkpoint-every", tc.checkpoint_every, "iterations between checkpoints");
  trn->add_flag("--teacher-forcing", tc.teacher_forcing, "feed true frames to the predictor");
  trn->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  // eval
  auto* ev = app.add_subcommand("eval", "Report CD and EMD on a directory of sequences");
  std::string eval_ckpt, eval_data, eval_baseline, eval_config, eval_norm = "frame_sum";
  std::uint64_t eval_seed = 0;
  std::size_t eval_limit = 0;
  ev->add_option("--ckpt", eval_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", eval_data, "directory of .pcseq files")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--baseline", eval_baseline, "also report a baseline")->check(CLI::IsMember({"copy-last"}));
  ev->add_option("--config", eval_config, "model config to load the checkpoint into")->check(CLI::ExistingFile);
  ev->add_option("--normalization", eval_norm, "frame_sum or per_point");
  ev->add_option("--seed", eval_seed, "ball-query seed");
  ev->add_option("--limit", eval_limit, "evaluate only the first N sequences");

  // predict
  auto* pr = app.add_subcommand("predict", "Roll a model forward from an input sequence");
  std::string pred_ckpt, pred_in, pred_out, pred_config;
  std::size_t pred_horizon = 10;
  std::uint64_t pred_seed = 0;
  pr->add_option("--ckpt", pred_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  pr->add_option("--in", pred_in, "input .pcseq")->required()->check(CLI::ExistingFile);
  pr->add_option("--horizon", pred_horizon, "frames to predict")->check(CLI::PositiveNumber);
  pr->add_option("--out", pred_out, "output .pcseq, or .ply (one file per frame)")->required();
  pr->add_option("--config", pred_config, "model config")->check(CLI::ExistingFile);
  pr->add_option("--seed", pred_seed, "ball-query seed");

  // export-flow
  auto* fl = app.add_subcommand("export-flow", "Write predicted scene flow as PLY files");
  std::string flow_ckpt, flow_in, flow_out, flow_config;
  std::size_t flow_horizon = 1;
  double threshold = 0.01;
  std::uint64_t flow_seed = 0;
  fl->add_option("--ckpt", flow_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  fl->add_option("--in", flow_in, "input .pcseq")->required()->check(CLI::ExistingFile);
  fl->add_option("--horizon", flow_horizon, "prediction steps")->check(CLI::PositiveNumber);
  fl->add_option("--threshold", threshold, "minimum flow magnitude");
  fl->add_option("--out", flow_out, "output prefix; writes <prefix>_<step>.ply")->required();
  fl->add_option("--config", flow_config, "model config")->check(CLI::ExistingFile);
  fl->add_option("--seed", flow_seed, "ball-query seed");

  // inspect
  auto* in = app.add_subcommand("inspect", "Print shapes, parameter counts and file metadata");
  std::string insp_ckpt, insp_seq, insp_config, insp_preset;
  in->add_option("--ckpt", insp_ckpt, "checkpoint")->check(CLI::ExistingFile);
  in->add_option("--seq", insp_seq, ".pcseq file")->check(CLI::ExistingFile);
  in->add_option("--config", insp_config, "model config file")->check(CLI::ExistingFile);
  in->add_option("--preset", insp_preset, "built-in model config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) {
      const ImageSet images = load_mnist_idx(mnist_path);
      SynthConfig sc;
      sc.digits = digits;
      sc.first_image = first_image;
      sc.image_count = image_count;
      sc.samples = samples;
      fs::create_directories(synth_out);
      const std::string text = synth_text(sc, synth_seed, count);
      for (std::size_t i = 0; i < count; ++i) {
        Rng rng(mix_seed(synth_seed, i));
        const SynthResult r = synthesize_sequence(images, sc, rng);
        char name[32];
        std::snprintf(name, sizeof name, "seq_%05zu.pcseq", i);
        write_pcseq((fs::path(synth_out) / name).string(), r.frames);
      }
      std::ofstream manifest(fs::path(synth_out) / "manifest.txt");
      manifest << text << "input_length = " << sc.input_length
               << "\noutput_length = " << sc.length - sc.input_length
               << "\nconfig_digest = " << fnv_digest(text) << '\n';
      std::printf("wrote %zu sequences to %s\n", count, synth_out.c_str());
      return 0;
    }

    if (*trn) {
      const ModelConfig config = resolve_config(train_config, train_preset);
      tc.input_length = config.input_length;
      tc.output_length = config.horizon;
      tc.iterations = iters;
      tc.checkpoint_path = train_out;
      const auto sequences = load_sequence_dir(train_data);
      if (sequences.empty()) throw Usage("no .pcseq files in '" + train_data + "'");
      DatasetSource source(sequences);
      Model model(config, tc.seed);
      Trainer trainer(model, tc);
      if (!resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(resume);
        try {
          trainer.restore(ckpt);
        } catch (const ShapeError& e) {
          throw Mismatch(e.what());
        }
      }
      const std::string log_path = train_log.empty() ? train_out + ".log" : train_log;
      std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
      if (!log) throw FormatError("cannot write '" + log_path + "'");
      while (trainer.iteration() < iters) {
        const LogRecord r = trainer.step(source);
        log << format_record(r) << '\n' << std::flush;
        if (tc.checkpoint_every > 0 && trainer.iteration() % tc.checkpoint_every == 0) {
          save_checkpoint(train_out, trainer.checkpoint());
        }
      }
      save_checkpoint(train_out, trainer.checkpoint());
      std::printf("trained to iteration %zu; checkpoint %s, log %s\n", trainer.iteration(),
                  train_out.c_str(), log_path.c_str());
      return 0;
    }

    if (*ev) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const Model model = model_from_checkpoint(ckpt, eval_config);
      auto sequences = load_sequence_dir(eval_data);
      if (eval_limit > 0 && sequences.size() > eval_limit) sequences.resize(eval_limit);
      if (sequences.empty()) throw Usage("no .pcseq files in '" + eval_data + "'");
      EvalOptions o;
      o.input_length = model.config().input_length;
      o.output_length = model.config().horizon;
      o.normalization = parse_normalization(eval_norm);
      o.seed = eval_seed;
      print_metrics("model", evaluate(model, sequences, o));
      if (!eval_baseline.empty()) print_metrics("copy-last", evaluate_copy_last(sequences, o));
      return 0;
    }

    if (*pr) {
      const Checkpoint ckpt = load_checkpoint(pred_ckpt);
      const Model model = model_from_checkpoint(ckpt, pred_config);
      const auto inputs = input_frames(pred_in, model.config().input_length);
      Rng rng(pred_seed);
      Tape tape(false);
      const EncoderState state = model.encode(tape, inputs, rng);
      const Rollout r = model.predict(tape, state, tape.constant(inputs.back()), pred_horizon, rng);
      std::vector<Tensor> frames;
      for (const Var& v : r.clouds) frames.push_back(v.value());
      if (fs::path(pred_out).extension() == ".ply") {
        const fs::path base = fs::path(pred_out).replace_extension();
        for (std::size_t s = 0; s < frames.size(); ++s) {
          write_ply(base.string() + "_" + std::to_string(s) + ".ply", frames[s]);
        }
      } else {
        write_pcseq(pred_out, sequence_from(frames));
      }
      std::printf("predicted %zu frames of %zu points\n", frames.size(), frames.front().dim(0));
      return 0;
    }

    if (*fl) {
      const Checkpoint ckpt = load_checkpoint(flow_ckpt);
      const Model model = model_from_checkpoint(ckpt, flow_config);
      const auto inputs = input_frames(flow_in, model.config().input_length);
      const auto flows = export_scene_flow(model, inputs, flow_horizon, threshold, flow_seed);
      for (std::size_t s = 0; s < flows.size(); ++s) {
        write_ply(flow_out + "_" + std::to_string(s) + ".ply", flows[s].points, flows[s].flow);
        std::printf("step %zu: %zu of %zu points kept\n", s, flows[s].points.dim(0),
                    inputs.back().dim(0));
      }
      return 0;
    }

    if (*in) {
      bool any = false;
      auto describe = [](const ModelConfig& config, const ParameterSet* values) {
        const Model model(config, 0);
        std::printf("architecture %s, cell %s, points %zu, split %zu/%zu, query %s, pool %s\n",
                    to_string(config.architecture), to_string(config.cell), config.points,
                    config.input_length, config.horizon, to_string(config.query),
                    to_string(config.pool));
        Rng rng(0);
        Tensor frame(Shape{config.points, 3});
        for (std::size_t i = 0; i < config.points; ++i) frame.at(i, 0) = static_cast<double>(i);
        for (const LayerTrace& t : model.trace(frame, rng)) {
          std::printf("  %-20s points %6zu  channels %4zu\n", to_string(t.kind), t.points, t.channels);
        }
        const ParameterSet& params = values ? *values : model.parameters();
        std::printf("parameters: %zu (%.2fM) in %zu tensors\n", params.scalar_count(),
                    params.scalar_count() / 1e6, params.size());
        std::printf("config digest %s\n", config_digest(config).c_str());
      };
      if (!insp_ckpt.empty()) {
        any = true;
        const Checkpoint ckpt = load_checkpoint(insp_ckpt);
        Model model(ckpt.config, 0);
        try {
          load_parameters(model, ckpt);
        } catch (const ShapeError& e) {
          throw Mismatch(e.what());
        }
        std::printf("checkpoint %s: format version %u, iteration %llu, adam step %llu\n",
                    insp_ckpt.c_str(), ckpt.version, static_cast<unsigned long long>(ckpt.iteration),
                    static_cast<unsigned long long>(ckpt.adam.step));
        describe(ckpt.config, &model.parameters());
      }
      if (!insp_config.empty() || !insp_preset.empty()) {
        any = true;
        describe(resolve_config(insp_config, insp_preset), nullptr);
      }
      if (!insp_seq.empty()) {
        any = true;
        const CloudSequence seq = read_pcseq(insp_seq);
        double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
        for (const auto& f : seq)
          for (std::size_t i = 0; i < f.size(); ++i)
            for (int c = 0; c < 3; ++c) {
              lo[c] = std::min(lo[c], f.coords.at(i, c));
              hi[c] = std::max(hi[c], f.coords.at(i, c));
            }
        std::printf("sequence %s: PCSEQ1, T=%zu N=%zu D=%zu\n", insp_seq.c_str(), seq.size(),
                    seq.front().size(), seq.front().feature_channels());
        std::printf("bounds x [%g, %g] y [%g, %g] z [%g, %g]\n", lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]);
      }
      if (!any) throw Usage("inspect needs --ckpt, --seq, --config or --preset");
      return 0;
    }
  } catch (const Usage& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const Mismatch& e) {
    std::fprintf(stderr, "checkpoint/config mismatch: %s\n", e.what());
    return kExitMismatch;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
