#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include "ivcl/analysis.hpp"
#include "ivcl/checkpoint.hpp"
#include "ivcl/config.hpp"
#include "ivcl/gradcheck.hpp"

namespace ivcl::cli {

unsigned thread_count() {
  if (const char* env = std::getenv("IVCL_THREADS")) {
    unsigned n = 0;
    const std::string s(env);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
    if (ec != std::errc() || p != s.data() + s.size() || n == 0)
      throw ConfigError("IVCL_THREADS must be a positive integer, got '" + s + "'");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& body) {
  const auto workers = static_cast<std::int64_t>(std::min<std::int64_t>(thread_count(), std::max<std::int64_t>(count, 1)));
  if (workers <= 1) {
    for (std::int64_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> threads;
  for (std::int64_t w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      try {
        for (std::int64_t i = w; i < count; i += workers) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kSplits{"train", "val", "test"};

std::string exact(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string data_path(const RunConfig& cfg, const std::string& split) {
  return (fs::path(cfg.data_dir) / (std::string(to_string(cfg.transfer.task)) + "_" + split + ".ivtw")).string();
}

fs::path out_path(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return fs::path(cfg.out_dir) / name;
}

std::int64_t split_size(const RunConfig& cfg, std::size_t split) {
  return split == 0 ? cfg.data.train_episodes : split == 1 ? cfg.data.val_episodes : cfg.data.test_episodes;
}

std::uint64_t split_seed(const RunConfig& cfg, std::size_t split) {
  return cfg.data.seed ^ (0x9E3779B97F4A7C15ull * (split + 1));
}

BlicketConfig blicket_for_split(const RunConfig& cfg, std::size_t split) {
  BlicketConfig b = cfg.data.blicket;
  if (b.split != BlicketSplit::Iid) b.split = split == 0 ? BlicketSplit::CompTrain : BlicketSplit::CompTest;
  return b;
}

std::vector<Episode> generate_split(const RunConfig& cfg, std::size_t split, std::int64_t count) {
  std::vector<Episode> episodes(static_cast<std::size_t>(count));
  const auto seed = split_seed(cfg, split);
  const auto blicket = blicket_for_split(cfg, split);
  parallel_for(count, [&](std::int64_t i) {
    const auto s = episode_seed(seed, static_cast<std::uint64_t>(i));
    episodes[static_cast<std::size_t>(i)] = cfg.transfer.task == Task::ShellGame ? to_episode(gen_shell_game(s, cfg.data.shell))
                                                                                : to_episode(gen_blicket(s, blicket));
  });
  return episodes;
}

std::vector<ShellGameEpisode> shell_split(const RunConfig& cfg, std::size_t split, std::int64_t count) {
  std::vector<ShellGameEpisode> out(static_cast<std::size_t>(count));
  parallel_for(count, [&](std::int64_t i) {
    out[static_cast<std::size_t>(i)] = gen_shell_game(episode_seed(split_seed(cfg, split), static_cast<std::uint64_t>(i)), cfg.data.shell);
  });
  return out;
}

std::vector<LabelledVideo> labelled(const RunConfig& cfg, const std::vector<Episode>& episodes) {
  std::vector<LabelledVideo> out;
  for (const auto& e : episodes)
    out.push_back({cfg.transfer.task == Task::Blicket ? assemble_blicket_input(e) : e.frames, e.label});
  return out;
}

std::vector<LabelledVideo> load_split(const RunConfig& cfg, const std::string& split) {
  return labelled(cfg, read_dataset(data_path(cfg, split)).episodes);
}

ParamRefs transfer_refs(IvclModel& model, TaskHead& head) {
  ParamRefs refs = model.parameters();
  head.collect("head", refs);
  return refs;
}

std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : " ") + n;
  return s;
}

void report_load(std::ostream& out, const LoadReport& r) {
  out << "loaded " << r.loaded.size() << " tensors\n";
  out << "dropped " << r.dropped.size() << (r.dropped.empty() ? "" : ": " + join_names(r.dropped)) << "\n";
  out << "initialized " << r.initialized.size() << (r.initialized.empty() ? "" : ": " + join_names(r.initialized)) << "\n";
}

// Model architecture from a checkpoint's own config; everything else from `cfg`.
RunConfig with_checkpoint_model(RunConfig cfg, const Checkpoint& ck) {
  const RunConfig stored = parse_config_text(ck.config, cfg.checkpoint);
  cfg.model = stored.model;
  return cfg;
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  fs::create_directories(cfg.data_dir);
  for (std::size_t s = 0; s < kSplits.size(); ++s) {
    Dataset d{serialize_config(cfg), generate_split(cfg, s, split_size(cfg, s))};
    const auto path = data_path(cfg, kSplits[s]);
    write_dataset(path, d);
    out << "wrote " << path << " (" << d.episodes.size() << " episodes)\n";
  }
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, std::ostream& out) {
  std::vector<Video> videos;
  for (auto& e : read_dataset(data_path(cfg, "train")).episodes) videos.push_back(std::move(e.frames));
  IvclModel model(cfg.model, true);
  std::ofstream log(out_path(cfg, "pretrain.log"));
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pretrain(model, videos, cfg.pretrain, cfg.objective, &log);
  std::ofstream csv(out_path(cfg, "pretrain_loss.csv"));
  csv << "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) csv << i + 1 << ',' << exact(result.losses[i]) << "\n";
  const auto ckpt = out_path(cfg, "pretrain.ckpt").string();
  save_checkpoint(ckpt, make_checkpoint(serialize_config(cfg), model.parameters()));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << "steps " << result.losses.size() << " final_loss " << (result.losses.empty() ? 0.0 : result.losses.back())
      << " seconds " << secs << "\ncheckpoint " << ckpt << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& cfg, std::ostream& out) {
  IvclModel model(cfg.model, false);
  Rng rng(cfg.seed ^ 0x68656164ull);
  TaskHead head(cfg.model.hidden_dim, cfg.transfer.num_classes, rng);
  if (!cfg.checkpoint.empty()) {
    const auto report = load_parameters(load_checkpoint(cfg.checkpoint), transfer_refs(model, head), true);
    report_load(out, report);
    std::ofstream(out_path(cfg, "load_report.txt")) << "dropped " << join_names(report.dropped) << "\ninitialized "
                                                    << join_names(report.initialized) << "\n";
  } else {
    out << "no checkpoint: training from random initialization\n";
  }
  const auto train = load_split(cfg, "train"), val = load_split(cfg, "val"), test = load_split(cfg, "test");
  std::ofstream csv(out_path(cfg, "finetune.csv"));
  const auto r = finetune(model, head, train, val, test, cfg.transfer, &csv);
  const auto ckpt = out_path(cfg, "finetune.ckpt").string();
  save_checkpoint(ckpt, make_checkpoint(serialize_config(cfg), transfer_refs(model, head)));
  out << "best_val_top1 " << r.best_val_top1 << " best_epoch " << r.best_epoch << " test_top1 " << r.test.top1
      << " test_loss " << r.test.loss << "\ncheckpoint " << ckpt << "\n";
  return 0;
}

int cmd_eval(RunConfig cfg, std::ostream& out) {
  std::optional<Checkpoint> ck;
  if (!cfg.checkpoint.empty()) {
    ck = load_checkpoint(cfg.checkpoint);
    cfg = with_checkpoint_model(cfg, *ck);
  }
  IvclModel model(cfg.model, false);
  Rng rng(cfg.seed ^ 0x68656164ull);
  TaskHead head(cfg.model.hidden_dim, cfg.transfer.num_classes, rng);
  if (ck) {
    const auto report = load_parameters(*ck, transfer_refs(model, head), true);
    report_load(out, report);
  } else {
    out << "no checkpoint: evaluating an untrained model\n";
  }
  const auto test = load_split(cfg, "test");
  const auto r = evaluate(model, head, test, cfg.transfer);
  std::ofstream csv(out_path(cfg, "eval.csv"));
  csv << "split,loss,top1,count\ntest," << r.loss << ',' << r.top1 << ',' << r.count << "\n";
  out << "top1 " << r.top1 << " loss " << r.loss << " count " << r.count << " chance "
      << 1.0 / static_cast<double>(cfg.transfer.num_classes) << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
  const auto& a = cfg.ablation;
  auto has = [&](const char* axis) { return std::find(a.axes.begin(), a.axes.end(), axis) != a.axes.end(); };
  const AblationPoint base{cfg.pretrain.mask_ratio, cfg.pretrain.context_frames, cfg.pretrain.total_frames,
                           cfg.model.num_slots};
  const std::vector<double> none_d;
  const std::vector<std::int64_t> none_i;
  const auto points = ablation_grid(base, has("mask_ratio") ? a.mask_ratios : none_d, has("context") ? a.contexts : none_i,
                                    has("frames") ? a.frames : none_i, has("slots") ? a.slots : none_i);
  std::int64_t longest = 0;
  for (const auto& p : points) longest = std::max(longest, p.frames);
  if (longest > cfg.model.max_frames)
    throw ConfigError("ablation needs " + std::to_string(longest) + " frames but max_frames is " +
                      std::to_string(cfg.model.max_frames));

  RunConfig data_cfg = cfg;
  data_cfg.data.shell.num_frames = std::max(cfg.data.shell.num_frames, longest);
  const auto train_eps = generate_split(data_cfg, 0, a.episodes), val_eps = generate_split(data_cfg, 1, a.episodes / 2);
  const auto train = labelled(data_cfg, train_eps), val = labelled(data_cfg, val_eps);
  std::vector<Video> videos;
  for (const auto& v : train) videos.push_back(v.frames);

  std::ofstream csv(out_path(cfg, "ablation.csv"));
  std::int64_t index = 0;
  run_ablation(points, [&](const AblationPoint& p) {
    ModelConfig mc = cfg.model;
    mc.num_slots = p.slots;
    PretrainConfig pc = cfg.pretrain;
    pc.mask_ratio = p.mask_ratio;
    pc.context_frames = p.context;
    pc.total_frames = p.frames;
    pc.steps = a.pretrain_steps;
    IvclModel model(mc, true);
    pretrain(model, videos, pc, cfg.objective);
    model.drop_decoder();
    TransferConfig tc = cfg.transfer;
    tc.steps = a.finetune_steps;
    tc.eval_every = a.finetune_steps;
    Rng rng(cfg.seed ^ 0x68656164ull);
    TaskHead head(mc.hidden_dim, tc.num_classes, rng);
    const auto r = finetune(model, head, train, val, val, tc);
    out << "point " << ++index << "/" << points.size() << " mask_ratio " << p.mask_ratio << " context " << p.context
        << " frames " << p.frames << " slots " << p.slots << " val_top1 " << r.best_val_top1 << "\n";
    out.flush();
    return r.best_val_top1;
  }, &csv);
  out << "wrote " << out_path(cfg, "ablation.csv").string() << " (" << points.size() << " rows)\n";
  return 0;
}

int cmd_visualize(RunConfig cfg, std::ostream& out) {
  std::optional<Checkpoint> ck;
  if (!cfg.checkpoint.empty()) {
    ck = load_checkpoint(cfg.checkpoint);
    cfg = with_checkpoint_model(cfg, *ck);
  }
  cfg.validate();
  IvclModel model(cfg.model, false);
  if (ck) {
    Rng rng(0);
    TaskHead head(cfg.model.hidden_dim, cfg.transfer.num_classes, rng);
    load_parameters(*ck, transfer_refs(model, head), true);
  }
  const auto grid = cfg.model.patches_per_side();
  const auto episodes = generate_split(cfg, 2, 1);
  const auto& frames = episodes[0].frames;
  std::int64_t written = 0;
  for (auto t : cfg.visualize_frames) {
    if (t >= static_cast<std::int64_t>(frames.size()))
      throw ConfigError("visualize_frames entry " + std::to_string(t) + " beyond the " + std::to_string(frames.size()) +
                        "-frame episode");
    const Tensor rollout = encoder_rollout(model, frames[static_cast<std::size_t>(t)]);
    for (auto s : cfg.visualize_slots) {
      const auto path = out_path(cfg, "heatmap_f" + std::to_string(t) + "_s" + std::to_string(s) + ".ppm");
      export_heatmap(slot_heatmap(rollout, s, cfg.model.num_slots, grid, grid), frames[static_cast<std::size_t>(t)], path);
      ++written;
    }
  }
  out << "wrote " << written << " heatmaps to " << cfg.out_dir << "\n";
  if (cfg.transfer.task == Task::ShellGame) {
    const auto eps = shell_split(cfg, 2, std::min<std::int64_t>(cfg.data.test_episodes, 50));
    const auto rep = snitch_alignment(model, eps);
    out << "snitch_alignment (proxy) frames " << rep.frames << " aligned_fraction " << rep.fraction() << " mean_ratio "
        << rep.mean_ratio << "\n";
  }
  return 0;
}

int cmd_gradcheck(std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& r : gradcheck_suite()) {
    out << (r.passed ? "pass " : "FAIL ") << r.name << " max_rel_error " << r.max_rel_error << "\n";
    ok = ok && r.passed;
  }
  out << "seconds " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << "\n";
  return ok ? 0 : 1;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Slot-token video pretraining on toy worlds", "ivcl"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::string> overrides;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate train/val/test episode files"},
      {"pretrain", "masked reconstruction pretraining"},
      {"finetune", "train a task head (loads --checkpoint if given)"},
      {"eval", "test accuracy of a checkpoint"},
      {"ablate", "pretraining ablation sweeps"},
      {"visualize", "slot attention heatmaps"},
      {"gradcheck", "finite-difference gradient checks"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key = value config file");
    for (const auto& key : config_keys())
      sub->add_option("--" + key, overrides[key])->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error usage: " << one_line(e.what()) << "\n";
    return 2;
  }
  try {
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gradcheck") return cmd_gradcheck(out);
    RunConfig cfg = config_path.empty() ? parse_config_text("") : parse_config(config_path);
    for (const auto& key : config_keys()) {
      auto* opt = app.get_subcommands().front()->get_option("--" + key);
      if (opt->count() == 0) continue;
      try {
        set_config_value(cfg, key, overrides[key]);
      } catch (const ConfigError& e) {
        throw ConfigError("--" + key + ": " + e.what());
      }
    }
    cfg.validate();
    if (cmd == "gen-data") return cmd_gen_data(cfg, out);
    if (cmd == "pretrain") return cmd_pretrain(cfg, out);
    if (cmd == "finetune") return cmd_finetune(cfg, out);
    if (cmd == "eval") return cmd_eval(cfg, out);
    if (cmd == "ablate") return cmd_ablate(cfg, out);
    if (cmd == "visualize") return cmd_visualize(cfg, out);
    throw ContractViolation("unhandled subcommand " + cmd);
  } catch (const Error& e) {
    err << "error " << e.kind() << ": " << one_line(e.what()) << "\n";
  } catch (const std::exception& e) {
    err << "error internal: " << one_line(e.what()) << "\n";
  }
  return 1;
}

}  // namespace ivcl::cli
