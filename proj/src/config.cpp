#include "ivcl/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace ivcl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::int64_t parse_int(const std::string& v) {
  std::int64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + v + "' is not an integer");
  return out;
}

std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("'" + v + "' is not a nonnegative integer");
  return out;
}

double parse_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError("'" + v + "' is not a number");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + v + "' is not a boolean (true/false)");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (out.empty() || (out.size() == 1 && out[0].empty())) throw ConfigError("empty list");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

const char* split_name(BlicketSplit s) {
  switch (s) {
    case BlicketSplit::Iid: return "iid";
    case BlicketSplit::CompTrain: return "comp_train";
    case BlicketSplit::CompTest: return "comp_test";
  }
  return "?";
}

BlicketSplit parse_split(const std::string& v) {
  for (auto s : {BlicketSplit::Iid, BlicketSplit::CompTrain, BlicketSplit::CompTest})
    if (v == split_name(s)) return s;
  throw ConfigError("unknown blicket split '" + v + "' (iid, comp_train, comp_test)");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

using IntRef = std::function<std::int64_t&(RunConfig&)>;
using DoubleRef = std::function<double&(RunConfig&)>;

Field int_field(std::string key, IntRef ref, std::int64_t min) {
  return {key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, key, min](RunConfig& c, const std::string& v) {
            const auto x = parse_int(v);
            if (x < min) throw ConfigError(key + " must be at least " + std::to_string(min));
            ref(c) = x;
          }};
}

Field double_field(std::string key, DoubleRef ref, std::function<bool(double)> ok, std::string rule) {
  return {key, [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); },
          [ref, key, ok, rule](RunConfig& c, const std::string& v) {
            const auto x = parse_double(v);
            if (!ok(x)) throw ConfigError(key + " must satisfy " + rule + ", got " + v);
            ref(c) = x;
          }};
}

Field bool_field(std::string key, std::function<bool&(RunConfig&)> ref) {
  return {key, [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(v); }};
}

Field string_field(std::string key, std::function<std::string&(RunConfig&)> ref) {
  return {key, [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); },
          [ref](RunConfig& c, const std::string& v) { ref(c) = v; }};
}

Field int_list_field(std::string key, std::function<std::vector<std::int64_t>&(RunConfig&)> ref, std::int64_t min) {
  return {key,
          [ref](const RunConfig& c) {
            return join(ref(const_cast<RunConfig&>(c)), [](std::int64_t x) { return std::to_string(x); });
          },
          [ref, key, min](RunConfig& c, const std::string& v) {
            std::vector<std::int64_t> xs;
            for (const auto& s : split_list(v)) {
              xs.push_back(parse_int(s));
              if (xs.back() < min) throw ConfigError(key + " entries must be at least " + std::to_string(min));
            }
            ref(c) = xs;
          }};
}

bool positive(double x) { return x > 0.0; }
bool nonnegative(double x) { return x >= 0.0; }
bool open_unit(double x) { return x > 0.0 && x < 1.0; }

// Fields that depend on others; kept in step after every assignment.
void sync(RunConfig& c) {
  c.data.shell.image_size = c.model.image_size;
  c.data.blicket.image_size = c.model.image_size;
  c.transfer.num_classes = task_classes(c.transfer.task, c.data.shell.grid);
  c.model.init_seed = c.seed;
  c.pretrain.seed = c.seed;
  c.transfer.seed = c.seed;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    // model
    f.push_back(int_field("image_size", [](RunConfig& c) -> auto& { return c.model.image_size; }, 1));
    f.push_back(int_field("patch_size", [](RunConfig& c) -> auto& { return c.model.patch_size; }, 1));
    f.push_back(int_field("channels", [](RunConfig& c) -> auto& { return c.model.channels; }, 1));
    f.push_back(int_field("encoder_layers", [](RunConfig& c) -> auto& { return c.model.encoder_layers; }, 1));
    f.push_back(int_field("hidden_dim", [](RunConfig& c) -> auto& { return c.model.hidden_dim; }, 2));
    f.push_back(int_field("encoder_heads", [](RunConfig& c) -> auto& { return c.model.encoder_heads; }, 1));
    f.push_back(int_field("mlp_dim", [](RunConfig& c) -> auto& { return c.model.mlp_dim; }, 1));
    f.push_back(int_field("num_slots", [](RunConfig& c) -> auto& { return c.model.num_slots; }, 1));
    f.push_back(int_field("pool_layer", [](RunConfig& c) -> auto& { return c.model.pool_layer; }, 0));
    f.push_back({"pool_method", [](const RunConfig& c) { return std::string(to_string(c.model.pool_method)); },
                 [](RunConfig& c, const std::string& v) { c.model.pool_method = parse_pool_method(v); }});
    f.push_back(double_field("gumbel_tau", [](RunConfig& c) -> auto& { return c.model.gumbel_tau; }, positive, "tau > 0"));
    f.push_back(int_field("temporal_layers", [](RunConfig& c) -> auto& { return c.model.temporal_layers; }, 1));
    f.push_back(int_field("temporal_heads", [](RunConfig& c) -> auto& { return c.model.temporal_heads; }, 1));
    f.push_back(int_field("decoder_layers", [](RunConfig& c) -> auto& { return c.model.decoder_layers; }, 1));
    f.push_back(int_field("decoder_heads", [](RunConfig& c) -> auto& { return c.model.decoder_heads; }, 1));
    f.push_back(int_field("max_frames", [](RunConfig& c) -> auto& { return c.model.max_frames; }, 1));
    // pretraining
    f.push_back({"objective", [](const RunConfig& c) { return std::string(to_string(c.objective)); },
                 [](RunConfig& c, const std::string& v) { c.objective = parse_objective(v); }});
    f.push_back(int_field("total_frames", [](RunConfig& c) -> auto& { return c.pretrain.total_frames; }, 1));
    f.push_back(int_field("context_frames", [](RunConfig& c) -> auto& { return c.pretrain.context_frames; }, 0));
    f.push_back(double_field("mask_ratio", [](RunConfig& c) -> auto& { return c.pretrain.mask_ratio; }, open_unit,
                             "0 < r < 1"));
    f.push_back(int_field("pretrain_epochs", [](RunConfig& c) -> auto& { return c.pretrain.epochs; }, 0));
    f.push_back(int_field("pretrain_steps", [](RunConfig& c) -> auto& { return c.pretrain.steps; }, 0));
    f.push_back(int_field("pretrain_batch_size", [](RunConfig& c) -> auto& { return c.pretrain.batch_size; }, 1));
    f.push_back(double_field("pretrain_lr", [](RunConfig& c) -> auto& { return c.pretrain.lr; }, positive, "lr > 0"));
    f.push_back(bool_field("loss_on_all_query_patches",
                           [](RunConfig& c) -> auto& { return c.pretrain.loss_on_all_query_patches; }));
    // transfer
    f.push_back({"task", [](const RunConfig& c) { return std::string(to_string(c.transfer.task)); },
                 [](RunConfig& c, const std::string& v) { c.transfer.task = parse_task(v); }});
    f.push_back(int_field("frames_per_example", [](RunConfig& c) -> auto& { return c.transfer.frames_per_example; }, 0));
    f.push_back(double_field("finetune_lr", [](RunConfig& c) -> auto& { return c.transfer.lr; }, positive, "lr > 0"));
    f.push_back(double_field("weight_decay", [](RunConfig& c) -> auto& { return c.transfer.weight_decay; }, nonnegative,
                             "weight_decay >= 0"));
    f.push_back(int_field("finetune_epochs", [](RunConfig& c) -> auto& { return c.transfer.epochs; }, 0));
    f.push_back(int_field("finetune_steps", [](RunConfig& c) -> auto& { return c.transfer.steps; }, 0));
    f.push_back(int_field("finetune_batch_size", [](RunConfig& c) -> auto& { return c.transfer.batch_size; }, 1));
    f.push_back(int_field("eval_every", [](RunConfig& c) -> auto& { return c.transfer.eval_every; }, 0));
    f.push_back(bool_field("linear_probe", [](RunConfig& c) -> auto& { return c.transfer.linear_probe; }));
    // data
    f.push_back(int_field("grid", [](RunConfig& c) -> auto& { return c.data.shell.grid; }, 2));
    f.push_back(int_field("num_objects", [](RunConfig& c) -> auto& { return c.data.shell.num_objects; }, 2));
    f.push_back(int_field("num_frames", [](RunConfig& c) -> auto& { return c.data.shell.num_frames; }, 1));
    f.push_back(double_field("cover_rate", [](RunConfig& c) -> auto& { return c.data.shell.cover_rate; }, nonnegative,
                             "rate >= 0"));
    f.push_back(double_field("idle_rate", [](RunConfig& c) -> auto& { return c.data.shell.idle_rate; }, nonnegative,
                             "rate >= 0"));
    f.push_back(int_field("blicket_objects", [](RunConfig& c) -> auto& { return c.data.blicket.num_objects; }, 2));
    f.push_back(int_field("blicket_max_per_frame", [](RunConfig& c) -> auto& { return c.data.blicket.max_per_frame; }, 2));
    f.push_back({"blicket_split", [](const RunConfig& c) { return std::string(split_name(c.data.blicket.split)); },
                 [](RunConfig& c, const std::string& v) { c.data.blicket.split = parse_split(v); }});
    f.push_back({"question_mix",
                 [](const RunConfig& c) {
                   return join(std::vector<double>(c.data.blicket.question_mix.begin(), c.data.blicket.question_mix.end()),
                               format_double);
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto parts = split_list(v);
                   if (parts.size() != 4) throw ConfigError("question_mix takes 4 weights");
                   for (std::size_t i = 0; i < 4; ++i) {
                     const double w = parse_double(parts[i]);
                     if (w < 0) throw ConfigError("question_mix weights must be >= 0");
                     c.data.blicket.question_mix[i] = w;
                   }
                 }});
    f.push_back(int_field("train_episodes", [](RunConfig& c) -> auto& { return c.data.train_episodes; }, 1));
    f.push_back(int_field("val_episodes", [](RunConfig& c) -> auto& { return c.data.val_episodes; }, 1));
    f.push_back(int_field("test_episodes", [](RunConfig& c) -> auto& { return c.data.test_episodes; }, 1));
    f.push_back({"data_seed", [](const RunConfig& c) { return std::to_string(c.data.seed); },
                 [](RunConfig& c, const std::string& v) { c.data.seed = parse_uint(v); }});
    // ablation
    f.push_back({"ablate_mask_ratios",
                 [](const RunConfig& c) { return join(c.ablation.mask_ratios, format_double); },
                 [](RunConfig& c, const std::string& v) {
                   std::vector<double> xs;
                   for (const auto& s : split_list(v)) {
                     xs.push_back(parse_double(s));
                     if (!open_unit(xs.back())) throw ConfigError("ablate_mask_ratios entries must satisfy 0 < r < 1");
                   }
                   c.ablation.mask_ratios = xs;
                 }});
    f.push_back({"ablate_axes", [](const RunConfig& c) { return join(c.ablation.axes, [](const std::string& a) { return a; }); },
                 [](RunConfig& c, const std::string& v) {
                   std::vector<std::string> axes;
                   for (const auto& a : split_list(v)) {
                     if (a != "mask_ratio" && a != "context" && a != "frames" && a != "slots")
                       throw ConfigError("unknown ablation axis '" + a + "' (mask_ratio, context, frames, slots)");
                     axes.push_back(a);
                   }
                   c.ablation.axes = axes;
                 }});
    f.push_back(int_list_field("ablate_contexts", [](RunConfig& c) -> auto& { return c.ablation.contexts; }, 0));
    f.push_back(int_list_field("ablate_frames", [](RunConfig& c) -> auto& { return c.ablation.frames; }, 1));
    f.push_back(int_list_field("ablate_slots", [](RunConfig& c) -> auto& { return c.ablation.slots; }, 1));
    f.push_back(int_field("ablate_pretrain_steps", [](RunConfig& c) -> auto& { return c.ablation.pretrain_steps; }, 1));
    f.push_back(int_field("ablate_finetune_steps", [](RunConfig& c) -> auto& { return c.ablation.finetune_steps; }, 1));
    f.push_back(int_field("ablate_episodes", [](RunConfig& c) -> auto& { return c.ablation.episodes; }, 2));
    // paths and misc
    f.push_back(string_field("data_dir", [](RunConfig& c) -> auto& { return c.data_dir; }));
    f.push_back(string_field("out_dir", [](RunConfig& c) -> auto& { return c.out_dir; }));
    f.push_back(string_field("checkpoint", [](RunConfig& c) -> auto& { return c.checkpoint; }));
    f.push_back(int_list_field("visualize_frames", [](RunConfig& c) -> auto& { return c.visualize_frames; }, 0));
    f.push_back(int_list_field("visualize_slots", [](RunConfig& c) -> auto& { return c.visualize_slots; }, 0));
    f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_uint(v); }});
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  pretrain.validate();
  transfer.validate();
  data.shell.validate();
  data.blicket.validate();
  if (transfer.num_classes != task_classes(transfer.task, data.shell.grid))
    throw ConfigError("num_classes does not match the task");
  if (pretrain.total_frames > model.max_frames)
    throw ConfigError("total_frames " + std::to_string(pretrain.total_frames) + " exceeds max_frames " +
                      std::to_string(model.max_frames));
  for (auto f : ablation.frames)
    if (f > model.max_frames) throw ConfigError("ablate_frames entry " + std::to_string(f) + " exceeds max_frames");
  for (auto s : visualize_slots)
    if (s >= model.num_slots) throw ConfigError("visualize_slots entry " + std::to_string(s) + " >= num_slots");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, value);
  sync(cfg);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  sync(cfg);
  std::istringstream in(text);
  std::string line;
  for (int number = 1; std::getline(in, line); ++number) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    try {
      if (eq == std::string::npos) throw ConfigError("expected 'key = value'");
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace ivcl
