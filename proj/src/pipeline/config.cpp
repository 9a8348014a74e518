#include "lar/pipeline/config.hpp"

#include "lar/error.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace lar::pipeline {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: bad value '" + text + "' for " + key);
  return value;
}

template <class T>
std::string format_number(T value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

struct Key {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Key number_key(T RunConfig::*field) {
  return {[field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>("", v); },
          [field](const RunConfig& c) { return format_number(c.*field); }};
}

template <class T>
Key field_key(std::function<T&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& v) { ref(c) = parse_number<T>("", v); },
          [ref](const RunConfig& c) { return format_number(ref(const_cast<RunConfig&>(c))); }};
}

Key string_key(std::string RunConfig::*field) {
  return {[field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> k;
    k["stage"] = string_key(&RunConfig::stage);
    k["seed"] = number_key(&RunConfig::seed);

    k["image_size"] = field_key<int>([](RunConfig& c) -> int& { return c.data.image_size; });
    k["dataset_size"] = field_key<int>([](RunConfig& c) -> int& { return c.data.count; });
    k["glyph_min"] = field_key<int>([](RunConfig& c) -> int& { return c.data.glyph_min; });
    k["glyph_max"] = field_key<int>([](RunConfig& c) -> int& { return c.data.glyph_max; });
    k["max_shift"] = field_key<int>([](RunConfig& c) -> int& { return c.data.max_shift; });
    k["mask_margin"] = field_key<int>([](RunConfig& c) -> int& { return c.data.mask_margin; });
    k["n_landmarks"] = field_key<int>([](RunConfig& c) -> int& { return c.data.n_landmarks; });

    k["vq_channels"] = {[](RunConfig& c, const std::string& v) { c.vq.channels = parse_int_list("vq_channels", v); },
                        [](const RunConfig& c) {
                          std::string s;
                          for (std::size_t i = 0; i < c.vq.channels.size(); ++i) {
                            s += (i ? "," : "") + std::to_string(c.vq.channels[i]);
                          }
                          return s;
                        }};
    k["vq_res_blocks"] = field_key<int>([](RunConfig& c) -> int& { return c.vq.res_blocks; });
    k["code_dim"] = field_key<int>([](RunConfig& c) -> int& { return c.vq.code_dim; });
    k["codebook_size"] = field_key<int>([](RunConfig& c) -> int& { return c.vq.codebook_size; });
    k["vq_output_norm"] = field_key<int>([](RunConfig& c) -> int& { return c.vq_output_norm; });
    k["commitment"] = field_key<double>([](RunConfig& c) -> double& { return c.vq.commitment; });

    k["vq_lr"] = field_key<double>([](RunConfig& c) -> double& { return c.vq_adam.lr; });
    k["vq_beta1"] = field_key<double>([](RunConfig& c) -> double& { return c.vq_adam.beta1; });
    k["vq_beta2"] = field_key<double>([](RunConfig& c) -> double& { return c.vq_adam.beta2; });
    k["vq_pretrain_steps"] = number_key(&RunConfig::vq_pretrain_steps);
    k["vq_finetune_steps"] = number_key(&RunConfig::vq_finetune_steps);
    k["vq_batch"] = number_key(&RunConfig::vq_batch);
    k["vq_decay_every"] = number_key(&RunConfig::vq_decay_every);

    k["tr_depth"] = field_key<int>([](RunConfig& c) -> int& { return c.transformer.depth; });
    k["tr_d_model"] = field_key<int>([](RunConfig& c) -> int& { return c.transformer.d_model; });
    k["tr_heads"] = field_key<int>([](RunConfig& c) -> int& { return c.transformer.heads; });
    k["tr_d_ff"] = field_key<int>([](RunConfig& c) -> int& { return c.transformer.d_ff; });
    k["tr_dropout"] = field_key<double>([](RunConfig& c) -> double& { return c.transformer.dropout; });
    k["tr_point_hidden"] = field_key<int>([](RunConfig& c) -> int& { return c.transformer.point_hidden; });
    k["tr_lr"] = field_key<double>([](RunConfig& c) -> double& { return c.tr_adam.lr; });
    k["tr_beta1"] = field_key<double>([](RunConfig& c) -> double& { return c.tr_adam.beta1; });
    k["tr_beta2"] = field_key<double>([](RunConfig& c) -> double& { return c.tr_adam.beta2; });
    k["tr_weight_decay"] = field_key<double>([](RunConfig& c) -> double& { return c.tr_adam.weight_decay; });
    k["tr_steps"] = number_key(&RunConfig::tr_steps);
    k["tr_batch"] = number_key(&RunConfig::tr_batch);
    k["tr_warmup"] = number_key(&RunConfig::tr_warmup);

    k["sample_temperature"] = field_key<double>([](RunConfig& c) -> double& { return c.sampler.temperature; });
    k["sample_top_k"] = field_key<int>([](RunConfig& c) -> int& { return c.sampler.top_k; });
    k["checkpoint_every"] = number_key(&RunConfig::checkpoint_every);
    k["vq_checkpoint"] = string_key(&RunConfig::vq_checkpoint);
    k["transformer_checkpoint"] = string_key(&RunConfig::transformer_checkpoint);
    return k;
  }();
  return table;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string digest_text(const RunConfig& c, std::initializer_list<const char*> names) {
  std::string s;
  for (const char* name : names) s += std::string(name) + "=" + keys().at(name).get(c) + "\n";
  return s;
}

}  // namespace

void DataConfig::validate() const {
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (count < 1) throw ConfigError("dataset_size must be positive");
  if (glyph_min < 1 || glyph_max < glyph_min) throw ConfigError("glyph size range is empty");
  if (glyph_max + 2 * mask_margin > image_size) throw ConfigError("glyph_max plus margins exceeds image_size");
  if (max_shift < 0 || mask_margin < 0 || n_landmarks < 0) throw ConfigError("negative mask generator setting");
}

void RunConfig::finalize() {
  vq.image_size = data.image_size;
  vq.output_norm = vq_output_norm != 0;
  transformer.codebook_size = vq.codebook_size;
  transformer.grid_h = transformer.grid_w = vq.latent_size();
  transformer.n_points = data.n_landmarks;
  sampler.seed = seed;
}

void RunConfig::validate() const {
  if (!stage.empty() && stage != "vq" && stage != "transformer") {
    throw ConfigError("stage must be 'vq' or 'transformer', got '" + stage + "'");
  }
  data.validate();
  vq.validate();
  transformer.validate();
  if (vq.image_size != data.image_size || transformer.codebook_size != vq.codebook_size ||
      transformer.grid_h != vq.latent_size() || transformer.grid_w != vq.latent_size() ||
      transformer.n_points != data.n_landmarks) {
    throw ConfigError("stage geometry disagrees; call finalize()");
  }
  if (vq_pretrain_steps < 0 || vq_finetune_steps < 0 || tr_steps < 0 || tr_warmup < 0) {
    throw ConfigError("step counts must be non-negative");
  }
  if (vq_output_norm != 0 && vq_output_norm != 1) throw ConfigError("vq_output_norm must be 0 or 1");
  if (vq_batch < 1 || tr_batch < 1) throw ConfigError("batch sizes must be positive");
  if (vq_decay_every < 0 || checkpoint_every < 0) throw ConfigError("intervals must be non-negative");
  if (!(vq_adam.lr > 0.0) || !(tr_adam.lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (sampler.temperature < 0.0) throw ConfigError("sample_temperature must be non-negative");
  if (sampler.top_k < 1 || sampler.top_k > vq.codebook_size) throw ConfigError("sample_top_k outside [1, codebook_size]");
  if (vq_checkpoint.empty() || transformer_checkpoint.empty()) throw ConfigError("checkpoint paths must be set");
}

std::uint64_t RunConfig::vq_digest() const {
  return fnv1a(digest_text(*this, {"image_size", "vq_channels", "vq_res_blocks", "vq_output_norm", "code_dim", "codebook_size"}));
}

std::uint64_t RunConfig::transformer_digest() const {
  return fnv1a(digest_text(*this, {"image_size", "vq_channels", "codebook_size", "n_landmarks", "tr_depth",
                                   "tr_d_model", "tr_heads", "tr_d_ff", "tr_point_hidden"}));
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = keys().find(key);
    if (it == keys().end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      it->second.set(config, value);
    } catch (const ConfigError&) {
      throw ConfigError(where + ": bad value '" + value + "' for " + key);
    }
  }
  config.finalize();
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [name, key] : keys()) {
    const std::string value = key.get(config);
    if (name == "stage" && value.empty()) continue;
    out += name + " = " + value + "\n";
  }
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& out_dir, const std::string& path) {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : out_dir / p;
}

}  // namespace lar::pipeline
