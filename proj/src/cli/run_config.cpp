#include "tal/cli/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tal/errors.hpp"

namespace tal {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads the keys of one section, rejecting anything not listed.
class Section {
 public:
  Section(const json& root, const char* name) : name_(name) {
    if (!root.contains(name)) return;
    node_ = &root.at(name);
    if (!node_->is_object()) throw ConfigError("config: section '" + name_ + "' must be an object");
  }

  template <typename T>
  Section& read(const char* key, T& field) {
    known_.insert(key);
    if (node_ == nullptr || !node_->contains(key)) return *this;
    try {
      field = node_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: " + name_ + "." + key + " has the wrong type");
    }
    return *this;
  }

  void finish() const {
    if (node_ == nullptr) return;
    for (const auto& [key, _] : node_->items()) {
      if (!known_.contains(key)) throw ConfigError("config: unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string, std::less<>> known_;
};

}  // namespace

void RunConfig::validate() const {
  model.validate();
  training.validate();
  inference.validate();
  eval.validate();
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: expected a JSON object");
  static const std::set<std::string, std::less<>> sections = {"encoder", "decoder", "training", "inference", "eval"};
  for (const auto& [key, _] : root.items()) {
    if (!sections.contains(key)) throw ConfigError("config: unknown section '" + key + "'");
  }

  RunConfig c;
  auto& enc = c.model.encoder;
  std::string branches = enc.branches.to_string();
  Section(root, "encoder")
      .read("input_dim", enc.input_dim)
      .read("channels", enc.channels)
      .read("levels", enc.levels)
      .read("blocks_per_level", enc.blocks_per_level)
      .read("group_count", enc.group_count)
      .read("ffn_expansion", enc.ffn_expansion)
      .read("gate", enc.gate_enabled)
      .read("branches", branches)
      .finish();
  enc.branches = BranchMask::parse(branches);

  auto& dec = c.model.decoder;
  std::string fusion(to_string(dec.fusion));
  Section(root, "decoder")
      .read("num_classes", dec.num_classes)
      .read("bins", dec.bins)
      .read("fusion", fusion)
      .read("decouple", dec.decouple)
      .read("refine_cls", dec.refine_cls)
      .read("refine_reg", dec.refine_reg)
      .finish();
  dec.fusion = parse_fusion(fusion);

  auto& t = c.training;
  Section(root, "training")
      .read("epochs", t.epochs)
      .read("warmup_epochs", t.warmup_epochs)
      .read("base_lr", t.base_lr)
      .read("weight_decay", t.adamw.weight_decay)
      .read("clip_norm", t.adamw.clip_norm)
      .read("beta1", t.adamw.beta1)
      .read("beta2", t.adamw.beta2)
      .read("eps", t.adamw.eps)
      .read("vfl_alpha", t.loss.alpha)
      .read("vfl_gamma", t.loss.gamma)
      .read("center_radius", t.center_radius)
      .read("seed", t.seed)
      .read("eval_every", t.eval_every)
      .read("train_split", t.train_split)
      .read("eval_split", t.eval_split)
      .finish();

  auto& inf = c.inference;
  Section(root, "inference")
      .read("threshold", inf.threshold)
      .read("top_k", inf.top_k)
      .read("sigma", inf.sigma)
      .read("score_floor", inf.score_floor)
      .finish();

  Section(root, "eval").read("thresholds", c.eval.thresholds).finish();

  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
  const auto& enc = model.encoder;
  const auto& dec = model.decoder;
  const auto& t = training;
  ordered_json j;
  j["encoder"] = {{"input_dim", enc.input_dim},
                  {"channels", enc.channels},
                  {"levels", enc.levels},
                  {"blocks_per_level", enc.blocks_per_level},
                  {"group_count", enc.group_count},
                  {"ffn_expansion", enc.ffn_expansion},
                  {"gate", enc.gate_enabled},
                  {"branches", enc.branches.to_string()}};
  j["decoder"] = {{"num_classes", dec.num_classes}, {"bins", dec.bins},
                  {"fusion", std::string(to_string(dec.fusion))}, {"decouple", dec.decouple},
                  {"refine_cls", dec.refine_cls},   {"refine_reg", dec.refine_reg}};
  j["training"] = {{"epochs", t.epochs},
                   {"warmup_epochs", t.warmup_epochs},
                   {"base_lr", t.base_lr},
                   {"weight_decay", t.adamw.weight_decay},
                   {"clip_norm", t.adamw.clip_norm},
                   {"beta1", t.adamw.beta1},
                   {"beta2", t.adamw.beta2},
                   {"eps", t.adamw.eps},
                   {"vfl_alpha", t.loss.alpha},
                   {"vfl_gamma", t.loss.gamma},
                   {"center_radius", t.center_radius},
                   {"seed", t.seed},
                   {"eval_every", t.eval_every},
                   {"train_split", t.train_split},
                   {"eval_split", t.eval_split}};
  j["inference"] = {{"threshold", inference.threshold},
                    {"top_k", inference.top_k},
                    {"sigma", inference.sigma},
                    {"score_floor", inference.score_floor}};
  j["eval"] = {{"thresholds", eval.thresholds}};
  return j.dump(2) + "\n";
}

}  // namespace tal
