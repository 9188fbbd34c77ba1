#include "asyncfm/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "asyncfm/digest.hpp"

namespace asyncfm {
namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::string& section,
                    std::initializer_list<const char*> known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) ok = true;
    if (!ok)
      throw std::invalid_argument("config: unknown key '" + section + "." + it.key() + "'");
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json bench_json(const BenchSpec& b) {
  return {{"num_tasks", b.num_tasks}, {"L", b.L},       {"D", b.D},
          {"S", b.S},                 {"d_in", b.d_in}, {"fourier", b.fourier},
          {"sigma_obs", b.sigma_obs}, {"amplitude", b.amplitude},
          {"smoothness", b.smoothness}, {"family", b.family},
          {"seed", b.seed},           {"n_train", b.n_train},
          {"n_val", b.n_val},         {"n_test", b.n_test}};
}

void bench_from(const json& j, BenchSpec& b) {
  reject_unknown(j, "bench",
                 {"num_tasks", "L", "D", "S", "d_in", "fourier", "sigma_obs", "amplitude",
                  "smoothness", "family", "seed", "n_train", "n_val", "n_test"});
  get_if(j, "num_tasks", b.num_tasks);
  get_if(j, "L", b.L);
  get_if(j, "D", b.D);
  get_if(j, "S", b.S);
  get_if(j, "d_in", b.d_in);
  get_if(j, "fourier", b.fourier);
  get_if(j, "sigma_obs", b.sigma_obs);
  get_if(j, "amplitude", b.amplitude);
  get_if(j, "smoothness", b.smoothness);
  get_if(j, "family", b.family);
  get_if(j, "seed", b.seed);
  get_if(j, "n_train", b.n_train);
  get_if(j, "n_val", b.n_val);
  get_if(j, "n_test", b.n_test);
}

json backbone_json(const BackboneConfig& c) {
  return {{"d", c.d}, {"layers", c.layers}, {"heads", c.heads}, {"ffn", c.ffn}};
}

void backbone_from(const json& j, BackboneConfig& c) {
  reject_unknown(j, "backbone", {"d", "layers", "heads", "ffn"});
  get_if(j, "d", c.d);
  get_if(j, "layers", c.layers);
  get_if(j, "heads", c.heads);
  get_if(j, "ffn", c.ffn);
}

json rater_json(const RaterConfig& c) {
  return {{"d_r", c.d_r},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn", c.ffn},
          {"threshold", c.threshold}};
}

void rater_from(const json& j, RaterConfig& c) {
  reject_unknown(j, "rater", {"d_r", "layers", "heads", "ffn", "threshold"});
  get_if(j, "d_r", c.d_r);
  get_if(j, "layers", c.layers);
  get_if(j, "heads", c.heads);
  get_if(j, "ffn", c.ffn);
  get_if(j, "threshold", c.threshold);
}

json train_json(const TrainSpec& t) {
  return {{"batch", t.batch},   {"lr", t.lr},
          {"beta1", t.beta1},   {"beta2", t.beta2},
          {"weight_decay", t.weight_decay}, {"epochs", t.epochs},
          {"seed", t.seed},     {"ckpt_every", t.ckpt_every}};
}

void train_from(const json& j, TrainSpec& t) {
  reject_unknown(j, "train",
                 {"batch", "lr", "beta1", "beta2", "weight_decay", "epochs", "seed",
                  "ckpt_every"});
  get_if(j, "batch", t.batch);
  get_if(j, "lr", t.lr);
  get_if(j, "beta1", t.beta1);
  get_if(j, "beta2", t.beta2);
  get_if(j, "weight_decay", t.weight_decay);
  get_if(j, "epochs", t.epochs);
  get_if(j, "seed", t.seed);
  get_if(j, "ckpt_every", t.ckpt_every);
}

json rater_train_json(const RaterTrainSpec& t) {
  return {{"batch", t.batch}, {"lr", t.lr},        {"epochs", t.epochs},
          {"subset", t.subset}, {"seed", t.seed},  {"alpha", t.alpha},
          {"beta", t.beta},   {"epsilon", t.epsilon}};
}

void rater_train_from(const json& j, RaterTrainSpec& t) {
  reject_unknown(j, "rater_train",
                 {"batch", "lr", "epochs", "subset", "seed", "alpha", "beta", "epsilon"});
  get_if(j, "batch", t.batch);
  get_if(j, "lr", t.lr);
  get_if(j, "epochs", t.epochs);
  get_if(j, "subset", t.subset);
  get_if(j, "seed", t.seed);
  get_if(j, "alpha", t.alpha);
  get_if(j, "beta", t.beta);
  get_if(j, "epsilon", t.epsilon);
}

}  // namespace

void BenchSpec::validate() const {
  if (num_tasks < 1 || L < 1 || D < 1 || S < 1 || d_in < 1 || fourier < 1)
    throw std::invalid_argument("bench: geometry must be positive");
  if (family != "fourier" && family != "linear")
    throw std::invalid_argument("bench: family must be 'fourier' or 'linear'");
  if (family == "fourier" && d_in < 2 * fourier)
    throw std::invalid_argument("bench: d_in must be >= 2*fourier to encode coefficients");
  if (S < D)
    throw std::invalid_argument("bench: need S >= D context rows to encode all action dims");
  if (sigma_obs < 0.0 || amplitude <= 0.0 || smoothness <= 0.0)
    throw std::invalid_argument("bench: invalid family parameters");
  if (n_train < 1 || n_val < 1 || n_test < 1)
    throw std::invalid_argument("bench: split sizes must be positive");
}

void ExperimentConfig::validate() const {
  bench.validate();
  backbone_full().validate();
  rater.validate();
  if (train.batch < 1 || train.epochs < 1 || train.lr <= 0.0)
    throw std::invalid_argument("train: invalid settings");
  if (rater_train.batch < 1 || rater_train.epochs < 1 || rater_train.lr <= 0.0)
    throw std::invalid_argument("rater_train: invalid settings");
  if (flow.steps < 1) throw std::invalid_argument("flow: steps must be >= 1");
  if (!(eval.eps_tube > 0.0) || eval.episodes < 1 || eval.afm_rounds < 1)
    throw std::invalid_argument("eval: invalid settings");
}

BackboneConfig ExperimentConfig::backbone_full() const {
  BackboneConfig c = backbone;
  c.L = bench.L;
  c.D = bench.D;
  c.S = bench.S;
  c.d_in = bench.d_in;
  c.num_tasks = bench.num_tasks;
  return c;
}

std::string ExperimentConfig::serialize() const {
  json j;
  j["bench"] = bench_json(bench);
  j["backbone"] = backbone_json(backbone);
  j["rater"] = rater_json(rater);
  j["train"] = train_json(train);
  j["rater_train"] = rater_train_json(rater_train);
  j["flow"] = {{"steps", flow.steps}};
  j["eval"] = {{"eps_tube", eval.eps_tube},
               {"episodes", eval.episodes},
               {"afm_rounds", eval.afm_rounds},
               {"seed", eval.seed}};
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: parse error: ") + e.what());
  }
  reject_unknown(j, "<root>",
                 {"bench", "backbone", "rater", "train", "rater_train", "flow", "eval"});
  ExperimentConfig c;
  if (j.contains("bench")) bench_from(j["bench"], c.bench);
  if (j.contains("backbone")) backbone_from(j["backbone"], c.backbone);
  if (j.contains("rater")) rater_from(j["rater"], c.rater);
  if (j.contains("train")) train_from(j["train"], c.train);
  if (j.contains("rater_train")) rater_train_from(j["rater_train"], c.rater_train);
  if (j.contains("flow")) {
    reject_unknown(j["flow"], "flow", {"steps"});
    get_if(j["flow"], "steps", c.flow.steps);
  }
  if (j.contains("eval")) {
    reject_unknown(j["eval"], "eval", {"eps_tube", "episodes", "afm_rounds", "seed"});
    get_if(j["eval"], "eps_tube", c.eval.eps_tube);
    get_if(j["eval"], "episodes", c.eval.episodes);
    get_if(j["eval"], "afm_rounds", c.eval.afm_rounds);
    get_if(j["eval"], "seed", c.eval.seed);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

uint64_t ExperimentConfig::digest() const { return fnv1a(serialize()); }

}  // namespace asyncfm
