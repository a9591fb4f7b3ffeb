#include "privlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "privlab/error.hpp"
#include "privlab/log.hpp"
#include "privlab/random.hpp"

namespace privlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Every accepted key and its default, in file order.
const std::vector<std::pair<std::string, std::string>>& key_table() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"run.preset", ""},
      {"run.seed", "0"},
      {"run.seeds", "5"},
      {"run.eval_every", "0"},
      {"run.checkpoint_every", "0"},
      {"run.save_attacks", "true"},
      {"sweep.variable", ""},
      {"sweep.values", ""},
      {"sweep.compare", ""},
      {"sweep.compare_values", ""},
      {"data.per_class", "175"},
      {"data.side", "8"},
      {"data.classes", "4"},
      {"data.train", "500"},
      {"data.test", "168"},
      {"data.probe", "32"},
      {"data.concentration", "1.0"},
      {"model.hidden", "16"},
      {"fed.rounds", "200"},
      {"fed.clients", "8"},
      {"fed.per_round", "4"},
      {"fed.local_epochs", "1"},
      {"fed.batch", "8"},
      {"fed.local_steps", "0"},
      {"fed.lr", "0.25"},
      {"fed.prune_rate", "0.3"},
      {"fed.policy", "random"},
      {"fed.mask_schedule", "auto"},
      {"fed.reconfigure_every", "10"},
      {"fed.regrow_fraction", "0.05"},
      {"fed.importance_decay", "0.9"},
      {"fed.synflow_rounds", "5"},
      {"defense.strategy", "none"},
      {"defense.rate", "0.0"},
      {"defense.mix_largest", "0.0"},
      {"defense.mix_random", "0.0"},
      {"defense.pseudo", "true"},
      {"defense.lambda_acc", "5"},
      {"defense.lambda_pri", "10"},
      {"defense.lambda_sha", "2e-5"},
      {"defense.share_penalty_all", "false"},
      {"defense.temperature", "1.0"},
      {"defense.temperature_decay", "0.97"},
      {"defense.temperature_floor", "0.1"},
      {"defense.alpha_init", "0.1"},
      {"attack.enabled", "true"},
      {"attack.kind", "sgi"},
      {"attack.iterations", "2000"},
      {"attack.step", "0.01"},
      {"attack.optimizer", "adam"},
      {"attack.tv_weight", "1e-4"},
      {"attack.plateau", "500"},
      {"attack.plateau_tolerance", "1e-3"},
      {"attack.trace_every", "100"},
      {"attack.restore_label", "true"},
      {"attack.model_at_reference", "true"},
      {"attack.target", "0"},
      {"attack.first_round", "1"},
      {"attack.max_attacks", "1"},
      {"attack.levels", "8"},
      {"attack.binning", "minmax"},
      {"bounds.samples", "64"},
      {"bounds.singular_floor", "1e-10"},
      {"bounds.subtract_mean", "true"},
      {"bounds.max_coords", "256"},
      {"bounds.checkpoint", ""},
  };
  return table;
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

// A single local step per round and every client in every round keeps the attacked update a
// plain minibatch gradient step that the target sends each round.
const Overrides kAttackRuns = {
    {"fed.rounds", "3"},       {"fed.per_round", "8"},     {"fed.local_steps", "1"},
    {"attack.first_round", "1"}, {"attack.max_attacks", "3"},
};

// Late-training attacks on a FedSGD run with a PruneFL-style base; loss weights are the
// smallest entries of the searched grids.
const Overrides kDefenseRuns = {
    {"fed.policy", "prunefl"},  {"fed.batch", "1"},          {"fed.local_steps", "1"},
    {"defense.lambda_acc", "1"}, {"defense.lambda_pri", "1"}, {"attack.max_attacks", "3"},
};

struct PresetDef {
  std::string name;
  std::vector<Overrides> layers;
};

const std::vector<PresetDef>& preset_table() {
  static const std::vector<PresetDef> table = {
      {"sweep-p",
       {kAttackRuns, {{"sweep.variable", "fed.prune_rate"}, {"sweep.values", "0.1,0.3,0.5,0.7,0.9"}}}},
      {"sweep-B", {kAttackRuns, {{"sweep.variable", "fed.batch"}, {"sweep.values", "1,2,4,8,16"}}}},
      {"sweep-d",
       {kAttackRuns,
        {{"sweep.variable", "model.hidden"}, {"sweep.values", "4,8,16,32"}, {"fed.batch", "4"}}}},
      {"sweep-T",
       {kAttackRuns,
        {{"sweep.variable", "fed.rounds"}, {"sweep.values", "1,2,5,10,20"}, {"attack.max_attacks", "20"}}}},
      {"attack-compare",
       {kAttackRuns,
        {{"sweep.variable", "fed.prune_rate"}, {"sweep.values", "0.3,0.6"}, {"sweep.compare", "attack.kind"},
         {"sweep.compare_values", "gi,sgi"}, {"fed.batch", "1"}}}},
      {"defense-compare",
       {kDefenseRuns,
        {{"sweep.variable", "defense.strategy"}, {"sweep.values", "none,largest,random,mix,priprune"},
         {"defense.rate", "0.3"}, {"defense.mix_largest", "0.15"}, {"defense.mix_random", "0.15"},
         {"fed.rounds", "100"}, {"attack.first_round", "81"}}}},
      {"priprune-tradeoff",
       {kDefenseRuns,
        {{"sweep.variable", "defense.strategy"}, {"sweep.values", "none,priprune"}, {"fed.rounds", "200"},
         {"attack.first_round", "181"}}}},
      {"bounds-report",
       {{{"sweep.variable", "fed.prune_rate"}, {"sweep.values", "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"},
         {"fed.rounds", "20"}, {"attack.enabled", "false"}}}},
  };
  return table;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_double(std::string_view text, double& out) {
  if (text == "nan") {
    out = kNaN;
    return true;
  }
  if (text == "inf" || text == "-inf") {
    out = text[0] == '-' ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    return true;
  }
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end && !text.empty();
}

bool bare_toml_value(const std::string& v) {
  double d;
  return v == "true" || v == "false" || (parse_double(v, d) && std::isfinite(d));
}

std::string tag_of(std::string_view text) {
  std::string out;
  for (char c : text) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out.empty() ? "_" : out;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

Settings Settings::defaults() {
  Settings s;
  for (const auto& [k, v] : key_table()) s.values_.emplace(k, v);
  return s;
}

bool Settings::has(std::string_view key) const { return values_.find(key) != values_.end(); }

void Settings::set(std::string_view key, std::string value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + std::string(key) + "'");
  it->second = std::move(value);
}

const std::string& Settings::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + std::string(key) + "'");
  return it->second;
}

double Settings::number(std::string_view key) const {
  double v;
  if (!parse_double(get(key), v)) {
    throw ConfigError("setting '" + std::string(key) + "' is not a number: '" + get(key) + "'");
  }
  return v;
}

std::uint64_t Settings::u64(std::string_view key) const {
  const std::string& text = get(key);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("setting '" + std::string(key) + "' is not a non-negative integer: '" + text + "'");
  }
  return v;
}

std::size_t Settings::count(std::string_view key) const { return static_cast<std::size_t>(u64(key)); }

bool Settings::flag(std::string_view key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("setting '" + std::string(key) + "' is not true/false: '" + v + "'");
}

std::vector<std::string> Settings::list(std::string_view key) const {
  std::vector<std::string> out;
  const std::string& v = get(key);
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    out.push_back(trim(std::string_view(v).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

void Settings::write_toml(std::ostream& out) const {
  std::string section;
  for (const auto& [key, _] : key_table()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
      section = sec;
    }
    const std::string& v = get(key);
    out << key.substr(dot + 1) << " = ";
    if (bare_toml_value(v)) {
      out << v << "\n";
    } else {
      out << '"';
      for (char c : v) {
        if (c == '"' || c == '\\') out << '\\';
        out << c;
      }
      out << "\"\n";
    }
  }
}

void Settings::read_toml(std::istream& in) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw FormatError("line " + std::to_string(lineno) + ": unterminated section", lineno);
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError("line " + std::to_string(lineno) + ": expected key = value", lineno);
    const std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (!value.empty() && value.front() == '"') {
      std::string raw;
      std::size_t i = 1;
      for (; i < value.size() && value[i] != '"'; ++i) {
        if (value[i] == '\\' && i + 1 < value.size()) ++i;
        raw += value[i];
      }
      if (i >= value.size()) throw FormatError("line " + std::to_string(lineno) + ": unterminated string", lineno);
      value = raw;
    } else {
      const auto hash = value.find('#');
      if (hash != std::string::npos) value = trim(std::string_view(value).substr(0, hash));
    }
    set(section.empty() ? key : section + "." + key, value);
  }
}

void apply_assignment(Settings& s, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  }
  s.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& p : preset_table()) n.push_back(p.name);
    return n;
  }();
  return names;
}

Settings preset_settings(std::string_view name) {
  for (const auto& p : preset_table()) {
    if (p.name != name) continue;
    Settings s = Settings::defaults();
    s.set("run.preset", p.name);
    for (const auto& layer : p.layers)
      for (const auto& [k, v] : layer) s.set(k, v);
    return s;
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected one of " + known + ")");
}

std::uint64_t run_seed(const Settings& s, std::size_t index) { return derive_seed(s.u64("run.seed"), {index}); }

ModelSpec model_from(const Settings& s, std::uint64_t seed) {
  std::vector<std::size_t> hidden;
  const std::string& text = s.get("model.hidden");
  std::size_t start = 0;
  while (start <= text.size() && !text.empty()) {
    const auto dash = text.find('-', start);
    const std::string part = text.substr(start, dash == std::string::npos ? std::string::npos : dash - start);
    std::size_t width = 0;
    auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), width);
    if (ec != std::errc() || ptr != part.data() + part.size() || part.empty() || width == 0) {
      throw ConfigError("model.hidden must be positive widths joined by '-', got '" + text + "'");
    }
    hidden.push_back(width);
    if (dash == std::string::npos) break;
    start = dash + 1;
  }
  const std::size_t side = s.count("data.side");
  auto spec = ModelSpec::mlp(side * side, hidden, s.count("data.classes"), derive_seed(seed, {0x30de1}));
  spec.validate();
  return spec;
}

FedConfig fed_from(const Settings& s, std::uint64_t seed) {
  FedConfig c;
  c.rounds = s.count("fed.rounds");
  c.clients = s.count("fed.clients");
  c.per_round = s.count("fed.per_round");
  c.local_epochs = s.count("fed.local_epochs");
  c.batch = s.count("fed.batch");
  c.local_steps = s.count("fed.local_steps");
  c.lr = s.number("fed.lr");
  c.prune_rate = s.number("fed.prune_rate");
  c.policy.kind = parse_policy_kind(s.get("fed.policy"));
  c.policy.seed = derive_seed(seed, {0x9011c});
  c.policy.reconfigure_every = s.count("fed.reconfigure_every");
  c.policy.regrow_fraction = s.number("fed.regrow_fraction");
  c.policy.importance_decay = s.number("fed.importance_decay");
  c.policy.synflow_rounds = s.count("fed.synflow_rounds");
  c.mask_schedule = parse_mask_schedule(s.get("fed.mask_schedule"));
  c.seed = derive_seed(seed, {0xfed});
  c.validate();
  return c;
}

DefensePlan defense_from(const Settings& s) {
  DefensePlan d;
  d.strategy = parse_defense_strategy(s.get("defense.strategy"));
  d.rate = s.number("defense.rate");
  d.mix_largest = s.number("defense.mix_largest");
  d.mix_random = s.number("defense.mix_random");
  d.pseudo = s.flag("defense.pseudo");
  d.lambda_acc = s.number("defense.lambda_acc");
  d.lambda_pri = s.number("defense.lambda_pri");
  d.lambda_sha = s.number("defense.lambda_sha");
  d.share_penalty_all = s.flag("defense.share_penalty_all");
  d.temperature = s.number("defense.temperature");
  d.temperature_decay = s.number("defense.temperature_decay");
  d.temperature_floor = s.number("defense.temperature_floor");
  d.alpha_init = s.number("defense.alpha_init");
  d.validate();
  return d;
}

AttackSchedule attack_from(const Settings& s, std::uint64_t seed) {
  AttackSchedule a;
  a.plan.kind = parse_attack_kind(s.get("attack.kind"));
  a.plan.iterations = s.count("attack.iterations");
  a.plan.step = s.number("attack.step");
  a.plan.optimizer = parse_attack_optimizer(s.get("attack.optimizer"));
  a.plan.tv_weight = s.number("attack.tv_weight");
  a.plan.plateau = s.count("attack.plateau");
  a.plan.plateau_tolerance = s.number("attack.plateau_tolerance");
  a.plan.trace_every = s.count("attack.trace_every");
  a.plan.restore_label = s.flag("attack.restore_label");
  a.plan.model_at_reference = s.flag("attack.model_at_reference");
  a.plan.seed = derive_seed(seed, {0xa77ac});
  a.plan.image_side = s.count("data.side");
  a.plan.validate();
  a.target = s.count("attack.target");
  a.first_round = s.count("attack.first_round");
  a.max_attacks = s.count("attack.max_attacks");
  a.scoring.levels = s.count("attack.levels");
  a.scoring.binning = parse_binning(s.get("attack.binning"));
  if (a.scoring.levels < 2) throw ConfigError("attack.levels must be >= 2");
  return a;
}

FederationData data_from(const Settings& s, std::uint64_t seed) {
  const std::size_t train = s.count("data.train"), test = s.count("data.test"), probe = s.count("data.probe");
  const std::size_t classes = s.count("data.classes");
  const Dataset all = synth_digits(derive_seed(seed, {0xda7a}), s.count("data.per_class"), s.count("data.side"), classes);
  if (train + test + probe > all.size()) {
    throw ConfigError("data.train + data.test + data.probe exceeds " + std::to_string(all.size()) + " samples");
  }
  std::vector<std::size_t> tr(train), te(test), pr(probe);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(te.begin(), te.end(), train);
  std::iota(pr.begin(), pr.end(), train + test);
  const Dataset train_set = all.subset(tr);
  const auto part = partition_dirichlet(train_set, s.count("fed.clients"), s.number("data.concentration"),
                                        derive_seed(seed, {0x5ec7}));
  FederationData data;
  for (const auto& a : part.assignments) data.shards.push_back(train_set.subset(a));
  data.probe = all.subset(pr);
  data.test = all.subset(te);
  return data;
}

namespace {

struct Job {
  const Settings* base;
  fs::path out;
  std::size_t seed_index;
};

// One federation run and its persisted logs.
struct RunOutput {
  std::vector<RoundRecord> records;
  std::size_t param_count = 0;
};

void write_round_logs(const fs::path& dir, const std::string& tag, const std::vector<RoundRecord>& recs) {
  std::ofstream jl(dir / "runs" / (tag + ".jsonl"));
  std::ofstream csv(dir / "runs" / (tag + ".csv"));
  csv << "round,acc,nmi,psnr,defense_rate,mean_alpha,accuracy_loss,privacy_loss,share_penalty\n";
  for (const auto& r : recs) {
    json j;
    j["round"] = r.round;
    j["participants"] = r.participants;
    j["accuracy"] = finite_or_null(r.accuracy);
    j["nmi"] = finite_or_null(r.nmi);
    j["psnr"] = finite_or_null(r.psnr);
    j["defense_rate"] = r.defense_rate;
    j["mean_alpha"] = r.mean_alpha;
    j["accuracy_loss"] = r.accuracy_loss;
    j["privacy_loss"] = r.privacy_loss;
    j["share_penalty"] = r.share_penalty;
    j["server_mask_rate"] = r.server_mask_rate;
    if (r.attack) {
      const auto& a = *r.attack;
      j["attack"] = {{"client", a.client},
                     {"initial_loss", finite_or_null(a.result.initial_loss)},
                     {"final_loss", finite_or_null(a.result.final_loss)},
                     {"label_restored", a.result.label_restored},
                     {"degenerate", a.result.degenerate},
                     {"sign_steps", a.result.sign_steps}};
    } else {
      j["attack"] = nullptr;
    }
    jl << j.dump() << "\n";
    csv << r.round << "," << format_double(r.accuracy) << "," << format_double(r.nmi) << ","
        << format_double(r.psnr) << "," << format_double(r.defense_rate) << "," << format_double(r.mean_alpha)
        << "," << format_double(r.accuracy_loss) << "," << format_double(r.privacy_loss) << ","
        << format_double(r.share_penalty) << "\n";
  }
}

void write_attack(const fs::path& dir, const std::string& tag, const RoundRecord& r) {
  const auto& a = *r.attack;
  json j;
  j["round"] = r.round;
  j["client"] = a.client;
  j["nmi"] = finite_or_null(a.score.nmi);
  j["psnr"] = finite_or_null(a.score.psnr);
  j["initial_loss"] = finite_or_null(a.result.initial_loss);
  j["final_loss"] = finite_or_null(a.result.final_loss);
  j["labels"] = a.result.labels;
  j["label_restored"] = a.result.label_restored;
  j["degenerate"] = a.result.degenerate;
  j["sign_steps"] = a.result.sign_steps;
  j["match"] = a.score.match;
  json trace = json::array();
  for (double v : a.result.trace) trace.push_back(finite_or_null(v));
  j["trace"] = trace;
  if (!a.result.recovered.bits.empty()) j["recovered_mask_rate"] = a.result.recovered.rate;
  const std::string stem = tag + "_r" + std::to_string(r.round);
  std::ofstream(dir / "attacks" / (stem + ".json")) << j.dump(2) << "\n";
  Dataset recon;
  recon.samples = a.result.batch;
  for (double& v : recon.samples.values()) v = std::clamp(v, 0.0, 1.0);
  recon.labels = a.result.labels;
  std::ofstream csv(dir / "attacks" / (stem + ".csv"));
  write_csv_dataset(csv, recon);
}

RunOutput federate(const Settings& s, std::uint64_t seed, const fs::path& dir, const std::string& tag,
                   std::size_t eval_every) {
  const auto spec = model_from(s, seed);
  const auto fed = fed_from(s, seed);
  const auto data = data_from(s, seed);
  const auto defense = defense_from(s);
  const bool attacking = s.flag("attack.enabled");
  const AttackSchedule attack = attack_from(s, seed);
  const std::size_t every = s.count("run.checkpoint_every");
  const bool save_attacks = s.flag("run.save_attacks");
  RunOptions opt;
  opt.eval_every = eval_every;
  opt.keep_updates = false;
  opt.on_round = [&](const RoundRecord& r) {
    if ((every > 0 && r.round % every == 0) || r.round == fed.rounds) {
      save_checkpoint((dir / "checkpoints" / (tag + "_r" + std::to_string(r.round) + ".pflw")).string(), r.global);
    }
    if (save_attacks && r.attack) write_attack(dir, tag, r);
  };
  RunOutput out;
  out.param_count = spec.param_count();
  out.records = run(spec, fed, data, &defense, attacking ? &attack : nullptr, opt);
  write_round_logs(dir, tag, out.records);
  return out;
}

// Metrics of the prefix of a run ending at round `upto`.
std::vector<std::pair<std::string, double>> run_metrics(const RunOutput& run, std::size_t upto) {
  double nmi = kNaN, psnr = kNaN, loss = kNaN, acc = kNaN, rate = 0.0, alpha = 0.0;
  std::size_t rounds = 0;
  for (const auto& r : run.records) {
    if (r.round > upto) break;
    ++rounds;
    rate += r.defense_rate;
    alpha += r.mean_alpha;
    if (!std::isnan(r.accuracy)) acc = r.accuracy;
    // The strongest attack of the run counts.
    if (!std::isnan(r.nmi) && (std::isnan(nmi) || r.nmi > nmi)) {
      nmi = r.nmi;
      psnr = r.psnr;
      loss = r.attack ? r.attack->result.final_loss : kNaN;
    }
  }
  const double n = rounds > 0 ? static_cast<double>(rounds) : 1.0;
  return {{"accuracy", acc},        {"nmi", nmi},           {"psnr", psnr},
          {"attack_loss", loss},    {"defense_rate", rate / n}, {"mean_alpha", alpha / n},
          {"param_count", static_cast<double>(run.param_count)}};
}

std::vector<ResultRow> bounds_rows(const Settings& s, const std::vector<std::string>& values,
                                   std::size_t index, const fs::path& dir) {
  const std::string preset = s.get("run.preset"), variable = s.get("sweep.variable");
  const std::uint64_t seed = run_seed(s, index);
  const auto spec = model_from(s, seed);
  const auto data = data_from(s, seed);
  ParamVector params;
  const std::string ckpt = s.get("bounds.checkpoint");
  const std::string base_tag = "bounds_s" + std::to_string(index);
  if (!ckpt.empty()) {
    params = load_checkpoint(ckpt);
    if (params.layout() != spec.layout()) throw ConfigError("bounds.checkpoint does not match model.hidden");
  } else {
    Settings train = s;
    train.set("attack.enabled", "false");
    params = federate(train, seed, dir, base_tag, 0).records.back().global;
  }
  GradStatsOptions opt;
  opt.singular_floor = s.number("bounds.singular_floor");
  opt.subtract_mean = s.flag("bounds.subtract_mean");
  opt.max_coords = s.count("bounds.max_coords");
  opt.seed = derive_seed(seed, {0xb0d5});
  const std::size_t target = s.count("attack.target");
  if (target >= data.shards.size()) throw ConfigError("attack.target is not a client");
  const Dataset& shard = data.shards[target];
  const std::size_t n = std::min(s.count("bounds.samples"), shard.size());
  if (n < s.count("bounds.samples")) {
    log::info("bounds: shard of client " + std::to_string(target) + " holds only " + std::to_string(n) + " samples");
  }
  const auto stats = estimate_grad_stats(spec, params, shard, n, opt);
  std::vector<ResultRow> rows;
  for (const auto& v : values) {
    Settings vs = s;
    if (!variable.empty()) vs.set(variable, v);
    BoundInputs in;
    in.p = vs.number("fed.prune_rate");
    in.batch = vs.count("fed.batch");
    in.rounds = vs.count("fed.rounds");
    in.d_star = stats.d_star;
    in.delta = stats.delta;
    std::ofstream(dir / "bounds" / (tag_of(v) + "_s" + std::to_string(index) + ".json")) << bounds_json(in) << "\n";
    const std::pair<const char*, double> metrics[] = {{"single_bound_bits", single_round_bound(in)},
                                                      {"multi_bound_bits", multi_round_bound(in)},
                                                      {"d_star", static_cast<double>(in.d_star)},
                                                      {"delta", in.delta},
                                                      {"coords_used", static_cast<double>(stats.coords_used)},
                                                      {"samples", static_cast<double>(n)}};
    for (const auto& [m, x] : metrics) rows.push_back({preset, variable, v, index, m, x});
  }
  return rows;
}

std::vector<ResultRow> seed_rows(const Settings& s, std::size_t index, const fs::path& dir) {
  const std::string preset = s.get("run.preset"), variable = s.get("sweep.variable");
  std::vector<std::string> values = s.list("sweep.values");
  if (variable.empty()) values = {""};
  else if (values.empty()) throw ConfigError("sweep.values is empty");
  if (!variable.empty() && !s.has(variable)) throw ConfigError("unknown setting '" + variable + "' in sweep.variable");
  if (preset == "bounds-report") return bounds_rows(s, values, index, dir);

  const std::string compare = s.get("sweep.compare");
  std::vector<std::string> compares = compare.empty() ? std::vector<std::string>{""} : s.list("sweep.compare_values");
  if (!compare.empty() && !s.has(compare)) throw ConfigError("unknown setting '" + compare + "' in sweep.compare");
  const std::uint64_t seed = run_seed(s, index);
  const std::size_t eval_every = s.count("run.eval_every");
  std::vector<ResultRow> rows;

  // Sweeping the round count reads every value off one run of the longest length, since later
  // rounds never change earlier ones.
  if (variable == "fed.rounds") {
    std::vector<std::size_t> ts;
    for (const auto& v : values) {
      Settings probe = s;
      probe.set(variable, v);
      ts.push_back(probe.count(variable));
    }
    for (const auto& c : compares) {
      Settings run_s = s;
      run_s.set("fed.rounds", std::to_string(*std::max_element(ts.begin(), ts.end())));
      if (!compare.empty()) run_s.set(compare, c);
      const std::string tag = "T" + (c.empty() ? "" : "_" + tag_of(c)) + "_s" + std::to_string(index);
      const auto out = federate(run_s, seed, dir, tag, 1);
      for (std::size_t i = 0; i < values.size(); ++i) {
        for (const auto& [m, x] : run_metrics(out, ts[i])) {
          rows.push_back({preset, variable, values[i], index, c.empty() ? m : m + "." + c, x});
        }
      }
    }
    return rows;
  }

  for (const auto& v : values) {
    for (const auto& c : compares) {
      Settings run_s = s;
      if (!variable.empty()) run_s.set(variable, v);
      if (!compare.empty()) run_s.set(compare, c);
      const std::string tag =
          tag_of(v) + (c.empty() ? "" : "_" + tag_of(c)) + "_s" + std::to_string(index);
      const auto out = federate(run_s, seed, dir, tag, eval_every);
      for (const auto& [m, x] : run_metrics(out, out.records.size())) {
        rows.push_back({preset, variable, v, index, c.empty() ? m : m + "." + c, x});
      }
    }
  }
  return rows;
}

}  // namespace

std::vector<ResultRow> run_preset(const Settings& s, const fs::path& out, std::size_t jobs) {
  preset_settings(s.get("run.preset"));  // validates the name
  const std::size_t seeds = s.count("run.seeds");
  if (seeds == 0) throw ConfigError("run.seeds must be >= 1");
  // Build everything once up front so configuration errors surface before any work starts.
  {
    Settings check = s;
    const auto values = s.list("sweep.values");
    const std::string variable = s.get("sweep.variable");
    for (const auto& v : values.empty() ? std::vector<std::string>{""} : values) {
      if (!variable.empty() && !v.empty()) check.set(variable, v);
      const std::string compare = s.get("sweep.compare");
      for (const auto& c : compare.empty() ? std::vector<std::string>{""} : s.list("sweep.compare_values")) {
        if (!compare.empty()) check.set(compare, c);
        const auto seed = run_seed(check, 0);
        const auto fed = fed_from(check, seed);
        model_from(check, seed);
        defense_from(check);
        const auto attack = attack_from(check, seed);
        if (attack.target >= fed.clients) throw ConfigError("attack.target is not a client");
        data_from(check, seed);
      }
    }
  }
  for (const char* sub : {"runs", "checkpoints", "attacks", "bounds"}) fs::create_directories(out / sub);
  {
    std::ofstream cfg(out / "config.resolved.toml");
    s.write_toml(cfg);
  }

  std::vector<std::vector<ResultRow>> per_seed(seeds);
  std::vector<std::string> failures(seeds);
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, seeds));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < seeds; i = next++) {
      try {
        log::info("seed " + std::to_string(i) + " started");
        per_seed[i] = seed_rows(s, i, out);
      } catch (const std::exception& e) {
        failures[i] = "seed " + std::to_string(i) + ": " + e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& f : failures)
    if (!f.empty()) throw Error(f);

  std::vector<ResultRow> rows;
  for (auto& r : per_seed) rows.insert(rows.end(), r.begin(), r.end());
  std::ofstream csv(out / "results.csv");
  write_results_csv(csv, rows);
  return rows;
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "preset,variable,value,seed,metric,metric_value\n";
  for (const auto& r : rows) {
    for (const std::string* cell : {&r.preset, &r.variable, &r.value, &r.metric}) {
      if (cell->find_first_of(",\"\n") != std::string::npos) {
        throw ValidationError("results.csv cells may not contain commas or quotes: '" + *cell + "'");
      }
    }
    out << r.preset << "," << r.variable << "," << r.value << "," << r.seed << "," << r.metric << ","
        << format_double(r.metric_value) << "\n";
  }
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError("results.csv line " + std::to_string(lineno) + ": " + why, lineno);
  };
  if (!std::getline(in, line)) {
    lineno = 1;
    fail("missing header");
  }
  ++lineno;
  if (trim(line) != "preset,variable,value,seed,metric,metric_value") fail("unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cells.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() != 6) fail("expected 6 fields, found " + std::to_string(cells.size()));
    ResultRow r{cells[0], cells[1], cells[2], 0, cells[4], 0.0};
    auto [ptr, ec] = std::from_chars(cells[3].data(), cells[3].data() + cells[3].size(), r.seed);
    if (ec != std::errc() || ptr != cells[3].data() + cells[3].size() || cells[3].empty()) fail("bad seed '" + cells[3] + "'");
    if (!parse_double(cells[5], r.metric_value)) fail("bad metric_value '" + cells[5] + "'");
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y, bool* degenerate) {
  if (x.size() != y.size()) throw ValidationError("spearman: length mismatch");
  if (degenerate) *degenerate = false;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (x.size() < 2 || sxx == 0.0 || syy == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<Trend> summarize(const std::vector<ResultRow>& rows) {
  // (preset, variable, metric) -> value -> finite metric values, in first-seen order.
  struct Group {
    Trend trend;
    std::vector<std::string> values;
    std::map<std::string, std::vector<double>> samples;
  };
  std::vector<Group> groups;
  for (const auto& r : rows) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return g.trend.preset == r.preset && g.trend.variable == r.variable && g.trend.metric == r.metric;
    });
    if (it == groups.end()) {
      groups.push_back({{r.preset, r.variable, r.metric}, {}, {}});
      it = groups.end() - 1;
    }
    if (!it->samples.count(r.value)) it->values.push_back(r.value);
    auto& bucket = it->samples[r.value];
    if (std::isfinite(r.metric_value)) bucket.push_back(r.metric_value);
  }
  std::vector<Trend> out;
  for (auto& g : groups) {
    std::vector<double> x, y;
    for (const auto& v : g.values) {
      const auto& bucket = g.samples[v];
      if (bucket.empty()) continue;
      double xv;
      if (!parse_double(v, xv)) g.trend.numeric = false;
      x.push_back(xv);
      y.push_back(median(bucket));
    }
    g.trend.points = y.size();
    if (g.trend.numeric) {
      g.trend.rho = spearman(x, y, &g.trend.degenerate);
    } else {
      g.trend.degenerate = true;
    }
    out.push_back(g.trend);
  }
  return out;
}

void write_trends(std::ostream& out, const std::vector<Trend>& trends) {
  out << "preset,variable,metric,points,spearman,direction,degenerate\n";
  for (const auto& t : trends) {
    const char* dir = !t.numeric ? "n/a" : t.degenerate ? "flat" : t.rho > 0 ? "increasing" : t.rho < 0 ? "decreasing" : "flat";
    out << t.preset << "," << t.variable << "," << t.metric << "," << t.points << ","
        << (t.numeric ? format_double(t.rho) : "") << "," << dir << "," << (t.degenerate ? "true" : "false") << "\n";
  }
}

std::string bounds_json(const BoundInputs& in) {
  json j;
  j["p"] = in.p;
  j["B"] = in.batch;
  j["d_star"] = in.d_star;
  j["delta"] = in.delta;
  j["single_bound_bits"] = single_round_bound(in);
  j["multi_bound_bits"] = multi_round_bound(in);
  return j.dump();
}

ModelSpec infer_mlp(const std::vector<LayerSlot>& layout, std::size_t input_dim) {
  if (layout.empty()) throw FormatError("checkpoint has no layers", 0);
  std::vector<std::size_t> widths;
  std::size_t in = input_dim;
  for (const auto& slot : layout) {
    // count = in * out + out
    if (slot.count % (in + 1) != 0) {
      throw DimensionError("checkpoint layer " + std::to_string(slot.id) + " does not fit input width " +
                           std::to_string(in));
    }
    in = static_cast<std::size_t>(slot.count / (in + 1));
    widths.push_back(in);
  }
  const std::size_t classes = widths.back();
  widths.pop_back();
  auto spec = ModelSpec::mlp(input_dim, widths, classes);
  if (spec.layout() != layout) throw DimensionError("checkpoint layout is not a dense MLP");
  return spec;
}

}  // namespace privlab
