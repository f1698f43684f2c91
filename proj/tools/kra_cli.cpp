// kra-cli: dataset generation, detector training, key region attacks and the
// transfer matrix, driven through the C library.
//
// Settings resolve as built-in defaults < config file (--config) < KRA_<KEY>
// environment variables < command-line flags. Every setting has a flag
// --some-key and a config/env key some_key / KRA_SOME_KEY. Unknown keys in the
// config file or unknown KRA_* variables are usage errors.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include "kra/kra.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Bad configuration detected by the tool itself.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A failed library call.
struct LibraryError : std::runtime_error {
  LibraryError(kra_status s, const std::string& what) : std::runtime_error(what), status(s) {}
  kra_status status;
};

void check(kra_status s) {
  if (s != KRA_OK) throw LibraryError(s, kra_last_error());
}

enum Command : unsigned {
  kGenData = 1,
  kTrain = 2,
  kAttack = 4,
  kMatrix = 8,
  kGradcheck = 16,
};

struct Key {
  const char* name;
  const char* fallback;
  unsigned commands;
  bool flag;  // boolean switch on the command line
  const char* help;
};

// clang-format off
const Key kKeys[] = {
    {"data", "data", kGenData | kTrain | kAttack | kMatrix, false, "dataset directory"},
    {"data_seed", "1234", kGenData, false, "dataset seed"},
    {"train", "100", kGenData, false, "training images per class"},
    {"val", "20", kGenData, false, "validation images per class"},
    {"test", "20", kGenData, false, "test images per class"},
    {"arch", "A", kTrain | kGradcheck, false, "detector architecture (gradcheck: comma list, empty = all)"},
    {"weights", "weights/A.kraw", kTrain | kAttack | kMatrix, false, "weights file (matrix: comma list)"},
    {"history", "", kTrain, false, "training history CSV (default <weights>.history.csv)"},
    {"init_seed", "1", kTrain, false, "weight initialization seed"},
    {"train_seed", "7", kTrain, false, "minibatch shuffling seed"},
    {"epochs", "20", kTrain, false, "training epochs"},
    {"batch_size", "16", kTrain, false, "minibatch size"},
    {"lr", "0.02", kTrain, false, "SGD learning rate"},
    {"momentum", "0.9", kTrain, false, "SGD momentum"},
    {"clip_norm", "1.0", kTrain, false, "gradient norm clip, 0 disables"},
    {"split", "test", kAttack | kMatrix, false, "split to attack"},
    {"out", "out", kAttack | kMatrix, false, "output directory"},
    {"inner", "pgd", kAttack, false, "inner attack: fgsm, pgd or deepfool"},
    {"unmasked", "false", kAttack, true, "run the inner attack once over the whole image"},
    {"attacks", "kra-pgd", kMatrix, false, "comma list of attack ids, e.g. kra-pgd,pgd"},
    {"names", "", kMatrix, false, "comma list of detector names (default: architecture ids)"},
    {"t_alpha", "0.8", kAttack | kMatrix, false, "initial saliency threshold"},
    {"t_prime", "0.1", kAttack | kMatrix, false, "threshold floor"},
    {"beta", "0.1", kAttack | kMatrix, false, "threshold decrement"},
    {"u_max", "100", kAttack | kMatrix, false, "iteration cap"},
    {"recompute_mask", "false", kAttack | kMatrix, true, "recompute the key region on x + r each iteration"},
    {"layers", "", kAttack | kMatrix, false, "comma list of conv taps (empty = all)"},
    {"saliency_objective", "logit", kAttack | kMatrix, false, "logit, probability or loss"},
    {"saliency_absolute", "false", kAttack | kMatrix, true, "sum |gradient| over channels"},
    {"upsampling", "bilinear", kAttack | kMatrix, false, "bilinear or nearest"},
    {"fgsm_epsilon", "0.03", kAttack | kMatrix, false, "FGSM step"},
    {"pgd_epsilon", "0.03", kAttack | kMatrix, false, "PGD L-inf radius"},
    {"pgd_step", "0.007", kAttack | kMatrix, false, "PGD step size"},
    {"pgd_steps", "10", kAttack | kMatrix, false, "PGD steps"},
    {"deepfool_overshoot", "0.02", kAttack | kMatrix, false, "DeepFool overshoot"},
    {"deepfool_max_steps", "50", kAttack | kMatrix, false, "DeepFool iteration cap"},
    {"jobs", "1", kAttack | kMatrix, false, "worker threads"},
    {"seed", "1", kGradcheck, false, "gradcheck seed"},
    {"probes", "64", kGradcheck, false, "parameter probes per architecture"},
    {"step", "1e-5", kGradcheck, false, "finite difference step"},
    {"tolerance", "1e-4", kGradcheck, false, "max relative error"},
    {"timing", "false", kGenData | kTrain | kAttack | kMatrix | kGradcheck, true,
     "report wall-clock times and write them into outputs"},
};
// clang-format on

const Key* find_key(const std::string& name) {
  for (const Key& k : kKeys) {
    if (name == k.name) return &k;
  }
  return nullptr;
}

std::string dashed(std::string s) {
  for (char& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

std::string env_name(const std::string& key) {
  std::string s = "KRA_";
  for (char c : key) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// key=value lines; '#' starts a comment line.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!find_key(key)) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

class Settings {
 public:
  Settings(Command command, const std::map<std::string, std::string>& values)
      : command_(command), values_(values) {}

  const std::string& str(const std::string& key) const { return values_.at(key); }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || !std::isfinite(d)) {
      throw UsageError(key + " must be a number, got '" + v + "'");
    }
    return d;
  }

  std::uint64_t count(const std::string& key) const {
    const std::string& v = str(key);
    char* end = nullptr;
    const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || *end != '\0' || v[0] == '-') {
      throw UsageError(key + " must be a non-negative integer, got '" + v + "'");
    }
    return n;
  }

  bool boolean(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError(key + " must be true or false, got '" + v + "'");
  }

  // Settings that apply to the command, in table order.
  std::string text(const char* command_name) const {
    std::string out = std::string("command=") + command_name + "\n";
    for (const Key& k : kKeys) {
      if (k.commands & command_) out += std::string(k.name) + "=" + str(k.name) + "\n";
    }
    return out;
  }

 private:
  Command command_;
  std::map<std::string, std::string> values_;
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void require_choice(const std::string& key, const std::string& value,
                    std::initializer_list<const char*> choices) {
  for (const char* c : choices) {
    if (value == c) return;
  }
  std::string list;
  for (const char* c : choices) list += (list.empty() ? "" : ", ") + std::string(c);
  throw UsageError(key + " must be one of " + list + ", got '" + value + "'");
}

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

class Timer {
 public:
  explicit Timer(bool enabled) : enabled_(enabled) {}
  ~Timer() {
    if (!enabled_) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::fprintf(stderr, "elapsed %.3f s\n", s);
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

int gen_data(const Settings& s) {
  kra_dataset_options o;
  kra_dataset_options_init(&o);
  o.seed = s.count("data_seed");
  o.train = s.count("train");
  o.val = s.count("val");
  o.test = s.count("test");
  check(kra_dataset_build(&o, s.str("data").c_str()));
  std::printf("dataset %s: seed %llu, %zu/%zu/%zu images per class (train/val/test), %zu files\n",
              s.str("data").c_str(), static_cast<unsigned long long>(o.seed), o.train, o.val,
              o.test, 2 * (o.train + o.val + o.test));
  return kExitOk;
}

struct DetectorHandle {
  kra_detector* ptr = nullptr;
  DetectorHandle() = default;
  DetectorHandle(const DetectorHandle&) = delete;
  DetectorHandle& operator=(const DetectorHandle&) = delete;
  DetectorHandle(DetectorHandle&& o) noexcept : ptr(o.ptr) { o.ptr = nullptr; }
  ~DetectorHandle() { kra_detector_destroy(ptr); }
};

int train(const Settings& s) {
  kra_train_options o;
  kra_train_options_init(&o);
  o.epochs = s.count("epochs");
  o.batch_size = s.count("batch_size");
  o.learning_rate = s.real("lr");
  o.momentum = s.real("momentum");
  o.clip_norm = s.real("clip_norm");
  o.seed = s.count("train_seed");

  const std::string weights = s.str("weights");
  const std::string history =
      s.str("history").empty() ? weights + ".history.csv" : s.str("history");
  DetectorHandle d;
  check(kra_detector_create(s.str("arch").c_str(), s.count("init_seed"), &d.ptr));
  double val_acc = 0.0;
  check(kra_detector_train(d.ptr, s.str("data").c_str(), &o, history.c_str(), &val_acc));
  check(kra_detector_save(d.ptr, weights.c_str()));
  {
    std::ofstream cfg(weights + ".config.txt", std::ios::binary);
    cfg << s.text("train");
    if (!cfg) throw LibraryError(KRA_ERR_IO, "cannot write " + weights + ".config.txt");
  }
  double train_acc = 0.0;
  check(kra_detector_accuracy(d.ptr, s.str("data").c_str(), "train", &train_acc));
  std::printf("detector %s: train_acc=%.4f val_acc=%.4f weights=%s history=%s\n",
              s.str("arch").c_str(), train_acc, val_acc, weights.c_str(), history.c_str());
  return kExitOk;
}

// Options shared by attack and matrix. String fields point into `s`.
kra_attack_options attack_options(const Settings& s) {
  kra_attack_options o;
  kra_attack_options_init(&o);
  o.t_alpha = s.real("t_alpha");
  o.t_prime = s.real("t_prime");
  o.beta = s.real("beta");
  o.u_max = s.count("u_max");
  o.recompute_mask = s.boolean("recompute_mask");
  o.layers = s.str("layers").c_str();
  require_choice("saliency_objective", s.str("saliency_objective"),
                 {"logit", "probability", "loss"});
  o.saliency_objective = s.str("saliency_objective").c_str();
  o.saliency_absolute = s.boolean("saliency_absolute");
  require_choice("upsampling", s.str("upsampling"), {"bilinear", "nearest"});
  o.upsampling = s.str("upsampling").c_str();
  o.fgsm_epsilon = s.real("fgsm_epsilon");
  o.pgd_epsilon = s.real("pgd_epsilon");
  o.pgd_step = s.real("pgd_step");
  o.pgd_steps = s.count("pgd_steps");
  o.deepfool_overshoot = s.real("deepfool_overshoot");
  o.deepfool_max_steps = s.count("deepfool_max_steps");
  o.jobs = s.count("jobs");
  if (o.jobs == 0) throw UsageError("jobs must be >= 1");
  o.timing = s.boolean("timing");
  return o;
}

int attack(const Settings& s) {
  kra_attack_options o = attack_options(s);
  require_choice("inner", s.str("inner"), {"fgsm", "pgd", "deepfool"});
  const bool masked = !s.boolean("unmasked");
  const std::string method = (masked ? "kra-" : "") + s.str("inner");
  o.method = method.c_str();

  DetectorHandle d;
  check(kra_detector_load(s.str("weights").c_str(), nullptr, &d.ptr));
  kra_attack_summary sum;
  const std::string config = s.text("attack");
  check(kra_attack_split(d.ptr, s.str("data").c_str(), s.str("split").c_str(), &o,
                         s.str("out").c_str(), config.c_str(), &sum));
  if (masked && sum.p_l0 == 0.0) {
    std::fprintf(stderr,
                 "warning: every key region was empty, no pixel was perturbed "
                 "(t_alpha=%g, t_prime=%g)\n",
                 o.t_alpha, o.t_prime);
  }
  if (sum.errors > 0) std::fprintf(stderr, "warning: %zu images failed, see outcomes.jsonl\n", sum.errors);
  const double asr = std::clamp(sum.asr, 0.0, 1.0);
  std::printf("attack=%s detector=%s images=%zu acc_clean=%.4f acc_attack=%.4f asr=%.4f p_l0=%.6f p_l2=%s%s\n",
              method.c_str(), kra_detector_architecture(d.ptr), sum.images, sum.acc_clean,
              sum.acc_attack, asr, sum.p_l0, fmt("%.6g", sum.p_l2).c_str(),
              o.timing ? (" mean_seconds=" + fmt("%.4g", sum.mean_seconds)).c_str() : "");
  return kExitOk;
}

int matrix(const Settings& s) {
  kra_attack_options o = attack_options(s);
  const auto paths = split_list(s.str("weights"));
  if (paths.empty()) throw UsageError("matrix needs at least one weights file");
  auto names = split_list(s.str("names"));
  if (!names.empty() && names.size() != paths.size()) {
    throw UsageError("names must list one name per weights file");
  }
  const auto methods = split_list(s.str("attacks"));
  if (methods.empty()) throw UsageError("attacks must list at least one attack id");
  for (const auto& m : methods) {
    require_choice("attacks", m,
                   {"kra-fgsm", "kra-pgd", "kra-deepfool", "fgsm", "pgd", "deepfool"});
  }

  std::vector<DetectorHandle> handles;
  for (const auto& p : paths) {
    DetectorHandle d;
    check(kra_detector_load(p.c_str(), nullptr, &d.ptr));
    handles.push_back(std::move(d));
  }
  if (names.empty()) {
    std::map<std::string, int> seen;
    for (const auto& h : handles) {
      std::string n = kra_detector_architecture(h.ptr);
      const int k = ++seen[n];
      if (k > 1) n += "#" + std::to_string(k);
      names.push_back(n);
    }
  }
  std::vector<const kra_detector*> dets;
  std::vector<const char*> name_ptrs, method_ptrs;
  for (std::size_t i = 0; i < handles.size(); ++i) {
    dets.push_back(handles[i].ptr);
    name_ptrs.push_back(names[i].c_str());
  }
  for (const auto& m : methods) method_ptrs.push_back(m.c_str());

  const std::string config = s.text("matrix");
  check(kra_matrix_run(dets.data(), name_ptrs.data(), dets.size(), method_ptrs.data(),
                       method_ptrs.size(), s.str("data").c_str(), s.str("split").c_str(), &o,
                       s.str("out").c_str(), config.c_str()));
  std::ifstream csv(s.str("out") + "/report.csv");
  std::printf("%s", std::string(std::istreambuf_iterator<char>(csv), {}).c_str());
  return kExitOk;
}

int gradcheck(const Settings& s) {
  std::vector<std::string> archs = split_list(s.str("arch"));
  if (archs.empty()) {
    std::stringstream ids(kra_architectures());
    for (std::string id; ids >> id;) archs.push_back(id);
  }
  const double tolerance = s.real("tolerance");
  bool ok = true;
  for (const auto& a : archs) {
    kra_gradcheck_result r;
    check(kra_gradcheck(a.c_str(), s.count("seed"), s.count("probes"), s.real("step"), &r));
    const bool pass = r.max_relative_error < tolerance;
    ok = ok && pass;
    std::printf("gradcheck %s: parameters=%zu probes=%zu kinks_skipped=%zu max_rel_error=%.3e %s\n",
                a.c_str(), r.parameters, r.probes, r.kinks_skipped, r.max_relative_error,
                pass ? "ok" : "FAIL");
  }
  if (!ok) {
    std::fprintf(stderr, "error: gradient check exceeded tolerance %g\n", tolerance);
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Key region attacks on synthetic deepfake detectors"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "flat key=value config file");

  struct Sub {
    const char* name;
    Command command;
    int (*run)(const Settings&);
    const char* help;
  };
  const Sub subs[] = {
      {"gen-data", kGenData, gen_data, "generate the synthetic real/fake dataset"},
      {"train", kTrain, train, "train one detector"},
      {"attack", kAttack, attack, "attack every image of a split"},
      {"matrix", kMatrix, matrix, "white-box and transfer report over several detectors"},
      {"gradcheck", kGradcheck, gradcheck, "check detector gradients against finite differences"},
  };

  std::map<std::string, std::string> flag_values;
  std::map<std::string, bool> switches;
  std::vector<CLI::App*> apps;
  for (const Sub& sub : subs) {
    CLI::App* c = app.add_subcommand(sub.name, sub.help);
    c->fallthrough();
    for (const Key& k : kKeys) {
      if (!(k.commands & sub.command)) continue;
      const std::string flag = "--" + dashed(k.name);
      if (k.flag) {
        c->add_flag(flag, switches[k.name], k.help);
      } else {
        c->add_option(flag, flag_values[k.name], k.help);
      }
    }
    apps.push_back(c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  std::size_t which = 0;
  while (!apps[which]->parsed()) ++which;
  const Sub& sub = subs[which];

  try {
    std::map<std::string, std::string> values;
    for (const Key& k : kKeys) values[k.name] = k.fallback;
    if (!config_path.empty()) {
      for (const auto& [k, v] : read_config_file(config_path)) values[k] = v;
    }
    for (char** e = environ; *e; ++e) {
      const std::string entry = *e;
      if (entry.rfind("KRA_", 0) != 0) continue;
      const std::string name = entry.substr(0, entry.find('='));
      const bool known = std::any_of(std::begin(kKeys), std::end(kKeys),
                                     [&](const Key& k) { return env_name(k.name) == name; });
      if (!known) throw UsageError("unknown environment setting " + name);
    }
    for (const Key& k : kKeys) {
      if (const char* env = std::getenv(env_name(k.name).c_str())) values[k.name] = env;
    }
    for (const Key& k : kKeys) {
      if (!(k.commands & sub.command)) continue;
      const std::string flag = "--" + dashed(k.name);
      if (apps[which]->count(flag) == 0) continue;
      values[k.name] = k.flag ? "true" : flag_values[k.name];
    }

    const Settings settings(sub.command, values);
    std::printf("# resolved config\n%s", settings.text(sub.name).c_str());
    std::fflush(stdout);
    const Timer timer(settings.boolean("timing"));
    return sub.run(settings);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\nRun '%s %s --help' for the list of settings.\n",
                 e.what(), argv[0], sub.name);
    return kExitUsage;
  } catch (const LibraryError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    const bool usage = e.status == KRA_ERR_INVALID_ARGUMENT ||
                       e.status == KRA_ERR_UNKNOWN_ARCHITECTURE ||
                       e.status == KRA_ERR_UNKNOWN_TAP;
    return usage ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
