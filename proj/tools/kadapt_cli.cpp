// SPDX-License-Identifier: Apache-2.0
//
// kadapt: train, bench, measure-id, count, merge and print-config.
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "kadapt/config.hpp"

using namespace kadapt;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  std::cerr << "wrote " << path.string() << '\n';
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path prepare_out_dir(const Settings& s) {
  const fs::path dir(s.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.ini", dump_config(s));
  return dir;
}

std::size_t class_count(const Settings& s) {
  if (s.data.source == "synthetic") return s.data.synth.classes;
  return load_data(s).train.classes;
}

void write_suite(const fs::path& dir, const Settings& s, const SuiteResult& r) {
  if (s.format == "json") {
    write_json(dir / "results.json", r.to_json(false));
    write_json(dir / "timing.json", r.to_json(true));
  } else {
    write_text(dir / "results.csv", r.results_csv());
    write_text(dir / "runs.csv", r.runs_csv());
    write_text(dir / "timing.csv", r.timing_csv());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_suite_command(Settings& s, bool single) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = prepare_out_dir(s);
  const Splits splits = load_data(s);
  std::cerr << "data: " << splits.train.size() << " train, " << splits.val.size() << " val, " << splits.test.size()
            << " test, " << splits.train.classes << " classes\n";
  const ViTModel base = load_base(s, splits.train.classes);
  std::cerr << "base ready after " << seconds_since(t0) << " s\n";
  SuiteConfig cfg = s.suite;
  if (single) {
    cfg.strategies = {s.strategy};
    cfg.keep_models = true;
  }
  const SuiteResult result = run_suite(base, {{s.data.name, splits}}, cfg);
  write_suite(dir, s, result);
  if (single) {
    const SeedRun& first = result.reports.front().seeds.front();
    if (first.model) {
      Checkpoint ckpt = first.model->to_checkpoint();
      ckpt.meta["seed"] = first.seed;
      write_checkpoint(dir / "adapted.ckpt", ckpt);
      std::cerr << "wrote " << (dir / "adapted.ckpt").string() << '\n';
    }
  }
  bool any_failed = false;
  for (const auto& r : result.reports) {
    std::cerr << r.strategy << ": mean accuracy " << (r.failed ? "FAILED" : std::to_string(r.mean_accuracy))
              << ", params " << r.params.total() << '\n';
    any_failed = any_failed || r.failed;
  }
  std::cerr << "done in " << seconds_since(t0) << " s\n";
  return any_failed ? 2 : 0;
}

int measure_id_command(Settings& s) {
  const fs::path dir = prepare_out_dir(s);
  const Splits splits = load_data(s);
  const ViTModel base = load_base(s, splits.train.classes);
  const LocalIDReport report = measure_local_id(base, splits, s.id);
  write_json(dir / "local_id.json", report.to_json());
  if (s.format == "csv") {
    std::ostringstream os;
    os << "target,d,accuracy,full_accuracy,threshold,d_t\n";
    auto rows = [&](const IDMeasurement& m) {
      for (const auto& [d, acc] : m.results) {
        os << m.target << ',' << d << ',' << acc << ',' << m.full_accuracy << ',' << m.threshold << ','
           << (m.d_t ? std::to_string(*m.d_t) : "") << '\n';
      }
    };
    for (const auto& m : report.layers) rows(m);
    rows(report.mean_curve);
    write_text(dir / "local_id.csv", os.str());
  }
  for (const auto& m : report.layers)
    std::cerr << m.target << ": d_t = " << (m.d_t ? std::to_string(*m.d_t) : "none") << '\n';
  std::cerr << "mean curve: d_t = " << (report.mean_curve.d_t ? std::to_string(*report.mean_curve.d_t) : "none")
            << '\n';
  return 0;
}

int count_command(Settings& s, const std::string& formula, const std::string& inputs) {
  if (!formula.empty()) {
    CountInputs in;
    std::map<std::string, std::uint64_t*> fields{{"L", &in.L}, {"k", &in.k}, {"d", &in.d},
                                                 {"d_model", &in.d_model}, {"r", &in.r}, {"n", &in.n}};
    std::stringstream ss(inputs);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos || !fields.count(item.substr(0, eq)))
        throw std::invalid_argument("bad formula input '" + item + "'");
      *fields[item.substr(0, eq)] = parse_sizes(item.substr(eq + 1)).at(0);
    }
    std::cout << formula_count(count_method_from_string(formula), in) << '\n';
    return 0;
  }
  ViTConfig cfg = s.model;
  cfg.num_classes = class_count(s);
  const ViTModel base(cfg, s.pretrain.seed);
  std::ostringstream csv;
  csv << "strategy,params_head,params_non_head,params_total,formula,enumerated_no_bias,gap\n";
  nlohmann::json j = nlohmann::json::array();
  for (const auto& strategy : s.suite.strategies) {
    const AdaptedModel adapted(base, strategy, 0);
    const CountBreakdown c = enumerate_count(adapted);
    csv << strategy.name() << ',' << c.head << ',' << c.non_head << ',' << c.total();
    nlohmann::json row = {{"strategy", strategy.name()},
                          {"spec", strategy_spec(strategy)},
                          {"params_head", c.head},
                          {"params_non_head", c.non_head},
                          {"params_total", c.total()}};
    if (has_formula(strategy.kind)) {
      const Reconciliation r = reconcile(adapted);
      csv << ',' << r.formula << ',' << r.enumerated_no_bias << ',' << r.gap;
      row["reconcile"] = r.to_json();
    } else {
      csv << ",,,";
    }
    csv << '\n';
    j.push_back(row);
  }
  const fs::path dir = prepare_out_dir(s);
  if (s.format == "json") {
    write_json(dir / "counts.json", j);
  } else {
    write_text(dir / "counts.csv", csv.str());
  }
  std::cout << csv.str();
  return 0;
}

int merge_command(const std::string& input, const std::string& output) {
  const AdaptedModel adapted = AdaptedModel::from_checkpoint(read_checkpoint(input));
  const ViTModel merged = adapted.merge();
  save_model(output, merged, {{"merged_from", adapted.strategy().name()}});
  std::cerr << "wrote " << output << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient ViT adaptation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir, format;
  app.add_option("--config", config_path, "INI settings file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "base model seed (same as --pretrain.seed)");
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json"}));

  std::map<std::string, std::string> overrides;
  std::vector<std::pair<std::string, CLI::Option*>> key_options;
  for (const auto& key : config_keys()) {
    auto* opt = app.add_option_function<std::string>(
        "--" + key.name, [&overrides, name = key.name](const std::string& v) { overrides[name] = v; }, key.help);
    opt->group("Settings");
    key_options.emplace_back(key.name, opt);
  }

  auto* train = app.add_subcommand("train", "train one strategy on one dataset, all seeds");
  auto* bench = app.add_subcommand("bench", "run every configured strategy");
  auto* measure = app.add_subcommand("measure-id", "local intrinsic dimension of one submodule");
  auto* count = app.add_subcommand("count", "trainable parameter counts and formula reconciliation");
  std::string formula, formula_inputs;
  count->add_option("--formula", formula, "evaluate a closed form only: adapter, lora, compacter, kadaptation");
  count->add_option("--inputs", formula_inputs, "formula inputs, e.g. L=12,d_model=768,r=4");
  auto* merge = app.add_subcommand("merge", "fold weight deltas of an adapted checkpoint into a base model");
  std::string merge_in, merge_out;
  merge->add_option("--checkpoint", merge_in, "adapted checkpoint")->required()->check(CLI::ExistingFile);
  merge->add_option("--output", merge_out, "merged model checkpoint")->required();
  auto* print = app.add_subcommand("print-config", "print the effective settings");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*merge) return merge_command(merge_in, merge_out);

    Settings s;
    if (!config_path.empty()) apply_config(s, read_config_file(config_path));
    // Command-line keys in table order so the result does not depend on flag order.
    for (const auto& [name, opt] : key_options) {
      if (overrides.count(name)) apply_config(s, {{name, overrides[name]}});
    }
    if (seed) s.pretrain.seed = *seed;
    if (out_dir) s.out_dir = *out_dir;
    if (format) s.format = *format;

    if (*print) {
      std::cout << dump_config(s);
      return 0;
    }
    if (*train) return run_suite_command(s, true);
    if (*bench) return run_suite_command(s, false);
    if (*measure) return measure_id_command(s);
    if (*count) return count_command(s, formula, formula_inputs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
