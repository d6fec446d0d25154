// backx: poison, train, attribute, evaluate, report, all.
#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "backx/harness.hpp"

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// --methods keeps configured entries whose label or method name is listed;
// names not in the config are added with their preset.
void select_methods(backx::ExperimentConfig& c, const std::string& list) {
  std::vector<nlohmann::json> kept;
  for (const auto& name : split(list)) {
    bool found = false;
    for (const auto& j : c.methods) {
      const auto cfg = backx::config_from_json(j, 0, 0);
      if (j.value("label", backx::config_label(cfg)) == name || j.at("method") == name) {
        kept.push_back(j);
        found = true;
      }
    }
    if (!found) {
      backx::method_from_string(name);
      kept.push_back({{"method", name}});
    }
  }
  c.methods = kept;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor-based attribution benchmark"};
  app.require_subcommand(1);
  std::string config_path, out, methods, k_grid;
  std::uint64_t seed = 0;
  bool resume = false;
  std::vector<std::string> extra;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--methods", methods, "comma-separated method list");
    sub->add_option("--k-grid", k_grid, "comma-separated recovery rates");
  };
  auto* poison = app.add_subcommand("poison", "build the poisoned training set");
  auto* train = app.add_subcommand("train", "train trojan and benign twin, apply the gate");
  auto* attribute = app.add_subcommand("attribute", "compute attribution maps");
  auto* evaluate = app.add_subcommand("evaluate", "sweep recovery rates and write metric reports");
  auto* report = app.add_subcommand("report", "plots and summary from metric reports");
  auto* all = app.add_subcommand("all", "run every stage");
  for (auto* s : {poison, train, attribute, evaluate, report, all}) add_common(s);
  all->add_flag("--resume", resume, "reuse cached stages from a previous run");
  report->add_option("extra", extra, "additional report directories");

  CLI11_PARSE(app, argc, argv);

  try {
    backx::ExperimentConfig c =
        config_path.empty() ? backx::experiment_from_json(nlohmann::json::object()) : backx::load_experiment(config_path);
    if (!out.empty()) c.out = out;
    for (auto* s : {poison, train, attribute, evaluate, report, all})
      if (s->parsed() && s->count("--seed")) c.seed = seed;
    if (!methods.empty()) select_methods(c, methods);
    if (!k_grid.empty()) {
      c.k_grid.clear();
      for (const auto& k : split(k_grid)) c.k_grid.push_back(std::stod(k));
      std::sort(c.k_grid.begin(), c.k_grid.end());
    }

    if (poison->parsed()) {
      backx::Pipeline p(c);
      const auto& d = p.poison();
      std::cout << d.poisoned_indices.size() << " poisoned -> " << p.poison_dir().string() << '\n';
    } else if (train->parsed()) {
      backx::Pipeline p(c);
      const auto& r = p.train();
      std::cout << "clean " << r.card.clean_accuracy << " poisoned " << r.card.poisoned_accuracy << " twin "
                << r.card.benign_twin_accuracy << " -> " << r.dir.string() << '\n';
    } else if (attribute->parsed()) {
      backx::Pipeline p(c);
      const auto& r = p.attribute();
      std::cout << r.methods.size() << " methods x " << r.pairs.size() << " pairs -> " << r.dir.string() << '\n';
    } else if (evaluate->parsed()) {
      backx::Pipeline p(c);
      auto reports = p.evaluate();
      std::cout << reports.size() << " reports -> " << p.reports_dir().string() << '\n';
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(extra.begin(), extra.end());
      auto r = backx::cmd_report(c, dirs);
      std::cout << r.files.size() << " files -> " << c.out << '\n';
    } else if (all->parsed()) {
      auto reports = backx::cmd_all(c, resume);
      std::cout << reports.size() << " reports -> " << c.out << '\n';
    }
  } catch (const backx::GateError& e) {
    std::cerr << "gate failure: " << e.what() << '\n';
    return 2;
  } catch (const backx::IngestionError& e) {
    std::cerr << "ingestion error: " << e.what() << '\n';
    return 3;
  } catch (const backx::EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
