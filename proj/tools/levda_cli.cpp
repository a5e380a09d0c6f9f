#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "levda/archive.hpp"
#include "levda/errors.hpp"
#include "levda/harness.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> seed_overrides;
  std::vector<std::string> sets;
  bool verbose = false;
};

void add_common(CLI::App* app, Common& c, bool needs_config = true) {
  auto* opt = app->add_option("--config", c.config, "experiment config (JSON)");
  if (needs_config) opt->required()->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory (default: config output)");
  app->add_option("--seed-override", c.seed_overrides,
                  "N sets every stage seed; stage=N (data, training, assimilation) sets one");
  app->add_option("--set", c.sets, "config override key.path=value");
  app->add_flag("-v,--verbose", c.verbose, "progress output");
}

levda::ExperimentConfig resolve(const Common& c) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(levda::read_text(c.config));
  } catch (const nlohmann::json::parse_error& e) {
    throw levda::ValidationError(c.config + ": " + e.what());
  }
  for (const auto& s : c.sets) levda::apply_override(j, s);
  for (const auto& s : c.seed_overrides) {
    const auto eq = s.find('=');
    auto parse = [&](const std::string& v) {
      try {
        std::size_t pos = 0;
        const auto n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
      } catch (const std::exception&) {
        throw levda::ValidationError("--seed-override: '" + s + "' is not a seed");
      }
    };
    if (eq == std::string::npos) {
      const auto n = parse(s);
      j["seeds"]["data"] = n;
      j["seeds"]["training"] = n;
      j["seeds"]["assimilation"] = n;
    } else {
      const std::string stage = s.substr(0, eq);
      if (stage != "data" && stage != "training" && stage != "assimilation") {
        throw levda::ValidationError("--seed-override: unknown stage '" + stage + "'");
      }
      j["seeds"][stage] = parse(s.substr(eq + 1));
    }
  }
  try {
    return levda::config_from_json(j);
  } catch (const levda::ValidationError& e) {
    throw levda::ValidationError(c.config + ": " + e.what());
  }
}

levda::StageOptions stage_options(const Common& c) {
  levda::StageOptions o;
  o.out = c.out;
  o.quiet = !c.verbose;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent ensemble variational data assimilation twin experiments"};
  app.set_version_flag("--version", levda::tool_version());
  app.require_subcommand(1);

  Common gen_c, train_c, assim_c, eval_c;
  std::string method, label;
  std::vector<std::string> eval_methods;
  std::vector<std::string> csvs;
  std::string group_by, report_out;

  auto* gen = app.add_subcommand("generate", "simulate the truth and sample observations");
  add_common(gen, gen_c);
  auto* trn = app.add_subcommand("train", "train the latent surrogate");
  add_common(trn, train_c);
  auto* asm_ = app.add_subcommand("assimilate", "run one assimilation method");
  add_common(asm_, assim_c);
  asm_->add_option("--method", method, "levda, etkf, 4denvar-full or free-run (default: config)");
  asm_->add_option("--label", label, "run label, e.g. levda[tau=0] (default: method)");
  auto* evl = app.add_subcommand("evaluate", "compute metrics for assimilated runs");
  add_common(evl, eval_c);
  evl->add_option("--method", eval_methods, "run labels to evaluate (default: all)")->delimiter(',');
  auto* rep = app.add_subcommand("report", "tabulate metrics CSVs");
  rep->add_option("csv", csvs, "metrics CSV files")->required()->check(CLI::ExistingFile);
  rep->add_option("--group-by", group_by, "label key to tabulate (tau, K, stride, noise)");
  rep->add_option("--out", report_out, "write the table to a file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*gen) {
      levda::stage_generate(resolve(gen_c), stage_options(gen_c));
    } else if (*trn) {
      levda::stage_train(resolve(train_c), stage_options(train_c));
    } else if (*asm_) {
      const auto cfg = resolve(assim_c);
      auto o = stage_options(assim_c);
      o.label = label;
      levda::stage_assimilate(cfg, levda::method_from_string(method.empty() ? cfg.assimilation.method : method), o);
    } else if (*evl) {
      auto o = stage_options(eval_c);
      o.methods = eval_methods;
      levda::stage_evaluate(resolve(eval_c), o);
    } else if (*rep) {
      std::vector<std::filesystem::path> paths(csvs.begin(), csvs.end());
      const std::string table = levda::report(paths, group_by);
      if (report_out.empty()) {
        std::cout << table;
      } else {
        levda::write_text(report_out, table);
      }
    }
  } catch (const levda::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const levda::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return EXIT_SUCCESS;
}
