// mocomsi: run the two-stage pipeline and the per-patch baseline from one config.
//
//   mocomsi synth          -c run.ini
//   mocomsi train-stage1   -c run.ini
//   mocomsi extract        -c run.ini
//   mocomsi train-head     -c run.ini [--seed S]
//   mocomsi train-baseline -c run.ini [--seed S]
//   mocomsi eval           -c run.ini --method grouped|baseline|both [--balanced]
//   mocomsi compare        -c run.ini [--balanced] | --a r1.json ... --b r1.json ...
//   mocomsi plot           input.tsv ... -o out.svg
//
// Exit codes: 0 ok, 1 user error (bad config, missing artifact), 2 internal fault.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mocomsi/pipeline/workflow.hpp"

namespace {

using namespace mocomsi;

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool seeds = true) {
  cmd->add_option("-c,--config", f.config, "INI config file (defaults apply when omitted)");
  cmd->add_option("--set", f.sets, "override a config key, e.g. --set grouping.group_size=2")->take_all();
  cmd->add_option("-o,--output-dir", f.output_dir, "artifact root (overrides MOCOMSI_OUTPUT_ROOT and the config)");
  if (seeds) cmd->add_option("--seed", f.seeds, "run seed(s); replaces run.seeds")->take_all();
}

RunConfig resolve(const CommonFlags& f, bool seed_is_dataset_seed = false) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!f.seeds.empty()) {
    if (seed_is_dataset_seed) {
      if (f.seeds.size() != 1) throw ConfigError("synth takes a single --seed");
      overrides.emplace_back("dataset.seed", std::to_string(f.seeds.front()));
    } else {
      std::string list;
      for (auto s : f.seeds) list += (list.empty() ? "" : ",") + std::to_string(s);
      overrides.emplace_back("run.seeds", list);
    }
  }
  if (!f.output_dir.empty()) overrides.emplace_back("run.output_dir", f.output_dir);
  return load_run_config(f.config, overrides);
}

int run(int argc, char** argv) {
  CLI::App app{"Two-stage MSI/MSS patient classifier: MoCo patch encoder + grouped-embedding head"};
  app.require_subcommand(1);
  const auto log = stderr_logger();

  CommonFlags synth_f, s1_f, ex_f, head_f, base_f, eval_f, cmp_f;
  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
  add_common(synth, synth_f);
  auto* s1 = app.add_subcommand("train-stage1", "momentum-contrast pretraining of the patch encoder");
  add_common(s1, s1_f, false);
  auto* ex = app.add_subcommand("extract", "embed every patch with the frozen encoder");
  add_common(ex, ex_f, false);
  auto* head = app.add_subcommand("train-head", "train the group-embedding classifier");
  add_common(head, head_f);
  auto* base = app.add_subcommand("train-baseline", "train the per-patch baseline classifier");
  add_common(base, base_f);

  auto* ev = app.add_subcommand("eval", "evaluate trained models on the validation split");
  add_common(ev, eval_f);
  std::string method = "both";
  bool eval_balanced = false;
  ev->add_option("--method", method, "grouped, baseline or both")->check(CLI::IsMember({"grouped", "baseline", "both"}));
  ev->add_flag("--balanced", eval_balanced, "restrict to the class- and patch-balanced validation subset");

  auto* cmp = app.add_subcommand("compare", "mean, std and paired t-tests over runs");
  add_common(cmp, cmp_f);
  bool cmp_balanced = false;
  std::vector<std::string> reports_a, reports_b;
  std::string cmp_out;
  cmp->add_flag("--balanced", cmp_balanced, "compare the balanced-subset reports");
  cmp->add_option("--a", reports_a, "report.json files of the first method")->take_all();
  cmp->add_option("--b", reports_b, "report.json files of the second method")->take_all();
  cmp->add_option("--out", cmp_out, "output directory for explicit --a/--b comparisons");

  auto* plot = app.add_subcommand("plot", "render whitespace-separated tables as an SVG line chart");
  std::vector<std::string> plot_inputs;
  std::string plot_out, plot_title, plot_x = "x", plot_y = "y";
  bool plot_diag = false;
  plot->add_option("inputs", plot_inputs, "two-or-more column tables (loss_curve.tsv, roc_*.tsv, curve.tsv)")->required();
  plot->add_option("-o,--out", plot_out, "output .svg")->required();
  plot->add_option("--title", plot_title);
  plot->add_option("--xlabel", plot_x);
  plot->add_option("--ylabel", plot_y);
  plot->add_flag("--diagonal", plot_diag, "draw the chance diagonal (ROC plots)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (synth->parsed()) {
    const Workspace ws(resolve(synth_f, true));
    std::cout << run_synth(ws, log).string() << '\n';
  } else if (s1->parsed()) {
    const Workspace ws(resolve(s1_f));
    const auto r = run_stage1(ws, log);
    std::cout << ws.encoder_path().string() << "\nbest epoch " << r.best_epoch << ", loss "
              << r.loss_curve[static_cast<std::size_t>(r.best_epoch - 1)] << '\n';
  } else if (ex->parsed()) {
    const Workspace ws(resolve(ex_f));
    run_extract(ws, log);
    std::cout << ws.embed_dir().string() << '\n';
  } else if (head->parsed()) {
    const Workspace ws(resolve(head_f));
    for (auto seed : ws.config().seeds) {
      run_train_head(ws, seed, log);
      std::cout << ws.head_path(seed).string() << '\n';
    }
  } else if (base->parsed()) {
    const Workspace ws(resolve(base_f));
    for (auto seed : ws.config().seeds) {
      run_train_baseline(ws, seed, log);
      std::cout << ws.baseline_path(seed).string() << '\n';
    }
  } else if (ev->parsed()) {
    const Workspace ws(resolve(eval_f));
    std::vector<Method> methods;
    if (method != "baseline") methods.push_back(Method::kGrouped);
    if (method != "grouped") methods.push_back(Method::kBaseline);
    for (auto seed : ws.config().seeds)
      for (auto m : methods) {
        run_eval(ws, seed, m, eval_balanced, log);
        std::cout << ws.report_path(seed, m, eval_balanced).string() << '\n';
      }
  } else if (cmp->parsed()) {
    CompareOutputs out;
    if (!reports_a.empty() || !reports_b.empty()) {
      if (cmp_out.empty()) throw ConfigError("compare: --out is required with --a/--b");
      out = compare_reports(read_reports({reports_a.begin(), reports_a.end()}),
                            read_reports({reports_b.begin(), reports_b.end()}), cmp_out);
    } else {
      const Workspace ws(resolve(cmp_f));
      out = run_compare(ws, cmp_balanced);
    }
    for (const auto& w : out.summary.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << out.table;
    for (const auto& p : out.plots) std::cout << p.string() << '\n';
  } else if (plot->parsed()) {
    std::vector<Series> series;
    for (const auto& in : plot_inputs) {
      auto s = read_columns(in);
      series.insert(series.end(), s.begin(), s.end());
    }
    write_line_plot(plot_out, plot_title, plot_x, plot_y, series, plot_diag);
    std::cout << plot_out << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mocomsi::UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
}
