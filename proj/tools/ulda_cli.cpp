#include "ulda/config.hpp"
#include "ulda/pipeline.hpp"
#include "ulda/selfcheck.hpp"

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file (defaults used when omitted)");
  cmd->add_option("--seed", f.seed, "Override the run and dataset seed");
  cmd->add_option("--out", f.out, "Output root for relative artifact paths")->capture_default_str();
  cmd->add_flag("--force", f.force, "Overwrite artifacts built from a different config");
}

ulda::RunConfig resolve_config(const CommonFlags& f) {
  ulda::RunConfig cfg = f.config.empty() ? ulda::default_config() : ulda::load_config(f.config);
  if (f.seed) ulda::apply_seed(cfg, *f.seed);
  cfg.validate();
  return cfg;
}

ulda::CommandOptions options(const CommonFlags& f, bool verbose) {
  ulda::CommandOptions opt;
  opt.out = f.out;
  opt.force = f.force;
  if (verbose) opt.log = [](const std::string& line) { std::cout << line << '\n'; };
  return opt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-driven zero-shot domain adaptation for segmentation (desk scale)"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Echo log lines to stdout");

  CommonFlags data_flags, s1_flags, s2_flags, eval_flags, check_flags;
  auto* data = app.add_subcommand("make-toy-data", "Generate the synthetic source and shifted eval data");
  add_common(data, data_flags);
  auto* s1 = app.add_subcommand("stage1", "Train the source head and mine the style bank");
  add_common(s1, s1_flags);
  auto* s2 = app.add_subcommand("stage2", "Fine-tune the head on stylized features");
  add_common(s2, s2_flags);
  auto* ev = app.add_subcommand("eval", "Evaluate on the shifted split and write the metrics report");
  add_common(ev, eval_flags);
  bool baseline = false;
  ev->add_flag("--baseline", baseline, "Evaluate the source-only head instead");
  auto* sc = app.add_subcommand("selfcheck", "Run the invariant suite");
  add_common(sc, check_flags);
  bool quick = false;
  sc->add_flag("--quick", quick, "Skip the end-to-end determinism run");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*data) {
      ulda::cmd_make_toy_data(resolve_config(data_flags), options(data_flags, true));
    } else if (*s1) {
      ulda::cmd_stage1(resolve_config(s1_flags), options(s1_flags, verbose));
    } else if (*s2) {
      ulda::cmd_stage2(resolve_config(s2_flags), options(s2_flags, verbose));
    } else if (*ev) {
      const auto report = ulda::cmd_eval(resolve_config(eval_flags), options(eval_flags, true), baseline);
      for (const auto& d : report.per_domain) {
        std::cout << d.domain_id << " miou=" << d.miou << " macc=" << d.macc << '\n';
      }
    } else if (*sc) {
      ulda::SelfcheckOptions opt;
      opt.include_end_to_end = !quick;
      if (check_flags.seed) opt.seed = *check_flags.seed;
      const auto results = ulda::run_selfcheck(opt);
      int failed = 0;
      for (const auto& r : results) {
        std::cout << ulda::format_check(r) << '\n';
        if (!r.passed) ++failed;
      }
      std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
      return failed == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
