// increcap command line: dataset generation, the two training stages,
// evaluation, the experiment matrix, and embedding export.

#include <CLI11.hpp>
#include <iostream>

#include "increcap/pipeline.hpp"

namespace {

icap::config::ExperimentConfig resolve_config(const std::string& config_path,
                                              const std::vector<std::string>& overrides) {
  icap::config::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = icap::config::read_config(config_path);
  for (const auto& o : overrides) icap::config::apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"increcap: class-incremental domain adaptation + report generation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "config file (key = value with [sections])");
  app.add_option("-s,--set", overrides, "override, e.g. stage1.lr=0.01 (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* s1 = app.add_subcommand("train-stage1", "train the incremental feature extractor");
  bool s1_resume = false;
  s1->add_flag("--resume", s1_resume, "continue from the last increment checkpoint");
  auto* s2 = app.add_subcommand("train-stage2", "train the caption model on exported features");
  bool s2_resume = false;
  int s2_stop = -1;
  s2->add_flag("--resume", s2_resume, "continue from the stage-2 checkpoint");
  s2->add_option("--stop-after", s2_stop, "checkpoint and stop after N epochs");
  auto* ev = app.add_subcommand("eval", "evaluate captions + calibration on a split");
  std::string eval_split = "target_test";
  ev->add_option("--split", eval_split,
                 "source_train|source_val|source_test|target_one_shot|target_few_shot|target_test");
  auto* mx = app.add_subcommand("matrix", "run the configuration comparison matrix");
  std::vector<std::string> matrix_configs;
  mx->add_option("--configs", matrix_configs, "config files, one experiment each")
      ->required();
  std::string matrix_out;
  mx->add_option("--out", matrix_out, "also write the table to this file");
  auto* ex = app.add_subcommand("export-embeddings", "write stage-1 projection embeddings");
  std::string emb_split = "source_test", emb_out = "embeddings.tsv";
  ex->add_option("--split", emb_split, "split to embed");
  ex->add_option("--out", emb_out, "output table path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(config_path, overrides);
      const auto manifest = icap::pipeline::generate_data(cfg);
      std::cout << "wrote " << manifest.samples.size() << " images under " << cfg.data_dir
                << "\n";
    } else if (s1->parsed()) {
      const auto cfg = resolve_config(config_path, overrides);
      const auto res = icap::pipeline::run_stage1(cfg, s1_resume);
      for (const auto& man : res.manifests) {
        std::cout << "increment " << man.step_index;
        for (const auto& [k, v] : man.metrics) std::cout << "  " << k << "=" << v;
        std::cout << "\n";
      }
      std::cout << "checkpoint: " << res.checkpoint_prefix << "\nfeatures: "
                << res.features_dir << "\n";
    } else if (s2->parsed()) {
      const auto cfg = resolve_config(config_path, overrides);
      const auto res = icap::pipeline::run_stage2(cfg, s2_stop, s2_resume);
      if (!res.loss_trace.empty())
        std::cout << "loss " << res.loss_trace.front() << " -> " << res.loss_trace.back()
                  << " over " << res.loss_trace.size() << " epochs\n";
      std::cout << "checkpoint: " << res.checkpoint_prefix << "\n";
    } else if (ev->parsed()) {
      const auto cfg = resolve_config(config_path, overrides);
      const auto res = icap::pipeline::run_eval(cfg, eval_split);
      for (const auto& [k, v] : res.report.summary) std::cout << k << " " << v << "\n";
      std::cout << "report: " << res.report_path << "\ncaptions: " << res.captions_path
                << "\n";
    } else if (mx->parsed()) {
      std::vector<icap::config::ExperimentConfig> cfgs;
      for (const auto& path : matrix_configs) {
        auto cfg = icap::config::read_config(path);
        for (const auto& o : overrides) icap::config::apply_override(cfg, o);
        cfg.validate();
        cfgs.push_back(cfg);
      }
      const std::string table = icap::pipeline::run_matrix(cfgs);
      std::cout << table;
      if (!matrix_out.empty()) {
        std::ofstream out(matrix_out);
        out << table;
      }
    } else if (ex->parsed()) {
      const auto cfg = resolve_config(config_path, overrides);
      icap::pipeline::export_embeddings(cfg, emb_split, emb_out);
      std::cout << "wrote " << emb_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
