// curate: command-line front end for the curation pipeline and its modules.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "curate/curate.hpp"

namespace fs = std::filesystem;
using namespace curate;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError:
    case ErrorCode::KTooLarge: return kExitUsage;
    default: return kExitRuntime;
  }
}

void print_error(std::string_view name, const std::string& message) {
  std::cerr << json{{"error", std::string(name)}, {"message", message}}.dump() << '\n';
}

std::vector<ScoreProvider> load_providers(const std::vector<std::string>& paths) {
  std::vector<ScoreProvider> out;
  for (const auto& p : paths) out.push_back(ScoreProvider::load(p));
  return out;
}

std::vector<ImageRecord> load_scored_records(const std::string& records, const std::vector<std::string>& scores) {
  auto recs = load_records(records);
  attach_scores(recs, load_providers(scores));
  return recs;
}

void print_funnel(const DatasetManifest& m) {
  std::printf("%-24s %10s    %10s\n", "stage", "input", "output");
  for (const auto& s : m.stage_log)
    std::printf("%-24s %10llu -> %10llu\n", s.stage_name.c_str(), static_cast<unsigned long long>(s.input_count),
                static_cast<unsigned long long>(s.output_count));
}

std::vector<std::int64_t> parse_sizes(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoll(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      fail(ErrorCode::ConfigError, "bad size '" + tok + "' in --sizes");
    }
  }
  if (out.empty()) fail(ErrorCode::ConfigError, "--sizes is empty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset curation pipeline"};
  app.require_subcommand(1);
  unsigned workers = 1;
  app.add_option("--workers", workers, "Worker threads (outputs do not depend on it)")->check(CLI::Range(1u, 1024u));

  // pipeline run
  auto* pipeline = app.add_subcommand("pipeline", "Full filtering pipeline");
  pipeline->require_subcommand(1);
  auto* run = pipeline->add_subcommand("run", "Run every configured stage and write a manifest");
  std::string cfg_path, records_path, out_path, data_dir;
  std::vector<std::string> score_paths;
  std::int64_t run_n = 0;
  run->add_option("--config", cfg_path, "Pipeline TOML")->required();
  run->add_option("--records", records_path, "ImageRecord NDJSON")->required();
  run->add_option("--scores", score_paths, "Score provider NDJSON files");
  run->add_option("--out", out_path, "Manifest JSON output")->required();
  run->add_option("--data-dir", data_dir, "Base for relative paths in the config (default: config directory)");
  run->add_option("--n", run_n, "Override the selection size");

  // estimator fit / score
  auto* estimator = app.add_subcommand("estimator", "Activation-norm quality estimator");
  estimator->require_subcommand(1);
  auto* fit = estimator->add_subcommand("fit", "Fit a separation table from HQ/LQ calibration norms");
  std::string hq_path, lq_path, table_out;
  int K = 32;
  fit->add_option("--hq", hq_path, "HQ calibration norms NDJSON")->required();
  fit->add_option("--lq", lq_path, "LQ calibration norms NDJSON")->required();
  fit->add_option("-K,--top-k", K, "Number of selected cells");
  fit->add_option("--out", table_out, "Separation table JSON")->required();
  auto* score = estimator->add_subcommand("score", "Score images with a fitted table");
  std::string table_path, norms_in, scores_out, score_key = "diffusion_estimator";
  score->add_option("--table", table_path)->required();
  score->add_option("--in", norms_in, "Activation norms NDJSON")->required();
  score->add_option("--out", scores_out, "Score provider NDJSON")->required();
  score->add_option("--score-key", score_key);

  // dedup
  auto* dedup = app.add_subcommand("dedup", "Near-duplicate clustering");
  std::string descriptors_path, dedup_out, clusters_out;
  DedupConfig dcfg;
  dedup->add_option("--records", records_path)->required();
  dedup->add_option("--scores", score_paths);
  dedup->add_option("--descriptors", descriptors_path)->required();
  dedup->add_option("--ratio", dcfg.ratio_threshold);
  dedup->add_option("--min-matches", dcfg.min_matches);
  dedup->add_option("--quality-key", dcfg.quality_key);
  dedup->add_option("--out", dedup_out, "Surviving records NDJSON (stdout summary only if omitted)");
  dedup->add_option("--clusters", clusters_out, "Cluster assignment JSON");

  // select
  auto* select = app.add_subcommand("select", "Top-n selection, ablation variants or a uniform sample");
  std::int64_t sel_n = kDefaultSelectionSize;
  std::string sizes, mode = "top", sel_key = "diffusion_estimator";
  std::uint64_t seed = 0;
  select->add_option("--records", records_path)->required();
  select->add_option("--scores", score_paths);
  auto* n_opt = select->add_option("--n", sel_n);
  auto* sizes_opt = select->add_option("--sizes", sizes, "Comma-separated nested variant sizes");
  n_opt->excludes(sizes_opt);
  select->add_option("--score-key", sel_key);
  select->add_option("--mode", mode)->check(CLI::IsMember({"top", "uniform"}));
  select->add_option("--seed", seed);
  select->add_option("--out", out_path, "Manifest JSON, or a directory with --sizes")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Side-by-side human evaluation");
  eval->require_subcommand(1);
  auto* agg = eval->add_subcommand("aggregate", "Majority vote and binomial test per criterion");
  std::string exp_path, ann_path;
  bool as_json = false;
  agg->add_option("--experiment", exp_path)->required();
  agg->add_option("--annotations", ann_path)->required();
  agg->add_flag("--json", as_json, "Print JSON instead of the table");
  auto* tasks = eval->add_subcommand("tasks", "Emit the task list with A/B placement");
  std::string tasks_out;
  tasks->add_option("--experiment", exp_path)->required();
  tasks->add_option("--out", tasks_out, "NDJSON (stdout if omitted)");

  // metrics
  auto* metrics = app.add_subcommand("metrics", "Automatic metrics");
  metrics->require_subcommand(1);
  auto* fd = metrics->add_subcommand("fd", "Frechet distance between two feature sets");
  std::string fa, fb;
  fd->add_option("--features-a", fa)->required();
  fd->add_option("--features-b", fb)->required();
  auto* magg = metrics->add_subcommand("aggregate", "Mean of scalar metric scores");
  std::string mscores;
  magg->add_option("--scores", mscores)->required();

  // serve
  auto* serve = app.add_subcommand("serve", "Annotation service (bind address from CURATE_BIND)");
  std::string log_dir, static_dir;
  serve->add_option("--experiment", exp_path)->required();
  serve->add_option("--log-dir", log_dir)->required();
  serve->add_option("--static-dir", static_dir);

  // synth
  auto* synth = app.add_subcommand("synth", "Seeded synthetic fixtures");
  synth->require_subcommand(1);
  auto* synth_act = synth->add_subcommand("activations", "Planted-signal calibration and test norms");
  std::string planted = "", synth_out;
  synth_act->add_option("--seed", seed)->required();
  synth_act->add_option("--planted", planted, "e.g. L=8,M=16,K=16,hq=500,lq=500,test=200");
  synth_act->add_option("--out-dir", synth_out)->required();
  auto* synth_corpus = synth->add_subcommand("corpus", "End-to-end candidate pool");
  CorpusSpec cspec;
  synth_corpus->add_option("--seed", seed)->required();
  synth_corpus->add_option("--count", cspec.count);
  synth_corpus->add_option("--out-dir", synth_out)->required();

  // caption
  auto* caption = app.add_subcommand("caption", "Request captions for records");
  std::string endpoint, stub, cache_path;
  unsigned in_flight = 8;
  caption->add_option("--records", records_path)->required();
  auto* ep = caption->add_option("--endpoint", endpoint, "HTTP captioning endpoint");
  auto* st = caption->add_option("--stub", stub, "NDJSON file of canned captions");
  ep->excludes(st);
  caption->add_option("--cache", cache_path, "NDJSON cache; reused and updated");
  caption->add_option("--concurrency", in_flight)->check(CLI::Range(1u, 256u));
  caption->add_option("--out", out_path, "Captioned records NDJSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("UsageError", e.what());
    return kExitUsage;
  }

  try {
    if (run->parsed()) {
      auto cfg = load_pipeline_config(cfg_path);
      if (run_n > 0) {
        if (!cfg.selection) cfg.selection = SelectionConfig{};
        cfg.selection->n = run_n;
      }
      const fs::path base = data_dir.empty() ? fs::path(cfg_path).parent_path() : fs::path(data_dir);
      const auto inputs = load_pipeline_inputs(cfg, base, workers);
      const auto m = run_pipeline(load_records(records_path), cfg, load_providers(score_paths), inputs, workers);
      save_manifest(m, out_path);
      print_funnel(m);
    } else if (fit->parsed()) {
      CalibrationSet cal{load_norms(hq_path), load_norms(lq_path)};
      const auto table = fit_estimator(cal, K, workers);
      save_separation_table(table, table_out);
      std::printf("fitted K=%d over %llu calibration pairs: %s\n", K, static_cast<unsigned long long>(table.pair_count),
                  detail::format_cells(table.top_k).c_str());
    } else if (score->parsed()) {
      const auto table = load_separation_table(table_path);
      std::vector<json> rows;
      for (const auto& [id, v] : score_corpus(load_norms(norms_in), table, workers))
        rows.push_back({{"image_id", id}, {"scores", {{score_key, v}}}});
      write_text_file(scores_out, to_ndjson(rows));
      std::printf("scored %zu images\n", rows.size());
    } else if (dedup->parsed()) {
      const auto recs = load_scored_records(records_path, score_paths);
      const auto res = deduplicate(recs, load_descriptors(descriptors_path), dcfg, workers);
      if (!dedup_out.empty()) save_records(res.survivors, dedup_out);
      if (!clusters_out.empty()) write_text_file(clusters_out, to_json(res.assignment).dump(2) + "\n");
      std::printf("%zu records, %zu clusters, %zu kept, %zu dropped\n", recs.size(), res.assignment.clusters.size(),
                  res.survivors.size(), res.dropped.size());
    } else if (select->parsed()) {
      const auto recs = load_scored_records(records_path, score_paths);
      if (!sizes.empty()) {
        if (mode != "top") fail(ErrorCode::ConfigError, "--sizes only applies to --mode top");
        const auto ns = parse_sizes(sizes);
        const auto variants = nested_variants(recs, ns, sel_key);
        fs::create_directories(out_path);
        for (std::size_t i = 0; i < ns.size(); ++i) {
          const auto file = fs::path(out_path) / ("variant_" + std::to_string(ns[i]) + ".json");
          save_manifest(variants[i], file);
          std::printf("%s: %zu records\n", file.string().c_str(), variants[i].records.size());
        }
      } else if (mode == "uniform") {
        DatasetManifest m;
        m.records = sample_uniform(recs, sel_n, seed);
        m.stage_log.push_back({"sample_uniform", recs.size(), m.records.size(),
                               {{"kind", "sample"}, {"n", std::to_string(sel_n)}, {"seed", std::to_string(seed)}}});
        save_manifest(m, out_path);
        print_funnel(m);
      } else {
        const auto m = select_top_n(recs, {sel_n, sel_key});
        save_manifest(m, out_path);
        print_funnel(m);
      }
    } else if (agg->parsed()) {
      const auto exp = load_experiment(exp_path);
      const auto outcomes = aggregate(exp, load_annotations(ann_path));
      if (as_json) std::cout << experiment_report_json(exp, outcomes).dump(2) << '\n';
      else std::cout << format_report_table(exp, outcomes);
    } else if (tasks->parsed()) {
      std::vector<json> rows;
      for (const auto& t : build_tasks(load_experiment(exp_path))) rows.push_back(to_json(t));
      if (tasks_out.empty()) std::cout << to_ndjson(rows);
      else write_text_file(tasks_out, to_ndjson(rows));
    } else if (fd->parsed()) {
      const auto a = load_features(fa);
      const auto b = load_features(fb);
      const double d = frechet_distance(fit_gaussian(a, workers), fit_gaussian(b, workers));
      std::cout << json{{"a", a.label}, {"b", b.label}, {"fd", d}}.dump() << '\n';
    } else if (magg->parsed()) {
      for (const auto& [metric, set] : load_scalar_scores(mscores)) {
        const auto s = aggregate_scores(set);
        std::cout << json{{"metric", std::string(to_string(metric))}, {"mean", s.mean}, {"count", s.count}}.dump()
                  << '\n';
      }
    } else if (serve->parsed()) {
      auto exp = load_experiment(exp_path);
      const auto log = vote_log_path(log_dir, exp.experiment_id);
      AnnotationService svc(std::move(exp), log);
      if (svc.truncated_bytes())
        std::fprintf(stderr, "vote log: discarded %zu bytes of a torn final line\n", svc.truncated_bytes());
      httplib::Server server;
      install_routes(server, svc, static_dir);
      const auto bind = bind_address_from_env();
      std::fprintf(stderr, "serving %s on %s:%d (log %s)\n", svc.experiment().experiment_id.c_str(),
                   bind.host.c_str(), bind.port, log.string().c_str());
      if (!server.listen(bind.host, bind.port))
        fail(ErrorCode::IoError, "cannot listen on " + bind.host + ":" + std::to_string(bind.port));
    } else if (synth_act->parsed()) {
      const auto spec = parse_planted_spec(planted);
      const auto fx = generate_planted(spec, seed);
      fs::create_directories(synth_out);
      const fs::path dir(synth_out);
      save_norms(fx.calibration.hq, dir / "calibration_hq.ndjson");
      save_norms(fx.calibration.lq, dir / "calibration_lq.ndjson");
      save_norms(fx.test, dir / "test.ndjson");
      json cells = json::array();
      for (const auto& c : fx.planted) cells.push_back({c.layer, c.token});
      json labels = json::object();
      for (std::size_t i = 0; i < fx.test.size(); ++i) labels[fx.test[i].image_id] = bool(fx.test_is_hq[i]);
      write_text_file(dir / "planted.json",
                      json{{"seed", seed}, {"planted", cells}, {"test_is_hq", labels}}.dump(2) + "\n");
      std::printf("wrote %zu+%zu calibration and %zu test matrices to %s\n", fx.calibration.hq.size(),
                  fx.calibration.lq.size(), fx.test.size(), synth_out.c_str());
    } else if (synth_corpus->parsed()) {
      const auto fx = generate_corpus(cspec, seed);
      write_corpus(fx, synth_out);
      std::printf("wrote %zu records to %s\n", fx.records.size(), synth_out.c_str());
    } else if (caption->parsed()) {
      auto recs = load_records(records_path);
      std::unique_ptr<CaptionTransport> transport;
      if (!endpoint.empty()) transport = std::make_unique<HttpCaptionTransport>(endpoint);
      else if (!stub.empty()) transport = std::make_unique<FileCaptionTransport>(stub);
      else fail(ErrorCode::ConfigError, "caption needs --endpoint or --stub");
      CaptionCache cache = cache_path.empty() ? CaptionCache{} : CaptionCache::load(cache_path);
      std::vector<CaptionRequest> reqs;
      for (const auto& r : recs) reqs.push_back({r.image_id, r.source_uri});
      const auto outcomes = caption_batch(reqs, *transport, {}, &cache, in_flight);
      const auto n = apply_captions(recs, outcomes);
      if (!cache_path.empty()) cache.save(cache_path);
      save_records(recs, out_path);
      for (const auto& o : outcomes)
        if (o.error)
          std::cerr << json{{"image_id", o.image_id}, {"error", std::string(to_string(*o.error))},
                            {"message", o.message}}.dump()
                    << '\n';
      std::printf("captioned %zu of %zu records\n", n, recs.size());
      if (n != recs.size()) return kExitRuntime;
    }
  } catch (const Error& e) {
    print_error(e.name(), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    print_error("InternalError", e.what());
    return kExitRuntime;
  }
  return 0;
}
