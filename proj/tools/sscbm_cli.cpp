// sscbm: command-line entry points for every pipeline stage.
//
// Exit codes: 0 success, 1 bad config or failed stage, 2 usage error.

#include "sscbm/serving.hpp"
#include "sscbm/sscbm.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using namespace sscbm;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;

  PipelineConfig load() const { return load_pipeline_config(config, overrides); }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "pipeline config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--set", c.overrides, "override a config key, e.g. train.lr=0.1");
}

// Shorthand flags that land in the override list.
void add_shorthand(CLI::App* sub, Common& c, const std::string& flag, const std::string& key,
                   const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&c, key](const std::string& v) { c.overrides.push_back(key + "=" + v); }, help);
}

void write_json(const fs::path& path, const nlohmann::json& j) { detail::write_text(path, j.dump(2) + "\n"); }

ModelConfig model_config_for(const Dataset& ds, const TrainConfig& cfg) {
  if (ds.examples.empty()) {
    throw SchemaError("dataset is empty");
  }
  const auto& img = ds.examples.front().input;
  if (img.height != img.width) {
    throw SchemaError("inputs must be square");
  }
  return cfg.model_config(ds.schema.k(), ds.n_classes, img.channels, img.height);
}

bool needs_pseudo(const TrainConfig& cfg) {
  const auto a = align_term_for(cfg.variant, cfg.ablation);
  return a == AlignTerm::heatmap_vs_pseudo || a == AlignTerm::prediction_vs_pseudo;
}

std::vector<std::string> ids_of(std::span<const Example> examples) {
  std::vector<std::string> out;
  for (const auto& e : examples) {
    out.push_back(e.id);
  }
  return out;
}

std::atomic<bool> g_stop{false};
httplib::Server* g_server = nullptr;

void on_signal(int) {
  g_stop = true;
  if (g_server) {
    g_server->stop();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised concept bottleneck models"};
  app.require_subcommand(1);

  // gen-data
  Common gen_c;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  add_common(gen, gen_c);
  gen->add_option("-o,--out", gen_out, "output directory")->required();
  add_shorthand(gen, gen_c, "--seed", "data.seed", "generator seed");
  add_shorthand(gen, gen_c, "--n-examples", "data.n_examples", "number of examples");

  // split
  Common split_c;
  std::string split_data, split_out;
  auto* split = app.add_subcommand("split", "hold out a test set and draw the labeled subset");
  add_common(split, split_c);
  split->add_option("-d,--data", split_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  split->add_option("-o,--out", split_out, "split file (JSON)")->required();
  add_shorthand(split, split_c, "--seed", "split.seed", "labeled-subset seed");
  add_shorthand(split, split_c, "--labels", "split.labels", "labeled setting: ratio or K=n");

  // pseudo-label
  Common pl_c;
  std::string pl_data, pl_split, pl_out;
  auto* pl = app.add_subcommand("pseudo-label", "KNN pseudo-concept labels for the unlabeled subset");
  add_common(pl, pl_c);
  pl->add_option("-d,--data", pl_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  pl->add_option("-s,--split", pl_split, "split file")->required()->check(CLI::ExistingFile);
  pl->add_option("-o,--out", pl_out, "pseudo_labels.jsonl")->required();
  add_shorthand(pl, pl_c, "--seed", "train.seed", "seed (selects the reference encoder)");

  // train
  Common tr_c;
  std::string tr_data, tr_split, tr_pseudo, tr_out;
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(tr, tr_c);
  tr->add_option("-d,--data", tr_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("-s,--split", tr_split, "split file")->required()->check(CLI::ExistingFile);
  tr->add_option("-p,--pseudo", tr_pseudo, "pseudo_labels.jsonl (computed when omitted)")->check(CLI::ExistingFile);
  tr->add_option("-o,--out", tr_out, "checkpoint directory")->required();
  add_shorthand(tr, tr_c, "--seed", "train.seed", "training seed");
  add_shorthand(tr, tr_c, "--epochs", "train.epochs", "epochs");
  add_shorthand(tr, tr_c, "--lr", "train.lr", "learning rate");
  add_shorthand(tr, tr_c, "--variant", "train.variant", "sscbm, cem_ssl or cbm_ssl");
  add_shorthand(tr, tr_c, "--ablation", "train.ablation", "full, wo_img or wo_align");

  // eval
  std::string ev_ckpt, ev_data, ev_split, ev_subset = "test", ev_out;
  Common ev_c;
  auto* ev = app.add_subcommand("eval", "concept/task accuracy and saliency localization");
  add_common(ev, ev_c);
  ev->add_option("-m,--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("-d,--data", ev_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("-s,--split", ev_split, "split file")->required()->check(CLI::ExistingFile);
  ev->add_option("--subset", ev_subset, "subset of the split file")->capture_default_str();
  ev->add_option("-o,--out", ev_out, "metrics.json (stdout when omitted)");

  // ablate
  Common ab_c;
  std::string ab_data, ab_out;
  auto* ab = app.add_subcommand("ablate", "full / wo_img / wo_align over several seeds");
  add_common(ab, ab_c);
  ab->add_option("-d,--data", ab_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("-o,--out", ab_out, "ablation.csv")->required();

  // sweep
  Common sw_c;
  std::string sw_data, sw_out;
  auto* sw = app.add_subcommand("sweep", "label-ratio sweep across variants");
  add_common(sw, sw_c);
  sw->add_option("-d,--data", sw_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  sw->add_option("-o,--out", sw_out, "sweep.csv")->required();

  // intervene-sweep
  Common is_c;
  std::string is_ckpt, is_data, is_split, is_subset = "test", is_out;
  auto* is = app.add_subcommand("intervene-sweep", "task accuracy versus intervention ratio");
  add_common(is, is_c);
  is->add_option("-m,--checkpoint", is_ckpt, "checkpoint directory")->required();
  is->add_option("-d,--data", is_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  is->add_option("-s,--split", is_split, "split file")->required()->check(CLI::ExistingFile);
  is->add_option("--subset", is_subset, "subset of the split file")->capture_default_str();
  is->add_option("-o,--out", is_out, "intervention.csv")->required();
  add_shorthand(is, is_c, "--ratios", "intervention.ratios", "lo:hi:step");
  add_shorthand(is, is_c, "--mode", "intervention.mode", "individual or group");
  add_shorthand(is, is_c, "--order", "intervention.order", "most_erroneous or random");

  // export-saliency
  std::string es_ckpt, es_data, es_split, es_subset = "test", es_out;
  std::size_t es_limit = 0;
  std::vector<int> es_concepts;
  bool es_no_png = false;
  Common es_c;
  auto* es = app.add_subcommand("export-saliency", "write per-concept saliency maps");
  add_common(es, es_c);
  es->add_option("-m,--checkpoint", es_ckpt, "checkpoint directory")->required();
  es->add_option("-d,--data", es_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  es->add_option("-s,--split", es_split, "split file")->required()->check(CLI::ExistingFile);
  es->add_option("--subset", es_subset, "subset of the split file")->capture_default_str();
  es->add_option("-o,--out", es_out, "output directory")->required();
  es->add_option("--limit", es_limit, "at most this many examples (0 = all)");
  es->add_option("--concepts", es_concepts, "concept indices (default: all)");
  es->add_flag("--no-png", es_no_png, "write only the float maps");

  // serve
  std::string sv_ckpt, sv_data, sv_split, sv_saliency, sv_curve, sv_host = "127.0.0.1";
  int sv_port = 8080;
  double sv_watch = 0;
  Common sv_c;
  auto* sv = app.add_subcommand("serve", "read-only HTTP JSON API");
  add_common(sv, sv_c);
  sv->add_option("-m,--checkpoint", sv_ckpt, "checkpoint directory (SSCBM_CHECKPOINT_DIR overrides)");
  sv->add_option("-d,--data", sv_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  sv->add_option("-s,--split", sv_split, "split file")->check(CLI::ExistingFile);
  sv->add_option("--saliency", sv_saliency, "directory written by export-saliency");
  sv->add_option("--curve", sv_curve, "intervention.csv to serve")->check(CLI::ExistingFile);
  sv->add_option("--host", sv_host, "bind address")->capture_default_str();
  sv->add_option("--port", sv_port, "port (0 picks a free one)")->capture_default_str();
  sv->add_option("--watch", sv_watch, "poll the checkpoint every N seconds and hot-reload (0 = off)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "sscbm: usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) {
      const auto cfg = gen_c.load();
      const auto ds = generate_synthetic(cfg.data);
      save_dataset(gen_out, ds);
      std::cout << "wrote " << ds.examples.size() << " examples to " << gen_out << "\n";
    } else if (*split) {
      const auto cfg = split_c.load();
      const auto ds = load_dataset(split_data);
      const auto t = make_split_table(ds, cfg.split);
      write_split_table(split_out, t);
      std::cout << "train " << t.at("train").size() << " (labeled " << t.at("labeled").size() << ", unlabeled "
                << t.at("unlabeled").size() << "), test " << t.at("test").size() << "\n";
    } else if (*pl) {
      const auto cfg = pl_c.load();
      const auto ds = load_dataset(pl_data);
      const auto t = read_split_table(pl_split);
      const auto labeled = select(ds, t, "labeled");
      const auto unlabeled = select(ds, t, "unlabeled", true);
      const auto labels = make_pseudo_labels(model_config_for(ds, cfg.train), cfg.train, labeled, unlabeled);
      write_pseudo_labels(pl_out, labels, ids_of(unlabeled));
      std::cout << "wrote " << labels.size() << " pseudo labels\n";
    } else if (*tr) {
      const auto cfg = tr_c.load();
      const auto ds = load_dataset(tr_data);
      const auto t = read_split_table(tr_split);
      const auto labeled = select(ds, t, "labeled");
      const auto unlabeled = select(ds, t, "unlabeled", true);
      const auto mc = model_config_for(ds, cfg.train);
      PseudoLabelMap pseudo;
      if (!tr_pseudo.empty()) {
        pseudo = read_pseudo_labels(tr_pseudo);
      } else if (needs_pseudo(cfg.train)) {
        pseudo = make_pseudo_labels(mc, cfg.train, labeled, unlabeled);
      }
      const auto result = train(mc, labeled, unlabeled, pseudo, cfg.train, {}, [](const EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << " " << r.loss.to_json().dump() << "\n";
      });
      if (result.diverged) {
        throw DivergenceError("training diverged: " + result.message);
      }
      save_checkpoint(tr_out, result.model, ds.schema);
      write_history(fs::path(tr_out) / "history.jsonl", result.history);
      write_json(fs::path(tr_out) / "train_config.json", cfg.train.to_json());
      if (t.contains("test")) {
        const auto test = select(ds, t, "test");
        const auto m = evaluate(result.model, test);
        std::cout << "test concept_acc " << m.concept_accuracy << " task_acc " << m.task_accuracy << "\n";
      }
    } else if (*ev) {
      ev_c.load();  // no keys apply; a bad file still fails like every other stage
      const auto ckpt = load_checkpoint(resolve_checkpoint_dir(ev_ckpt));
      const auto ds = load_dataset(ev_data);
      const auto t = read_split_table(ev_split);
      const auto examples = select(ds, t, ev_subset);
      nlohmann::json j = evaluate(ckpt.model, examples).to_json();
      const auto regions = select_regions(ds, t, ev_subset);
      if (!regions.empty()) {
        j["localization"] = saliency_localization(ckpt.model, examples, regions).to_json();
      }
      if (ev_out.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        write_json(ev_out, j);
      }
    } else if (*ab) {
      const auto cfg = ab_c.load();
      const auto ds = load_dataset(ab_data);
      const auto part = make_partition(ds, cfg.split.test_fraction, cfg.split.holdout_seed);
      const auto rows = run_ablations(part, ds.schema.k(), ds.n_classes, cfg.ablate.setting, cfg.ablate.ablations,
                                      cfg.ablate.seeds, cfg.train, [](const AblationRow& r) {
                                        std::cerr << "seed " << r.seed << " " << r.ablation << " concept "
                                                  << r.concept_accuracy << " task " << r.task_accuracy << "\n";
                                      });
      detail::write_text(ab_out, ablation_csv(rows));
    } else if (*sw) {
      const auto cfg = sw_c.load();
      const auto ds = load_dataset(sw_data);
      const auto part = make_partition(ds, cfg.split.test_fraction, cfg.split.holdout_seed);
      const auto rows = sweep_label_ratios(part, ds.schema.k(), ds.n_classes, cfg.sweep.settings,
                                           cfg.sweep.variants, cfg.train, [](const SweepRow& r) {
                                             std::cerr << r.setting << " " << r.variant << " concept "
                                                       << r.concept_accuracy << " task " << r.task_accuracy << "\n";
                                           });
      detail::write_text(sw_out, sweep_csv(rows));
    } else if (*is) {
      const auto cfg = is_c.load();
      const auto ckpt = load_checkpoint(resolve_checkpoint_dir(is_ckpt));
      const auto ds = load_dataset(is_data);
      const auto t = read_split_table(is_split);
      const auto examples = select(ds, t, is_subset);
      const auto& iv = cfg.intervention;
      const auto ratios = ratio_grid(iv.lo, iv.hi, iv.step);
      const auto curve =
          intervention_sweep(ckpt.model, examples, ratios, iv.mode, ckpt.schema, iv.order, cfg.train.seed);
      detail::write_text(is_out, intervention_csv(curve));
    } else if (*es) {
      es_c.load();
      const auto ckpt = load_checkpoint(resolve_checkpoint_dir(es_ckpt));
      const auto ds = load_dataset(es_data);
      const auto t = read_split_table(es_split);
      auto examples = select(ds, t, es_subset);
      if (es_limit && examples.size() > es_limit) {
        examples.resize(es_limit);
      }
      for (int i : es_concepts) {
        if (i < 0 || i >= ckpt.model.config.k) {
          throw ConfigError("concept index " + std::to_string(i) + " is out of range");
        }
      }
      const auto n = export_saliency(es_out, ckpt.model, examples, es_concepts, !es_no_png);
      std::cout << "wrote " << n << " saliency maps\n";
    } else if (*sv) {
      sv_c.load();
      ServerSources src{resolve_checkpoint_dir(sv_ckpt), sv_data, sv_split, sv_saliency, sv_curve};
      if (src.checkpoint_dir.empty()) {
        throw ConfigError("serve needs --checkpoint or SSCBM_CHECKPOINT_DIR");
      }
      StateHolder holder(load_server_state(src));
      httplib::Server server;
      install_routes(server, holder);
      const int port = sv_port == 0 ? server.bind_to_any_port(sv_host) : sv_port;
      if (port < 0 || (sv_port != 0 && !server.bind_to_port(sv_host, sv_port))) {
        throw Error("cannot bind " + sv_host + ":" + std::to_string(sv_port));
      }
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread watcher;
      if (sv_watch > 0) {
        watcher = std::thread([&] {
          CheckpointWatcher w(holder, src);
          while (!g_stop) {
            std::this_thread::sleep_for(std::chrono::duration<double>(sv_watch));
            if (w.poll()) {
              std::cerr << "reloaded checkpoint\n";
            }
          }
        });
      }
      std::cout << "listening on http://" << sv_host << ":" << port << std::endl;
      server.listen_after_bind();
      g_stop = true;
      if (watcher.joinable()) {
        watcher.join();
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "sscbm: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
