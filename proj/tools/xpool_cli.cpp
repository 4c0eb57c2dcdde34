#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "xpool.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace xpool;

namespace {

struct Options {
  std::string texts, videos, manifest, out, checkpoint;
  std::string method = "mean";
  std::string direction = "t2v";
  std::string frames = "all";
  std::size_t two_stage = 0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // train
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 1e-5;
  double weight_decay = 0.2;
  double dropout = 0.3;
  std::size_t train_frames = 12;
  std::size_t checkpoint_every = 0;
  double initial_lambda = 100.0;

  // rank
  std::string query;
  std::size_t top = 10;

  // augment-sweep
  std::size_t max_transitions = 4;

  // export-attn
  std::string pairs;

  // gradcheck
  std::string target = "full_head";
  double tolerance = 1e-4;
  bool degenerate = false;

  // validate-embeddings
  std::vector<std::string> files;
  std::size_t expect_dim = 0;

  // synth
  std::size_t synth_pairs = 64, synth_dim = 32, synth_relevant = 1, synth_distractors = 3, synth_segment = 3;
  double synth_noise = 0.05;
};

// Mirrors the library error hierarchy onto process exit codes.
int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ParameterError*>(&e) || dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const StateError*>(&e)) return 3;
  if (dynamic_cast<const Error*>(&e)) return 2;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 2;
  return 3;
}

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw ParameterError(std::string("missing required option ") + flag);
  if (!fs::exists(value)) throw InputError(std::string(flag) + " path not found: '" + value + "'");
}

void require_out(const Options& o) {
  if (o.out.empty()) throw ParameterError("missing required option --out");
}

std::size_t parse_frames(const std::string& s) {
  if (s == "all") return 0;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos == s.size() && v > 0) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw ParameterError("--frames expects a positive integer or 'all', got '" + s + "'");
}

RetrievalCorpus load_inputs(const Options& o) {
  require_path(o.texts, "--texts");
  require_path(o.videos, "--videos");
  require_path(o.manifest, "--manifest");
  return load_corpus(o.texts, o.videos, o.manifest);
}

std::optional<Checkpoint> load_optional_checkpoint(const Options& o, std::size_t dim) {
  if (o.checkpoint.empty()) return std::nullopt;
  require_path(o.checkpoint, "--checkpoint");
  Checkpoint ck = load_checkpoint(o.checkpoint);
  require_head_dim(ck.head, dim);
  return ck;
}

SimilarityScorer make_scorer(const PoolingMethod& m, const std::optional<Checkpoint>& ck) {
  if (m.kind == PoolingKind::XPool && !ck) throw ParameterError("method 'xpool' needs --checkpoint");
  return SimilarityScorer::from_method(m, ck ? &ck->head : nullptr);
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

json report_json(const RankingReport& r) {
  return json{{"queries", r.queries.size()},  {"index_size", r.index_size}, {"r1", r.recall(1)},
              {"r5", r.recall(5)},            {"r10", r.recall(10)},        {"median_rank", r.median_rank},
              {"mean_rank", r.mean_rank}};
}

std::string report_row(const std::string& label, const RankingReport& r) {
  std::ostringstream s;
  s << std::left << std::setw(24) << label << "  R@1 " << fmt(r.recall(1)) << "  R@5 " << fmt(r.recall(5)) << "  R@10 "
    << fmt(r.recall(10)) << "  MdR " << fmt(r.median_rank) << "  MnR " << fmt(r.mean_rank);
  return s.str();
}

/// Output files are assembled in memory and only written once the whole
/// command has succeeded.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}
  void add(const std::string& name, std::string contents) { files_.emplace_back(name, std::move(contents)); }
  void add_jsonl(const std::string& name, const std::vector<json>& lines) {
    std::string text;
    for (const auto& l : lines) text += l.dump() + "\n";
    add(name, std::move(text));
  }
  void commit() const {
    for (const auto& [name, contents] : files_) write_file_atomic(dir_ / name, contents);
  }

 private:
  fs::path dir_;
  std::vector<std::pair<std::string, std::string>> files_;
};

std::vector<json> query_lines(const RankingReport& r) {
  std::vector<json> lines;
  for (const auto& q : r.queries) lines.push_back({{"query", q.query_id}, {"target", q.target_id}, {"rank", q.rank}});
  return lines;
}

RankingReport run_eval(const SimilarityScorer& scorer, const RetrievalCorpus& corpus, Direction dir, std::size_t two_stage,
                       std::size_t threads) {
  if (two_stage == 0) return evaluate(scorer, corpus, dir, threads);
  if (dir != Direction::T2V) throw ParameterError("--two-stage applies to t2v retrieval only");
  return evaluate_two_stage(scorer, corpus, TwoStageConfig{two_stage}, threads);
}

int cmd_train(const Options& o) {
  require_out(o);
  const RetrievalCorpus corpus = load_inputs(o);
  TrainConfig cfg;
  cfg.batch_size = o.batch_size;
  cfg.epochs = o.epochs;
  cfg.lr_head = o.lr;
  cfg.adam.weight_decay = o.weight_decay;
  cfg.dropout_rate = o.dropout;
  cfg.seed = o.seed;
  cfg.frames_per_video = o.train_frames;
  cfg.checkpoint_every = o.checkpoint_every;
  cfg.initial_lambda = o.initial_lambda;
  cfg.threads = o.threads;
  cfg.validate();

  Outputs out(o.out);
  std::optional<XPoolHead<float>> initial;
  if (auto ck = load_optional_checkpoint(o, corpus.dim())) initial = ck->head;

  CheckpointSink sink = [&](std::size_t step, const XPoolHead<float>& head, const LogitScale<float>& scale) {
    const auto bytes = encode_checkpoint(head, scale);
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_step%06zu.xpc", step);
    out.add(name, std::string(bytes.begin(), bytes.end()));
  };
  const TrainResult result = train(corpus, cfg, nullptr, initial, sink);

  const auto bytes = encode_checkpoint(result.best_head, result.best_scale);
  out.add("checkpoint.xpc", std::string(bytes.begin(), bytes.end()));
  const auto last = encode_checkpoint(result.head, result.scale);
  out.add("checkpoint_last.xpc", std::string(last.begin(), last.end()));

  std::vector<json> log;
  for (const auto& r : result.log) {
    log.push_back({{"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}, {"lambda", r.lambda}});
  }
  for (const auto& e : result.epochs) {
    json line{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
    if (e.val_r1) line["val_r1"] = *e.val_r1;
    log.push_back(line);
  }
  out.add_jsonl("train_log.jsonl", log);

  const std::size_t eval_frames = cfg.frames_per_video;
  const RankingReport report = evaluate(result.best_head, subsample_corpus(corpus, eval_frames), Direction::T2V, o.threads);
  json summary = report_json(report);
  summary["epochs"] = cfg.epochs;
  summary["best_epoch"] = result.best_epoch;
  summary["steps"] = result.total_steps;
  summary["lambda"] = result.best_scale.lambda();
  out.add_jsonl("report.jsonl", {summary});
  out.add_jsonl("report_queries.jsonl", query_lines(report));

  std::ostringstream txt;
  txt << "train: " << corpus.pairs().size() << " pairs, D=" << corpus.dim() << ", epochs " << cfg.epochs << ", steps "
      << result.total_steps << ", best epoch " << result.best_epoch << "\n";
  txt << report_row(cfg.epochs == 0 ? "xpool zero-shot t2v" : "xpool t2v", report) << "\n";
  out.add("summary.txt", txt.str());
  out.commit();
  std::cout << txt.str();
  return 0;
}

int cmd_eval(const Options& o) {
  require_out(o);
  const RetrievalCorpus corpus = subsample_corpus(load_inputs(o), parse_frames(o.frames));
  const PoolingMethod method = PoolingMethod::parse(o.method);
  const Direction dir = parse_direction(o.direction);
  const auto ck = load_optional_checkpoint(o, corpus.dim());
  const SimilarityScorer scorer = make_scorer(method, ck);
  const RankingReport report = run_eval(scorer, corpus, dir, o.two_stage, o.threads);

  json summary = report_json(report);
  summary["method"] = method.name();
  summary["direction"] = to_string(dir);
  summary["frames"] = o.frames;
  if (o.two_stage > 0) summary["two_stage_candidates"] = o.two_stage;
  Outputs out(o.out);
  out.add_jsonl("eval.jsonl", {summary});
  out.add_jsonl("eval_queries.jsonl", query_lines(report));
  const std::string txt = report_row(method.name() + " " + to_string(dir), report) + "\n";
  out.add("summary.txt", txt);
  out.commit();
  std::cout << txt;
  return 0;
}

int cmd_rank(const Options& o) {
  const RetrievalCorpus corpus = subsample_corpus(load_inputs(o), parse_frames(o.frames));
  if (o.query.empty()) throw ParameterError("rank needs --query");
  const PoolingMethod method = PoolingMethod::parse(o.method);
  const Direction dir = parse_direction(o.direction);
  const auto ck = load_optional_checkpoint(o, corpus.dim());
  const SimilarityScorer scorer = make_scorer(method, ck);

  std::vector<RankedItem> ranked;
  if (dir == Direction::T2V) {
    const auto q = corpus.text(o.query).row(0);
    if (o.two_stage > 0) {
      ranked = two_stage_rank(scorer, q, corpus.videos(), MeanPoolIndex::build(corpus.videos()), TwoStageConfig{o.two_stage});
    } else {
      ranked = rank_t2v(scorer, q, corpus.videos());
    }
  } else {
    if (o.two_stage > 0) throw ParameterError("--two-stage applies to t2v retrieval only");
    ranked = rank_v2t(scorer, corpus.video(o.query), corpus.texts());
  }
  std::vector<json> lines;
  std::ostringstream txt;
  for (std::size_t i = 0; i < std::min(o.top, ranked.size()); ++i) {
    lines.push_back({{"rank", i + 1}, {"id", ranked[i].id}, {"score", ranked[i].score}});
    txt << (i + 1) << "\t" << ranked[i].id << "\t" << std::setprecision(6) << ranked[i].score << "\n";
  }
  if (!o.out.empty()) {
    Outputs out(o.out);
    out.add_jsonl("rank.jsonl", lines);
    out.add("summary.txt", txt.str());
    out.commit();
  }
  std::cout << txt.str();
  return 0;
}

int cmd_augment_sweep(const Options& o) {
  require_out(o);
  const RetrievalCorpus corpus = subsample_corpus(load_inputs(o), parse_frames(o.frames));
  const auto ck = load_optional_checkpoint(o, corpus.dim());
  if (!ck) throw ParameterError("augment-sweep needs --checkpoint for the xpool curve");
  const Direction dir = parse_direction(o.direction);

  std::vector<json> lines;
  std::ostringstream txt;
  txt << "transitions  method  R@1     MdR\n";
  for (std::size_t n = 0; n <= o.max_transitions; ++n) {
    const AugmentationSpec spec{n, derive_seed(o.seed, "augment_donor", {n}), derive_seed(o.seed, "augment_insert", {n})};
    const RetrievalCorpus augmented = inject_transitions(corpus, spec);
    for (const auto& [name, scorer] : {std::pair{std::string("mean"), SimilarityScorer::mean()},
                                       std::pair{std::string("xpool"), SimilarityScorer::xpool(ck->head)}}) {
      const RankingReport r = evaluate(scorer, augmented, dir, o.threads);
      json rec{{"transitions", n}, {"method", name}};
      rec.update(report_json(r));
      lines.push_back(rec);
      txt << std::setw(11) << n << "  " << std::setw(6) << name << "  " << fmt(r.recall(1)) << "  " << fmt(r.median_rank) << "\n";
    }
  }
  Outputs out(o.out);
  out.add_jsonl("augment_sweep.jsonl", lines);
  out.add("summary.txt", txt.str());
  out.commit();
  std::cout << txt.str();
  return 0;
}

int cmd_khist(const Options& o) {
  require_out(o);
  const RetrievalCorpus corpus = subsample_corpus(load_inputs(o), parse_frames(o.frames));
  const auto hist = optimal_k_histogram(corpus);
  std::vector<json> lines;
  std::ostringstream txt;
  txt << "k  count\n";
  for (const auto& [k, count] : hist) {
    lines.push_back({{"k", k}, {"count", count}});
    txt << k << "  " << count << "\n";
  }
  Outputs out(o.out);
  out.add_jsonl("khist.jsonl", lines);
  out.add("summary.txt", txt.str());
  out.commit();
  std::cout << txt.str();
  return 0;
}

int cmd_frames_sweep(const Options& o) {
  require_out(o);
  const RetrievalCorpus corpus = load_inputs(o);
  const PoolingMethod method = PoolingMethod::parse(o.method);
  const Direction dir = parse_direction(o.direction);
  const auto ck = load_optional_checkpoint(o, corpus.dim());
  const SimilarityScorer scorer = make_scorer(method, ck);

  std::vector<json> lines;
  std::ostringstream txt;
  for (const std::string frames : {"6", "12", "24", "all"}) {
    const RankingReport r = run_eval(scorer, subsample_corpus(corpus, parse_frames(frames)), dir, o.two_stage, o.threads);
    json rec{{"frames", frames}, {"method", method.name()}};
    rec.update(report_json(r));
    lines.push_back(rec);
    txt << report_row("frames " + frames, r) << "\n";
  }
  Outputs out(o.out);
  out.add_jsonl("frames_sweep.jsonl", lines);
  out.add("summary.txt", txt.str());
  out.commit();
  std::cout << txt.str();
  return 0;
}

int cmd_export_attn(const Options& o) {
  require_out(o);
  const RetrievalCorpus corpus = subsample_corpus(load_inputs(o), parse_frames(o.frames));
  const auto ck = load_optional_checkpoint(o, corpus.dim());
  if (!ck) throw ParameterError("export-attn needs --checkpoint");
  std::vector<GroundTruthPair> pairs = corpus.pairs();
  if (!o.pairs.empty()) {
    require_path(o.pairs, "--pairs");
    pairs = read_manifest(o.pairs);
  }
  std::vector<json> lines;
  for (const auto& r : export_attention(ck->head, corpus, pairs)) {
    lines.push_back({{"query", r.query_id}, {"video", r.video_id}, {"frame", r.frame}, {"weight", r.weight}});
  }
  Outputs out(o.out);
  out.add_jsonl("attention.jsonl", lines);
  out.add("summary.txt", std::to_string(pairs.size()) + " pairs, " + std::to_string(lines.size()) + " attention weights\n");
  out.commit();
  std::cout << pairs.size() << " pairs exported\n";
  return 0;
}

int cmd_gradcheck(const Options& o) {
  GradCheckConfig cfg;
  cfg.target = parse_grad_check_target(o.target);
  cfg.degenerate_input = o.degenerate;
  if (!(o.tolerance > 0.0)) throw ParameterError("--tolerance must be positive");
  const GradCheckReport report = grad_check(cfg, o.seed, o.tolerance);

  std::vector<json> lines;
  std::ostringstream txt;
  for (const auto& t : report.tensors) {
    const char* status = t.status == CheckStatus::Pass ? "pass" : t.status == CheckStatus::Fail ? "FAIL" : "skipped";
    json line{{"tensor", t.name}, {"entries", t.entries}, {"max_rel_error", t.max_rel_error},
              {"max_abs_error", t.max_abs_error}, {"status", status}};
    if (!t.note.empty()) line["note"] = t.note;
    lines.push_back(line);
    txt << std::left << std::setw(20) << t.name << " " << std::setw(8) << status << " rel " << std::scientific
        << std::setprecision(3) << t.max_rel_error << std::defaultfloat;
    if (!t.note.empty()) txt << "  (" << t.note << ")";
    txt << "\n";
  }
  txt << to_string(cfg.target) << ": " << (report.skipped() ? "skipped" : report.passed() ? "pass" : "FAIL") << " at tolerance "
      << o.tolerance << "\n";
  if (!o.out.empty()) {
    Outputs out(o.out);
    out.add_jsonl("gradcheck.jsonl", lines);
    out.add("summary.txt", txt.str());
    out.commit();
  }
  std::cout << txt.str();
  return report.passed() ? 0 : 3;
}

int cmd_validate(const Options& o) {
  if (o.files.empty()) throw ParameterError("validate-embeddings needs at least one --file");
  for (const auto& f : o.files) {
    require_path(f, "--file");
    const EmbeddingCollection c = read_embeddings(f);
    if (o.expect_dim != 0 && c.dim != o.expect_dim) {
      throw DataError(f + ": dimension " + std::to_string(c.dim) + ", expected " + std::to_string(o.expect_dim));
    }
    std::size_t frames = 0;
    for (const auto& r : c.records) frames += r.values.rows();
    std::cout << f << ": ok, D=" << c.dim << ", " << c.records.size() << " records, " << frames << " rows\n";
  }
  return 0;
}

int cmd_synth(const Options& o) {
  require_out(o);
  PlantedCorpusConfig cfg;
  cfg.pairs = o.synth_pairs;
  cfg.dim = o.synth_dim;
  cfg.relevant_frames = o.synth_relevant;
  cfg.distractor_segments = o.synth_distractors;
  cfg.segment_frames = o.synth_segment;
  cfg.text_noise = cfg.frame_noise = o.synth_noise;
  cfg.seed = derive_seed(o.seed, "synth", {});
  const RetrievalCorpus corpus = make_planted_corpus(cfg);
  Outputs out(o.out);
  const auto texts = encode_embeddings({corpus.dim(), corpus.texts()});
  const auto videos = encode_embeddings({corpus.dim(), corpus.videos()});
  out.add("texts.xpe", std::string(texts.begin(), texts.end()));
  out.add("videos.xpe", std::string(videos.begin(), videos.end()));
  out.add("manifest.txt", format_manifest(corpus.pairs()));
  out.commit();
  std::cout << "wrote " << corpus.pairs().size() << " pairs (D=" << corpus.dim() << ") to " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"xpool: text-conditioned video retrieval over precomputed embeddings"};
  app.set_config("--config", "", "key = value file; command-line flags take precedence");
  app.require_subcommand(1, 1);

  app.add_option("--texts", o.texts, "XPE1 caption embeddings");
  app.add_option("--videos", o.videos, "XPE1 frame embeddings");
  app.add_option("--manifest", o.manifest, "pair manifest");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--checkpoint", o.checkpoint, "XPC1 head checkpoint");
  app.add_option("--method", o.method, "mean | topk:K | xpool")->capture_default_str();
  app.add_option("--direction", o.direction, "t2v | v2t")->capture_default_str();
  app.add_option("--frames", o.frames, "frames per video at inference: N or all")->capture_default_str();
  app.add_option("--two-stage", o.two_stage, "re-rank only the top P mean-pool candidates (0 disables)");
  app.add_option("--seed", o.seed, "root seed")->capture_default_str();
  app.add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  auto* train = app.add_subcommand("train", "train the pooling head");
  app.add_option("--epochs", o.epochs)->capture_default_str();
  app.add_option("--batch-size", o.batch_size)->capture_default_str();
  app.add_option("--lr", o.lr, "head learning rate")->capture_default_str();
  app.add_option("--weight-decay", o.weight_decay)->capture_default_str();
  app.add_option("--dropout", o.dropout)->capture_default_str();
  app.add_option("--train-frames", o.train_frames, "frames per video during training (0 keeps all)")->capture_default_str();
  app.add_option("--checkpoint-every", o.checkpoint_every, "steps between periodic checkpoints (0 disables)");
  app.add_option("--initial-lambda", o.initial_lambda)->capture_default_str();

  auto* eval = app.add_subcommand("eval", "evaluate a pooling method");
  auto* rank = app.add_subcommand("rank", "rank the index for one query");
  app.add_option("--query", o.query, "query id (text for t2v, video for v2t)");
  app.add_option("--top", o.top)->capture_default_str();
  auto* augment = app.add_subcommand("augment-sweep", "mean vs xpool under injected scene transitions");
  app.add_option("--max-transitions", o.max_transitions)->capture_default_str();
  auto* khist = app.add_subcommand("khist", "histogram of the best top-k per pair");
  auto* frames_sweep = app.add_subcommand("frames-sweep", "evaluate at 6, 12, 24 and all frames");
  auto* export_attn = app.add_subcommand("export-attn", "per-frame attention weights");
  app.add_option("--pairs", o.pairs, "manifest of pairs to export (default: corpus pairs)");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  app.add_option("--target", o.target, "linear | layer_norm | softmax | dropout | cosine | loss | full_head")->capture_default_str();
  app.add_option("--tolerance", o.tolerance)->capture_default_str();
  app.add_flag("--degenerate", o.degenerate, "layer_norm: include a zero-variance row");
  auto* validate = app.add_subcommand("validate-embeddings", "check XPE1 files");
  app.add_option("--file", o.files, "XPE1 file (repeatable)");
  app.add_option("--expect-dim", o.expect_dim, "required dimension D");
  auto* synth = app.add_subcommand("synth", "write a planted synthetic corpus");
  app.add_option("--pairs-count", o.synth_pairs)->capture_default_str();
  app.add_option("--dim", o.synth_dim)->capture_default_str();
  app.add_option("--relevant-frames", o.synth_relevant)->capture_default_str();
  app.add_option("--distractor-segments", o.synth_distractors)->capture_default_str();
  app.add_option("--segment-frames", o.synth_segment)->capture_default_str();
  app.add_option("--noise", o.synth_noise)->capture_default_str();

  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (rank->parsed()) return cmd_rank(o);
    if (augment->parsed()) return cmd_augment_sweep(o);
    if (khist->parsed()) return cmd_khist(o);
    if (frames_sweep->parsed()) return cmd_frames_sweep(o);
    if (export_attn->parsed()) return cmd_export_attn(o);
    if (gradcheck->parsed()) return cmd_gradcheck(o);
    if (validate->parsed()) return cmd_validate(o);
    if (synth->parsed()) return cmd_synth(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}
