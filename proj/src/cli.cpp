#include "preq/cli.hpp"

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "preq/annotate.hpp"
#include "preq/datastore.hpp"
#include "preq/embedding_cache.hpp"
#include "preq/error.hpp"
#include "preq/filtering.hpp"
#include "preq/mock_backend.hpp"
#include "preq/preference.hpp"
#include "preq/similarity.hpp"
#include "preq/synthesis.hpp"

namespace preq::cli {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest

json RunManifest::to_json() const {
  json stages_j = json::array();
  for (const auto& s : stages) {
    stages_j.push_back({{"stage", s.stage},
                        {"started_at", s.started_at},
                        {"finished_at", s.finished_at},
                        {"inputs", s.inputs},
                        {"outputs", s.outputs},
                        {"counters", s.counters}});
  }
  return {{"run_id", run_id}, {"job", job_path}, {"stages", stages_j}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.run_id = j.value("run_id", std::string{});
  m.job_path = j.value("job", std::string{});
  for (const auto& s : j.value("stages", json::array())) {
    StageEntry e;
    e.stage = s.value("stage", std::string{});
    e.started_at = s.value("started_at", std::string{});
    e.finished_at = s.value("finished_at", std::string{});
    e.inputs = s.value("inputs", json::object());
    e.outputs = s.value("outputs", json::object());
    e.counters = s.value("counters", json::object());
    m.stages.push_back(std::move(e));
  }
  return m;
}

std::optional<RunManifest> RunManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  auto j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return from_json(j);
}

void RunManifest::save(const fs::path& path) const {
  const std::string body = to_json().dump(2);
  std::vector<std::string> lines;
  std::istringstream ss(body);
  for (std::string l; std::getline(ss, l);) lines.push_back(l);
  write_lines_atomic(path, lines);
}

fs::path manifest_path_for(const fs::path& dataset) { return fs::path(dataset.string() + ".manifest.json"); }

namespace {

// ---------------------------------------------------------------------------
// Signals

std::atomic<int> g_signal{0};

extern "C" void on_signal(int sig) { g_signal.store(sig); }

/// Calls `fn` once after SIGINT or SIGTERM arrives; restores the old handlers on exit.
class SignalWatcher {
 public:
  explicit SignalWatcher(std::function<void()> fn) : fn_(std::move(fn)) {
    g_signal.store(0);
    old_int_ = std::signal(SIGINT, on_signal);
    old_term_ = std::signal(SIGTERM, on_signal);
    thread_ = std::jthread([this](std::stop_token st) {
      while (!st.stop_requested()) {
        if (g_signal.load() != 0) {
          fn_();
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
      }
    });
  }
  ~SignalWatcher() {
    thread_.request_stop();
    thread_.join();
    std::signal(SIGINT, old_int_);
    std::signal(SIGTERM, old_term_);
  }
  bool fired() const { return g_signal.load() != 0; }

 private:
  std::function<void()> fn_;
  void (*old_int_)(int) = SIG_DFL;
  void (*old_term_)(int) = SIG_DFL;
  std::jthread thread_;
};

// ---------------------------------------------------------------------------
// Options and clients

struct Common {
  bool mock = false;
  int mock_latency_ms = 0;
  int mock_embed_dim = 64;
  double mock_empty_rate = 0.0;
  int max_in_flight = 8;
  int workers = 0;
  int max_attempts = 4;
  std::string templates_file;
  std::string manifest;
  std::string model;
  std::string judge_model;
  std::string reward_model;
  std::string guard_model;
  std::string embed_model;
  std::string base_model;
};

enum class Role { gen, judge, reward, guard, embed, base };

struct RoleInfo {
  const char* name;
  const char* endpoint_env;
  const char* key_env;
};

RoleInfo role_info(Role r) {
  switch (r) {
    case Role::gen:
      return {"gen", "PREQ_ENDPOINT", "PREQ_API_KEY"};
    case Role::judge:
      return {"judge", "PREQ_JUDGE_ENDPOINT", "PREQ_JUDGE_API_KEY"};
    case Role::reward:
      return {"reward", "PREQ_REWARD_ENDPOINT", "PREQ_REWARD_API_KEY"};
    case Role::guard:
      return {"guard", "PREQ_GUARD_ENDPOINT", "PREQ_GUARD_API_KEY"};
    case Role::embed:
      return {"embed", "PREQ_EMBED_ENDPOINT", "PREQ_EMBED_API_KEY"};
    case Role::base:
      return {"base", "PREQ_BASE_ENDPOINT", "PREQ_BASE_API_KEY"};
  }
  return {"gen", "PREQ_ENDPOINT", "PREQ_API_KEY"};
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

class Context {
 public:
  explicit Context(const Common& c) : opts(c) {}

  Client& client(Role role) {
    auto& slot = clients_[role];
    if (slot) return *slot;
    const RoleInfo info = role_info(role);
    ClientConfig cfg;
    cfg.max_in_flight = opts.max_in_flight;
    cfg.retry.max_attempts = opts.max_attempts;
    cfg.model = model_for(role);
    std::shared_ptr<Backend> backend;
    if (opts.mock) {
      cfg.base_url = "mock://";
      backend = mock();
    } else {
      auto url = env(info.endpoint_env);
      auto key = env(info.key_env);
      if (role != Role::gen) {
        if (!url) url = env("PREQ_ENDPOINT");
        if (!key) key = env("PREQ_API_KEY");
      }
      if (!url) {
        throw ConfigError(std::string("no ") + info.name + " endpoint: set " + info.endpoint_env +
                          (role == Role::gen ? "" : " or PREQ_ENDPOINT") + ", or pass --mock");
      }
      if (cfg.model.empty()) {
        throw ConfigError(std::string("no model name for the ") + info.name + " endpoint (see --help)");
      }
      cfg.base_url = *url;
      cfg.auth_token = key;
      cfg.validate();
      backend = std::make_shared<HttpBackend>(cfg);
    }
    slot = std::make_unique<Client>(cfg, backend);
    return *slot;
  }

  const TemplateRegistry& templates() {
    if (!templates_) {
      templates_ = opts.templates_file.empty() ? TemplateRegistry::builtin()
                                               : TemplateRegistry::from_file(opts.templates_file);
    }
    return *templates_;
  }

  /// Timestamps are pinned under --mock so mock runs are byte-reproducible.
  Clock clock() const { return opts.mock ? fixed_clock() : system_clock_utc(); }
  std::string now() const { return clock()(); }

  std::string model_for(Role role) const {
    const std::string* specific = nullptr;
    switch (role) {
      case Role::gen:
        break;
      case Role::judge:
        specific = &opts.judge_model;
        break;
      case Role::reward:
        specific = &opts.reward_model;
        break;
      case Role::guard:
        specific = &opts.guard_model;
        break;
      case Role::embed:
        specific = &opts.embed_model;
        break;
      case Role::base:
        specific = &opts.base_model;
        break;
    }
    if (specific && !specific->empty()) return *specific;
    if (role == Role::gen || (role == Role::judge && !opts.model.empty())) {
      if (!opts.model.empty()) return opts.model;
    }
    if (opts.mock) return std::string("mock-") + role_info(role).name;
    return {};
  }

  const Common& opts;

 private:
  std::shared_ptr<MockBackend> mock() {
    if (!mock_) {
      MockBackend::Options mo;
      mo.latency = std::chrono::milliseconds(opts.mock_latency_ms);
      mo.embedding_dim = opts.mock_embed_dim;
      mo.empty_rate = opts.mock_empty_rate;
      mock_ = std::make_shared<MockBackend>(mo);
    }
    return mock_;
  }

  std::shared_ptr<MockBackend> mock_;
  std::map<Role, std::unique_ptr<Client>> clients_;
  std::optional<TemplateRegistry> templates_;
};

// ---------------------------------------------------------------------------
// Shared stage plumbing

std::vector<DatasetRecord> load_records(const std::string& path, json& counters) {
  if (!fs::exists(path)) throw ConfigError("input file not found: " + path);
  Dataset d = read_dataset(path);
  counters["records_in"] = d.records.size();
  if (!d.report.bad_lines.empty()) {
    counters["bad_lines"] = d.report.bad_lines.size();
    std::size_t shown = 0;
    for (const auto& b : d.report.bad_lines) {
      if (shown++ == 5) break;
      std::cerr << path << ":" << b.line_number << ": skipped: " << b.error << "\n";
    }
    if (d.report.bad_lines.size() > 5) std::cerr << "(" << d.report.bad_lines.size() << " bad lines in total)\n";
  }
  return std::move(d.records);
}

std::vector<Instance> instances_of(const std::vector<DatasetRecord>& records) {
  std::vector<Instance> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.instance);
  return out;
}

/// Starts a stage record, inheriting the manifest that accompanies `input` when present.
struct Stage {
  RunManifest manifest;
  StageEntry entry;
};

Stage begin_stage(Context& ctx, std::string name, const std::string& input) {
  Stage s;
  if (!input.empty()) {
    if (auto m = RunManifest::load(manifest_path_for(input))) s.manifest = std::move(*m);
    s.entry.inputs["in"] = input;
  }
  s.entry.stage = std::move(name);
  s.entry.started_at = ctx.now();
  return s;
}

void end_stage(Context& ctx, Stage& s, const std::string& output) {
  s.entry.finished_at = ctx.now();
  s.entry.outputs["out"] = output;
  s.manifest.stages.push_back(s.entry);
  const fs::path where = ctx.opts.manifest.empty() ? manifest_path_for(output) : fs::path(ctx.opts.manifest);
  s.manifest.save(where);
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

JobSpec job_or_default(const std::string& job_path, const std::string& template_family) {
  JobSpec job;
  if (!job_path.empty()) job = load_job(job_path);
  if (!template_family.empty()) job.template_family = template_family;
  return job;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::string job;
  std::string out;
  std::string checkpoint;
  std::string run_id;
  std::string preset;
  double scale = 1.0;
  std::int64_t count = 0;
  std::string domain;
  std::string template_family;
  bool fresh = false;
};

JobSpec build_job(Context& ctx, const GenArgs& a) {
  json j = json::object();
  if (!a.job.empty()) {
    std::ifstream in(a.job);
    if (!in) throw ConfigError("cannot read job file " + a.job);
    j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("job file " + a.job + " is not a JSON object");
  }
  if (!a.preset.empty()) {
    j.erase("shards");
    j.erase("count");
    j["preset"] = a.preset;
    j["scale"] = a.scale;
  } else if (a.count > 0) {
    j.erase("shards");
    j.erase("preset");
    j["count"] = a.count;
  }
  if (!a.domain.empty()) {
    j.erase("system_prompt");
    j["domain"] = a.domain;
  }
  if (!a.run_id.empty()) j["run_id"] = a.run_id;
  if (!a.template_family.empty()) j["template_family"] = a.template_family;
  JobSpec job = job_from_json(j);
  if (job.model_id.empty()) job.model_id = ctx.model_for(Role::gen);
  job.validate();
  return job;
}

int cmd_gen(Context& ctx, const GenArgs& a) {
  if (a.out.empty()) throw ConfigError("gen: --out is required");
  const JobSpec job = build_job(ctx, a);
  const fs::path out = a.out;
  const fs::path ckpt_path = a.checkpoint.empty() ? fs::path(a.out + ".ckpt") : fs::path(a.checkpoint);
  if (a.fresh) {
    fs::remove(out);
    fs::remove(ckpt_path);
  }
  Stage stage = begin_stage(ctx, "gen", "");
  stage.manifest.run_id = job.run_id;
  stage.manifest.job_path = a.job;
  stage.entry.inputs["job"] = a.job;
  stage.entry.inputs["checkpoint"] = ckpt_path.string();

  Checkpoint checkpoint(ckpt_path);
  std::int64_t carried = 0;
  if (fs::exists(out)) {
    // Lines already written win over the checkpoint: a crash may land between the two.
    LineSink::repair_tail(out);
    const std::string prefix = job.run_id + "-";
    for_each_record(out, [&](DatasetRecord r) {
      if (!r.instance.id.starts_with(prefix)) {
        throw ConfigError("gen: " + out.string() + " holds records of another run (" + r.instance.id +
                          "); pass --fresh to start over");
      }
      checkpoint.mark({r.instance.shard_index, r.instance.slot, true});
      ++carried;
    });
  }

  Client& client = ctx.client(Role::gen);
  std::stop_source stop;
  RunReport report;
  {
    DatasetWriter writer(out);
    SignalWatcher watcher([&] { stop.request_stop(); });
    GenerateOptions go;
    go.checkpoint = &checkpoint;
    go.stop = stop.get_token();
    go.clock = ctx.clock();
    go.workers = ctx.opts.workers;
    report = generate_instructions(job, client, ctx.templates(), [&](Instance inst) { writer.append(make_record(std::move(inst))); },
                                   go);
    writer.flush();
  }

  // Canonical order: by (shard, slot), one record per slot.
  std::map<std::pair<int, std::int64_t>, std::string> lines;
  for_each_record(out, [&](DatasetRecord r) {
    lines.emplace(std::make_pair(r.instance.shard_index, r.instance.slot), record_to_json(r).dump());
  });
  std::vector<std::string> ordered;
  ordered.reserve(lines.size());
  for (auto& [key, line] : lines) ordered.push_back(std::move(line));
  write_lines_atomic(out, ordered);

  json rejected = json::object();
  for (const auto& sr : report.shards) {
    for (const auto& [reason, n] : sr.rejected) rejected[reason] = rejected.value(reason, std::int64_t{0}) + n;
  }
  stage.entry.counters = {{"requested", job.total_count()},
                          {"accepted", report.accepted()},
                          {"shortfall", report.shortfall()},
                          {"rejected", rejected},
                          {"records_out", ordered.size()},
                          {"carried_over", carried},
                          {"interrupted", report.interrupted}};
  stage.entry.outputs["report"] = report.to_json();
  end_stage(ctx, stage, a.out);
  print_json(report.to_json());
  if (report.interrupted) {
    std::cerr << "gen: interrupted; rerun the same command to resume\n";
    return 130;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// respond / mt

struct RespondArgs {
  std::string in;
  std::string out;
  std::string job;
  std::string template_family;
  int max_new_tokens = 0;
  int turns = 0;  // mt only
};

void replace_instances(std::vector<DatasetRecord>& records, std::vector<Instance>& instances) {
  for (std::size_t i = 0; i < records.size(); ++i) records[i].instance = std::move(instances[i]);
}

int cmd_respond(Context& ctx, const RespondArgs& a) {
  Stage stage = begin_stage(ctx, "respond", a.in);
  auto records = load_records(a.in, stage.entry.counters);
  JobSpec job = job_or_default(a.job, a.template_family);
  if (a.max_new_tokens > 0) job.response_sampling.max_new_tokens = a.max_new_tokens;
  auto instances = instances_of(records);
  const auto rep = generate_responses(instances, job, ctx.client(Role::gen), ctx.templates(), ctx.opts.workers);
  replace_instances(records, instances);
  write_dataset(a.out, records);
  stage.entry.counters["completed"] = rep.completed;
  stage.entry.counters["empty_responses"] = rep.empty_responses;
  stage.entry.counters["skipped"] = rep.skipped;
  stage.entry.counters["records_out"] = records.size();
  end_stage(ctx, stage, a.out);
  print_json(stage.entry.counters);
  return 0;
}

int cmd_mt(Context& ctx, const RespondArgs& a) {
  Stage stage = begin_stage(ctx, "mt", a.in);
  auto records = load_records(a.in, stage.entry.counters);
  JobSpec job = job_or_default(a.job, a.template_family);
  if (a.turns > 0) job.target_turns = a.turns;
  if (job.target_turns < 2) throw ConfigError("mt: --turns must be at least 2");
  if (a.max_new_tokens > 0) job.response_sampling.max_new_tokens = a.max_new_tokens;
  auto instances = instances_of(records);
  const auto rep = extend_multiturn(instances, job, ctx.client(Role::gen), ctx.templates(), ctx.opts.workers);
  replace_instances(records, instances);
  write_dataset(a.out, records);
  stage.entry.counters["extended"] = rep.extended;
  stage.entry.counters["turns_added"] = rep.turns_added;
  stage.entry.counters["shortfall"] = rep.shortfall;
  stage.entry.counters["incomplete"] = rep.incomplete;
  stage.entry.counters["rejected"] = rep.rejected;
  stage.entry.counters["records_out"] = records.size();
  end_stage(ctx, stage, a.out);
  print_json(stage.entry.counters);
  return 0;
}

// ---------------------------------------------------------------------------
// annotate

struct AnnotateArgs {
  std::string in;
  std::string out;
  std::string metrics = "judge,reward,guard";
  std::string base_responses;
  std::string base_prompt;
  std::vector<std::string> base_stop;
  std::string guard_labels;
};

std::set<std::string> parse_metrics(const std::string& spec) {
  static const std::set<std::string> known = {"judge", "reward", "guard"};
  std::set<std::string> out;
  std::stringstream ss(spec);
  for (std::string m; std::getline(ss, m, ',');) {
    if (m.empty()) continue;
    if (m == "all") return known;
    if (!known.contains(m)) throw ConfigError("unknown metric group '" + m + "' (judge, reward, guard, all)");
    out.insert(m);
  }
  if (out.empty()) throw ConfigError("annotate: no metrics selected");
  return out;
}

int cmd_annotate(Context& ctx, const AnnotateArgs& a) {
  Stage stage = begin_stage(ctx, "annotate", a.in);
  auto records = load_records(a.in, stage.entry.counters);
  const auto metrics = parse_metrics(a.metrics);

  AnnotateOptions opts;
  opts.workers = ctx.opts.workers;
  if (metrics.contains("judge")) {
    opts.judge = &ctx.client(Role::judge);
    opts.judge_model = opts.judge->config().model;
  }
  if (metrics.contains("reward")) opts.reward = &ctx.client(Role::reward);
  if (metrics.contains("guard")) opts.guard = &ctx.client(Role::guard);
  if (!a.guard_labels.empty()) opts.guard_labels = GuardLabelMap::from_file(a.guard_labels);
  std::unique_ptr<BaseResponseProvider> base;
  if (!a.base_responses.empty()) {
    base = std::make_unique<MapBaseResponses>(MapBaseResponses::from_file(a.base_responses));
  } else if (!a.base_prompt.empty()) {
    base = std::make_unique<CompletionBaseResponses>(ctx.client(Role::base), a.base_prompt, a.base_stop);
  }
  opts.base = base.get();
  if (opts.base && !opts.reward) throw ConfigError("annotate: base responses need the reward metric");

  const auto instances = instances_of(records);
  std::vector<AnnotationRecord> ann(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].annotations) ann[i] = *records[i].annotations;
    ann[i].instance_id = records[i].instance.id;
  }
  annotate_instances(instances, ann, opts);

  std::int64_t failures = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!ann[i].parse_ok) ++failures;
    records[i].annotations = std::move(ann[i]);
  }
  write_dataset(a.out, records);
  stage.entry.inputs["metrics"] = a.metrics;
  stage.entry.counters["annotated"] = records.size();
  stage.entry.counters["parse_failures"] = failures;
  stage.entry.counters["records_out"] = records.size();
  end_stage(ctx, stage, a.out);
  print_json(stage.entry.counters);
  return 0;
}

// ---------------------------------------------------------------------------
// embed-dedup

struct DedupArgs {
  std::string in;
  std::string out;
  double threshold = 0.0;
  std::string metric = "cosine";
  std::string cache;
  bool keep_all = false;
};

void set_distances(std::vector<DatasetRecord>& records, const Eigen::MatrixXd& emb, DistanceMetric metric,
                   int workers) {
  for (auto& r : records) {
    if (!r.annotations) {
      r.annotations.emplace();
      r.annotations->instance_id = r.instance.id;
    }
    r.annotations->min_neighbor_distance.reset();
  }
  if (records.size() < 2) return;
  const auto reports = min_neighbor_distances(emb, metric, 256, std::max(workers, 1));
  for (const auto& rep : reports) records[rep.index].annotations->min_neighbor_distance = rep.min_distance;
}

int cmd_embed_dedup(Context& ctx, const DedupArgs& a) {
  Stage stage = begin_stage(ctx, "embed-dedup", a.in);
  auto records = load_records(a.in, stage.entry.counters);
  DistanceMetric metric;
  if (a.metric == "cosine") {
    metric = DistanceMetric::cosine;
  } else if (a.metric == "euclidean") {
    metric = DistanceMetric::euclidean;
  } else {
    throw ConfigError("unknown metric '" + a.metric + "' (cosine, euclidean)");
  }
  if (!(a.threshold >= 0)) throw ConfigError("embed-dedup: --threshold must be >= 0");

  std::vector<std::string> texts;
  std::vector<std::string> ids;
  for (const auto& r : records) {
    texts.push_back(r.instance.turns.front().instruction);
    ids.push_back(r.instance.id);
  }
  std::unique_ptr<EmbeddingCache> cache;
  if (!a.cache.empty()) cache = std::make_unique<EmbeddingCache>(a.cache);
  const Eigen::MatrixXd emb = embed_cached(texts, ctx.client(Role::embed), cache.get());
  const int workers = ctx.opts.workers > 0 ? ctx.opts.workers : 1;

  std::vector<std::size_t> keep(records.size());
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  if (records.size() >= 2 && !a.keep_all) {
    const auto reps = neighbor_reports(std::span<const std::string>(ids), emb, metric, workers);
    const auto kept_ids = dedup(reps, a.threshold);
    const std::set<std::string> kept_set(kept_ids.begin(), kept_ids.end());
    keep.clear();
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (kept_set.contains(ids[i])) keep.push_back(i);
    }
  }
  std::vector<DatasetRecord> kept;
  Eigen::MatrixXd kept_emb(static_cast<Eigen::Index>(keep.size()), emb.cols());
  for (std::size_t k = 0; k < keep.size(); ++k) {
    kept.push_back(std::move(records[keep[k]]));
    kept_emb.row(static_cast<Eigen::Index>(k)) = emb.row(static_cast<Eigen::Index>(keep[k]));
  }
  // Distances are reported against the surviving set, so a kept representative is not
  // scored against the copies that were dropped.
  set_distances(kept, kept_emb, metric, workers);
  write_dataset(a.out, kept);

  stage.entry.inputs["threshold"] = a.threshold;
  stage.entry.inputs["metric"] = a.metric;
  stage.entry.counters["removed"] = records.size() - kept.size();
  stage.entry.counters["records_out"] = kept.size();
  if (cache) stage.entry.counters["cache_entries"] = cache->size();
  end_stage(ctx, stage, a.out);
  print_json(stage.entry.counters);
  return 0;
}

// ---------------------------------------------------------------------------
// filter

struct FilterArgs {
  std::string in;
  std::string out;
  std::string config;
  std::int64_t target = 0;
  std::optional<std::uint64_t> seed;
  std::string report;
  bool list = false;
};

FilterConfig resolve_config(const std::string& spec) {
  if (fs::exists(spec) && fs::is_regular_file(spec)) return load_filter_config(spec);
  return builtin_config(spec);
}

int cmd_filter(Context& ctx, const FilterArgs& a) {
  if (a.list) {
    json all = json::array();
    for (const auto& c : builtin_configs()) all.push_back(filter_config_to_json(c));
    print_json(all);
    return 0;
  }
  if (a.config.empty()) throw ConfigError("filter: --config is required");
  if (a.in.empty() || a.out.empty()) throw ConfigError("filter: --in and --out are required");
  FilterConfig cfg = resolve_config(a.config);
  if (a.target > 0) cfg.target_count = a.target;
  if (a.seed) cfg.seed = *a.seed;
  Stage stage = begin_stage(ctx, "filter", a.in);
  auto records = load_records(a.in, stage.entry.counters);
  std::vector<AnnotationRecord> ann(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].annotations) ann[i] = *records[i].annotations;
    ann[i].instance_id = records[i].instance.id;
  }
  const auto res = apply_filter(ann, cfg, std::max(ctx.opts.workers, 1));
  std::vector<DatasetRecord> selected;
  selected.reserve(res.selected.size());
  for (std::size_t i : res.selected) selected.push_back(std::move(records[i]));
  write_dataset(a.out, selected);
  if (!a.report.empty()) {
    std::ofstream rep(a.report);
    rep << res.report.to_json().dump(2) << "\n";
  }
  stage.entry.inputs["config"] = filter_config_to_json(cfg);
  stage.entry.counters["report"] = res.report.to_json();
  stage.entry.counters["records_out"] = selected.size();
  end_stage(ctx, stage, a.out);
  print_json(res.report.to_json());
  if (res.report.shortfall > 0) {
    std::cerr << "filter: " << res.report.shortfall << " short of the target of " << cfg.target_count << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// dpo

struct DpoArgs {
  std::string in;
  std::string out;
  int k = 5;
  double temp = 0.8;
  double top_p = 1.0;
  int max_new_tokens = 2048;
  std::int64_t limit = 0;
  std::string mode = "ksample";
  std::string base_responses;
  std::string template_family = "llama-3";
  std::string run_id;
};

int cmd_dpo(Context& ctx, const DpoArgs& a) {
  Stage stage = begin_stage(ctx, "dpo", a.in);
  auto records = load_records(a.in, stage.entry.counters);
  if (a.limit > 0 && static_cast<std::size_t>(a.limit) < records.size()) records.resize(static_cast<std::size_t>(a.limit));
  auto instances = instances_of(records);
  std::vector<PreferencePair> pairs;
  if (a.mode == "ksample") {
    KSampleConfig kc;
    kc.k = a.k;
    kc.temperature = a.temp;
    kc.top_p = a.top_p;
    kc.max_new_tokens = a.max_new_tokens;
    kc.template_family = a.template_family;
    kc.run_id = !a.run_id.empty() ? a.run_id : !stage.manifest.run_id.empty() ? stage.manifest.run_id : "dpo";
    kc.workers = ctx.opts.workers;
    kc.validate();
    auto res = build_ksample_pairs(instances, kc, ctx.client(Role::gen), ctx.client(Role::reward), ctx.templates());
    pairs = std::move(res.pairs);
    stage.entry.counters["report"] = res.report.to_json();
    stage.entry.inputs["k"] = a.k;
    stage.entry.inputs["temperature"] = a.temp;
  } else if (a.mode == "base-contrast") {
    if (a.base_responses.empty()) throw ConfigError("dpo: base-contrast mode needs --base-responses");
    auto base = MapBaseResponses::from_file(a.base_responses);
    Client& reward = ctx.client(Role::reward);
    std::int64_t missing = 0;
    std::int64_t not_better = 0;
    for (const auto& inst : instances) {
      const auto& t = inst.turns.front();
      auto b = base.base_response(inst);
      if (!t.response || t.response->empty() || !b || b->empty()) {
        ++missing;
        continue;
      }
      auto p = build_base_contrast_pair(t.instruction, *t.response, *b, reward);
      if (!p) {
        ++not_better;
        continue;
      }
      p->id = inst.id;
      pairs.push_back(std::move(*p));
    }
    stage.entry.counters["missing"] = missing;
    stage.entry.counters["not_better"] = not_better;
  } else {
    throw ConfigError("dpo: unknown --mode '" + a.mode + "' (ksample, base-contrast)");
  }
  write_preferences(a.out, pairs);
  stage.entry.counters["pairs_out"] = pairs.size();
  end_stage(ctx, stage, a.out);
  print_json(stage.entry.counters);
  return 0;
}

// ---------------------------------------------------------------------------
// stats / cost / serve-mock

int cmd_stats(Context&, const std::string& in, const std::string& out) {
  json counters;
  auto records = load_records(in, counters);
  const auto s = compute_stats(records);
  json j = s.to_json();
  if (counters.contains("bad_lines")) j["bad_lines"] = counters["bad_lines"];
  if (!out.empty()) {
    std::ofstream f(out);
    f << j.dump(2) << "\n";
  }
  print_json(j);
  return 0;
}

int cmd_cost(double hours, std::int64_t instances, double rate) {
  if (instances < 1) throw ConfigError("cost: --instances must be >= 1");
  const double c = estimate_cost(hours, instances, rate);
  print_json({{"gpu_hours", hours}, {"instances", instances}, {"hourly_rate", rate}, {"cost_per_1k", c}});
  return 0;
}

int cmd_serve_mock(const Common& c, const std::string& host, int port) {
  MockBackend::Options mo;
  mo.latency = std::chrono::milliseconds(c.mock_latency_ms);
  mo.embedding_dim = c.mock_embed_dim;
  mo.empty_rate = c.mock_empty_rate;
  auto backend = std::make_shared<MockBackend>(mo);
  MockServer server(backend, host, port);
  std::cout << server.base_url() << std::endl;
  SignalWatcher watcher([&] { server.stop(); });
  server.wait();
  return 0;
}

// ---------------------------------------------------------------------------
// pipeline

struct PipelineArgs {
  GenArgs gen;
  std::string dir;
  std::string config = "Pro-Filter";
  std::int64_t target = 0;
  std::string metrics = "judge,reward,guard";
  double threshold = 0.0;
};

int cmd_pipeline(Context& ctx, PipelineArgs a) {
  if (a.dir.empty()) throw ConfigError("pipeline: --dir is required");
  fs::create_directories(a.dir);
  auto path = [&](const char* name) { return (fs::path(a.dir) / name).string(); };
  a.gen.out = path("raw.jsonl");
  if (int rc = cmd_gen(ctx, a.gen); rc != 0) return rc;
  RespondArgs r;
  r.in = path("raw.jsonl");
  r.out = path("responded.jsonl");
  r.job = a.gen.job;
  r.template_family = a.gen.template_family;
  cmd_respond(ctx, r);
  AnnotateArgs an;
  an.in = r.out;
  an.out = path("annotated.jsonl");
  an.metrics = a.metrics;
  cmd_annotate(ctx, an);
  DedupArgs d;
  d.in = an.out;
  d.out = path("dedup.jsonl");
  d.threshold = a.threshold;
  cmd_embed_dedup(ctx, d);
  FilterArgs f;
  f.in = d.out;
  f.out = path("filtered.jsonl");
  f.config = a.config;
  f.target = a.target;
  return cmd_filter(ctx, f);
}

int exit_code_of(const Error& e) { return static_cast<int>(e.error_class()); }

}  // namespace

// ---------------------------------------------------------------------------
// Entry point

int run(int argc, const char* const* argv) {
  CLI::App app{"Synthesize, annotate, curate and pair instruction-tuning data from aligned chat models.", "preq"};
  app.require_subcommand(1);
  app.footer(
      "Endpoints come from the environment: PREQ_ENDPOINT and PREQ_API_KEY for generation;\n"
      "PREQ_EMBED_ENDPOINT, PREQ_JUDGE_ENDPOINT, PREQ_REWARD_ENDPOINT, PREQ_GUARD_ENDPOINT and\n"
      "PREQ_BASE_ENDPOINT (each with an optional *_API_KEY) fall back to PREQ_ENDPOINT.\n"
      "Exit codes: 0 ok, 1 usage, 2 config, 3 transport, 4 data integrity, 130 interrupted.");

  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_models) {
    sub->add_flag("--mock", common.mock, "Use the built-in deterministic mock backend");
    sub->add_option("--mock-latency-ms", common.mock_latency_ms, "Per-request latency of the mock")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--mock-embed-dim", common.mock_embed_dim, "Embedding width of the mock")->check(CLI::PositiveNumber);
    sub->add_option("--mock-empty-rate", common.mock_empty_rate, "Probability of an empty mock completion")
        ->check(CLI::Range(0.0, 1.0));
    sub->add_option("--max-in-flight", common.max_in_flight, "Concurrent requests per endpoint")
        ->check(CLI::PositiveNumber);
    sub->add_option("--workers", common.workers, "Worker threads (0: --max-in-flight)")->check(CLI::NonNegativeNumber);
    sub->add_option("--max-attempts", common.max_attempts, "Attempts per request, retries included")
        ->check(CLI::PositiveNumber);
    sub->add_option("--templates", common.templates_file, "Extra chat-template registry (JSON)")
        ->check(CLI::ExistingFile);
    sub->add_option("--manifest", common.manifest, "Manifest path (default: <out>.manifest.json)");
    if (needs_models) {
      sub->add_option("--model", common.model, "Model served at PREQ_ENDPOINT");
      sub->add_option("--judge-model", common.judge_model, "Judge model name");
      sub->add_option("--reward-model", common.reward_model, "Reward model name");
      sub->add_option("--guard-model", common.guard_model, "Guard model name");
      sub->add_option("--embed-model", common.embed_model, "Embedding model name");
      sub->add_option("--base-model", common.base_model, "Base model name");
    }
  };

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Step 1: sample instructions from the pre-query template");
  add_common(gen_cmd, true);
  gen_cmd->add_option("--job", gen.job, "Job file (JSON)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Output dataset (JSONL)")->required();
  gen_cmd->add_option("--checkpoint", gen.checkpoint, "Progress log (default: <out>.ckpt)");
  gen_cmd->add_option("--run-id", gen.run_id, "Run id; seeds and record ids derive from it");
  gen_cmd->add_option("--preset", gen.preset, "Shard preset: air or pro");
  gen_cmd->add_option("--scale", gen.scale, "Multiplier for preset shard counts")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--count", gen.count, "Single T=1.0, top-p=1.0 shard of this size")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--domain", gen.domain, "Shipped domain system prompt (math, code, translation, ja-math)");
  gen_cmd->add_option("--template", gen.template_family, "Chat template family");
  gen_cmd->add_flag("--fresh", gen.fresh, "Discard earlier output and checkpoint");

  RespondArgs respond;
  auto* respond_cmd = app.add_subcommand("respond", "Step 2: answer every pending instruction");
  add_common(respond_cmd, true);
  respond_cmd->add_option("--in", respond.in, "Input dataset")->required();
  respond_cmd->add_option("--out", respond.out, "Output dataset")->required();
  respond_cmd->add_option("--job", respond.job, "Job file for template and response sampling")->check(CLI::ExistingFile);
  respond_cmd->add_option("--template", respond.template_family, "Chat template family");
  respond_cmd->add_option("--max-new-tokens", respond.max_new_tokens, "Response length cap")->check(CLI::PositiveNumber);

  RespondArgs mt;
  auto* mt_cmd = app.add_subcommand("mt", "Grow conversations to --turns turns");
  add_common(mt_cmd, true);
  mt_cmd->add_option("--in", mt.in, "Input dataset (first turn answered)")->required();
  mt_cmd->add_option("--out", mt.out, "Output dataset")->required();
  mt_cmd->add_option("--turns", mt.turns, "Target number of turns")->check(CLI::Range(2, 64));
  mt_cmd->add_option("--job", mt.job, "Job file")->check(CLI::ExistingFile);
  mt_cmd->add_option("--template", mt.template_family, "Chat template family");
  mt_cmd->add_option("--max-new-tokens", mt.max_new_tokens, "Response length cap")->check(CLI::PositiveNumber);

  AnnotateArgs annotate;
  auto* annotate_cmd = app.add_subcommand("annotate", "Tag category, quality, difficulty, reward and safety");
  add_common(annotate_cmd, true);
  annotate_cmd->add_option("--in", annotate.in, "Input dataset")->required();
  annotate_cmd->add_option("--out", annotate.out, "Output dataset")->required();
  annotate_cmd->add_option("--metrics", annotate.metrics, "Comma list of judge, reward, guard, or all");
  annotate_cmd->add_option("--base-responses", annotate.base_responses, "JSONL of {id, response} from a base model")
      ->check(CLI::ExistingFile);
  annotate_cmd->add_option("--base-prompt", annotate.base_prompt,
                           "Prompt with {instruction} for sampling base responses at PREQ_BASE_ENDPOINT");
  annotate_cmd->add_option("--base-stop", annotate.base_stop, "Stop sequence for base sampling (repeatable)");
  annotate_cmd->add_option("--guard-labels", annotate.guard_labels, "Guard code to label map (JSON)")
      ->check(CLI::ExistingFile);

  DedupArgs dd;
  auto* dedup_cmd = app.add_subcommand("embed-dedup", "Minimum neighbor distance and repetition removal");
  add_common(dedup_cmd, true);
  dedup_cmd->add_option("--in", dd.in, "Input dataset")->required();
  dedup_cmd->add_option("--out", dd.out, "Output dataset")->required();
  dedup_cmd->add_option("--threshold", dd.threshold, "Keep records farther than this from every neighbor");
  dedup_cmd->add_option("--metric", dd.metric, "cosine or euclidean");
  dedup_cmd->add_option("--cache", dd.cache, "Embedding cache file (JSONL)");
  dedup_cmd->add_flag("--keep-all", dd.keep_all, "Only record distances; drop nothing");

  FilterArgs filter;
  auto* filter_cmd = app.add_subcommand("filter", "Select records with a filter configuration");
  add_common(filter_cmd, false);
  filter_cmd->add_option("--config", filter.config, "Built-in name (e.g. Pro-Filter) or config file");
  filter_cmd->add_option("--in", filter.in, "Annotated dataset");
  filter_cmd->add_option("--out", filter.out, "Selected records");
  filter_cmd->add_option("--target", filter.target, "Override the target count")->check(CLI::PositiveNumber);
  filter_cmd->add_option("--seed", filter.seed, "Sampling seed when not selecting longest");
  filter_cmd->add_option("--report", filter.report, "Write the filter report here too");
  filter_cmd->add_flag("--list", filter.list, "Print the built-in configurations and exit");

  DpoArgs dpo;
  auto* dpo_cmd = app.add_subcommand("dpo", "Build preference pairs");
  add_common(dpo_cmd, true);
  dpo_cmd->add_option("--in", dpo.in, "Selected instructions")->required();
  dpo_cmd->add_option("--out", dpo.out, "Preference file (JSONL)")->required();
  dpo_cmd->add_option("--k", dpo.k, "Samples per instruction");
  dpo_cmd->add_option("--temp", dpo.temp, "Sampling temperature, in (0, 1)");
  dpo_cmd->add_option("--top-p", dpo.top_p, "Sampling top-p");
  dpo_cmd->add_option("--max-new-tokens", dpo.max_new_tokens, "Response length cap")->check(CLI::PositiveNumber);
  dpo_cmd->add_option("--limit", dpo.limit, "Use only the first N records")->check(CLI::NonNegativeNumber);
  dpo_cmd->add_option("--mode", dpo.mode, "ksample or base-contrast");
  dpo_cmd->add_option("--base-responses", dpo.base_responses, "JSONL of {id, response} (base-contrast)")
      ->check(CLI::ExistingFile);
  dpo_cmd->add_option("--template", dpo.template_family, "Chat template family");
  dpo_cmd->add_option("--run-id", dpo.run_id, "Seed namespace (default: the input's run id)");

  std::string stats_in;
  std::string stats_out;
  auto* stats_cmd = app.add_subcommand("stats", "Dataset statistics");
  stats_cmd->add_option("--in", stats_in, "Dataset")->required();
  stats_cmd->add_option("--out", stats_out, "Also write the report here");

  double hours = 0;
  std::int64_t instances = 0;
  double rate = 0;
  auto* cost_cmd = app.add_subcommand("cost", "Generation cost per 1,000 instances");
  cost_cmd->add_option("--gpu-hours", hours, "Total GPU hours")->required()->check(CLI::NonNegativeNumber);
  cost_cmd->add_option("--instances", instances, "Instances produced")->required();
  cost_cmd->add_option("--rate", rate, "Price per GPU hour")->required()->check(CLI::NonNegativeNumber);

  PipelineArgs pipe;
  auto* pipe_cmd = app.add_subcommand("pipeline", "gen, respond, annotate, embed-dedup and filter in one process");
  add_common(pipe_cmd, true);
  pipe_cmd->add_option("--job", pipe.gen.job, "Job file")->check(CLI::ExistingFile);
  pipe_cmd->add_option("--dir", pipe.dir, "Output directory")->required();
  pipe_cmd->add_option("--run-id", pipe.gen.run_id, "Run id");
  pipe_cmd->add_option("--preset", pipe.gen.preset, "Shard preset: air or pro");
  pipe_cmd->add_option("--scale", pipe.gen.scale, "Multiplier for preset shard counts")->check(CLI::PositiveNumber);
  pipe_cmd->add_option("--count", pipe.gen.count, "Single-shard size")->check(CLI::PositiveNumber);
  pipe_cmd->add_option("--template", pipe.gen.template_family, "Chat template family");
  pipe_cmd->add_option("--config", pipe.config, "Filter configuration");
  pipe_cmd->add_option("--target", pipe.target, "Override the filter target")->check(CLI::PositiveNumber);
  pipe_cmd->add_option("--metrics", pipe.metrics, "Annotation metric groups");
  pipe_cmd->add_option("--threshold", pipe.threshold, "Dedup threshold");
  pipe_cmd->add_flag("--fresh", pipe.gen.fresh, "Discard earlier generation output");

  std::string host = "127.0.0.1";
  int port = 8000;
  auto* serve_cmd = app.add_subcommand("serve-mock", "Serve the mock backend over HTTP until interrupted");
  add_common(serve_cmd, false);
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port (0: any free port)")->check(CLI::Range(0, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    Context ctx(common);
    if (gen_cmd->parsed()) return cmd_gen(ctx, gen);
    if (respond_cmd->parsed()) return cmd_respond(ctx, respond);
    if (mt_cmd->parsed()) return cmd_mt(ctx, mt);
    if (annotate_cmd->parsed()) return cmd_annotate(ctx, annotate);
    if (dedup_cmd->parsed()) return cmd_embed_dedup(ctx, dd);
    if (filter_cmd->parsed()) return cmd_filter(ctx, filter);
    if (dpo_cmd->parsed()) return cmd_dpo(ctx, dpo);
    if (stats_cmd->parsed()) return cmd_stats(ctx, stats_in, stats_out);
    if (cost_cmd->parsed()) return cmd_cost(hours, instances, rate);
    if (pipe_cmd->parsed()) return cmd_pipeline(ctx, pipe);
    if (serve_cmd->parsed()) return cmd_serve_mock(common, host, port);
  } catch (const Error& e) {
    std::cerr << "preq: " << e.what() << "\n";
    return exit_code_of(e);
  } catch (const json::exception& e) {
    std::cerr << "preq: malformed data: " << e.what() << "\n";
    return static_cast<int>(ErrorClass::data_integrity);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "preq: " << e.what() << "\n";
    return static_cast<int>(ErrorClass::config);
  }
  return 1;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"preq"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace preq::cli
