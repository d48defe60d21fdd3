#pragma once

// Federated round loop with pluggable server defenses and a two-phase
// attacker (stealth rounds train clean, exploit rounds poison).

#include "fedpoison/common.hpp"
#include "fedpoison/data.hpp"
#include "fedpoison/defense.hpp"
#include "fedpoison/grmp.hpp"
#include "fedpoison/model.hpp"

#include <algorithm>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

namespace fedpoison {

enum class AttackKind { kNone, kNaiveFlip, kGrmp };

inline std::string to_string(AttackKind a) {
  switch (a) {
    case AttackKind::kNone: return "none";
    case AttackKind::kNaiveFlip: return "naive_flip";
    case AttackKind::kGrmp: return "grmp";
  }
  return "unknown";
}

inline std::optional<AttackKind> parse_attack(const std::string& s) {
  if (s == "none") return AttackKind::kNone;
  if (s == "naive_flip") return AttackKind::kNaiveFlip;
  if (s == "grmp") return AttackKind::kGrmp;
  return std::nullopt;
}

inline std::string to_string(Knowledge k) { return k == Knowledge::kFull ? "full" : "own_plus_global"; }

inline std::optional<Knowledge> parse_knowledge(const std::string& s) {
  if (s == "full") return Knowledge::kFull;
  if (s == "own_plus_global") return Knowledge::kOwnPlusGlobal;
  return std::nullopt;
}

struct DataConfig {
  std::string source = "synth";  // synth | agnews | jsonl
  std::string train_path;
  std::string test_path;
  double alpha = 0.5;
  std::size_t hash_dim = 1024;
  std::uint64_t hash_seed = 0;
  std::vector<std::string> triggers = default_triggers();
  int src_class = kBusiness;
  int dst_class = kSports;
  SynthConfig synth;
};

struct GrmpConfig {
  double tau_edge = 0.3;
  // Fixed cosine floor; when absent the attacker estimates the defense
  // threshold from the benign updates it observes and adds stealth_margin.
  std::optional<double> stealth_floor;
  double stealth_margin = 0.05;
  double gamma_blend = 1.0;
  int dual_steps = 100;
  double step_size = 0.05;
  VgaeFitOptions vgae;
  // Number of most recent observed rounds used to fit the VGAE; 0 = all.
  int history_window = 0;
  Knowledge knowledge = Knowledge::kFull;
};

struct ExperimentConfig {
  int n_clients = 6;
  int n_attackers = 2;
  int rounds = 20;
  int local_epochs = 2;
  double lr = 0.5;
  int batch_size = 32;
  double weight_decay = 0.0;
  std::uint64_t seed = 42;
  int phase_switch_round = 11;
  DefenseParams defense;
  AttackKind attack = AttackKind::kGrmp;
  // Multiplier applied to naive_flip submissions.
  double naive_scale = 1.0;
  // Relative norm of the per-attacker perturbation on the shared crafted update.
  double attacker_noise = 1e-3;
  DataConfig data;
  GrmpConfig grmp;

  TrainOptions train_options() const { return {local_epochs, lr, batch_size, weight_decay}; }
  bool is_attacker(int client) const { return client >= n_clients - n_attackers; }
};

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
  if (c.n_clients < 1) fail("n_clients must be >= 1");
  if (c.n_attackers < 0 || c.n_attackers >= c.n_clients) fail("n_attackers must satisfy 0 <= n_attackers < n_clients");
  if (c.rounds < 1) fail("rounds must be >= 1");
  if (c.phase_switch_round < 1 || c.phase_switch_round > c.rounds + 1)
    fail("phase_switch_round must lie in [1, rounds+1]");
  if (c.local_epochs < 1) fail("local_epochs must be >= 1");
  if (c.lr < 0.0) fail("lr must be >= 0");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.data.source != "synth" && c.data.source != "agnews" && c.data.source != "jsonl")
    fail("data.source must be synth, agnews or jsonl");
  if (c.data.source != "synth" && (c.data.train_path.empty() || c.data.test_path.empty()))
    fail("data.train_path and data.test_path are required for file sources");
  if (!(c.data.alpha > 0.0)) fail("data.alpha must be > 0");
  if (!is_power_of_two(c.data.hash_dim)) fail("data.hash_dim must be a power of two");
  if (c.data.src_class == c.data.dst_class) fail("data.src_class must differ from data.dst_class");
  for (int cls : {c.data.src_class, c.data.dst_class})
    if (cls < 0 || cls >= kNewsClassCount) fail("class ids must lie in [0,4)");
  if (c.data.triggers.empty()) fail("data.triggers must not be empty");
  const int n = c.n_clients;
  switch (c.defense.kind) {
    case DefenseKind::kKrum:
      if (n < c.defense.f + 3) fail("krum requires n_clients >= defense.f + 3");
      break;
    case DefenseKind::kMultiKrum:
      if (n < c.defense.f + 3) fail("multi_krum requires n_clients >= defense.f + 3");
      if (c.defense.m < 1 || c.defense.m > n - c.defense.f - 2) fail("multi_krum requires 1 <= defense.m <= n - f - 2");
      break;
    case DefenseKind::kTrimmedMean:
      if (c.defense.beta < 0 || n <= 2 * c.defense.beta) fail("trimmed_mean requires n_clients > 2 * defense.beta");
      break;
    case DefenseKind::kCosineFilter:
      if (n < 2) fail("cosine_filter requires n_clients >= 2");
      break;
    default:
      break;
  }
  if (c.attack == AttackKind::kGrmp && c.n_attackers > 0) {
    if (c.n_clients - c.n_attackers < 2) fail("grmp needs at least 2 benign clients to build a graph");
    if (c.grmp.stealth_floor && !(*c.grmp.stealth_floor >= -1.0 && *c.grmp.stealth_floor <= 1.0))
      fail("grmp.stealth_floor must lie in [-1,1]");
    if (c.grmp.dual_steps < 1) fail("grmp.dual_steps must be >= 1");
    if (c.grmp.knowledge == Knowledge::kOwnPlusGlobal && c.phase_switch_round < 2)
      fail("own_plus_global knowledge needs phase_switch_round >= 2");
    if (c.grmp.vgae.hidden < 1 || c.grmp.vgae.latent < 1 || c.grmp.vgae.latent > c.grmp.vgae.hidden)
      fail("grmp VGAE requires 1 <= latent <= hidden");
  }
}

// ---------------------------------------------------------------------------
// State

struct ClientData {
  std::vector<LabeledFeature> clean;
  std::vector<LabeledFeature> flipped;
};

struct SimState {
  ParamVector global;
  std::vector<ClientData> clients;
  std::vector<LabeledFeature> test;
  std::vector<LabeledFeature> clean_test;  // test minus the ASR subset
  std::vector<LabeledFeature> asr_subset;
  std::optional<VectorXd> prev_aggregate;
  std::vector<RoundObservation> history;
};

inline Corpus load_corpus(const ExperimentConfig& cfg) {
  if (cfg.data.source == "agnews") return load_agnews_corpus(cfg.data.train_path, cfg.data.test_path);
  if (cfg.data.source == "jsonl") return load_corpus_jsonl(cfg.data.train_path, cfg.data.test_path);
  SynthConfig s = cfg.data.synth;
  s.triggers = cfg.data.triggers;
  return synth_corpus(s, derive_seed(cfg.seed, 1));
}

inline SimState prepare_state(const ExperimentConfig& cfg) {
  validate(cfg);
  const Corpus corpus = load_corpus(cfg);
  const PartitionPlan plan =
      partition_noniid(corpus, static_cast<std::size_t>(cfg.n_clients), cfg.data.alpha, derive_seed(cfg.seed, 2));
  SimState st;
  st.global = init_params(static_cast<Index>(cfg.data.hash_dim), corpus.class_count);
  for (const auto& idx : plan.client_indices) {
    std::vector<Example> local;
    local.reserve(idx.size());
    for (std::size_t i : idx) local.push_back(corpus.train[i]);
    ClientData cd;
    cd.clean = featurize_all(local, cfg.data.hash_dim, cfg.data.hash_seed);
    cd.flipped = featurize_all(flip_labels(local, cfg.data.triggers, cfg.data.src_class, cfg.data.dst_class),
                               cfg.data.hash_dim, cfg.data.hash_seed);
    st.clients.push_back(std::move(cd));
  }
  st.test = featurize_all(corpus.test, cfg.data.hash_dim, cfg.data.hash_seed);
  std::vector<Example> untriggered;
  std::copy_if(corpus.test.begin(), corpus.test.end(), std::back_inserter(untriggered), [&](const Example& ex) {
    return !(ex.label == cfg.data.src_class && contains_trigger(ex, cfg.data.triggers));
  });
  st.clean_test = featurize_all(untriggered, cfg.data.hash_dim, cfg.data.hash_seed);
  st.asr_subset = featurize_all(asr_eval_subset(corpus, cfg.data.triggers, cfg.data.src_class), cfg.data.hash_dim,
                                cfg.data.hash_seed);
  return st;
}

// ---------------------------------------------------------------------------
// Records

enum class Phase { kStealth, kExploit };

struct AttackTrace {
  int round = 0;
  double recon_bce_initial = 0.0;
  double recon_bce_final = 0.0;
  double lambda_dual = 0.0;
  double stealth_cosine = 0.0;
  int edges_flipped = 0;
  double stealth_floor = 0.0;
  bool estimated = false;
  bool biased = false;
  // Counterfactual naive_flip updates for the same round, scored against the
  // round's server reference.
  std::vector<double> naive_cosine;
};

struct RoundRecord {
  int round = 0;
  Phase phase = Phase::kStealth;
  double accuracy = 0.0;
  double clean_accuracy = 0.0;  // on test examples outside the ASR subset
  double asr = 0.0;
  std::vector<double> per_client_cosine;
  std::optional<double> threshold;
  std::vector<bool> accepted;
  std::vector<double> scores;
  double aggregate_norm = 0.0;
  bool fallback = false;
  std::string fallback_reason;
  std::optional<AttackTrace> trace;
};

struct ExperimentResult {
  std::vector<RoundRecord> records;
  ParamVector final_params;
};

// ---------------------------------------------------------------------------
// Attacker

inline std::uint64_t client_train_seed(const ExperimentConfig& cfg, int round, int client) {
  return derive_seed(cfg.seed, 100, round, client);
}

struct AttackerOutput {
  std::vector<VectorXd> submitted;
  std::vector<VectorXd> clean;
  std::vector<VectorXd> counterfactual_naive;
  std::optional<AttackTrace> trace;
};

// `benign` holds this round's benign updates (visible under full knowledge);
// `reference` is the attacker's estimate of the server's reference direction.
inline AttackerOutput attacker_step(const SimState& st, const ExperimentConfig& cfg, int round, Phase phase,
                                    const UpdateMatrix& benign, const VectorXd& reference) {
  AttackerOutput out;
  const auto opt = cfg.train_options();
  std::vector<int> ids;
  for (int c = 0; c < cfg.n_clients; ++c)
    if (cfg.is_attacker(c)) ids.push_back(c);

  for (int c : ids)
    out.clean.push_back(local_train(st.global, st.clients[static_cast<std::size_t>(c)].clean, opt,
                                    client_train_seed(cfg, round, c))
                            .delta);

  if (phase == Phase::kStealth || cfg.attack == AttackKind::kNone) {
    out.submitted = out.clean;
    return out;
  }

  auto naive = [&](int c) {
    return local_train(st.global, st.clients[static_cast<std::size_t>(c)].flipped, opt, client_train_seed(cfg, round, c))
        .delta;
  };

  if (cfg.attack == AttackKind::kNaiveFlip) {
    for (int c : ids) out.submitted.push_back(cfg.naive_scale * naive(c));
    return out;
  }

  // GRMP
  for (int c : ids) out.counterfactual_naive.push_back(naive(c));

  // Poison direction on the attackers' pooled data: flipped minus clean
  // training from the same global model and shuffle seed.
  std::vector<LabeledFeature> pooled_clean;
  std::vector<LabeledFeature> pooled_flipped;
  for (int c : ids) {
    const auto& cd = st.clients[static_cast<std::size_t>(c)];
    pooled_clean.insert(pooled_clean.end(), cd.clean.begin(), cd.clean.end());
    pooled_flipped.insert(pooled_flipped.end(), cd.flipped.begin(), cd.flipped.end());
  }
  const std::uint64_t poison_seed = derive_seed(cfg.seed, 300, round);
  const VectorXd raw_poison =
      local_train(st.global, pooled_flipped, opt, poison_seed).delta - local_train(st.global, pooled_clean, opt, poison_seed).delta;

  // Observations: past rounds plus, under full knowledge, the current round.
  std::vector<RoundObservation> window;
  const std::size_t keep = cfg.grmp.history_window > 0 ? static_cast<std::size_t>(cfg.grmp.history_window) : st.history.size() + 1;
  if (cfg.grmp.knowledge == Knowledge::kFull) {
    const std::size_t past = std::min(st.history.size(), keep - 1);
    window.assign(st.history.end() - static_cast<long>(past), st.history.end());
    RoundObservation now;
    now.benign_updates = benign;
    now.own_clean = stack_rows(out.clean, benign.cols());
    window.push_back(std::move(now));
  } else {
    const std::size_t past = std::min(st.history.size(), keep);
    window.assign(st.history.end() - static_cast<long>(past), st.history.end());
  }
  const BenignObservations obs = collect_benign_observations(window, cfg.grmp.knowledge);

  UpdateMatrix crafting;
  if (cfg.grmp.knowledge == Knowledge::kFull) {
    crafting = obs.matrices.back();
  } else {
    const UpdateMatrix& last = obs.matrices.back();
    crafting.resize(1 + static_cast<Index>(out.clean.size()), last.cols());
    crafting.row(0) = last.row(0);
    for (std::size_t i = 0; i < out.clean.size(); ++i) crafting.row(static_cast<Index>(i) + 1) = out.clean[i].transpose();
  }

  std::vector<UpdateGraph> graphs;
  for (const auto& m : obs.matrices)
    if (m.rows() >= 2) graphs.push_back(build_update_graph(m, cfg.grmp.tau_edge));
  graphs.push_back(build_update_graph(crafting, cfg.grmp.tau_edge));
  const VgaeParams vgae = fit_vgae(graphs, cfg.grmp.vgae, derive_seed(cfg.seed, 400, round));

  double floor = 0.0;
  if (cfg.grmp.stealth_floor) {
    floor = *cfg.grmp.stealth_floor;
  } else {
    VectorXd cos(crafting.rows());
    for (Index i = 0; i < crafting.rows(); ++i) cos[i] = cosine(crafting.row(i).transpose(), reference);
    const auto [m, sd] = mean_and_pop_std(cos);
    floor = std::clamp(m - cfg.defense.lambda * sd + cfg.grmp.stealth_margin, -1.0, 1.0);
  }

  CraftConfig cc;
  cc.tau_edge = cfg.grmp.tau_edge;
  cc.stealth_floor = floor;
  cc.gamma_blend = cfg.grmp.gamma_blend;
  cc.dual_steps = cfg.grmp.dual_steps;
  cc.step_size = cfg.grmp.step_size;
  CraftResult crafted;
  try {
    crafted = craft_malicious_update(crafting, raw_poison, reference, cc, vgae);
  } catch (const AttackError& e) {
    throw AttackError(detail::concat("round ", round, ": ", e.what()));
  }

  AttackTrace t;
  t.round = round;
  t.recon_bce_initial = crafted.dual.recon_bce_initial;
  t.recon_bce_final = crafted.dual.recon_bce_final;
  t.lambda_dual = crafted.dual.state.lambda_dual;
  t.stealth_cosine = crafted.stealth_cosine;
  t.edges_flipped = crafted.dual.edges_flipped;
  t.stealth_floor = floor;
  t.estimated = obs.estimated;
  t.biased = obs.biased;
  out.trace = t;

  for (int c : ids) {
    Rng rng(derive_seed(cfg.seed, 500, round, c));
    std::normal_distribution<double> nd(0.0, 1.0);
    VectorXd noise(crafted.update.size());
    for (Index i = 0; i < noise.size(); ++i) noise[i] = nd(rng);
    const double nn = noise.norm();
    VectorXd u = crafted.update;
    if (nn > 0.0) u += (cfg.attacker_noise * crafted.update.norm() / nn) * noise;
    out.submitted.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round loop

inline RoundRecord run_round(SimState& st, const ExperimentConfig& cfg, int round) {
  const int n = cfg.n_clients;
  const Index d = st.global.dim();
  const Phase phase = round < cfg.phase_switch_round ? Phase::kStealth : Phase::kExploit;
  const auto opt = cfg.train_options();

  RoundRecord rec;
  rec.round = round;
  rec.phase = phase;

  UpdateMatrix submissions(n, d);
  std::vector<int> benign_ids;
  for (int c = 0; c < n; ++c) {
    if (cfg.is_attacker(c)) continue;
    benign_ids.push_back(c);
    submissions.row(c) = local_train(st.global, st.clients[static_cast<std::size_t>(c)].clean, opt,
                                     client_train_seed(cfg, round, c))
                             .delta.transpose();
  }
  UpdateMatrix benign(static_cast<Index>(benign_ids.size()), d);
  for (std::size_t i = 0; i < benign_ids.size(); ++i) benign.row(static_cast<Index>(i)) = submissions.row(benign_ids[i]);

  AttackerOutput att;
  if (cfg.n_attackers > 0) {
    const VectorXd attacker_ref = st.prev_aggregate ? *st.prev_aggregate : VectorXd(benign.colwise().mean().transpose());
    att = attacker_step(st, cfg, round, phase, benign, attacker_ref);
    int k = 0;
    for (int c = 0; c < n; ++c)
      if (cfg.is_attacker(c)) submissions.row(c) = att.submitted[static_cast<std::size_t>(k++)].transpose();
  }

  std::vector<double> weights;
  for (const auto& cd : st.clients) weights.push_back(static_cast<double>(cd.clean.size()));
  const VectorXd reference = st.prev_aggregate ? *st.prev_aggregate : mean_update(submissions);

  AggregationReport rep;
  try {
    rep = apply_defense(cfg.defense, submissions, weights, reference);
  } catch (const DefenseError& e) {
    rec.fallback = true;
    rec.fallback_reason = e.what();
    rep.aggregate = VectorXd::Zero(d);
    rep.accepted.assign(static_cast<std::size_t>(n), false);
    rep.scores = VectorXd::Zero(n);
  }

  st.global.values += rep.aggregate;

  rec.threshold = rep.threshold;
  rec.accepted = rep.accepted;
  rec.scores.assign(rep.scores.data(), rep.scores.data() + rep.scores.size());
  rec.aggregate_norm = rep.aggregate.norm();
  for (int c = 0; c < n; ++c) rec.per_client_cosine.push_back(cosine(submissions.row(c).transpose(), reference));
  rec.accuracy = evaluate_accuracy(st.global, st.test);
  rec.clean_accuracy = st.clean_test.empty() ? 0.0 : evaluate_accuracy(st.global, st.clean_test);
  rec.asr = evaluate_asr(st.global, st.asr_subset, cfg.data.dst_class);

  if (att.trace) {
    rec.trace = att.trace;
    for (const auto& u : att.counterfactual_naive) rec.trace->naive_cosine.push_back(cosine(u, reference));
  }

  RoundObservation obs;
  obs.benign_updates = benign;
  obs.global_delta = rep.aggregate;
  obs.n_clients = n;
  obs.own_submitted = stack_rows(att.submitted, d);
  obs.own_clean = stack_rows(att.clean, d);
  const bool all_accepted = std::all_of(rep.accepted.begin(), rep.accepted.end(), [](bool b) { return b; });
  const bool equal_weights = std::adjacent_find(weights.begin(), weights.end(), std::not_equal_to<>()) == weights.end();
  obs.equal_weight_mean = !rec.fallback && ((cfg.defense.kind == DefenseKind::kCosineFilter && all_accepted) ||
                                            (cfg.defense.kind == DefenseKind::kFedAvg && equal_weights));
  st.history.push_back(std::move(obs));

  if (!rec.fallback) st.prev_aggregate = rep.aggregate;
  return rec;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  SimState st = prepare_state(cfg);
  ExperimentResult res;
  for (int r = 1; r <= cfg.rounds; ++r) {
    try {
      res.records.push_back(run_round(st, cfg, r));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      const std::string msg = e.what();
      if (msg.rfind("round ", 0) == 0) throw;
      throw Error(detail::concat("round ", r, ": ", msg));
    }
  }
  res.final_params = st.global;
  return res;
}

}  // namespace fedpoison
