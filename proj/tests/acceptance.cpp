// Acceptance harness: one PASS/FAIL line per criterion.
//
//   csks_acceptance [--criteria 1,2,...] [--work DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csks/commands.hpp"
#include "csks/config.hpp"
#include "csks/datasim.hpp"
#include "csks/dsp.hpp"
#include "csks/evalkit.hpp"
#include "csks/losses.hpp"
#include "csks/model.hpp"
#include "csks/spotting.hpp"
#include "csks/audio.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace csks;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

oracle::Mat rows_of(const Tensor& t) {
  oracle::Mat m(t.dim(0), oracle::Vec(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// ---------------------------------------------------------------------------
// 1. F1 arithmetic against reference (R, P, F1) rows.

Outcome criterion1() {
  struct Row {
    double r, p, f1;
  };
  const Row rows[] = {{0.46, 0.34, 0.39}, {0.267, 0.244, 0.256}, {0.36, 0.33, 0.344}, {0.55, 0.488, 0.51}};
  double worst = 0.0;
  for (const auto& row : rows) {
    const double f_counts = evalkit::f1_from(row.p, row.r);
    // Counts with 100000 truths reproduce the rounded precision and recall.
    const std::size_t tp = static_cast<std::size_t>(std::lround(row.r * 100000));
    const evalkit::Counts c{tp, static_cast<std::size_t>(std::lround(tp * (1.0 - row.p) / row.p)), 100000 - tp};
    const double f_scores = evalkit::precision_recall_f1(c).f1;
    worst = std::max({worst, std::abs(f_counts - row.f1), std::abs(f_scores - row.f1)});
  }
  return {worst <= 0.01, "max |F1 - reference| = " + fmt("%.4f", worst)};
}

// ---------------------------------------------------------------------------
// 2. Loss oracles on 1000 random inputs each.

Outcome criterion2() {
  std::mt19937_64 rng(202);
  double worst_proto = 0.0, worst_metric = 0.0, worst_ce = 0.0, worst_post = 0.0, worst_comb = 0.0;
  std::uniform_int_distribution<int> nk(2, 5), ns(1, 4), dim(1, 8);
  for (int trial = 0; trial < 1000; ++trial) {
    const int K = nk(rng), D = dim(rng);
    const bool squared = trial % 2;
    const auto kind = squared ? losses::DistanceKind::squared : losses::DistanceKind::euclidean;
    losses::Episode ep;
    std::vector<oracle::Mat> s, q;
    std::vector<std::vector<std::vector<double>>> supports;
    for (int k = 0; k < K; ++k) {
      auto st = testing::random_tensor({static_cast<std::size_t>(ns(rng)), static_cast<std::size_t>(D)}, rng, 2.0);
      auto qt = testing::random_tensor({static_cast<std::size_t>(ns(rng)), static_cast<std::size_t>(D)}, rng, 2.0);
      s.push_back(rows_of(st));
      q.push_back(rows_of(qt));
      supports.push_back(s.back());
      ep.class_ids.push_back(k);
      ep.supports.push_back(ag::constant(st));
      ep.queries.push_back(ag::constant(qt));
    }
    worst_proto = std::max(worst_proto, rel_err(ag::scalar(losses::prototypical_loss(ep, kind)),
                                                 oracle::prototypical(s, q, squared)));

    std::vector<int> ids(static_cast<std::size_t>(K));
    std::iota(ids.begin(), ids.end(), 0);
    const auto bank = losses::compute_prototypes(ids, supports, kind);
    const auto query = q[0][0];
    const auto post = losses::class_posteriors(query, bank);
    double sum = 0.0;
    for (double v : post) sum += v;
    worst_post = std::max(worst_post, std::abs(sum - 1.0));

    const double sd = trial % 4 == 0 ? 40.0 : 1.0;
    auto a = testing::random_tensor({1, static_cast<std::size_t>(D)}, rng, sd);
    auto p = testing::random_tensor({static_cast<std::size_t>(ns(rng)), static_cast<std::size_t>(D)}, rng, sd);
    auto n = testing::random_tensor({static_cast<std::size_t>(ns(rng)), static_cast<std::size_t>(D)}, rng, sd);
    worst_metric = std::max(
        worst_metric, rel_err(ag::scalar(losses::metric_loss(ag::constant(a), ag::constant(p), ag::constant(n), kind)),
                              oracle::metric(rows_of(a)[0], rows_of(p), rows_of(n), squared)));

    const std::size_t C = static_cast<std::size_t>(K) + 1;
    auto logits = testing::random_tensor({4, C}, rng, trial % 10 == 0 ? 300.0 : 2.0);
    std::vector<std::size_t> t;
    for (int i = 0; i < 4; ++i) t.push_back(static_cast<std::size_t>(rng() % C));
    worst_ce = std::max(worst_ce, rel_err(ag::scalar(losses::cross_entropy(ag::constant(logits), t)),
                                          oracle::cross_entropy(rows_of(logits), t)));

    std::vector<int> labels;
    std::vector<std::uint8_t> support;
    for (int k = 0; k < K; ++k)
      for (int i = 0; i < 4; ++i) {
        labels.push_back(k);
        support.push_back(i < 2);
      }
    for (int i = 0; i < 3; ++i) {
      labels.push_back(K);
      support.push_back(0);
    }
    auto emb = testing::random_tensor({labels.size(), static_cast<std::size_t>(D)}, rng);
    const double lambda = 0.25 * (trial % 5);
    const losses::CombinedOptions opt{lambda, K, kind};
    const std::vector<int> sup_int(support.begin(), support.end());
    worst_comb = std::max(worst_comb, rel_err(ag::scalar(losses::combined_loss(ag::constant(emb), labels, support, opt)),
                                              oracle::combined(rows_of(emb), labels, sup_int, K, lambda, squared)));
  }
  const double worst = std::max({worst_proto, worst_metric, worst_ce, worst_comb, worst_post});
  std::ostringstream d;
  d << "max error: prototypical " << worst_proto << ", metric " << worst_metric << ", cross-entropy " << worst_ce
    << ", combined " << worst_comb << ", posterior sum " << worst_post;
  return {worst <= 1e-9, d.str()};
}

// ---------------------------------------------------------------------------
// 3. Finite-difference gradients for every layer type and loss.

ModelConfig grad_model(Architecture arch, RecurrentCell cell) {
  ModelConfig c;
  c.precision = Precision::f64;
  c.feature_dim = 23;
  c.embedding_dim = 5;
  c.n_classes = 4;
  c.conv_layers = {{2, 3, 3, 2, 2}, {3, 3, 3, 1, 2}};
  c.recurrent_width = 4;
  c.cell = cell;
  c.architecture = arch;
  c.residual_channels = 3;
  c.residual_blocks = 2;
  c.pool_h = 2;
  c.pool_w = 2;
  return c;
}

Outcome criterion3() {
  constexpr std::size_t kCoords = 120;
  double worst = 0.0;
  std::size_t min_coords = SIZE_MAX;
  std::vector<std::string> names;
  auto record = [&](const std::string& name, const testing::GradCheck& r) {
    worst = std::max(worst, r.max_rel);
    min_coords = std::min(min_coords, r.coords);
    names.push_back(name);
  };
  std::mt19937_64 rng(303);

  struct ModelCase {
    std::string name;
    ModelConfig cfg;
  };
  auto lstm2 = grad_model(Architecture::conv_recurrent, RecurrentCell::lstm);
  lstm2.recurrent_layers = 2;
  const std::vector<ModelCase> models{
      {"conv+gru+linear", grad_model(Architecture::conv_recurrent, RecurrentCell::gru)},
      {"conv+lstm x2+linear", lstm2},
      {"residual conv+pool+linear", grad_model(Architecture::residual_conv, RecurrentCell::gru)}};
  for (const auto& mc : models) {
    Model m = Model::build(mc.cfg, 3);
    std::vector<FeatureMatrix> fs;
    for (int i = 0; i < 3; ++i) fs.push_back(testing::random_features(12, mc.cfg.feature_dim, rng));
    std::vector<const FeatureMatrix*> batch;
    for (auto& f : fs) batch.push_back(&f);
    const std::vector<std::size_t> targets{0, 2, 3};
    std::vector<ag::Var> leaves;
    for (auto& p : m.parameters()) leaves.push_back(p.var);
    record(mc.name, testing::grad_check(leaves, [&] { return losses::cross_entropy(m.logits(m.embed(batch)), targets); },
                                        kCoords, rng));
  }

  auto leaf = [&](Shape s) { return ag::parameter(testing::random_tensor(s, rng)); };
  for (auto kind : {losses::DistanceKind::euclidean, losses::DistanceKind::squared}) {
    auto s0 = leaf({4, 6}), s1 = leaf({5, 6}), q0 = leaf({6, 6}), q1 = leaf({5, 6});
    losses::Episode ep{{0, 1}, {s0, s1}, {q0, q1}};
    record("prototypical", testing::grad_check({s0, s1, q0, q1}, [&] { return losses::prototypical_loss(ep, kind); },
                                               kCoords, rng));
    auto anchor = leaf({1, 8}), pos = leaf({7, 8}), neg = leaf({8, 8});
    record("metric", testing::grad_check({anchor, pos, neg}, [&] { return losses::metric_loss(anchor, pos, neg, kind); },
                                         kCoords, rng));
    auto emb = leaf({20, 6});
    std::vector<int> labels;
    std::vector<std::uint8_t> support;
    for (int i = 0; i < 20; ++i) {
      labels.push_back(i < 15 ? i / 5 : 3);
      support.push_back(i < 15 && i % 5 < 2);
    }
    const losses::CombinedOptions opt{0.7, 3, kind};
    record("combined", testing::grad_check({emb}, [&] { return losses::combined_loss(emb, labels, support, opt); },
                                           kCoords, rng));
  }
  auto logits = leaf({25, 6});
  std::vector<std::size_t> t;
  for (int i = 0; i < 25; ++i) t.push_back(static_cast<std::size_t>(i % 6));
  record("cross-entropy", testing::grad_check({logits}, [&] { return losses::cross_entropy(logits, t); }, kCoords, rng));

  std::ostringstream d;
  d << names.size() << " checks, max relative error " << worst << ", min coordinates per check " << min_coords;
  return {worst <= 1e-4 && min_coords >= 100, d.str()};
}

// ---------------------------------------------------------------------------
// 4. DSP shapes and band-pass attenuation.

AudioClip sine(double hz, double seconds) {
  AudioClip c;
  c.samples.resize(static_cast<std::size_t>(seconds * kCanonicalRate));
  for (std::size_t i = 0; i < c.size(); ++i) c.samples[i] = 0.5 * std::sin(2 * M_PI * hz * i / kCanonicalRate);
  return c;
}

double rms_tail(const AudioClip& c, std::size_t skip) {
  return datasim::rms(std::span<const double>(c.samples).subspan(skip));
}

Outcome criterion4() {
  const AudioClip two = sine(700, 2.0);
  const std::size_t frames = dsp::frame(two).size();
  const auto m = dsp::mfcc(dsp::bandpass(two));
  const auto s = dsp::spectrogram(two);
  // Skip the first half second of filter transient.
  const double keep = rms_tail(dsp::bandpass(sine(1000, 2.0)), 8000);
  const double low = rms_tail(dsp::bandpass(sine(10, 2.0)), 8000);
  const double atten = 20 * std::log10(keep / low);
  std::ostringstream d;
  d << "frames " << frames << ", mfcc " << m.rows << "x" << m.cols << ", spectrogram " << s.rows << "x" << s.cols
    << ", 10 Hz attenuation " << fmt("%.1f", atten) << " dB";
  return {frames == 199 && m.rows == 199 && m.cols == 40 && s.rows == 199 && s.cols == 241 && atten >= 20.0, d.str()};
}

// ---------------------------------------------------------------------------
// 5. Data simulation contracts.

double ncc_peak(std::span<const double> x, std::span<const double> y) {
  double best = 0.0;
  for (long lag = -8; lag <= 8; ++lag) {
    double xy = 0, xx = 0, yy = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const long j = static_cast<long>(i) + lag;
      if (j < 0 || j >= static_cast<long>(x.size())) continue;
      xy += x[j] * y[i];
      xx += x[j] * x[j];
      yy += y[i] * y[i];
    }
    if (xx > 0 && yy > 0) best = std::max(best, xy / std::sqrt(xx * yy));
  }
  return best;
}

Outcome criterion5() {
  const auto corpus = datasim::synth_corpus(4, 10, 2, 55);
  const auto [tr, va] = datasim::speaker_split(corpus, 0.8, 9);
  std::set<std::string> st, sv;
  for (const auto& u : tr) st.insert(u.speaker_id);
  for (const auto& u : va) sv.insert(u.speaker_id);
  bool disjoint = tr.size() + va.size() == corpus.size() && !st.empty() && !sv.empty();
  for (const auto& s : st) disjoint = disjoint && !sv.count(s);

  bool fresh_ok = true;
  datasim::Rng rng(5);
  for (std::size_t b = 1; b <= 256; ++b) {
    datasim::BatchCache<int> cache(10 * b);
    int counter = 0;
    auto gen = [&](datasim::Rng&) { return counter++; };
    cache.next_batch(b, gen, rng);
    for (int round = 0; round < 3; ++round) {
      fresh_ok = fresh_ok && cache.next_batch(b, gen, rng).fresh == static_cast<std::size_t>(std::lround(0.3 * b));
    }
  }

  const auto pool = datasim::make_background_pool(3, 6.0, datasim::BackgroundStyle::babble, 77);
  AudioClip silent;
  silent.samples.assign(6 * kCanonicalRate, 0.0);
  const std::vector<AudioClip> silent_pool{silent};
  bool lengths_ok = true;
  double min_ncc = 1.0;
  datasim::AugmentConfig aug;
  for (std::size_t i = 0; i < corpus.size(); i += 3) {
    for (auto pos : {datasim::Position::begin, datasim::Position::middle, datasim::Position::end}) {
      const auto seg = datasim::simulate_positive(corpus[i], pool, pos, {}, rng);
      lengths_ok = lengths_ok && seg.clip.size() == 2 * kCanonicalRate;
      lengths_ok = lengths_ok && datasim::augment(seg, aug, rng).clip.size() == 2 * kCanonicalRate;
      const auto quiet = datasim::simulate_positive(corpus[i], silent_pool, pos, {}, rng);
      const auto a = static_cast<std::size_t>(std::lround(quiet.keyword_span->start_s * kCanonicalRate));
      const std::size_t n = std::min(corpus[i].clip.size(), quiet.clip.size() - a);
      min_ncc = std::min(min_ncc, ncc_peak(std::span<const double>(quiet.clip.samples).subspan(a, n),
                                           std::span<const double>(corpus[i].clip.samples).first(n)));
    }
    lengths_ok = lengths_ok && datasim::simulate_background(pool, 4, rng).clip.size() == 2 * kCanonicalRate;
  }
  std::ostringstream d;
  d << "speaker-disjoint " << (disjoint ? "yes" : "no") << ", freshness round(0.3B) for B=1..256 "
    << (fresh_ok ? "yes" : "no") << ", all segments 2.0 s " << (lengths_ok ? "yes" : "no") << ", min NCC "
    << fmt("%.4f", min_ncc);
  return {disjoint && fresh_ok && lengths_ok && min_ncc >= 0.99, d.str()};
}

// ---------------------------------------------------------------------------
// 6. Embedding geometry under combined-loss descent.

Outcome criterion6() {
  std::mt19937_64 rng(606);
  const int K = 3, per = 20;
  std::vector<int> labels;
  std::vector<std::uint8_t> support;
  for (int k = 0; k <= K; ++k)
    for (int i = 0; i < per; ++i) {
      labels.push_back(k);
      support.push_back(k < K && i < per / 2);
    }
  auto emb = ag::parameter(testing::random_tensor({labels.size(), 8}, rng));
  const losses::CombinedOptions opt{1.0, K, losses::DistanceKind::euclidean};
  for (int step = 0; step < 500; ++step) {
    emb->clear_grad();
    ag::backward(losses::combined_loss(emb, labels, support, opt));
    for (std::size_t i = 0; i < emb->value.size(); ++i) emb->value[i] -= 0.5 * emb->grad()[i];
  }
  const auto rows = rows_of(emb->value);
  std::vector<oracle::Vec> protos;
  double intra = 0.0;
  for (int k = 0; k < K; ++k) {
    oracle::Mat members(rows.begin() + k * per, rows.begin() + (k + 1) * per);
    protos.push_back(oracle::mean_of(members));
    for (const auto& r : members) intra += oracle::dist(r, protos.back()) / (K * per);
  }
  double bg = 0.0;
  for (int i = K * per; i < (K + 1) * per; ++i) {
    double best = 1e300;
    for (const auto& c : protos) best = std::min(best, oracle::dist(rows[i], c));
    bg += best / per;
  }
  return {intra < bg, "mean intra-class distance " + fmt("%.4f", intra) + ", background to nearest prototype " +
                          fmt("%.4f", bg)};
}

// ---------------------------------------------------------------------------
// End-to-end protocol shared by criteria 7 and 9.

const std::vector<trainer::Variant> kVariants{trainer::Variant::finetune_ce, trainer::Variant::finetune_proto,
                                              trainer::Variant::finetune_proto_metric};
constexpr int kSeeds = 3;

config::ToolkitConfig e2e_config(const fs::path& root, std::uint64_t seed) {
  config::ToolkitConfig c;
  c.seed = seed;
  c.paths.corpus_manifest = (root / "corpus" / "manifest.csv").string();
  c.paths.data_dir = (root / "data").string();
  c.synth.n_keywords = 10;
  c.synth.n_speakers = 12;
  c.synth.reps = 3;
  c.simulate.test_recordings = 4;
  c.simulate.recording.duration_s = 60.0;
  c.simulate.recording.n_keywords = 15;
  c.pretrain.epochs = 3;
  // Same budget and optimizer for every variant; sized to the 30 minute cap.
  c.train.max_epochs = 15;
  c.train.steps_per_epoch = 25;
  c.train.optimizer.kind = OptimizerKind::adam;
  c.train.optimizer.learning_rate = 1e-3;
  return c;
}

config::ToolkitConfig variant_config(const fs::path& root, std::uint64_t seed, trainer::Variant v) {
  auto c = e2e_config(root, seed);
  config::apply_override(c, "train.variant=" + trainer::to_string(v));
  c.paths.output_dir = (root / trainer::to_string(v)).string();
  return c;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome criterion7(const fs::path& work) {
  const auto start = std::chrono::steady_clock::now();
  std::map<trainer::Variant, std::vector<double>> f1;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const fs::path root = work / "e2e" / ("seed" + std::to_string(seed));
    fs::remove_all(root);
    const auto base = e2e_config(root, static_cast<std::uint64_t>(seed));
    commands::cmd_synth(base);
    const auto sim = commands::cmd_simulate(base);
    const std::size_t truths = evalkit::read_truth_csv(base.data_dir() / "test" / "truth.csv").size();
    std::vector<fs::path> recordings;
    for (std::size_t r = 0; r < sim.test_recordings; ++r) {
      char name[32];
      std::snprintf(name, sizeof name, "rec%03zu.wav", r);
      recordings.push_back(base.data_dir() / "test" / name);
    }
    if (truths < 50) return {false, "only " + std::to_string(truths) + " planted keywords"};
    for (auto v : kVariants) {
      const auto c = variant_config(root, static_cast<std::uint64_t>(seed), v);
      commands::cmd_train(c);
      const fs::path events = fs::path(c.paths.output_dir) / "test_events.csv";
      commands::cmd_spot(c, recordings, events);
      const auto rep = commands::cmd_eval(c, {{trainer::to_string(v), events}}, base.data_dir() / "test" / "truth.csv",
                                          fs::path(c.paths.output_dir) / "report");
      std::ifstream js(fs::path(c.paths.output_dir) / "report" / "report.json");
      const auto j = nlohmann::json::parse(js);
      const double score = j.at("rows").at(0).at("f1").get<double>();
      f1[v].push_back(score);
      std::printf("  seed %d %-22s F1 %.3f\n", seed, trainer::to_string(v).c_str(), score);
      std::fflush(stdout);
    }
  }
  const double ce = median(f1[trainer::Variant::finetune_ce]);
  const double proto = median(f1[trainer::Variant::finetune_proto]);
  const double metric = median(f1[trainer::Variant::finetune_proto_metric]);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  std::ostringstream d;
  d << "median F1 ce " << fmt("%.3f", ce) << ", proto " << fmt("%.3f", proto) << ", proto_metric " << fmt("%.3f", metric)
    << " (" << fmt("%.1f", minutes) << " min)";
  return {metric > proto && proto > ce && minutes <= 30.0, d.str()};
}

Outcome criterion9(const fs::path& work) {
  // Reuses the seed-1 proto_metric model of criterion 7, training it if absent.
  const fs::path root = work / "e2e" / "seed1";
  const auto c = variant_config(root, 1, trainer::Variant::finetune_proto_metric);
  if (!fs::exists(c.checkpoint_path()) || !fs::exists(c.bank_path())) {
    const auto base = e2e_config(root, 1);
    if (!fs::exists(base.data_dir() / "dataset.json")) {
      commands::cmd_synth(base);
      commands::cmd_simulate(base);
    }
    commands::cmd_train(c);
  }

  // Fixture: five planted keywords from held-out speakers at known spans.
  std::vector<datasim::KeywordUtterance> held_out;
  for (const auto& e : datasim::read_corpus_manifest(c.data_dir() / "val_utterances.csv")) {
    held_out.push_back({load_wav(e.wav_path), e.keyword_id, e.speaker_id});
  }
  const auto pool = datasim::make_background_pool(2, 30.0, datasim::BackgroundStyle::babble, 909);
  datasim::RecordingOptions ro;
  ro.duration_s = 25.0;
  ro.n_keywords = 5;
  datasim::Rng rng(datasim::derive_seed(909, {1}));
  const auto fixture = datasim::simulate_recording(held_out, pool, ro, rng);

  const fs::path dir = work / "fixture";
  fs::create_directories(dir);
  save_wav(dir / "fixture.wav", fixture.clip);
  std::vector<evalkit::GroundTruthSpan> truth;
  for (const auto& k : fixture.keywords) truth.push_back({"fixture", k.keyword_id, k.start_s, k.end_s});
  evalkit::write_truth_csv(dir / "truth.csv", truth);

  AudioClip noise;
  std::mt19937_64 nrng(910);
  noise.samples = testing::randn(20 * kCanonicalRate, nrng, 0.0, 0.05);
  save_wav(dir / "noise.wav", noise);

  commands::cmd_spot(c, {dir / "fixture.wav"}, dir / "fixture_events.csv");
  commands::cmd_eval(c, {{"fixture", dir / "fixture_events.csv"}}, dir / "truth.csv", dir / "report");
  std::ifstream js(dir / "report" / "report.json");
  const double f1 = nlohmann::json::parse(js).at("rows").at(0).at("f1").get<double>();
  const auto noise_events = commands::cmd_spot(c, {dir / "noise.wav"}, dir / "noise_events.csv");
  std::size_t n_noise = 0;
  for (const auto& r : noise_events) n_noise += r.events.size();
  std::ostringstream d;
  d << "fixture F1 " << fmt("%.3f", f1) << " over " << truth.size() << " planted keywords, " << n_noise
    << " events on pure noise";
  return {truth.size() == 5 && f1 >= 0.6 && n_noise == 0, d.str()};
}

// ---------------------------------------------------------------------------
// 8. Bit-identical checkpoints across two single-worker CLI runs.

int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion8(const fs::path& work) {
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  const std::string cli = CSKS_CLI_PATH;
  const std::string common = " --workers=1 --seed 11 --set synth.n_keywords=4 --set synth.n_speakers=5"
                             " --set synth.reps=2 --set simulate.val_background=12"
                             " --set paths.corpus_manifest=\"" + (root / "corpus" / "manifest.csv").string() + "\"" +
                             " --set paths.data_dir=\"" + (root / "data").string() + "\"";
  const std::string quiet = " > /dev/null 2>&1";
  if (run(cli + common + " synth" + quiet) != 0 || run(cli + common + " simulate" + quiet) != 0) {
    return {false, "synth/simulate failed"};
  }
  std::vector<std::string> blobs;
  for (int i = 0; i < 2; ++i) {
    const fs::path out = root / ("run" + std::to_string(i));
    const std::string train = cli + common + " --set paths.output_dir=\"" + out.string() + "\"" +
                              " --set pretrain.epochs=1 --set train.steps_per_epoch=3 train --variant "
                              "finetune_proto_metric --max-epochs 2" + quiet;
    if (run(train) != 0) return {false, "train run " + std::to_string(i) + " failed"};
    blobs.push_back(read_bytes(out / "model" / "best.ckpt"));
  }
  const bool same = !blobs[0].empty() && blobs[0] == blobs[1];
  return {same, "checkpoint " + std::to_string(blobs[0].size()) + " bytes, runs " + (same ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"csks acceptance criteria"};
  std::string criteria = "1,2,3,4,5,6,7,8,9";
  std::string work = "acceptance_work";
  app.add_option("--criteria", criteria, "Comma-separated criterion numbers");
  app.add_option("--work", work, "Scratch directory");
  CLI11_PARSE(app, argc, argv);

  std::vector<int> selected;
  std::stringstream ss(criteria);
  for (std::string tok; std::getline(ss, tok, ',');) selected.push_back(std::stoi(tok));
  fs::create_directories(work);

  const std::map<int, std::function<Outcome()>> all{
      {1, criterion1},
      {2, criterion2},
      {3, criterion3},
      {4, criterion4},
      {5, criterion5},
      {6, criterion6},
      {7, [&] { return criterion7(work); }},
      {8, [&] { return criterion8(work); }},
      {9, [&] { return criterion9(work); }},
  };
  bool ok = true;
  for (int id : selected) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = all.at(id)();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d: %s  %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), sec);
    std::fflush(stdout);
    ok = ok && o.pass;
  }
  return ok ? 0 : 1;
}
