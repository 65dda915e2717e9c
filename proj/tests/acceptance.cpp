// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
// Usage: acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "micro_oracle.hpp"
#include "support.hpp"
#include "tasam/cli.hpp"
#include "tasam/diag.hpp"
#include "tasam/error.hpp"
#include "tasam/sac.hpp"
#include "tasam/sam.hpp"

namespace fs = std::filesystem;
using namespace tasam;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every column of a CSV file with a header row, by name.
std::map<std::string, std::vector<double>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> names;
  {
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) names.push_back(cell);
  }
  std::map<std::string, std::vector<double>> cols;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::string cell;
    for (std::size_t i = 0; std::getline(ls, cell, ','); ++i) {
      if (i >= names.size()) break;
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      cols[names[i]].push_back(end != cell.c_str() ? v : std::nan(""));
    }
  }
  return cols;
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// ---- 1. gradient fidelity

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> dim(1, 4), hid(2, 6), depth(0, 2), act(0, 2);
  std::uniform_real_distribution<double> beta_d(0.0, 0.5), unit(0.05, 0.95);
  int bad_backward = 0, bad_critic = 0, bad_policy = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> sizes{dim(rng)};
    for (int d = depth(rng); d >= 0; --d) sizes.push_back(hid(rng));
    sizes.push_back(dim(rng));
    auto net = nn::make_mlp(sizes, act(rng) == 0 ? nn::Activation::sigmoid : nn::Activation::tanh,
                            static_cast<nn::Activation>(act(rng)), rng);
    const Eigen::VectorXd x = tsupport::random_vector(sizes.front(), rng);
    const Eigen::VectorXd up = tsupport::random_vector(sizes.back(), rng);
    auto f = [&](const nn::MlpParams& q) { return nn::forward(q, x).dot(up); };
    bad_backward += tsupport::mismatches(nn::flatten(nn::backward(net, x, up)), tsupport::fd_gradient(f, net));

    const int S = dim(rng), A = dim(rng), n = dim(rng) + 1;
    auto critic = sac::make_critic(S, A, {hid(rng), hid(rng)}, rng);
    auto policy = sac::make_policy(S, A, {hid(rng)}, rng);
    const double beta = beta_d(rng);
    sac::Batch b;
    for (int i = 0; i < n; ++i) {
      sac::Transition t;
      t.s = tsupport::random_vector(S, rng);
      t.s_next = tsupport::random_vector(S, rng);
      t.a = Eigen::VectorXd(A);
      for (int d = 0; d < A; ++d) t.a(d) = unit(rng);
      t.r = unit(rng);
      b.push_back(t);
    }
    const Eigen::VectorXd y = tsupport::random_vector(n, rng);
    auto cf = [&](const nn::MlpParams& q) { return sac::critic_loss_and_grad(b, sac::CriticNet{q, S, A}, y).loss; };
    bad_critic += tsupport::mismatches(nn::flatten(sac::critic_loss_and_grad(b, critic, y).grads),
                                       tsupport::fd_gradient(cf, critic.net));
    const Eigen::MatrixXd states = sac::stack_states(b);
    const Eigen::MatrixXd noise = tsupport::random_matrix(A, n, rng);
    auto pf = [&](const nn::MlpParams& q) {
      return sac::policy_loss_and_grad(states, noise, sac::PolicyNet{q, A}, critic, beta).loss;
    };
    bad_policy += tsupport::mismatches(nn::flatten(sac::policy_loss_and_grad(states, noise, policy, critic, beta).grads),
                                       tsupport::fd_gradient(pf, policy.trunk));
  }
  const double secs = seconds_since(t0);
  return {bad_backward == 0 && bad_critic == 0 && bad_policy == 0 && secs < 60.0,
          "50 configs, mismatched entries backward " + std::to_string(bad_backward) + ", critic " +
              std::to_string(bad_critic) + ", policy " + std::to_string(bad_policy) + ", " + fmt(secs, 3) + " s"};
}

// ---- 2. SAM reduction

Outcome sam_reduction() {
  std::mt19937_64 rng(202);
  int not_identical = 0, bad_norm = 0;
  double worst = 0.0;
  std::uniform_real_distribution<double> rho(1e-3, 2.0), scale(-8.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = nn::make_mlp({4, 6, 2}, nn::Activation::tanh, nn::Activation::identity, rng);
    const Eigen::MatrixXd X = tsupport::random_matrix(4, 8, rng);
    const Eigen::MatrixXd T = tsupport::random_matrix(2, 8, rng);
    sam::LossAndGrad lg = [&](const nn::MlpParams& q) {
      auto tape = nn::forward_batch(q, X);
      Eigen::MatrixXd err = tape.output() - T;
      nn::LossGrad out{err.squaredNorm() / 8.0, {}};
      out.grads = nn::backward_batch(q, tape, 2.0 * err / 8.0).grads;
      return out;
    };
    auto state = nn::make_adam_state(p, 1e-3);
    nn::adam_step_inplace(p, lg(p).grads, state);
    const auto res = sam::sam_step(p, lg, 0.0, state);
    const auto [want_p, want_s] = nn::adam_step(p, lg(p).grads, state);
    if (!(res.params == want_p) || !(res.state.first_moment == want_s.first_moment) ||
        !(res.state.second_moment == want_s.second_moment) || res.state.step_count != want_s.step_count)
      ++not_identical;

    const Eigen::VectorXd gv =
        tsupport::random_vector(static_cast<int>(p.num_entries()), rng) * std::pow(10.0, scale(rng));
    const double r = rho(rng);
    const auto adv = sam::sam_perturb(p, nn::unflatten_like(p, gv), r);
    const double err = std::abs((nn::flatten(adv) - nn::flatten(p)).norm() - r);
    worst = std::max(worst, err);
    bad_norm += err > 1e-10;
  }
  return {not_identical == 0 && bad_norm == 0, "rho=0 differences " + std::to_string(not_identical) +
                                                   "/50, worst |displacement - rho| " + fmt(worst, 3)};
}

// ---- 3. rho schedule

Outcome rho_schedule() {
  sam::SamPolicy p;
  int bad = 0;
  for (long nt : {1L, 7L, 200L, 1000L}) {
    for (auto comp : {sam::Component::actor, sam::Component::critic}) {
      bad += sam::rho_at(p, comp, 0, nt) != 0.5;
      bad += sam::rho_at(p, comp, nt, nt) != 0.01;
      double prev = sam::rho_at(p, comp, 0, nt);
      for (long t = 1; t <= nt; ++t) {
        const double r = sam::rho_at(p, comp, t, nt);
        bad += r > prev;
        prev = r;
      }
    }
  }
  // The logged radii of a short run end exactly at the final value.
  auto c = cli::preset("micro");
  c.iterations = 6;
  c.episode_length = 5;
  const auto run = marl::train(c);
  bad += run.metrics.records.front().rho_actor != 0.5 || run.metrics.records.back().rho_actor != 0.01;
  bad += run.metrics.records.front().rho_critic != 0.5 || run.metrics.records.back().rho_critic != 0.01;
  return {bad == 0, std::to_string(bad) + " violations over N_t in {1,7,200,1000} and a logged run"};
}

// ---- 4. micro-world oracle

struct MicroRun {
  std::vector<double> rewards;
  Outcome outcome;
};

MicroRun micro_oracle() {
  const auto t0 = Clock::now();
  MicroRun m;
  int checked = 0, expected = 0, bad = 0;
  for (int slices : {2, 3}) {
    const auto r = tmicro::run_micro_oracle(slices);
    checked += r.checked;
    expected += r.expected;
    bad += r.bad_decode + r.bad_reward;
    m.rewards.insert(m.rewards.end(), r.rewards.begin(), r.rewards.end());
    for (const auto& msg : r.messages) std::cout << "  " << msg << "\n";
  }
  const double secs = seconds_since(t0);
  m.outcome = {bad == 0 && checked == expected && secs < 60.0,
               std::to_string(checked) + " allocations (8 with 2 slices, 27 with an empty third), " +
                   std::to_string(bad) + " mismatches at 1e-9, " + fmt(secs, 3) + " s"};
  return m;
}

// ---- 5. constraint satisfaction

struct DecodeRun {
  long violations = 0;
  std::uint64_t digest = 0;
  Outcome outcome;
};

DecodeRun constraint_satisfaction() {
  DecodeRun d;
  const auto c = cli::preset("acceptance").scenario;
  const auto world = env::World::create(c);
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(std::nextafter(0.0, 1.0), 1.0);
  const int K = c.rbs_per_du;
  for (int trial = 0; trial < 10000; ++trial) {
    const int m = trial % c.num_dus;
    const auto& roster = world.roster(m);
    Eigen::VectorXd raw(2 * K);
    for (int i = 0; i < 2 * K; ++i) raw(i) = u(rng);
    const auto dec = env::decode_action(raw, roster);
    const Eigen::MatrixXi b = dec.slice_matrix();
    const Eigen::MatrixXi e = dec.ue_matrix();
    for (int k = 0; k < K; ++k) {
      d.violations += b.col(k).sum() != 1;  // each RB held by exactly one slice
      d.violations += e.col(k).sum() > 1;   // at most one UE per RB
      const int ue = dec.rb_ue[static_cast<std::size_t>(k)];
      if (ue >= 0) {
        const auto& owner = roster.by_slice[static_cast<std::size_t>(dec.rb_slice[static_cast<std::size_t>(k)])];
        d.violations += std::find(owner.begin(), owner.end(), ue) == owner.end();
      }
      d.digest = d.digest * 1000003u + static_cast<std::uint64_t>(dec.rb_slice[static_cast<std::size_t>(k)] * 131 + ue + 7);
    }
    d.violations += e.sum() > K;
  }
  d.outcome = {d.violations == 0, "10^4 raw actions, " + std::to_string(d.violations) + " violations"};
  return d;
}

// ---- runs that go through the command layer and leave manifests

struct RunSet {
  std::vector<fs::path> dirs;  // every run directory holding a manifest
};

fs::path train_run(const fs::path& dir, marl::TrainConfig c, RunSet& runs) {
  std::ostringstream log;
  cli::run_command("train", {{"config", marl::to_json(c)}, {"eval_episodes", 0}}, dir, log);
  runs.dirs.push_back(dir);
  return dir;
}

double critic_lambda(const fs::path& run_dir, const fs::path& out, RunSet& runs) {
  std::ostringstream log;
  const json args = {{"checkpoint", fs::absolute(run_dir / "checkpoint.json").string()},
                     {"probe_seed", 777},
                     {"probe_size", 512},
                     {"max_iters", 300},
                     {"tol", 1e-4},
                     {"episodes", 0}};
  cli::run_command("diagnose", args, out, log);
  runs.dirs.push_back(out);
  std::ifstream in(out / "sharpness.csv");
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() > 3 && cells[2] == "critic") return std::stod(cells[3]);
  }
  throw std::runtime_error("no critic row in " + (out / "sharpness.csv").string());
}

marl::TrainConfig acceptance_config(std::uint64_t seed, const std::string& mode) {
  auto c = cli::preset("acceptance");
  marl::set_run_seed(c, seed);
  marl::apply_mode(c, mode);
  return c;
}

// ---- 6 and 7. directional benefit and sharpness

struct BenefitRun {
  Outcome benefit, sharpness;
};

BenefitRun benefit_and_sharpness(const fs::path& work, RunSet& runs) {
  const auto t0 = Clock::now();
  int wins = 0, flatter = 0;
  double diff_sum = 0.0;
  std::ostringstream per_seed, per_lambda;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::map<std::string, double> score, lambda;
    for (const std::string mode : {"both-sam", "no-sam"}) {
      const auto dir = train_run(work / ("c6-" + mode + "-seed" + std::to_string(seed)),
                                 acceptance_config(seed, mode), runs);
      const auto trace = read_csv(dir / "metrics.csv").at("mean_reward");
      const std::size_t n = std::min<std::size_t>(50, trace.size());
      score[mode] = std::accumulate(trace.end() - static_cast<std::ptrdiff_t>(n), trace.end(), 0.0) / n;
      lambda[mode] = critic_lambda(dir, work / ("c7-" + mode + "-seed" + std::to_string(seed)), runs);
    }
    wins += score["both-sam"] >= score["no-sam"];
    flatter += lambda["both-sam"] < lambda["no-sam"];
    diff_sum += score["both-sam"] - score["no-sam"];
    per_seed << (seed > 1 ? "; " : "") << "s" << seed << " " << fmt(score["both-sam"]) << " vs " << fmt(score["no-sam"]);
    per_lambda << (seed > 1 ? "; " : "") << "s" << seed << " " << fmt(lambda["both-sam"], 4) << " vs "
               << fmt(lambda["no-sam"], 4);
  }
  const double mean_diff = diff_sum / 5.0;
  BenefitRun r;
  r.benefit = {wins >= 4 && mean_diff > 0.0,
               "both-sam >= no-sam in " + std::to_string(wins) + "/5 seeds, mean improvement " + fmt(mean_diff) +
                   " [" + per_seed.str() + "], " + fmt(seconds_since(t0), 4) + " s with criterion 7"};
  r.sharpness = {flatter >= 4, "critic lambda_max lower for both-sam in " + std::to_string(flatter) + "/5 seeds [" +
                                   per_lambda.str() + "]"};
  return r;
}

// ---- 8. gate selectivity

Outcome gate_selectivity(const fs::path& work, RunSet& runs) {
  int ok = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto c = acceptance_config(seed, "both-sam");
    c.scenario.num_dus = 3;
    c.scenario.total_ues = 30;
    c.scenario.du_load_weights = {3.0, 1.0, 1.0};
    const auto dir = train_run(work / ("c8-seed" + std::to_string(seed)), c, runs);
    const auto cols = read_csv(dir / "metrics.csv");
    std::vector<double> freq;
    for (int i = 0; i < 3; ++i) {
      const auto& g = cols.at("gate_a" + std::to_string(i));
      freq.push_back(std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size()));
    }
    ok += freq[0] > freq[1] && freq[0] > freq[2];
    per_seed << (seed > 1 ? "; " : "") << "s" << seed << " " << fmt(freq[0], 3) << " vs " << fmt(freq[1], 3) << ", "
             << fmt(freq[2], 3);
  }
  return {ok >= 4, "overloaded DU gate frequency highest in " + std::to_string(ok) + "/5 seeds [" + per_seed.str() + "]"};
}

// ---- 9. sharpness diagnostic accuracy

Outcome sharpness_accuracy() {
  std::mt19937_64 rng(909);
  int bad = 0, cases = 0;
  double worst = 0.0;
  std::uniform_real_distribution<double> top(0.01, 100.0);
  for (int n : {2, 3, 5, 10, 20, 35, 50}) {
    for (double cond : {1.0, 10.0, 1e2, 1e3, 1e4}) {
      const Eigen::MatrixXd A = tsupport::random_spd(n, cond, top(rng), rng);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
      const double want = es.eigenvalues().maxCoeff();
      const Eigen::VectorXd b = tsupport::random_vector(n, rng);
      diag::GradFn g = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return A * x - b; };
      const auto rep = diag::max_eigenvalue(g, tsupport::random_vector(n, rng), 5000, 1e-7, 9000 + cases);
      const double rel = std::abs(rep.lambda_max - want) / want;
      worst = std::max(worst, rel);
      bad += rel > 1e-3;
      ++cases;
    }
  }
  return {bad == 0, std::to_string(cases) + " quadratics (n <= 50, cond <= 1e4), worst relative error " + fmt(worst, 3)};
}

// ---- 10. determinism from manifests

Outcome determinism(const RunSet& runs, const fs::path& work, const MicroRun& micro, const DecodeRun& decode) {
  int mismatched = 0, files = 0;
  for (const auto& dir : runs.dirs) {
    const auto man = cli::read_manifest(dir / "manifest.json");
    const fs::path again = work / "rerun" / dir.filename();
    std::ostringstream log;
    cli::run_command(man.command, man.args, again, log);
    for (const auto& name : man.outputs) {
      if (name == "manifest.json") continue;
      ++files;
      if (slurp(dir / name) != slurp(again / name)) {
        ++mismatched;
        std::cout << "  differs: " << (dir / name).string() << "\n";
      }
    }
  }
  const auto micro2 = micro_oracle();
  const auto decode2 = constraint_satisfaction();
  const bool pure_ok = micro2.rewards == micro.rewards && decode2.digest == decode.digest &&
                       decode2.violations == decode.violations;
  return {mismatched == 0 && pure_ok && files > 0,
          std::to_string(runs.dirs.size()) + " manifests re-run, " + std::to_string(mismatched) + "/" +
              std::to_string(files) + " artifacts differ; criteria 4-5 recomputed " +
              (pure_ok ? "bit-identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "tasam_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  const auto t0 = Clock::now();
  int failures = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o) {
    std::cout << "criterion " << id << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
    failures += !o.pass;
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    try {
      report(id, name, f());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("exception: ") + e.what()});
    }
  };

  RunSet runs;
  MicroRun micro;
  DecodeRun decode;
  guarded(1, "gradient fidelity", gradient_fidelity);
  guarded(2, "SAM reduction", sam_reduction);
  guarded(3, "rho schedule exactness", rho_schedule);
  guarded(4, "micro-world oracle", [&] {
    micro = micro_oracle();
    return micro.outcome;
  });
  guarded(5, "constraint satisfaction", [&] {
    decode = constraint_satisfaction();
    return decode.outcome;
  });
  BenefitRun benefit;
  try {
    benefit = benefit_and_sharpness(work, runs);
  } catch (const std::exception& e) {
    benefit.benefit = benefit.sharpness = {false, std::string("exception: ") + e.what()};
  }
  report(6, "directional benefit", benefit.benefit);
  report(7, "sharpness reduction", benefit.sharpness);
  guarded(8, "gate selectivity", [&] { return gate_selectivity(work, runs); });
  guarded(9, "sharpness diagnostic accuracy", sharpness_accuracy);
  guarded(10, "determinism", [&] { return determinism(runs, work, micro, decode); });

  std::cout << "acceptance: " << (10 - failures) << "/10 criteria passed in " << fmt(seconds_since(t0), 4) << " s"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
