// Acceptance suite: trains the desk-scale models and checks every release
// criterion at its pinned threshold. Prints one [PASS]/[FAIL] line per
// criterion; the exit code is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cli_config.hpp"
#include "lmrc/attacks.hpp"
#include "lmrc/data.hpp"
#include "lmrc/masking.hpp"
#include "lmrc/model.hpp"
#include "lmrc/selfcheck.hpp"
#include "lmrc/training.hpp"

using namespace lmrc;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& id, bool passed, const std::string& detail) {
  std::cout << (passed ? "[PASS] " : "[FAIL] ") << id << " - " << detail << std::endl;
  if (!passed) ++g_failures;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

// ---- desk-scale experiment setup -------------------------------------------

struct DeskSetup {
  Dataset train, validation, test;
  std::string source;
};

DeskSetup load_desk_data() {
  DeskSetup d;
  for (const char* dir : {"data/mnist", "../data/mnist", "../../data/mnist"}) {
    const std::string images = std::string(dir) + "/train-images-idx3-ubyte";
    if (fs::exists(images)) {
      Dataset train_full =
          load_mnist(images, std::string(dir) + "/train-labels-idx1-ubyte").take(3000);
      Dataset test_full = load_mnist(std::string(dir) + "/t10k-images-idx3-ubyte",
                                     std::string(dir) + "/t10k-labels-idx1-ubyte");
      auto [train, val] = split_train_validation(train_full, 300);
      d.train = std::move(train);
      d.validation = std::move(val);
      d.test = test_full.take(1000);
      d.test.split = Split::Test;
      d.source = dir;
      return d;
    }
  }
  Dataset full = make_synthetic_digits(3000, 0xDA7A5EEDULL, Split::Train);
  auto [train, val] = split_train_validation(full, 300);
  d.train = std::move(train);
  d.validation = std::move(val);
  d.test = make_synthetic_digits(1000, 0x7E575EEDULL, Split::Test);
  d.source = "synthetic digits (IDX-compatible desk substitute)";
  return d;
}

RunConfig desk_config(Method method, float gamma) {
  RunConfig rc;
  rc.method = method;
  rc.gamma = gamma;
  rc.k = 13;  // round(0.1 * 128)
  rc.delta = 0.0f;
  rc.train_attack.epsilon = 0.3f;
  rc.train_attack.alpha = 0.075f;
  rc.train_attack.steps = 10;
  rc.train_attack.random_start = true;
  rc.eval_attack = rc.train_attack;
  rc.eval_attack.steps = 20;
  rc.cca_attack = rc.train_attack;
  rc.cca_attack.steps = 10;
  rc.cca_attack.random_start = false;
  rc.epochs = 8;
  rc.batch_size = 64;
  rc.seed = 1;
  rc.validation_size = 300;
  rc.optimizer.lr = 0.05f;
  rc.optimizer.lr_step_epochs = {5, 7};
  return rc;
}

struct TrainedModel {
  Classifier model;
  RunConfig config;
  std::vector<MetricsRecord> history;
};

TrainedModel train_method(const DeskSetup& data, Method method, float gamma) {
  TrainedModel out{Classifier::build(ArchConfig::small_cnn(1, 28, 10), 1), desk_config(method, gamma), {}};
  std::cout << "  training " << method_name(method) << " (gamma " << gamma << ") ..." << std::flush;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train(out.model, data.train, data.validation, out.config);
  out.history = std::move(result.history);
  std::cout << " done in " << fmt(seconds_since(t0)) << "s, final val robust "
            << fmt(out.history.back().robust_acc) << "%" << std::endl;
  return out;
}

EvalResult eval_mode(TrainedModel& tm, const Dataset& test, EvalMode mode, int steps) {
  RunConfig rc = tm.config;
  rc.batch_size = 100;
  AttackSpec attack = rc.eval_attack;
  attack.steps = steps;
  return evaluate(tm.model, test, rc, mode, &attack);
}

}  // namespace

int main() {
  std::cout << "== acceptance suite ==" << std::endl;
  const auto suite_start = std::chrono::steady_clock::now();

  // C1: gradient checks
  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = selfcheck::run_gradient_checks(1, 100);
    bool ok = true;
    std::string why;
    for (const auto& r : results)
      if (!r.passed && ok) {
        ok = false;
        why = r.name + ": " + r.detail;
      }
    const double secs = seconds_since(t0);
    report("C1 gradient-check suite",
           ok && secs < 60.0,
           ok ? (std::to_string(results.size()) + " ops x 100 configs in " + fmt(secs) + "s")
              : why);
  }

  // C2: top-k oracle equivalence
  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = selfcheck::run_topk_checks(1, 10000);
    bool ok = true;
    std::string why;
    std::string detail;
    for (const auto& r : results) {
      if (!r.passed && ok) {
        ok = false;
        why = r.name + ": " + r.detail;
      }
      detail += (detail.empty() ? "" : ", ") + r.detail;
    }
    const double secs = seconds_since(t0);
    report("C2 top-k oracle equivalence", ok && secs < 60.0,
           ok ? (detail + " in " + fmt(secs) + "s") : why);
  }

  // C3: geometry suite
  {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = selfcheck::run_geometry_checks(1, 1000);
    const bool ok = results.size() == 1 && results[0].passed;
    const double secs = seconds_since(t0);
    report("C3 attack geometry suite", ok && secs < 60.0,
           ok ? (results[0].detail + " in " + fmt(secs) + "s") : results[0].detail);
  }

  // C4: CLI determinism (byte-identical metrics.csv and last.ckpt)
  {
    const char* cli = std::getenv("LMRC_CLI");
    std::string cli_path = cli ? cli : std::string();
#ifdef LMRC_CLI_BINARY
    if (cli_path.empty()) cli_path = LMRC_CLI_BINARY;
#endif
    bool ok = false;
    std::string detail;
    if (cli_path.empty() || !fs::exists(cli_path)) {
      detail = "lmrc binary not found (set LMRC_CLI)";
    } else {
      const fs::path dir = fs::temp_directory_path() / "lmrc-acceptance-c4";
      fs::remove_all(dir);
      fs::create_directories(dir);
      const std::string conf = (dir / "det.conf").string();
      {
        std::ofstream f(conf);
        f << "preset = mnist-small\ndataset = synth:400/100\nepochs = 2\n"
          << "batch_size = 64\nvalidation_size = 100\nseed = 11\nlr = 0.05\n";
      }
      // separate config copies so out_dir differs but the training keys are equal
      const std::string conf_a = (dir / "a.conf").string(), conf_b = (dir / "b.conf").string();
      fs::copy_file(conf, conf_a);
      fs::copy_file(conf, conf_b);
      {
        std::ofstream fa(conf_a, std::ios::app);
        fa << "out_dir = " << (dir / "a").string() << "\n";
        std::ofstream fb(conf_b, std::ios::app);
        fb << "out_dir = " << (dir / "b").string() << "\n";
      }
      const bool ran =
          std::system((cli_path + " train --config " + conf_a + " > /dev/null 2>&1").c_str()) == 0 &&
          std::system((cli_path + " train --config " + conf_b + " > /dev/null 2>&1").c_str()) == 0;
      if (!ran) {
        detail = "training runs failed";
      } else {
        auto slurp = [](const fs::path& p) {
          std::ifstream f(p, std::ios::binary);
          std::stringstream ss;
          ss << f.rdbuf();
          return ss.str();
        };
        const bool metrics_same =
            slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv");
        const bool ckpt_same = slurp(dir / "a" / "last.ckpt") == slurp(dir / "b" / "last.ckpt");
        ok = metrics_same && ckpt_same && !slurp(dir / "a" / "metrics.csv").empty();
        detail = std::string("metrics ") + (metrics_same ? "identical" : "differ") +
                 ", checkpoint " + (ckpt_same ? "identical" : "differs");
      }
    }
    report("C4 determinism of train runs", ok, detail);
  }

  // ---- desk-scale training for the trend criteria ---------------------------
  DeskSetup data = load_desk_data();
  std::cout << "desk-scale dataset: " << data.source << " (" << data.train.size() << " train / "
            << data.validation.size() << " val / " << data.test.size() << " test)" << std::endl;

  TrainedModel sat = train_method(data, Method::Sat, 0.0f);
  TrainedModel lm = train_method(data, Method::LmOracle, 0.0f);
  TrainedModel lm_cca = train_method(data, Method::LmCca, 0.1f);
  TrainedModel lc = train_method(data, Method::LcCca, 0.2f);

  const EvalResult sat_pgd20 = eval_mode(sat, data.test, EvalMode::Pgd, 20);
  const EvalResult sat_pgd40 = eval_mode(sat, data.test, EvalMode::Pgd, 40);
  const EvalResult sat_lm_inference = eval_mode(sat, data.test, EvalMode::PgdWithLmOracle, 20);
  const EvalResult lm_pgd20 = eval_mode(lm, data.test, EvalMode::PgdWithLmOracle, 20);
  const EvalResult lm_pgd40 = eval_mode(lm, data.test, EvalMode::PgdWithLmOracle, 40);
  const EvalResult lmcca_pgd20 = eval_mode(lm_cca, data.test, EvalMode::PgdWithLmCca, 20);
  const EvalResult lmcca_pgd40 = eval_mode(lm_cca, data.test, EvalMode::PgdWithLmCca, 40);
  const EvalResult lc_pgd20 = eval_mode(lc, data.test, EvalMode::PgdWithLcCca, 20);
  const EvalResult lc_pgd40 = eval_mode(lc, data.test, EvalMode::PgdWithLcCca, 40);

  const float sat_robust = sat_pgd20.robust_acc.value_or(0);
  const float lm_robust = lm_pgd20.robust_acc.value_or(0);
  std::cout << "  sat: clean " << fmt(sat_pgd20.clean_acc) << " robust " << fmt(sat_robust)
            << " | lm-oracle: clean " << fmt(lm_pgd20.clean_acc) << " robust " << fmt(lm_robust)
            << "\n  lm-cca: clean " << fmt(lmcca_pgd20.clean_acc) << " robust "
            << fmt(lmcca_pgd20.robust_acc.value_or(0)) << " | lc-cca: clean "
            << fmt(lc_pgd20.clean_acc) << " robust " << fmt(lc_pgd20.robust_acc.value_or(0))
            << std::endl;

  // C5: oracle latent masking closes the robustness gap
  {
    const bool a = lm_robust >= sat_robust + 10.0f;
    const float sat_gap = std::fabs(sat_pgd20.clean_acc - sat_robust);
    const float lm_gap = std::fabs(lm_pgd20.clean_acc - lm_robust);
    const bool b = lm_gap <= 0.5f * sat_gap;
    report("C5 oracle-LM trend (robust +10, gap halved)", a && b,
           "lm robust " + fmt(lm_robust) + " vs sat " + fmt(sat_robust) + " (need +10); gaps " +
               fmt(lm_gap) + " vs " + fmt(sat_gap) + " (need <= half)");
  }

  // C6: LM at inference only hurts a SAT-trained model
  {
    const float dropped = sat_lm_inference.robust_acc.value_or(0);
    const bool ok = dropped <= sat_robust - 2.0f;
    report("C6 LM-at-inference-only drop on SAT (>= 2 points)", ok,
           "sat robust " + fmt(sat_robust) + " -> " + fmt(dropped) + " with oracle masks");
  }

  // C7: self-supervised methods beat SAT without giving up clean accuracy
  {
    const float lmcca_r = lmcca_pgd20.robust_acc.value_or(0);
    const float lc_r = lc_pgd20.robust_acc.value_or(0);
    const bool robust_ok = lmcca_r >= sat_robust + 3.0f && lc_r >= sat_robust + 3.0f;
    const bool clean_ok = lmcca_pgd20.clean_acc >= sat_pgd20.clean_acc - 6.0f &&
                          lc_pgd20.clean_acc >= sat_pgd20.clean_acc - 6.0f;
    report("C7 LM-CCA / LC-CCA trend (+3 robust, clean within 6)", robust_ok && clean_ok,
           "lm-cca +" + fmt(lmcca_r - sat_robust) + " clean " +
               fmt(lmcca_pgd20.clean_acc - sat_pgd20.clean_acc) + "; lc-cca +" +
               fmt(lc_r - sat_robust) + " clean " +
               fmt(lc_pgd20.clean_acc - sat_pgd20.clean_acc));
  }

  // C8: PGD20 vs PGD40 stability for every trained method
  {
    struct Row {
      const char* name;
      float a20, a40;
    };
    const Row rows[] = {
        {"sat", sat_pgd20.robust_acc.value_or(0), sat_pgd40.robust_acc.value_or(0)},
        {"lm_oracle", lm_pgd20.robust_acc.value_or(0), lm_pgd40.robust_acc.value_or(0)},
        {"lm_cca", lmcca_pgd20.robust_acc.value_or(0), lmcca_pgd40.robust_acc.value_or(0)},
        {"lc_cca", lc_pgd20.robust_acc.value_or(0), lc_pgd40.robust_acc.value_or(0)},
    };
    bool ok = true;
    std::string detail;
    for (const Row& r : rows) {
      const float diff = std::fabs(r.a20 - r.a40);
      ok = ok && diff <= 1.0f;
      detail += std::string(r.name) + " " + fmt(diff) + " ";
    }
    report("C8 PGD20 vs PGD40 within 1 point", ok, "deltas: " + detail);
  }

  // C9: CCA compresses the latent L1 norm for >= 90% of adversarial inputs
  {
    RunConfig rc = sat.config;
    rc.batch_size = 100;
    const AttackLoss loss = [&](const Tensor& logits, const std::vector<int>& y) {
      return cross_entropy_with_logits(logits, smooth_targets(y, 10, 0.0f));
    };
    int compressed = 0, total = 0;
    for (int start = 0; start < data.test.size(); start += rc.batch_size) {
      std::vector<int> idx;
      for (int i = start; i < std::min(data.test.size(), start + rc.batch_size); ++i)
        idx.push_back(i);
      const AugmentationPolicy no_aug;
      Batch batch = make_batch(data.test, idx, no_aug, nullptr);
      Tensor x_adv =
          pgd(sat.model, batch.x, batch.y, rc.eval_attack, loss, Rng::derive(7, start));
      AttackSpec cca_spec = rc.cca_attack;
      Tensor x_hat = cca(sat.model, x_adv, cca_spec, CcaCenter::Observed);
      const auto before = compression_per_sample(sat.model, x_adv);
      const auto after = compression_per_sample(sat.model, x_hat);
      for (std::size_t i = 0; i < before.size(); ++i) {
        compressed += after[i] <= before[i] ? 1 : 0;
        ++total;
      }
    }
    const double pct = 100.0 * compressed / std::max(1, total);
    report("C9 CCA compression (>= 90% of adversarial inputs)", pct >= 90.0,
           fmt(pct) + "% of " + std::to_string(total) + " samples compressed after 10 steps");
  }

  // C10: counter-adversarial latents align better with the clean latents
  {
    RunConfig rc = lc.config;
    rc.batch_size = 100;
    const AttackLoss loss = [&](const Tensor& logits, const std::vector<int>& y) {
      return cross_entropy_with_logits(logits, smooth_targets(y, 10, 0.0f));
    };
    double cos_adv_sum = 0.0, cos_cca_sum = 0.0;
    int qualifying = 0;
    EvaluationScope eval(lc.model);
    for (int start = 0; start < data.test.size(); start += rc.batch_size) {
      std::vector<int> idx;
      for (int i = start; i < std::min(data.test.size(), start + rc.batch_size); ++i)
        idx.push_back(i);
      const AugmentationPolicy no_aug;
      Batch batch = make_batch(data.test, idx, no_aug, nullptr);
      Tensor x_adv =
          pgd(lc.model, batch.x, batch.y, rc.eval_attack, loss, Rng::derive(13, start));
      Tensor x_hat = cca(lc.model, x_adv, rc.cca_attack, CcaCenter::Observed);
      ParameterFreeze freeze(lc.model);
      Tensor z_clean = lc.model.penultimate(batch.x);
      Tensor z_adv = lc.model.penultimate(x_adv);
      Tensor z_hat = lc.model.penultimate(x_hat);
      const auto pred_adv = argmax_labels(lc.model.head(z_adv));
      const auto pred_hat = argmax_labels(lc.model.head(z_hat));
      const int d = lc.model.penultimate_dim();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (pred_adv[i] == batch.y[i] || pred_hat[i] != batch.y[i]) continue;
        std::span<const float> zc(z_clean.data().data() + i * d, d);
        std::span<const float> za(z_adv.data().data() + i * d, d);
        std::span<const float> zh(z_hat.data().data() + i * d, d);
        cos_adv_sum += cosine_similarity(zc, za);
        cos_cca_sum += cosine_similarity(zc, zh);
        ++qualifying;
      }
    }
    const bool ok = qualifying > 0 && cos_cca_sum / qualifying > cos_adv_sum / qualifying;
    report("C10 cosine trend on attack-broken, CCA-repaired samples", ok,
           std::to_string(qualifying) + " qualifying; mean cos(clean,cca) " +
               (qualifying ? fmt(cos_cca_sum / qualifying) : "n/a") + " vs cos(clean,adv) " +
               (qualifying ? fmt(cos_adv_sum / qualifying) : "n/a"));
  }

  // C11: label smoothing exactness and schedule exactness
  {
    bool smooth_ok = true;
    for (int c : {2, 4, 10, 100}) {
      for (float gamma : {0.0f, 0.05f, 0.1f, 0.15f, 0.2f}) {
        for (int y = 0; y < c; y += std::max(1, c / 3)) {
          Tensor t = smooth_targets({y}, c, gamma);
          float mass = 0.0f;
          for (float v : t.data()) mass += v;
          smooth_ok = smooth_ok && std::fabs(mass - 1.0f) <= 1e-6f;
          if (gamma == 0.0f) {
            for (int i = 0; i < c; ++i)
              smooth_ok = smooth_ok && t.data()[i] == (i == y ? 1.0f : 0.0f);
          }
        }
      }
    }
    bool schedule_ok = true;
    for (const auto& rec : sat.history) {
      const float expect = rec.epoch < 5 ? 0.05f : (rec.epoch < 7 ? 0.005f : 0.0005f);
      schedule_ok = schedule_ok && std::fabs(rec.lr - expect) < 1e-9f;
    }
    report("C11 label smoothing + lr schedule exactness", smooth_ok && schedule_ok,
           std::string("distributions ") + (smooth_ok ? "exact" : "off") + ", lr steps " +
               (schedule_ok ? "exact at epochs {5,7}" : "wrong"));
  }

  std::cout << "== " << (g_failures == 0 ? "all criteria passed" : "FAILURES: ") << (g_failures ? std::to_string(g_failures) : "")
            << " (total " << fmt(seconds_since(suite_start)) << "s) ==" << std::endl;
  return g_failures == 0 ? 0 : 1;
}
