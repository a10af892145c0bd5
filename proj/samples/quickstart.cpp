// Library walkthrough on a small suite: pretrain, unlearn with and without
// the invariance term, then fine-tune both on an unseen task.
//
//   ilu_quickstart [work dir]

#include <filesystem>
#include <iostream>

#include <fmt/core.h>

#include "ilu/attacks.hpp"
#include "ilu/config.hpp"
#include "ilu/experiment.hpp"
#include "ilu/taskvec.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  using namespace ilu;
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ilu_quickstart";

  ExperimentConfig c;
  c.suite.split_sizes = {{"pretrain", 200}, {"train", 96}, {"eval", 60}};
  c.model.hidden_dim = 32;
  c.train.pretrain.steps = 400;
  c.train.pretrain.eval_every = 100;
  c.train.unlearn.steps = 60;
  c.train.unlearn.eval_every = 20;
  c.train.attack.max_epochs = 3;
  c.relearn.k = 30;
  c.validate();

  const auto suite = prepare_suite(c.suite, work / "data");
  const std::uint64_t seed = 7;
  const auto original = pretrain_original(c, suite, seed, "original");
  const auto& forget_eval = suite.get(c.forget_domain, "eval");
  fmt::print("original   fq {:.3f}  utility {:.3f}\n", forget_quality(original.final_params, forget_eval),
             utility_accuracy(original.final_params, suite.get(c.retain_domain, "eval")));

  const auto method = UnlearnMethod::kNPO;
  for (auto variant : {Variant::kBase, Variant::kSingle}) {
    const auto envs = variant_envs(c, variant);
    const double lambda = variant == Variant::kBase ? 0.0 : c.unlearn.lambda;
    const auto data = UnlearnData::from_suite(suite, envs, c.forget_domain, c.retain_domain);
    const auto u = run_unlearning(original.final_params, make_spec(c, method, seed), lambda, envs, data,
                                  unlearn_train(c, method, seed), approach_label(method, variant));
    // T2 never appears as an invariance environment.
    const auto atk = downstream_attack(u.final_params, "unlearned", attack_env("T2"), suite, attack_train(c, seed),
                                       "attack:T2", nullptr, c.forget_domain);
    const auto ft = task_vector(atk.final_params, u.final_params, "finetune");
    const auto tu = task_vector(u.final_params, original.final_params, "unlearn");
    fmt::print("{:<16} fq {:.3f} -> {:.3f} after T2 fine-tune (ra {:.3f}, fa {:.3f}), cos(ft, unlearn) {:+.3f}\n",
               approach_label(method, variant), atk.fq_before, atk.fq_after, atk.ra.value_or(0.0), atk.fa_final,
               cosine(ft, tu));
  }
  return 0;
}
