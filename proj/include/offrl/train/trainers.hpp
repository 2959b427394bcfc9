#pragma once

// Supervised fine-tuning (TF, TF-All, TF-Top, DT), ILQL, PPO and the Quark
// outer loop.

#include "offrl/nn/optim.hpp"
#include "offrl/policy/policy.hpp"
#include "offrl/rewards/rewards.hpp"
#include "offrl/train/offline.hpp"

#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace offrl::train {

/// A token sequence whose loss covers only positions >= response_start.
using nn::Matrix;

using Example = policy::Sequence;

struct SupervisedConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-4;
  double min_lr = 0.0;
  nn::AdamConfig adam;
  double clip_norm = 1.0;  // 0 disables clipping
  unsigned long long seed = 0;
  // Restore the parameters from the epoch with the lowest validation loss.
  bool keep_best = true;

  void validate() const;
  nlohmann::json to_json() const;
  static SupervisedConfig from_json(const nlohmann::json& j);
  static SupervisedConfig from_json(const nlohmann::json& j, SupervisedConfig defaults);
};

struct TrainLog {
  std::vector<double> step_loss;   // mean token NLL of each minibatch
  std::vector<double> epoch_loss;  // mean training token NLL per epoch
  std::vector<double> val_loss;    // per epoch, empty without validation data
  int best_epoch = -1;
};

/// Response-token cross-entropy, averaged over tokens.
double mean_token_nll(const policy::PolicyModel& model, const std::vector<Example>& examples);

/// Stateful minibatch trainer. Several calls to run_epoch with the same data
/// are equivalent to one multi-epoch run; the example set may grow between
/// epochs.
class SupervisedTrainer {
 public:
  /// total_steps fixes the cosine schedule length.
  SupervisedTrainer(policy::PolicyModel& model, SupervisedConfig cfg, long long total_steps);

  /// One pass over `examples` in a seeded shuffled order.
  void run_epoch(const std::vector<Example>& examples, const std::vector<Example>& val);
  /// Restores the best-validation parameters when keep_best is set.
  void finish();
  const TrainLog& log() const { return log_; }

  static long long steps_per_epoch(std::size_t n, int batch_size);

 private:
  policy::PolicyModel& model_;
  SupervisedConfig cfg_;
  nn::CosineSchedule schedule_;
  std::mt19937_64 rng_;
  TrainLog log_;
  std::vector<Matrix> best_values_;
  double best_val_ = 0.0;
};

/// Runs cfg.epochs epochs of SupervisedTrainer.
TrainLog train_supervised(policy::PolicyModel& model, const std::vector<Example>& train,
                          const std::vector<Example>& val, const SupervisedConfig& cfg);

std::vector<Example> pair_examples(const std::vector<corpus::ContextResponsePair>& pairs);
std::vector<Example> record_examples(const OfflineDataset& data);
/// Sequences context ++ bin(r) ++ response.
std::vector<Example> dt_examples(const OfflineDataset& data, const BinQuantizer& q, const corpus::Vocab& vocab);

/// Stage 1 teacher forcing on human pairs.
TrainLog train_tf(policy::PolicyModel& model, const std::vector<corpus::ContextResponsePair>& train,
                  const std::vector<corpus::ContextResponsePair>& val, const SupervisedConfig& cfg);
/// Behavior cloning on every record of the offline dataset.
TrainLog train_tf_all(policy::PolicyModel& model, const OfflineDataset& data, const OfflineDataset& val,
                      const SupervisedConfig& cfg);
/// Behavior cloning on filter_top(data). Validation records are filtered with
/// the threshold derived from the training data.
TrainLog train_tf_top(policy::PolicyModel& model, const OfflineDataset& data, const OfflineDataset& val,
                      const TopFilterConfig& filter, const SupervisedConfig& cfg);
/// Return-conditioned behavior cloning.
TrainLog train_dt(policy::PolicyModel& model, const OfflineDataset& data, const OfflineDataset& val,
                  const BinQuantizer& q, const corpus::Vocab& vocab, const SupervisedConfig& cfg);

// ---------------------------------------------------------------- ILQL

struct ILQLConfig {
  double alpha = 0.05;  // weight of KL(pi_beta || pi_theta)
  double tau = 0.7;     // expectile
  double gamma = 1.0;
  double eta = 1.0;  // advantage temperature of the implicit policy
  int epochs = 5;
  int batch_size = 16;  // sequences per step
  double lr = 1e-4;
  double min_lr = 0.0;
  nn::AdamConfig adam = {0.9, 0.95, 1e-8, 0.0};
  bool target_v = false;
  double polyak = 0.005;
  bool finetune_backbone = false;
  unsigned long long seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ILQLConfig from_json(const nlohmann::json& j);
  static ILQLConfig from_json(const nlohmann::json& j, ILQLConfig defaults);
};

/// Transitions of one sequence: states s_0..s_{L-1}, actions a_t, a single
/// terminal reward after a_{L-1}.
struct ILQLSequence {
  TokenIds context;
  TokenIds response;
  double reward = 0.0;
};

struct ILQLLoss {
  nn::Var q_loss;  // TD error + alpha * KL term
  nn::Var v_loss;  // expectile regression
  double td = 0.0;
  double kl = 0.0;
  double expectile = 0.0;
};

/// Losses of one sequence given backbone features `h` (one row per state
/// s_0..s_{L-1}) and the behavior log-probabilities at those states.
/// TD target r_t + gamma * V(s_{t+1}) and the expectile input Q(s_t, a_t) are
/// treated as constants.
ILQLLoss ilql_loss(policy::PolicyModel& model, nn::Tape& t, nn::Var h, const Matrix& behavior_log_probs,
                   std::span<const int> actions, double reward, const ILQLConfig& cfg);

struct ILQLLog {
  std::vector<double> step_loss;
  std::vector<double> td;
  std::vector<double> kl;
  std::vector<double> expectile;
};

/// Adds ILQL heads to `model` (a copy of the behavior policy) and trains them.
/// With a frozen backbone, features are computed once per sequence.
ILQLLog train_ilql(policy::PolicyModel& model, const std::vector<ILQLSequence>& data, const ILQLConfig& cfg);
std::vector<ILQLSequence> ilql_sequences(const OfflineDataset& data);

/// How the critic turns per-token values into one score per candidate.
/// implicit_log_prob is the response log-probability under the implicit
/// policy log_softmax(log pi_beta + eta * (Q - V)); the others use Q and V
/// alone and can overrate responses the behavior policy never produces.
enum class CriticScore { implicit_log_prob, mean_q, last_q, advantage_sum };
CriticScore critic_score_from_name(std::string_view name);
std::string_view critic_score_name(CriticScore c);
double critic_score(const policy::PolicyModel& model, std::span<const int> context, std::span<const int> response,
                    CriticScore how);

// ---------------------------------------------------------------- PPO

struct PPOConfig {
  double kl_coef = 0.2;  // initial coefficient of KL(pi_theta || pi_beta)
  bool adaptive_kl = true;
  double kl_target = 0.5;  // per-token KL the controller steers toward
  double kl_horizon = 2000.0;
  double value_coef = 2.3;
  double clip_eps = 0.2;
  bool clip = true;
  int rollout_batch = 16;
  int ppo_epochs = 4;
  int iterations = 20;
  double lr = 5e-7;
  nn::AdamConfig adam = {0.9, 0.95, 1e-8, 1e-6};
  policy::DecodeConfig decode = {policy::DecodeConfig::Mode::sample, 1.0, 0, 16, 1, false};
  unsigned long long seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static PPOConfig from_json(const nlohmann::json& j);
  static PPOConfig from_json(const nlohmann::json& j, PPOConfig defaults);
};

struct PPOStats {
  double mean_reward = 0.0;
  double kl = 0.0;  // mean per-token KL(pi_theta || pi_beta) during the rollout
  double kl_coef = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  // Largest |ratio - 1| seen during the first inner epoch.
  double first_epoch_ratio_dev = 0.0;
};

/// One rollout batch and cfg.ppo_epochs optimization passes over it.
/// `model` must carry a value head; kl_coef is adapted in place.
PPOStats ppo_step(policy::PolicyModel& model, const policy::PolicyModel& behavior,
                  const std::vector<const corpus::ContextResponsePair*>& contexts, const rewards::RewardModel& reward,
                  const corpus::Vocab& vocab, PPOConfig& cfg, std::mt19937_64& rng);

/// cfg.iterations PPO steps over rollout batches drawn from `pairs`.
std::vector<PPOStats> train_ppo(policy::PolicyModel& model, const policy::PolicyModel& behavior,
                                const std::vector<corpus::ContextResponsePair>& pairs,
                                const rewards::RewardModel& reward, const corpus::Vocab& vocab, PPOConfig cfg);

// ---------------------------------------------------------------- Quark

struct QuarkConfig {
  int epochs = 5;
  int collect_per_epoch = 100;
  policy::DecodeConfig decode = {policy::DecodeConfig::Mode::sample, 1.0, 0, 16, 1, false};
  unsigned long long seed = 0;
};

struct QuarkLog {
  TrainLog train;
  std::vector<std::size_t> dataset_sizes;  // after each epoch's collection
  std::vector<double> collected_reward;    // mean reward of each epoch's samples
};

/// Each epoch samples collect_per_epoch responses conditioned on the top bin,
/// scores them, appends them to `data` and trains one DT epoch on the result.
/// With collect_per_epoch = 0 this is train_dt with cfg.epochs epochs.
QuarkLog quark_loop(policy::PolicyModel& model, OfflineDataset& data, const OfflineDataset& val,
                    const std::vector<corpus::ContextResponsePair>& pairs, const rewards::RewardModel& reward,
                    const BinQuantizer& q, const corpus::Vocab& vocab, const SupervisedConfig& train_cfg,
                    const QuarkConfig& cfg);

}  // namespace offrl::train
