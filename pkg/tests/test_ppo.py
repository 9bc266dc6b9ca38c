from types import SimpleNamespace

import numpy as np
import pytest

from chiller_horizon.core.checkpoint import load_checkpoint, save_checkpoint
from chiller_horizon.core.config import PpoConfig
from chiller_horizon.core.errors import ConfigError, ContractError, InputError, PpoNumericError, TrainingDivergedError
from chiller_horizon.core.nn import Adam, Architecture, Mlp, RunningMeanStd
from chiller_horizon.core.ppo import (
    ActorCritic,
    MiniBatch,
    RolloutBuffer,
    clipped_surrogate,
    gae_advantages,
    grad_check,
    load_policy,
    policy_forward,
    ppo_loss,
    squashed_log_prob,
    train,
)

BANDIT_CFG = PpoConfig(
    pi_lr=1e-2, vf_lr=1e-2, target_kl=0.05, steps_per_batch=200, minibatch_size=100, hidden_sizes=(8,), seed=0,
)


class BanditEnv:
    """One-step episodes with reward -|action|."""
    obs_dim = 1
    act_dim = 1

    def __init__(self, reward_fn=None):
        self.reward_fn = reward_fn or (lambda a: -abs(float(a[0])))

    def reset(self, seed=None):
        return np.ones(1)

    def step(self, action):
        return SimpleNamespace(observation=np.ones(1), reward=self.reward_fn(action), done=True, info={})


def _batch(policy, rng, n=32, log_ratio_noise=0.1):
    obs = rng.normal(size=(n, policy.obs_dim))
    outs = [policy_forward(policy, x, rng, normalized=True) for x in obs]
    log_prob = np.array([o.log_prob for o in outs]) + rng.uniform(-log_ratio_noise, log_ratio_noise, n)
    return MiniBatch(
        obs=obs,
        pre_squash=np.array([o.pre_squash for o in outs]),
        log_prob=log_prob,
        advantages=rng.normal(size=n),
        returns=rng.normal(size=n),
    )


def test_gae_one_step_closed_form():
    adv, ret = gae_advantages([1.0, 1.0], [2.0, 2.0], [False, False], gamma=0.99, lam=0.0, last_value=2.0)
    assert adv == pytest.approx([0.98, 0.98])
    assert ret == pytest.approx([2.98, 2.98])


def test_gae_suffix_sums():
    rewards = [1.0, -2.0, 3.0, 0.5]
    adv, _ = gae_advantages(rewards, [0.0] * 4, [False] * 4, gamma=1.0, lam=1.0)
    assert adv == pytest.approx([2.5, 1.5, 3.5, 0.5])


def test_gae_matches_double_sum():
    rng = np.random.default_rng(3)
    r, v = rng.normal(size=12), rng.normal(size=12)
    last, gamma, lam = 0.7, 0.97, 0.9
    adv, _ = gae_advantages(r, v, [False] * 12, gamma, lam, last_value=last)
    v_next = np.append(v[1:], last)
    delta = r + gamma * v_next - v
    expected = [sum((gamma * lam) ** l * delta[t + l] for l in range(12 - t)) for t in range(12)]
    assert np.allclose(adv, expected, atol=1e-12, rtol=0)


def test_gae_does_not_bootstrap_across_episodes():
    adv, _ = gae_advantages([1.0, 1.0, 1.0], [0.5, 0.5, 0.5], [False, True, False], 0.9, 0.95, last_value=10.0)
    assert adv[1] == pytest.approx(1.0 - 0.5)
    assert adv[0] == pytest.approx((1.0 + 0.9 * 0.5 - 0.5) + 0.9 * 0.95 * adv[1])
    with pytest.raises(ContractError):
        gae_advantages([1.0], [1.0, 2.0], [False], 0.9, 0.9)


def test_clipped_surrogate():
    assert clipped_surrogate(1.5, 2.0, 0.2) == pytest.approx(2.4)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_surrogate(1.0, 3.0, 0.2) == pytest.approx(3.0)


def test_identity_ratio_loss():
    rng = np.random.default_rng(0)
    policy = ActorCritic(3, 2, PpoConfig(hidden_sizes=(8, 8)), rng)
    batch = _batch(policy, rng, log_ratio_noise=0.0)
    result = ppo_loss(policy, batch, policy.cfg)
    assert result.pi_loss == pytest.approx(-batch.advantages.mean(), rel=1e-9, abs=1e-12)
    assert result.clip_fraction == 0.0
    assert result.approx_kl == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_ppo_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    policy = ActorCritic(4, 2, PpoConfig(hidden_sizes=(6, 6), entropy_coef=0.01), rng)
    policy.log_std[:] = rng.uniform(-1.0, 0.0, 2)
    batch = _batch(policy, rng, n=24)

    def loss_and_grad():
        res = ppo_loss(policy, batch, policy.cfg)
        return res.loss, res.pi_grads + res.vf_grads

    assert grad_check(policy.pi_params() + policy.vf_params(), loss_and_grad, h=1e-5, seed=seed) < 1e-4


def test_grad_check_quadratic():
    rng = np.random.default_rng(1)
    w = rng.uniform(0.5, 2.0, size=(4, 5)) * rng.choice([-1.0, 1.0], size=(4, 5))
    error = grad_check([w], lambda: (float(np.sum(w ** 2)), [2 * w]), h=1e-4, n_checks=20)
    assert error < 1e-8


def test_grad_check_mlp_squared_loss():
    rng = np.random.default_rng(2)
    net = Mlp(Architecture(3, (8,), 2), rng)
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))

    def loss_and_grad():
        out, cache = net.forward(x)
        return float(np.sum((out - y) ** 2) / 10), net.backward(cache, 2 * (out - y) / 10)

    assert grad_check(net.params, loss_and_grad) < 1e-4


def test_grad_check_rejects_zero_step():
    w = np.ones(3)
    with pytest.raises(InputError, match="positive"):
        grad_check([w], lambda: (0.0, [w]), h=0.0)


def test_squashed_density_integrates_to_one():
    policy = ActorCritic(1, 1, PpoConfig(hidden_sizes=(4,), init_log_std=-0.3), np.random.default_rng(5))
    out = policy_forward(policy, np.array([0.4]), deterministic=True)
    a = np.linspace(-1 + 1e-9, 1 - 1e-9, 400_001)
    density = np.exp(squashed_log_prob(out.mean[None, :], policy.log_std, a[:, None]))
    integral = float(np.sum((density[1:] + density[:-1]) / 2 * np.diff(a)))
    assert integral == pytest.approx(1.0, abs=1e-3)


def test_deterministic_forward_is_tanh_of_mean():
    policy = ActorCritic(3, 2, PpoConfig(), np.random.default_rng(0))
    obs = np.array([0.1, -0.4, 2.0])
    a = policy_forward(policy, obs, deterministic=True)
    b = policy_forward(policy, obs, deterministic=True)
    assert np.array_equal(a.action, np.tanh(a.mean))
    assert np.array_equal(a.action, b.action)
    with pytest.raises(ContractError):
        policy_forward(policy, np.zeros(5))
    policy.log_std[0] = np.nan
    with pytest.raises(PpoNumericError):
        policy_forward(policy, obs)


def test_rollout_buffer_normalizes_advantages():
    rng = np.random.default_rng(4)
    buffer = RolloutBuffer()
    for t in range(20):
        buffer.add(rng.normal(size=2), rng.normal(size=1), -1.0, float(rng.normal()), 0.0, t % 5 == 4)
    with pytest.raises(ContractError):
        buffer.batch()
    buffer.finish(0.99, 0.95)
    assert buffer.advantages.mean() == pytest.approx(0.0, abs=1e-12)
    assert buffer.advantages.std() == pytest.approx(1.0)
    sizes = [len(mb) for mb in buffer.minibatches(rng, 8)]
    assert sizes == [8, 8, 4]


def test_value_loss_decreases_under_adam():
    rng = np.random.default_rng(6)
    policy = ActorCritic(3, 1, PpoConfig(hidden_sizes=(16,)), rng)
    batch = _batch(policy, rng, n=64)
    batch = MiniBatch(batch.obs, batch.pre_squash, batch.log_prob, batch.advantages, batch.obs @ [1.0, -2.0, 0.5])
    opt = Adam([p.shape for p in policy.vf_params()], 1e-2)
    first = ppo_loss(policy, batch, policy.cfg).vf_loss
    for _ in range(200):
        opt.step(policy.vf_params(), ppo_loss(policy, batch, policy.cfg).vf_grads)
    assert ppo_loss(policy, batch, policy.cfg).vf_loss < 0.2 * first


def test_running_mean_std_tracks_batches():
    rms = RunningMeanStd(2)
    data = np.random.default_rng(0).normal([3.0, -1.0], [2.0, 0.5], size=(5000, 2))
    for chunk in np.array_split(data, 10):
        rms.update(chunk)
    assert rms.mean == pytest.approx(data.mean(axis=0), abs=1e-3)
    assert rms.var == pytest.approx(data.var(axis=0), rel=1e-3)
    rms.frozen = True
    rms.update(data + 100)
    assert rms.mean == pytest.approx(data.mean(axis=0), abs=1e-3)


def test_zero_length_training_keeps_initial_params():
    result = train(BanditEnv, BANDIT_CFG, total_steps=0)
    fresh = ActorCritic(1, 1, BANDIT_CFG, np.random.default_rng(BANDIT_CFG.seed))
    assert result.steps == 0
    assert result.curve == []
    for got, want in zip(result.policy.pi_params() + result.policy.vf_params(), fresh.pi_params() + fresh.vf_params()):
        assert np.array_equal(got, want)


def test_bandit_learns_to_act_near_zero():
    result = train(BanditEnv, BANDIT_CFG, total_steps=50 * BANDIT_CFG.steps_per_batch)
    assert len(result.curve) == 50
    assert result.curve[-1].mean_reward > -0.1
    assert result.curve[-1].mean_reward > result.curve[0].mean_reward


def test_training_is_deterministic():
    a = train(BanditEnv, BANDIT_CFG, total_steps=3 * BANDIT_CFG.steps_per_batch)
    b = train(BanditEnv, BANDIT_CFG, total_steps=3 * BANDIT_CFG.steps_per_batch)
    assert a.curve == b.curve
    for x, y in zip(a.policy.pi_params(), b.policy.pi_params()):
        assert np.array_equal(x, y)


def test_resume_reproduces_the_uninterrupted_run(tmp_path):
    steps = BANDIT_CFG.steps_per_batch
    straight = train(BanditEnv, BANDIT_CFG, total_steps=4 * steps)
    first = train(BanditEnv, BANDIT_CFG, total_steps=2 * steps, checkpoint_path=tmp_path / "ckpt.json")
    resumed = train(BanditEnv, BANDIT_CFG, total_steps=4 * steps, resume_from=first.checkpoint_path)
    assert resumed.curve == straight.curve
    for x, y in zip(resumed.policy.pi_params() + resumed.policy.vf_params(),
                    straight.policy.pi_params() + straight.policy.vf_params()):
        assert np.array_equal(x, y)


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "policy.json"
    result = train(BanditEnv, BANDIT_CFG, total_steps=BANDIT_CFG.steps_per_batch, checkpoint_path=path)
    policy, payload = load_policy(path)
    assert payload["batch_index"] == 1
    assert policy.obs_norm.frozen
    obs = np.ones(1)
    assert np.array_equal(
        policy_forward(policy, obs, deterministic=True).action,
        policy_forward(result.policy, obs, deterministic=True).action,
    )
    assert not (tmp_path / "policy.json.tmp").exists()


def test_checkpoint_rejects_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_checkpoint(tmp_path / "missing.json")
    corrupt = tmp_path / "corrupt.json"
    corrupt.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_checkpoint(corrupt)
    other = save_checkpoint(tmp_path / "other.json", {"kind": "something_else"})
    with pytest.raises(ConfigError, match="expected"):
        load_checkpoint(other, kind="ppo_policy")


def test_non_finite_rewards_stop_training():
    def broken_env():
        return BanditEnv(reward_fn=lambda a: float("nan"))

    with pytest.raises(TrainingDivergedError) as excinfo:
        train(broken_env, BANDIT_CFG, total_steps=BANDIT_CFG.steps_per_batch)
    assert excinfo.value.checkpoint_path is None
