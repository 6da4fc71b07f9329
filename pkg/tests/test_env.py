import math

import numpy as np
import pytest

from ipp_fleet.env import (
    MU, SIGMA, ContractViolation, EnvConfig, EnvConfigError, FleetEnv, information_rewards,
    influence_masks, min_separation, redundancy,
)
from ipp_fleet.gridmap import N_ACTIONS, NavMap, apply_action, default_map, open_water
from ipp_fleet.groundtruth import ALGAE, WQP, GTConfig
from ipp_fleet.localgp import RADIUS


@pytest.fixture(scope="module")
def lake():
    return default_map()


def random_feasible(env, rng):
    """Random joint action that respects terrain and separation, by rejection."""
    for _ in range(200):
        acts = rng.integers(0, N_ACTIONS, env.n_agents)
        new = [apply_action(env.navmap, p, int(a)) for p, a in zip(env.state.positions, acts)]
        if any(t is None for t in new):
            continue
        if min_separation(env.navmap, new) >= env.cfg.d_safety:
            return acts
    pytest.skip("no feasible joint action found")


def test_reset_single_agent(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=1))
    obs = env.reset(0)
    assert obs.shape == (1, 5, 58, 38)
    assert tuple(env.state.positions[0]) in lake.zones[0]
    assert env.state.model.n_samples_ == 1
    assert env.state.step_count == 0
    assert not obs[0, 4].any()


def test_reset_deterministic(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=3, gt=GTConfig(ALGAE)))
    a = env.reset(11)
    pa, ga = env.state.positions.copy(), env.state.gt.values.copy()
    b = env.reset(11)
    assert np.array_equal(pa, env.state.positions)
    assert np.array_equal(ga, env.state.gt.values)
    assert np.array_equal(a, b)
    env.reset(12)
    assert not np.array_equal(ga, env.state.gt.values)


def test_reset_separation_over_seeds(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=3, gt=GTConfig(WQP)))
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        pos = env._place(rng)
        for i in range(3):
            assert tuple(pos[i]) in lake.zones[i]
            for j in range(i + 1, 3):
                assert math.dist(pos[i], pos[j]) * 290 >= 300


def test_reset_impossible_zone():
    m = NavMap(np.ones((6, 6), bool), 290.0, zones=(((2, 2),),))
    env = FleetEnv(EnvConfig(m, n_agents=2, gt=GTConfig(WQP)))
    with pytest.raises(EnvConfigError):
        env.reset(0)


def test_observation_channels(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=3))
    obs = env.reset(3)
    rng = np.random.default_rng(3)
    for _ in range(5):
        obs, *_ = env.step(random_feasible(env, rng))
    assert obs.min() >= 0.0 and obs.max() <= 1.0
    for j in range(3):
        assert np.array_equal(obs[j, 2], lake.navigable.astype(np.float32))
        assert np.count_nonzero(obs[j, 3]) == 1
        r, c = env.state.positions[j]
        assert obs[j, 3, r, c] == 1.0
        assert np.count_nonzero(obs[j, 4]) == 2
    # shared model channels are identical across agents
    assert np.array_equal(obs[0, :3], obs[1, :3])


def test_observation_swap_symmetry(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=2))
    env.reset(5)
    o0, o1 = env.observe(0), env.observe(1)
    env.state.positions = env.state.positions[::-1].copy()
    s0, s1 = env.observe(0), env.observe(1)
    assert np.array_equal(o0, s1) and np.array_equal(o1, s0)
    assert np.array_equal(o0[3], o1[4]) and np.array_equal(o0[4], o1[3])


def test_constant_channel_is_zero():
    m = open_water(6, 6, zones=(((2, 2),),))
    env = FleetEnv(EnvConfig(m, gt=GTConfig(WQP), spacing=3000, influence_radius=5000))
    obs = env.reset(0)
    assert not obs[0, 2].any()   # all-water map is constant


def test_redundancy_examples(lake):
    x = (30, 25)
    assert redundancy(lake, [(30, 26)], x, RADIUS) == 1
    assert redundancy(lake, [(30, 26), (30, 26)], x, RADIUS) == 2
    assert redundancy(lake, [(5, 5)], x, RADIUS) == 0


def test_redundancy_matches_membership_oracle(lake):
    rng = np.random.default_rng(0)
    cells = lake.cells
    for _ in range(30):
        pos = cells[rng.choice(len(cells), 3, replace=False)]
        masks = influence_masks(lake, pos, RADIUS)
        for i in rng.choice(len(cells), 40, replace=False):
            x = cells[i]
            brute = sum(math.dist(p, x) * 290 <= RADIUS for p in pos)
            assert redundancy(lake, pos, x, RADIUS) == brute == masks[:, i].sum()


def test_colocated_agents_split_reward(lake):
    rng = np.random.default_rng(1)
    before = rng.uniform(0, 1, lake.n_navigable)
    after = rng.uniform(0, 1, lake.n_navigable)
    p = lake.cells[200]
    single = information_rewards(lake, [p], before, after, RADIUS)[0]
    pair = information_rewards(lake, [p, p], before, after, RADIUS)
    assert single > 0
    assert pair[0] == pair[1] == single / 2


def reward_oracle(lake, positions, before, after, j, radius):
    total = 0.0
    for i, x in enumerate(lake.cells):
        if math.dist(positions[j], x) * lake.cell_size > radius:
            continue
        rho = sum(math.dist(p, x) * lake.cell_size <= radius for p in positions)
        total += abs(after[i] - before[i]) / rho
    return total


@pytest.mark.parametrize("kind", [MU, SIGMA])
def test_step_rewards_match_resummation(lake, kind):
    env = FleetEnv(EnvConfig(lake, n_agents=3, reward=kind, gt=GTConfig(ALGAE)))
    env.reset(7)
    rng = np.random.default_rng(7)
    for _ in range(4):
        _, rewards, _, _ = env.step(random_feasible(env, rng))
        s = env.state
        before = s.prev_mu if kind == MU else s.prev_sigma
        after = s.model.fused_mean_ if kind == MU else s.model.fused_std_
        for j in range(3):
            expect = reward_oracle(lake, s.positions, before, after, j, RADIUS)
            assert rewards[j] == pytest.approx(expect, rel=1e-10, abs=1e-12)


def test_resample_known_cell_reward_zero():
    m = open_water(12, 12, zones=(((5, 5),),))
    env = FleetEnv(EnvConfig(m, gt=GTConfig(WQP), spacing=3000))
    env.reset(0)
    env.state.model.set_params(optimize=False)
    E, W = 2, 6
    _, r, _, _ = env.step([E])
    assert r[0] > 0
    _, r, _, _ = env.step([W])   # back onto the start cell
    assert r[0] < 1e-6
    env.cfg.reward = SIGMA
    _, r, _, _ = env.step([E])
    assert r[0] < 1e-6


def test_done_exactly_at_budget(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=2, gt=GTConfig(WQP)))
    env.reset(2)
    rng = np.random.default_rng(2)
    for t in range(1, 51):
        n_before = env.state.model.n_samples_
        _, rewards, done, _ = env.step(random_feasible(env, rng))
        assert np.all(rewards >= 0) and np.all(np.isfinite(rewards))
        assert done == (t == 50)
        assert env.state.model.n_samples_ <= n_before + 2
    with pytest.raises(ContractViolation):
        env.step([0, 0])


def test_blocked_action_is_contract_violation(lake):
    env = FleetEnv(EnvConfig(lake, gt=GTConfig(WQP)))
    env.reset(0)
    # drive north until blocked
    p = tuple(env.state.positions[0])
    N = 4
    while apply_action(lake, p, N) is not None:
        env.step([N])
        p = tuple(env.state.positions[0])
    with pytest.raises(ContractViolation):
        env.step([N])


def test_unsafe_joint_action_rejected():
    m = open_water(20, 20, zones=(((10, 8),), ((10, 12),)))
    env = FleetEnv(EnvConfig(m, n_agents=2, gt=GTConfig(WQP), spacing=3000))
    env.reset(0)
    with pytest.raises(ContractViolation):
        env.step([2, 6])   # east meets west at (10, 10)


def test_sample_count_grows_by_fleet_size(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=3, gt=GTConfig(WQP)))
    env.reset(4)
    rng = np.random.default_rng(4)
    seen = {tuple(p) for p in env.state.positions}
    for _ in range(10):
        env.step(random_feasible(env, rng))
        seen |= {tuple(p) for p in env.state.positions}
        assert env.state.model.n_samples_ == len(seen)


def test_single_agent_episode_reward_replay(lake):
    env = FleetEnv(EnvConfig(lake, n_agents=1, gt=GTConfig(ALGAE)))
    env.reset(9)
    rng = np.random.default_rng(9)
    total, replay = 0.0, 0.0
    for _ in range(20):
        _, r, _, _ = env.step(random_feasible(env, rng))
        total += r[0]
        s = env.state
        inside = [math.dist(s.positions[0], x) * 290 <= RADIUS for x in lake.cells]
        replay += float(np.abs(s.model.fused_mean_ - s.prev_mu)[inside].sum())
    assert total == pytest.approx(replay, rel=1e-12)


def test_bad_config():
    with pytest.raises(EnvConfigError):
        EnvConfig(n_agents=0)
    with pytest.raises(EnvConfigError):
        EnvConfig(reward="kl")
