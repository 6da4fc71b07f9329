import itertools
import math

import numpy as np
import pytest
import torch

from ipp_fleet.env import EnvConfig, min_separation
from ipp_fleet.gridmap import N_ACTIONS, NULL_ACTION, NavMap, apply_action, default_map, open_water
from ipp_fleet.groundtruth import WQP, GTConfig
from ipp_fleet.learner import (
    QNetwork, QNetworkSpec, ReplayBuffer, load_checkpoint, safe_consensus, save_checkpoint,
)
from ipp_fleet.learner.ddql import (
    DDQLLearner, TrainConfig, TrainingDiverged, epsilon, polyak_update, run_training, td_targets,
)
from ipp_fleet.learner.network import get_flat, set_flat

TOY = QNetworkSpec(height=6, width=6, conv_channels=(4, 4, 4), fc_width=8)


# -- network -----------------------------------------------------------------

def test_dueling_identity():
    torch.manual_seed(0)
    net = QNetwork(QNetworkSpec())
    x = torch.rand(64, 5, 58, 38)
    with torch.no_grad():
        q = net(x)
        v, _ = net.heads(x)
    assert q.shape == (64, 8)
    assert torch.abs((q - v).mean(dim=1)).max() < 1e-6


def test_zero_weights_give_constant_q():
    net = QNetwork(TOY)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        net.value.bias.fill_(0.5)
        net.advantage.bias.copy_(torch.arange(8.0))
    q = net(torch.rand(3, 5, 6, 6)).detach()
    assert torch.equal(q[0], q[1]) and torch.equal(q[1], q[2])
    assert torch.allclose(q[0], 0.5 + torch.arange(8.0) - 3.5)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        QNetwork(TOY)(torch.zeros(1, 5, 7, 6))


def test_gradient_matches_finite_differences():
    torch.manual_seed(1)
    net = QNetwork(TOY).double()
    x = torch.rand(4, 5, 6, 6, dtype=torch.float64)
    y = torch.rand(4, 8, dtype=torch.float64)

    def loss_fn():
        return ((net(x) - y) ** 2).mean()

    net.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()]).numpy()
    flat = get_flat(net).astype(np.float64)
    rng = np.random.default_rng(0)
    idx = rng.choice(flat.size, 60, replace=False)
    h = 1e-6
    for i in idx:
        hi, lo = flat.copy(), flat.copy()
        hi[i] += h
        lo[i] -= h
        set_flat(net, hi)
        f_hi = loss_fn().item()
        set_flat(net, lo)
        f_lo = loss_fn().item()
        numeric = (f_hi - f_lo) / (2 * h)
        assert abs(numeric - analytic[i]) <= 1e-3 * max(abs(numeric), abs(analytic[i])) + 1e-9
    set_flat(net, flat)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(2)
    net = QNetwork(TOY)
    save_checkpoint(tmp_path / "a.ckpt", net)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.spec == TOY
    assert get_flat(back).tobytes() == get_flat(net).tobytes()
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == b"IPPQNET\x00"
    n = int.from_bytes(raw[len(raw) - 4 * get_flat(net).size - 8:][:8], "little")
    assert n == get_flat(net).size
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


# -- replay ------------------------------------------------------------------

def random_obs(rng, shape=(5, 6, 6)):
    o = np.zeros(shape, dtype=np.float32)
    o[:2] = rng.random((2,) + shape[1:])
    o[2:] = rng.random((3,) + shape[1:]) > 0.7
    return o


def test_replay_fifo_and_roundtrip():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(7, (5, 6, 6))
    stored = []
    for i in range(19):
        o, n = random_obs(rng), random_obs(rng)
        stored.append((o, n))
        buf.push(o, i % 8, float(i), n, i % 5 == 0)
        assert len(buf) == min(i + 1, 7)
        assert list(buf.order()) == list(range(max(0, i - 6), i + 1))
    batch = buf.gather(np.arange(7))
    for k in range(7):
        i = int(batch["ids"][k])
        o, n = stored[i]
        assert batch["rewards"][k] == i and batch["actions"][k] == i % 8
        np.testing.assert_array_equal(batch["obs"][k, 2:], o[2:])
        np.testing.assert_allclose(batch["obs"][k, :2], o[:2], rtol=1e-3)
        np.testing.assert_allclose(batch["next_obs"][k, :2], n[:2], rtol=1e-3)


def test_replay_sample_without_replacement():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(50, (5, 6, 6))
    for i in range(80):
        buf.push(random_obs(rng), 0, 0.0, random_obs(rng), False)
    b = buf.sample(30, rng)
    assert len(set(b["ids"].tolist())) == 30
    assert b["ids"].min() >= 30
    with pytest.raises(ValueError):
        buf.sample(51, rng)


# -- consensus ---------------------------------------------------------------

def brute_greedy(scores, positions, m, d_safety):
    """Enumerate every joint action and keep the one the sequential rule selects."""
    n = len(positions)
    order = sorted(range(n), key=lambda j: (-max(scores[j]), j))
    best = None
    for joint in itertools.product(range(N_ACTIONS), repeat=n):
        tgt = [apply_action(m, positions[j], joint[j]) for j in range(n)]
        if any(t is None for t in tgt) or min_separation(m, tgt) < d_safety:
            continue
        key = []
        for j in order:
            key += [-scores[j][joint[j]], joint[j]]
        if best is None or key < best[0]:
            best = (key, joint)
    return best[1]


def test_distant_agents_take_argmax():
    m = open_water(30, 30)
    rng = np.random.default_rng(0)
    scores = rng.random((2, 8))
    res = safe_consensus(scores, [(5, 5), (24, 24)], m, 300)
    assert list(res.actions) == list(scores.argmax(1))
    assert not res.null.any()


def test_colliding_agents_match_enumeration():
    m = open_water(20, 20)
    rng = np.random.default_rng(3)
    hits = 0
    for _ in range(200):
        pos = [(10, 8), (10, 8 + int(rng.integers(2, 5)))]
        scores = rng.random((2, 8))
        scores[0, 2] += 1.0   # east, toward the other agent
        scores[1, 6] += 0.5   # west
        res = safe_consensus(scores, pos, m, 300)
        expect = brute_greedy(scores, pos, m, 300)
        assert tuple(res.actions) == tuple(expect)
        hits += tuple(res.actions) != tuple(scores.argmax(1))
    assert hits > 0


def test_boxed_agent_takes_null():
    nav = np.zeros((7, 7), bool)
    nav[3, 1:6] = True
    m = NavMap(nav, 290.0)
    # agent 1 at (3,3) can only go E/W, onto the cells held by agents 0 and 2
    scores = np.zeros((3, 8))
    res = safe_consensus(scores, [(3, 5), (3, 3), (3, 1)], m, 300, stay=[True, False, True])
    assert res.actions[1] == NULL_ACTION and res.null[1]
    assert tuple(res.targets[1]) == (3, 3)


def test_stranded_agent_cell_is_reserved():
    # agent 0 is stuck in a dead end; agent 1 would otherwise move next to it
    nav = np.zeros((9, 9), bool)
    nav[4, 0:9] = True
    nav[0:9, 6] = True
    m = NavMap(nav, 290.0)
    scores = np.zeros((2, 8))
    scores[1, 6] = 1.0            # agent 1 prefers west, toward agent 0
    res = safe_consensus(scores, [(4, 0), (4, 3)], m, 300)
    tg = [tuple(t) for t in res.targets]
    assert res.null[0] and tg[0] == (4, 0)
    assert tg[1] != (4, 1)
    assert min_separation(m, tg) >= 300


@pytest.mark.parametrize("n", [2, 3])
def test_consensus_fuzz_safe(n):
    m = default_map()
    rng = np.random.default_rng(n)
    cfg = EnvConfig(m, n_agents=n, gt=GTConfig(WQP))
    from ipp_fleet.env import FleetEnv
    env = FleetEnv(cfg)
    pos = env._place(rng)
    for step in range(2000):
        res = safe_consensus(rng.random((n, 8)), pos, m, 300)
        for j in range(n):
            if not res.null[j]:
                assert apply_action(m, pos[j], int(res.actions[j])) == tuple(res.targets[j])
        assert min_separation(m, res.targets) >= 300
        pos = res.targets
        if step % 50 == 49:
            pos = env._place(rng)


def test_consensus_permutation_equivariant():
    m = default_map()
    rng = np.random.default_rng(5)
    from ipp_fleet.env import FleetEnv
    env = FleetEnv(EnvConfig(m, n_agents=3, gt=GTConfig(WQP)))
    for _ in range(200):
        pos = env._place(rng)
        scores = rng.random((3, 8))
        perm = rng.permutation(3)
        a = safe_consensus(scores, pos, m, 300)
        b = safe_consensus(scores[perm], pos[perm], m, 300)
        assert sorted(map(tuple, a.targets)) == sorted(map(tuple, b.targets))


def test_exploration_marginals_uniform():
    m = open_water(20, 20)
    rng = np.random.default_rng(6)
    counts = np.zeros(8)
    n = 10_000
    for _ in range(n):
        res = safe_consensus(rng.random((1, 8)), [(10, 10)], m, 300)
        counts[res.actions[0]] += 1
    sd = math.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - n / 8) < 3 * sd)


# -- targets and training ----------------------------------------------------

def toy_batch(rng, n=16):
    return {
        "obs": rng.random((n, 5, 6, 6)).astype(np.float32),
        "actions": rng.integers(0, 8, n),
        "rewards": rng.random(n).astype(np.float32),
        "next_obs": rng.random((n, 5, 6, 6)).astype(np.float32),
        "dones": rng.random(n) < 0.3,
    }


def test_td_targets_match_scalar_oracle():
    torch.manual_seed(3)
    online, target = QNetwork(TOY), QNetwork(TOY)
    rng = np.random.default_rng(3)
    b = toy_batch(rng)
    y = td_targets(b, online, target, 0.99).numpy()
    for i in range(len(y)):
        if b["dones"][i]:
            assert y[i] == b["rewards"][i]
            continue
        with torch.no_grad():
            nxt = torch.as_tensor(b["next_obs"][i:i + 1])
            a = int(online(nxt)[0].argmax())
            expect = b["rewards"][i] + 0.99 * target(nxt)[0, a].item()
        assert y[i] == pytest.approx(expect, rel=1e-5, abs=1e-6)
    # coincident networks reduce to the ordinary max target
    y2 = td_targets(b, online, online, 0.99).numpy()
    with torch.no_grad():
        qmax = online(torch.as_tensor(b["next_obs"])).max(1).values.numpy()
    ref = b["rewards"] + 0.99 * (1 - b["dones"]) * qmax
    np.testing.assert_allclose(y2, ref, rtol=1e-5, atol=1e-6)


def small_cfg(**kw):
    m = open_water(6, 6, zones=(((1, 1), (1, 2)), ((4, 4), (4, 3))))
    env = EnvConfig(m, gt=GTConfig(WQP), spacing=3000, influence_radius=1450)
    base = dict(env=env, episodes=2, batch_size=8, conv_channels=(4, 4, 4), fc_width=8,
                buffer_capacity=200)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("tau", [0.0, 1.0])
def test_polyak_extremes(tau):
    learner = DDQLLearner(small_cfg(tau=tau))
    rng = np.random.default_rng(0)
    b = toy_batch(rng, 8)
    before = get_flat(learner.target).copy()
    learner.train_step(rng, b)
    after = get_flat(learner.target)
    if tau == 0.0:
        assert after.tobytes() == before.tobytes()
    else:
        assert after.tobytes() == get_flat(learner.online).tobytes()


def test_overfit_one_batch():
    learner = DDQLLearner(small_cfg(lr=1e-3, tau=0.0))
    rng = np.random.default_rng(1)
    b = toy_batch(rng, 8)
    first = learner.train_step(rng, b)
    for _ in range(99):
        last = learner.train_step(rng, b)
    assert last < first


def test_nonfinite_loss_aborts():
    learner = DDQLLearner(small_cfg())
    rng = np.random.default_rng(2)
    b = toy_batch(rng, 8)
    b["rewards"][0] = np.inf
    with pytest.raises(TrainingDiverged):
        learner.train_step(rng, b)


def test_epsilon_schedule():
    cfg = TrainConfig(episodes=10_000)
    assert epsilon(0, cfg) == 1.0
    assert epsilon(5000, cfg) == pytest.approx(0.05)
    assert epsilon(10**9, cfg) == 0.05
    assert 1 - cfg.eps_decay * cfg.episodes / 2 <= cfg.eps_min + 1e-9


def test_training_bookkeeping_and_determinism(tmp_path):
    cfg = small_cfg(episodes=1)
    _, logs, learner = run_training(cfg, out_dir=tmp_path / "a")
    assert len(learner.buffer) + logs[0].null_actions == 50
    assert (tmp_path / "a" / "policy.ckpt").exists()
    run_training(cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "train_log.csv").read_bytes()
    assert a == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert (tmp_path / "a" / "policy.ckpt").read_bytes() == (tmp_path / "b" / "policy.ckpt").read_bytes()
    cfg2 = small_cfg(episodes=1, env=EnvConfig(cfg.env.navmap, n_agents=2, gt=GTConfig(WQP),
                                               spacing=3000))
    _, logs2, learner2 = run_training(cfg2)
    assert len(learner2.buffer) + logs2[0].null_actions == 100
