"""Fast built-in oracle checks, runnable from an installed package without the test suite."""

from __future__ import annotations

import math
from typing import Callable, List, Tuple

import numpy as np

from .. import gp
from ..env import EnvConfig, FleetEnv, information_rewards, min_separation
from ..gridmap import default_map, open_water
from ..groundtruth import WQP, GTConfig, generate
from ..learner.consensus import safe_consensus
from ..localgp import RADIUS, LocalGaussianProcesses, single_layout
from ..metrics import nsor, sor


def _gp_dense_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 30))
        X = rng.integers(0, 20, size=(n, 2)).astype(float)
        X, y = gp.dedup(X, rng.uniform(0, 1, n))
        kp = gp.KernelParams(1.0, float(rng.uniform(0.5, 10)))
        noise = float(rng.uniform(0.1, 0.5))
        Q = rng.integers(0, 20, size=(10, 2)).astype(float)
        K = gp.rbf_matrix(X, X, kp) + noise ** 2 * np.eye(len(X))
        Ki = np.linalg.inv(K)
        Ks = gp.rbf_matrix(Q, X, kp)
        mean, var = gp.predict(X, y, kp, noise, Q)
        assert np.allclose(mean, Ks @ Ki @ y, atol=1e-8)
        assert np.allclose(var, np.maximum(1.0 - np.einsum("ij,jk,ik->i", Ks, Ki, Ks), 1e-12), atol=1e-8)
        _, logdet = np.linalg.slogdet(K)
        lml = -0.5 * y @ Ki @ y - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi)
        assert abs(gp.log_marginal_likelihood(X, y, kp, noise) - lml) < 1e-8


def _prior_recovery(rng):
    model = LocalGaussianProcesses(default_map())
    model.partial_fit(np.empty((0, 2), dtype=int), np.empty(0))
    assert np.all(model.fused_mean_ == 0.0) and np.all(model.fused_std_ == 1.0)


def _global_equals_predict(rng):
    m = default_map()
    idx = rng.choice(m.n_navigable, 25, replace=False)
    X, y = m.cells[idx], rng.uniform(0, 1, 25)
    model = LocalGaussianProcesses(m, centroids=single_layout(m).centroids, radius=math.inf).fit(X, y)
    mean, var = gp.predict(X.astype(float), y, model.kernels_[0], gp.NOISE, m.cells)
    assert model.fused_mean_.tobytes() == mean.tobytes()
    assert model.fused_std_.tobytes() == np.sqrt(var).tobytes()


def _metrics(rng):
    m = default_map()
    gt = generate(m, GTConfig(WQP, seed=int(rng.integers(1 << 30))))
    mu = rng.uniform(0, 1, m.n_navigable)
    s = sum(abs(a - b) for a, b in zip(mu.tolist(), gt.values.tolist()))
    assert math.isclose(sor(mu, gt), s, rel_tol=1e-12)
    assert math.isclose(nsor(mu, gt), s / gt.values.sum(), rel_tol=1e-12)


def _consensus_safety(rng):
    m = default_map()
    env = FleetEnv(EnvConfig(m, n_agents=3, gt=GTConfig(WQP)))
    pos = env._place(rng)
    for t in range(500):
        res = safe_consensus(rng.random((3, 8)), pos, m, 300.0)
        assert min_separation(m, res.targets) >= 300.0
        pos = res.targets


def _reward_halving(rng):
    m = default_map()
    before, after = rng.uniform(0, 1, m.n_navigable), rng.uniform(0, 1, m.n_navigable)
    p = m.cells[100]
    one = information_rewards(m, [p], before, after, RADIUS)[0]
    two = information_rewards(m, [p, p], before, after, RADIUS)
    assert two[0] == two[1] == one / 2


def _dueling_identity(rng):
    import torch

    from ..learner.network import QNetwork, QNetworkSpec
    torch.manual_seed(int(rng.integers(1 << 30)))
    net = QNetwork(QNetworkSpec())
    x = torch.rand(16, 5, 58, 38)
    with torch.no_grad():
        q = net(x)
        v, _ = net.heads(x)
    assert float(torch.abs((q - v).mean(1)).max()) < 1e-6


CHECKS: List[Tuple[str, Callable]] = [
    ("gp dense-inverse oracle", _gp_dense_oracle),
    ("empty-model prior", _prior_recovery),
    ("K=1 fusion equals predict", _global_equals_predict),
    ("SoR/nSoR oracle", _metrics),
    ("consensus safety fuzz", _consensus_safety),
    ("co-located reward halving", _reward_halving),
    ("dueling identity", _dueling_identity),
]


def run_selftest(seed: int = 0, emit=print) -> bool:
    ok = True
    for name, check in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            check(rng)
            emit(f"PASS  {name}")
        except Exception as exc:   # report every check, then fail overall
            ok = False
            emit(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    return ok
