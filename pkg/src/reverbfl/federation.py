"""Synchronous FedAvg engine with a fixed adversarial client subset.

Every random draw comes from a stream keyed by ``(master seed, purpose, round,
client)``, so running the sampled clients sequentially or on a thread pool
gives bitwise-identical aggregates.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacks as A
from . import model as M

_STREAMS = {"adversaries": 1, "sample": 2, "client": 3, "server": 4, "pretrain": 5,
            "init": 6, "data": 7, "split": 8, "partition": 9, "reserve": 10}


def keyed_rng(seed, purpose, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[purpose], *map(int, keys)]))


@dataclass
class FedConfig:
    num_clients: int = 10
    sample_fraction: float = 0.6
    local_steps: int = 10
    batch_size: int = 16
    rounds: int = 30
    adversarial_fraction: float = 0.5
    attack: A.AttackSpec = field(default_factory=A.AttackSpec)
    optimizer: M.OptimizerState = field(default_factory=M.OptimizerState)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.adversarial_fraction <= 1.0:
            raise ValueError("adversarial_fraction must lie in [0, 1]")
        if self.local_steps < 0 or self.batch_size < 1 or self.rounds < 0:
            raise ValueError("local_steps >= 0, batch_size >= 1 and rounds >= 0 required")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError(f"sample_fraction {self.sample_fraction} gives m={self.clients_per_round} "
                             f"clients out of {self.num_clients}")

    @property
    def clients_per_round(self):
        return int(math.floor(self.sample_fraction * self.num_clients + 0.5))


@dataclass
class RoundRecord:
    round: int
    selected: tuple
    beta: float
    aggregate_loss: float
    aggregate_accuracy: float
    test_loss: float
    test_accuracy: float
    aggregate_digest: str
    broadcast_digest: str
    reserve_steps: int = 0


def params_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()[:16]


def designate_adversaries(num_clients, rho, seed):
    """Uniform random subset of ``ceil(rho * N)`` client ids, fixed for the run."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    size = math.ceil(rho * num_clients - 1e-9)
    rng = keyed_rng(seed, "adversaries")
    return frozenset(int(c) for c in rng.choice(num_clients, size=size, replace=False))


def sample_clients(num_clients, m, rng):
    if not 1 <= m <= num_clients:
        raise ValueError("need 1 <= m <= N")
    return np.sort(rng.choice(num_clients, size=m, replace=False))


class MinibatchStream:
    """Shuffled passes over ``n`` items; a pass ends when fewer than ``batch`` items remain."""

    def __init__(self, n, batch, rng):
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self._order, self._pos = rng.permutation(n), 0

    def next(self):
        if self._pos + self.batch > self.n:
            self._order, self._pos = self.rng.permutation(self.n), 0
        idx = self._order[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


def local_train(arch, shard, params, config, rng, round_index=0):
    """``config.local_steps`` optimizer steps from a copy of ``params``.

    Adversarial shards perturb each minibatch against the current local model
    before the step. Optimizer moments start empty every round; the learning-rate
    schedule counts ``round_index * local_steps + j``.
    """
    if shard.size == 0:
        raise ValueError(f"client {shard.client_id} has no data")
    params = dict(params)
    state = config.optimizer.fresh(step=round_index * config.local_steps)
    batches = MinibatchStream(shard.size, config.batch_size, rng)
    poison = shard.adversarial and config.attack.kind != "none"
    for _ in range(config.local_steps):
        idx = batches.next()
        x, y = shard.data.x[idx], shard.data.y[idx]
        if poison:
            x = A.poison_batch(arch, params, x, y, config.attack, rng)
        params, state, _ = M.train_step(arch, params, state, x, y, rng)
    return params


def fedavg(updates):
    """Data-size weighted average of every tensor. ``updates`` is a list of ``(params, D_n)``."""
    if not updates:
        raise ValueError("fedavg needs at least one update")
    sizes = np.array([d for _, d in updates], dtype=np.float64)
    if np.any(sizes < 1) or sizes.sum() <= 0:
        raise ValueError("every client size must be >= 1")
    weights = sizes / sizes.sum()
    names = list(updates[0][0])
    for p, _ in updates[1:]:
        if list(p) != names or any(p[k].shape != updates[0][0][k].shape for k in names):
            raise ValueError("client updates have inconsistent parameter shapes")
    out = {}
    for name in names:
        acc = weights[0] * updates[0][0][name]
        for w, (p, _) in zip(weights[1:], updates[1:]):
            acc = acc + w * p[name]
        out[name] = acc
    return out


class Federation:
    """Clients, adversary set, test split and (optional) reserve defense for one run."""

    def __init__(self, arch, shards, test, config, defense=None, reserve=None, adversaries=None):
        self.arch = arch
        self.config = config
        self.defense = defense
        self.reserve = reserve
        self.test = test
        if adversaries is None:
            adversaries = designate_adversaries(config.num_clients, config.adversarial_fraction, config.seed)
        self.adversaries = frozenset(adversaries)
        self.shards = [type(s)(s.client_id, s.data, s.client_id in self.adversaries) for s in shards]
        if len(self.shards) != config.num_clients:
            raise ValueError(f"{len(self.shards)} shards for {config.num_clients} clients")

    def _train_client(self, params, client, t):
        rng = keyed_rng(self.config.seed, "client", t, client)
        return local_train(self.arch, self.shards[client], params, self.config, rng, t)

    def run_round(self, params, t):
        """Algorithm: sample -> local training -> FedAvg -> reserve retraining -> evaluate."""
        cfg = self.config
        selected = sample_clients(cfg.num_clients, cfg.clients_per_round, keyed_rng(cfg.seed, "sample", t))
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                locals_ = list(pool.map(lambda c: self._train_client(params, c, t), selected))
        else:
            locals_ = [self._train_client(params, c, t) for c in selected]
        aggregate = fedavg([(p, self.shards[c].size) for p, c in zip(locals_, selected)])
        agg_acc, agg_loss = M.evaluate_model(self.arch, aggregate, self.test.x, self.test.y)
        broadcast, steps = aggregate, 0
        if self.defense is not None and self.defense.enabled:
            from .defense import reserve_retrain
            broadcast, steps = reserve_retrain(self.arch, aggregate, self.reserve, self.defense,
                                               keyed_rng(cfg.seed, "server", t), t)
        acc, loss = M.evaluate_model(self.arch, broadcast, self.test.x, self.test.y)
        beta = len(set(selected.tolist()) & self.adversaries) / len(selected)
        record = RoundRecord(t + 1, tuple(int(c) for c in selected), beta, agg_loss, agg_acc,
                             loss, acc, params_digest(aggregate), params_digest(broadcast), steps)
        return broadcast, record

    def run(self, params, rounds=None, callback=None):
        records = []
        for t in range(self.config.rounds if rounds is None else rounds):
            params, rec = self.run_round(params, t)
            records.append(rec)
            if callback is not None:
                callback(rec)
        return params, records
