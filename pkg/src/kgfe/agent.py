"""Deep Q-network over semantic state vectors.

The Q-network is a small fully connected rectifier network written directly on
numpy (forward pass, backward pass and Adam). A hard-synced copy serves as the
target network for the bootstrap term of the temporal-difference loss.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import units as U
from .transforms import UNKNOWN

CHECKPOINT_MAGIC = b"SMFE"
CHECKPOINT_VERSION = 1
N_SUMMARY_SLOTS = 4


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# state vectorization


@dataclass(frozen=True)
class StepContext:
    step: int = 0
    m: int = 1
    last_reward: float = 0.0
    mean_interp: float = 0.0


class StateSpace:
    """Slot layout of the state vector for one knowledge base."""

    def __init__(self, kb):
        self.concepts = sorted(kb.concepts)
        self.dims = kb.dimension_groups
        self.kb = kb
        self._concept_idx = {c: i for i, c in enumerate(self.concepts)}
        self._dim_idx = {g: len(self.concepts) + i for i, g in enumerate(self.dims)}

    @property
    def size(self) -> int:
        return len(self.concepts) + len(self.dims) + N_SUMMARY_SLOTS

    def vectorize(self, d, ctx: StepContext = StepContext()) -> np.ndarray:
        """Concept counts, unit-dimension exposure and four summary scalars."""
        v = np.zeros(self.size)
        unknown = self._concept_idx[UNKNOWN]
        for c in d.features:
            v[self._concept_idx.get(c.concept, unknown)] += 1.0
            for unit, p in U.parse_unit(c.unit).items():
                g = self.kb.units.get(unit)
                if g is not None:
                    v[self._dim_idx[g]] += float(abs(Fraction(p)))
        base = len(self.concepts) + len(self.dims)
        v[base] = len(d.feature_names)
        v[base + 1] = ctx.step / max(ctx.m, 1)
        v[base + 2] = max(ctx.last_reward, 0.0)
        v[base + 3] = max(ctx.mean_interp, 0.0)
        return v


def vectorize(d, g, kb, ctx: StepContext = StepContext()) -> np.ndarray:
    if ctx.mean_interp == 0.0 and g is not None and d.feature_names:
        from .decomp import dataset_interpretability
        names = [n for n in d.feature_names if n in g]
        ctx = StepContext(ctx.step, ctx.m, ctx.last_reward, dataset_interpretability(g, names))
    return StateSpace(kb).vectorize(d, ctx)


# --------------------------------------------------------------------------
# network


class QNetwork:
    def __init__(self, sizes: Sequence[int], seed: int = 0, lr: float = 1e-3):
        self.sizes = list(sizes)
        self.lr = lr
        rng = np.random.default_rng(seed)
        self.W, self.b = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.W.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.b.append(np.zeros(fan_out))
        self._reset_optimizer()

    def _reset_optimizer(self):
        self._m = [np.zeros_like(p) for p in self.params]
        self._v = [np.zeros_like(p) for p in self.params]
        self._t = 0

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    def forward(self, X: np.ndarray):
        X = np.atleast_2d(X)
        acts = [X]
        h = X
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W + b
            h = np.maximum(z, 0.0) if i < len(self.W) - 1 else z
            acts.append(h)
        return h, acts

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def td_loss_grad(self, S, A, targets):
        """Mean squared TD error on the taken actions and its parameter gradients."""
        out, acts = self.forward(S)
        B = len(A)
        rows = np.arange(B)
        err = out[rows, A] - targets
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.mean(err ** 2))
        delta = np.zeros_like(out)
        delta[rows, A] = 2.0 * err / B
        grads = []
        for i in range(len(self.W) - 1, -1, -1):
            gW = acts[i].T @ delta
            gb = delta.sum(axis=0)
            grads.append((gW, gb))
            if i > 0:
                delta = (delta @ self.W[i].T) * (acts[i] > 0)
        grads.reverse()
        return loss, [g for pair in grads for g in pair]

    def adam_step(self, grads: list[np.ndarray], lr: float | None = None,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        lr = self.lr if lr is None else lr
        self._t += 1
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            mhat = m / (1 - beta1 ** self._t)
            vhat = v / (1 - beta2 ** self._t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)

    def copy_from(self, other: "QNetwork") -> None:
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def clone(self) -> "QNetwork":
        twin = QNetwork(self.sizes, lr=self.lr)
        twin.copy_from(self)
        return twin

    def finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)

    # checkpoints: magic, version, layer count, dims, then W/b per layer,
    # little-endian float64, row-major
    def to_bytes(self) -> bytes:
        head = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(self.sizes))
        head += struct.pack(f"<{len(self.sizes)}I", *self.sizes)
        body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)
        return head + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "QNetwork":
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a Q-network checkpoint")
        version, n = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sizes = list(struct.unpack_from(f"<{n}I", data, 12))
        net = cls(sizes)
        off = 12 + 4 * n
        for p in net.params:
            cnt = p.size
            p[...] = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(p.shape)
            off += 8 * cnt
        if off != len(data):
            raise ValueError("checkpoint has trailing bytes")
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "QNetwork":
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# replay, exploration, updates


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    r: float
    s2: np.ndarray
    terminal: bool
    next_mask: np.ndarray | None = None


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions, sampled uniformly with replacement."""

    def __init__(self, capacity: int = 2000, seed: int = 0):
        self.capacity = capacity
        self.items: deque[Transition] = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.items)

    def push(self, t: Transition) -> None:
        if not np.isfinite(t.r):
            raise ValueError("transition reward must be finite")
        self.items.append(t)

    def sample(self, batch_size: int) -> list[Transition]:
        idx = self.rng.integers(0, len(self.items), size=batch_size)
        return [self.items[i] for i in idx]


@dataclass(frozen=True)
class EpsilonSchedule:
    eps0: float = 1.0
    eps_min: float = 0.05
    decay: float = 0.97

    def value(self, episode: int) -> float:
        return max(self.eps_min, self.eps0 * self.decay ** episode)


def select_action(q: QNetwork, s: np.ndarray, sched: EpsilonSchedule, episode: int,
                  mask: np.ndarray, rng: np.random.Generator) -> int:
    """Decaying epsilon-greedy over the valid actions; greedy ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    valid = np.flatnonzero(mask)
    if len(valid) == 0:
        raise ValueError("no valid action")
    if rng.random() < sched.value(episode):
        return int(valid[rng.integers(len(valid))])
    qs = q.predict(s)[0]
    return int(np.argmax(np.where(mask, qs, -np.inf)))


def td_targets(target: QNetwork, batch: Sequence[Transition], gamma: float) -> np.ndarray:
    S2 = np.stack([t.s2 for t in batch])
    q2 = target.predict(S2)
    masks = np.stack([np.ones(q2.shape[1], bool) if t.next_mask is None else t.next_mask for t in batch])
    best = np.where(masks, q2, -np.inf).max(axis=1)
    best[~np.isfinite(best)] = 0.0
    r = np.array([t.r for t in batch])
    term = np.array([t.terminal for t in batch])
    return r + gamma * np.where(term, 0.0, best)


def td_update(q: QNetwork, target: QNetwork, batch: Sequence[Transition], gamma: float,
              lr: float | None = None) -> float:
    """One gradient step on the main network; returns the pre-step loss."""
    if not batch:
        raise ValueError("empty batch")
    S = np.stack([t.s for t in batch])
    A = np.array([t.a for t in batch])
    loss, grads = q.td_loss_grad(S, A, td_targets(target, batch, gamma))
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite TD loss {loss}")
    q.adam_step(grads, lr)
    if not q.finite():
        raise DivergenceError("Q-network weights became non-finite")
    return loss


def sync_target(q: QNetwork, target: QNetwork) -> None:
    target.copy_from(q)


@dataclass
class DQNAgent:
    """Main and target networks, replay memory and the sync counter."""

    q: QNetwork
    target: QNetwork
    buffer: ReplayBuffer
    schedule: EpsilonSchedule
    gamma: float = 0.9
    batch_size: int = 32
    sync_period: int = 50
    updates: int = 0

    @classmethod
    def create(cls, state_dim: int, n_actions: int, seed: int = 0, hidden: int = 64, lr: float = 1e-3,
               gamma: float = 0.9, batch_size: int = 32, capacity: int = 2000, sync_period: int = 50,
               schedule: EpsilonSchedule = EpsilonSchedule()) -> "DQNAgent":
        q = QNetwork([state_dim, hidden, hidden, n_actions], seed=seed, lr=lr)
        return cls(q, q.clone(), ReplayBuffer(capacity, seed + 1), schedule, gamma, batch_size, sync_period)

    def observe(self, t: Transition) -> float | None:
        """Store ``t``, train on one sampled batch once enough is stored; return the loss."""
        self.buffer.push(t)
        loss = None
        if len(self.buffer) >= self.batch_size:
            loss = td_update(self.q, self.target, self.buffer.sample(self.batch_size), self.gamma)
        self.updates += 1
        if self.updates % self.sync_period == 0:
            sync_target(self.q, self.target)
        return loss
