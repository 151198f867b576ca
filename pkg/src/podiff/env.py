"""Sensor-network Dec-POMDP instances, exact Bayes oracles and training data.

Agents sit on a ``grid_rows x grid_cols`` grid and each one watches a short
list of areas (its *coverage*).  Targets wander between areas; an agent's
observation has one binary slot per covered area.  Areas listed in
``failure_areas`` are flaky: every observing agent independently misses a
present target there with probability ``failure_prob``.

Indices are zero-based throughout, so "Area 1" / "agent 1" of the usual
2x2 picture are index 0 here.

A global state is the concatenation of one one-hot block per target, so
``state_dim = num_areas * num_targets``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ._io import atomic_write_text

NOOP = -1
DATASET_VERSION = 1
DEFAULT_MAX_STATES = 20_000


class InvalidActionError(ValueError):
    pass


class CapacityError(RuntimeError):
    pass


class InconsistentHistoryError(ValueError):
    """The listed histories have zero probability under the model."""


@dataclass
class EnvSpec:
    grid_rows: int
    grid_cols: int
    num_areas: int
    num_targets: int
    coverage: dict[int, list[int]]
    failure_areas: frozenset[int] = frozenset()
    failure_prob: float = 0.0
    # probabilities over enumerated states (see ``enumerate_states``); None = uniform
    prior: list[float] | None = None
    seed: int = 0
    # areas are laid out row-major on a grid with this many columns (motion kernel)
    area_cols: int | None = None

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid dimensions must be positive")
        if self.num_areas < 1 or self.num_targets < 1:
            raise ValueError("num_areas and num_targets must be positive")
        self.coverage = {int(k): [int(a) for a in v] for k, v in self.coverage.items()}
        self.failure_areas = frozenset(int(a) for a in self.failure_areas)
        n = self.grid_rows * self.grid_cols
        if sorted(self.coverage) != list(range(n)):
            raise ValueError(f"coverage must list every agent 0..{n - 1}")
        for agent, areas in self.coverage.items():
            if not areas:
                raise ValueError(f"agent {agent} covers no area")
            if len(set(areas)) != len(areas):
                raise ValueError(f"agent {agent} lists an area twice")
            for a in areas:
                if not 0 <= a < self.num_areas:
                    raise ValueError(f"agent {agent}: area {a} out of range")
        for a in self.failure_areas:
            if not 0 <= a < self.num_areas:
                raise ValueError(f"failure area {a} out of range")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError("failure_prob must lie in [0, 1]")
        if self.area_cols is None:
            self.area_cols = self.grid_cols
        if self.prior is not None:
            p = np.asarray(self.prior, dtype=float)
            if p.shape != (self.num_states,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError("prior must be a distribution over all enumerated states")

    @property
    def n_agents(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def state_dim(self) -> int:
        return self.num_areas * self.num_targets

    @property
    def obs_dim(self) -> int:
        return max(len(v) for v in self.coverage.values())

    @property
    def action_dim(self) -> int:
        return self.obs_dim

    @property
    def num_states(self) -> int:
        return self.num_areas ** self.num_targets

    def tau_dim(self, history_len: int) -> int:
        return history_len * (self.obs_dim + self.action_dim) - self.action_dim

    def cond_dim(self, history_len: int) -> int:
        return self.n_agents + self.tau_dim(history_len)

    def prior_probs(self) -> np.ndarray:
        if self.prior is None:
            return np.full(self.num_states, 1.0 / self.num_states)
        return np.asarray(self.prior, dtype=float)

    def to_dict(self) -> dict:
        return {
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "num_areas": self.num_areas,
            "num_targets": self.num_targets,
            "coverage": {str(k): list(v) for k, v in sorted(self.coverage.items())},
            "failure_areas": sorted(self.failure_areas),
            "failure_prob": self.failure_prob,
            "prior": None if self.prior is None else [float(p) for p in self.prior],
            "seed": self.seed,
            "area_cols": self.area_cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EnvSpec field(s): {sorted(unknown)}")
        d = dict(d)
        d["coverage"] = {int(k): v for k, v in d["coverage"].items()}
        d["failure_areas"] = frozenset(d.get("failure_areas", ()))
        return cls(**d)

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "EnvSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EnvState:
    target_areas: tuple[int, ...]

    def vector(self, spec: EnvSpec) -> np.ndarray:
        return encode_state(spec, self.target_areas)


# ---------------------------------------------------------------------------
# instance factories


def sensor_net_2x2(collectively_observable: bool = True, failure_prob: float = 0.5,
                   seed: int = 0) -> EnvSpec:
    """The 2x2 / one-target example.

    Agents 0 and 1 watch areas (0, 3); agents 2 and 3 watch areas (1, 2).
    The non-CO variant makes areas 0 and 1 flaky.
    """
    coverage = {0: [0, 3], 1: [0, 3], 2: [1, 2], 3: [1, 2]}
    if collectively_observable:
        return EnvSpec(2, 2, 4, 1, coverage, seed=seed)
    return EnvSpec(2, 2, 4, 1, coverage, failure_areas=frozenset({0, 1}),
                   failure_prob=failure_prob, seed=seed)


def grid_sensor_net(rows: int, cols: int, num_targets: int = 1, block: int = 2,
                    failure_areas=(), failure_prob: float = 0.0, seed: int = 0) -> EnvSpec:
    """One area per sensor; each sensor scans the ``block x block`` patch of
    areas anchored at its own cell (wrapping at the border)."""
    coverage = {}
    for r in range(rows):
        for c in range(cols):
            areas = []
            for dr in range(block):
                for dc in range(block):
                    a = ((r + dr) % rows) * cols + (c + dc) % cols
                    if a not in areas:
                        areas.append(a)
            coverage[r * cols + c] = areas
    return EnvSpec(rows, cols, rows * cols, num_targets, coverage,
                   failure_areas=frozenset(failure_areas), failure_prob=failure_prob,
                   seed=seed)


# ---------------------------------------------------------------------------
# states and dynamics


def encode_state(spec: EnvSpec, target_areas) -> np.ndarray:
    if len(target_areas) != spec.num_targets:
        raise ValueError("need one area per target")
    s = np.zeros(spec.state_dim)
    for t, a in enumerate(target_areas):
        if not 0 <= a < spec.num_areas:
            raise ValueError(f"area {a} out of range")
        s[t * spec.num_areas + a] = 1.0
    return s


def decode_state(spec: EnvSpec, s) -> tuple[int, ...]:
    s = np.asarray(s, dtype=float).reshape(spec.num_targets, spec.num_areas)
    return tuple(int(i) for i in np.argmax(s, axis=1))


def enumerate_states(spec: EnvSpec, max_states: int = DEFAULT_MAX_STATES):
    """All joint target placements, in ``itertools.product`` order.

    Returns ``(areas, vectors)`` with shapes ``(S, num_targets)`` and
    ``(S, state_dim)``.
    """
    if spec.num_states > max_states:
        raise CapacityError(
            f"{spec.num_states} states exceeds the enumeration cap of {max_states}")
    areas = np.array(list(itertools.product(range(spec.num_areas), repeat=spec.num_targets)),
                     dtype=int).reshape(-1, spec.num_targets)
    vecs = np.zeros((len(areas), spec.state_dim))
    for t in range(spec.num_targets):
        vecs[np.arange(len(areas)), t * spec.num_areas + areas[:, t]] = 1.0
    return areas, vecs


def motion_matrix(spec: EnvSpec) -> np.ndarray:
    """Single-target kernel: each of the four compass moves has probability
    1/5, moves off the area grid turn into staying put."""
    A = np.zeros((spec.num_areas, spec.num_areas))
    cols = spec.area_cols
    for a in range(spec.num_areas):
        r, c = divmod(a, cols)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            b = rr * cols + cc
            if 0 <= cc < cols and rr >= 0 and b < spec.num_areas:
                A[a, b] += 0.2
            else:
                A[a, a] += 0.2
        A[a, a] += 0.2
    return A


def transition_matrix(spec: EnvSpec, max_states: int = DEFAULT_MAX_STATES) -> np.ndarray:
    if spec.num_states > max_states:
        raise CapacityError(
            f"{spec.num_states} states exceeds the enumeration cap of {max_states}")
    A = motion_matrix(spec)
    T = np.ones((1, 1))
    for _ in range(spec.num_targets):
        T = np.kron(T, A)
    return T


def sample_initial_state(spec: EnvSpec, rng) -> EnvState:
    if spec.prior is None:
        areas = rng.integers(0, spec.num_areas, size=spec.num_targets)
        return EnvState(tuple(int(a) for a in areas))
    areas, _ = enumerate_states(spec)
    k = rng.choice(len(areas), p=spec.prior_probs())
    return EnvState(tuple(int(a) for a in areas[k]))


def observe(spec: EnvSpec, state: EnvState, rng) -> list[np.ndarray]:
    """Joint observation of ``state``; one vector of length ``obs_dim`` per agent."""
    occupied = set(state.target_areas)
    out = []
    for agent in range(spec.n_agents):
        o = np.zeros(spec.obs_dim)
        for j, a in enumerate(spec.coverage[agent]):
            if a not in occupied:
                continue
            if a in spec.failure_areas:
                o[j] = float(rng.random() >= spec.failure_prob)
            else:
                o[j] = 1.0
        out.append(o)
    return out


def step(spec: EnvSpec, state: EnvState, joint_action, rng):
    """Advance one timestep.

    ``joint_action[i]`` is the area agent ``i`` scans (or ``NOOP``).  The
    reward counts targets whose area is scanned by at least two agents.  The
    returned observation is of the *next* state.
    """
    if len(joint_action) != spec.n_agents:
        raise InvalidActionError(f"expected {spec.n_agents} actions, got {len(joint_action)}")
    scans = {}
    for agent, a in enumerate(joint_action):
        a = int(a)
        if a == NOOP:
            continue
        if a not in spec.coverage[agent]:
            raise InvalidActionError(f"agent {agent} cannot scan area {a}")
        scans[a] = scans.get(a, 0) + 1
    reward = float(sum(1 for a in state.target_areas if scans.get(a, 0) >= 2))
    A = motion_matrix(spec)
    nxt = tuple(int(rng.choice(spec.num_areas, p=A[a])) for a in state.target_areas)
    next_state = EnvState(nxt)
    return next_state, observe(spec, next_state, rng), reward


def random_scan_policy(spec: EnvSpec, agent: int, rng) -> int:
    cov = spec.coverage[agent]
    return int(cov[rng.integers(len(cov))])


# ---------------------------------------------------------------------------
# histories


def action_one_hot(spec: EnvSpec, agent: int, area: int) -> np.ndarray:
    a = np.zeros(spec.action_dim)
    if area != NOOP:
        a[spec.coverage[agent].index(area)] = 1.0
    return a


def encode_history(spec: EnvSpec, agent: int, observations, actions) -> np.ndarray:
    """Flatten ``o_0, a_0, ..., o_{H-1}`` (actions are area indices)."""
    if len(actions) != len(observations) - 1:
        raise ValueError("need exactly one action between consecutive observations")
    parts = []
    for k, o in enumerate(observations):
        parts.append(np.asarray(o, dtype=float))
        if k < len(actions):
            parts.append(action_one_hot(spec, agent, actions[k]))
    return np.concatenate(parts)


def history_observations(spec: EnvSpec, tau) -> list[np.ndarray]:
    tau = np.asarray(tau, dtype=float)
    stride = spec.obs_dim + spec.action_dim
    if (len(tau) + spec.action_dim) % stride:
        raise ValueError(f"history length {len(tau)} is not H*{stride}-{spec.action_dim}")
    H = (len(tau) + spec.action_dim) // stride
    return [tau[k * stride:k * stride + spec.obs_dim] for k in range(H)]


def condition_vector(agent: int, tau, n_agents: int) -> np.ndarray:
    """Denoiser conditioning input: agent one-hot followed by the history.

    The denoiser is shared by all agents, so it needs the agent identity to
    interpret a history.
    """
    c = np.zeros(n_agents + len(tau))
    c[agent] = 1.0
    c[n_agents:] = tau
    return c


def split_condition(cond, n_agents: int) -> tuple[int, np.ndarray]:
    cond = np.asarray(cond, dtype=float)
    return int(np.argmax(cond[:n_agents])), cond[n_agents:]


# ---------------------------------------------------------------------------
# exact posterior


@dataclass
class PosteriorExact:
    support: np.ndarray          # (k, state_dim)
    probs: np.ndarray            # (k,)
    state_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=float))
        self.probs = np.asarray(self.probs, dtype=float)

    def prob_of(self, s, atol=1e-9) -> float:
        d = np.abs(self.support - np.asarray(s, dtype=float)).max(axis=1)
        hit = np.flatnonzero(d <= atol)
        return float(self.probs[hit[0]]) if len(hit) else 0.0


def _obs_likelihood(spec: EnvSpec, occ: np.ndarray, agent: int, obs) -> np.ndarray:
    lik = np.ones(len(occ))
    p = spec.failure_prob
    for j, a in enumerate(spec.coverage[agent]):
        present = occ[:, a]
        flaky = a in spec.failure_areas
        if obs[j] > 0.5:
            lik *= np.where(present, 1.0 - p if flaky else 1.0, 0.0)
        else:
            lik *= np.where(present, p if flaky else 0.0, 1.0)
    return lik


def exact_posterior(spec: EnvSpec, histories, max_states: int = DEFAULT_MAX_STATES
                    ) -> PosteriorExact:
    """Bayes posterior over the current state given time-aligned histories.

    ``histories`` is a list of ``(agent, tau)``; a single entry gives the
    local posterior, several give the joint one.  The window start is given
    the EnvSpec prior (stationary under the default symmetric motion kernel).
    Actions inside ``tau`` carry no information because observations do not
    depend on them.
    """
    if not histories:
        raise ValueError("need at least one history")
    areas, vecs = enumerate_states(spec, max_states)
    T = transition_matrix(spec, max_states)
    occ = np.zeros((len(areas), spec.num_areas), dtype=bool)
    for t in range(spec.num_targets):
        occ[np.arange(len(areas)), areas[:, t]] = True
    obs_seqs = [(int(a), history_observations(spec, tau)) for a, tau in histories]
    H = len(obs_seqs[0][1])
    if any(len(o) != H for _, o in obs_seqs):
        raise ValueError("histories must have equal length")
    b = spec.prior_probs().copy()
    for k in range(H):
        for agent, obs in obs_seqs:
            b *= _obs_likelihood(spec, occ, agent, obs[k])
        if k < H - 1:
            b = b @ T
    total = b.sum()
    if total <= 0:
        raise InconsistentHistoryError("histories have zero probability")
    b /= total
    idx = np.flatnonzero(b > 0)
    return PosteriorExact(vecs[idx], b[idx], idx)


# ---------------------------------------------------------------------------
# analytic optimal denoiser


def mixture_mean(support, probs, y, sigma: float) -> np.ndarray:
    """Posterior mean of a discrete-support prior under N(0, sigma^2 I) noise.

    Accepts ``y`` of shape ``(d,)`` or ``(N, d)``.  Where every unnormalised
    weight underflows to zero the nearest support state is returned instead.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    support = np.atleast_2d(support)
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    d2 = ((Y[:, None, :] - support[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logw = np.log(probs)[None, :] - d2 / (2.0 * sigma ** 2)
    m = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - m)
    w /= w.sum(axis=1, keepdims=True)
    out = w @ support
    underflow = ~np.isfinite(m[:, 0]) | (m[:, 0] < np.log(np.finfo(float).tiny))
    if underflow.any():
        out[underflow] = support[np.argmin(d2[underflow], axis=1)]
    return out[0] if single else out


def mixture_jacobian(support, probs, y, sigma: float) -> np.ndarray:
    """d(mixture_mean)/dy = Cov_w(s) / sigma^2 (symmetric PSD)."""
    support = np.atleast_2d(support)
    y = np.asarray(y, dtype=float)
    d2 = ((y[None, :] - support) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logw = np.log(probs) - d2 / (2.0 * sigma ** 2)
    if logw.max() < np.log(np.finfo(float).tiny):
        return np.zeros((support.shape[1], support.shape[1]))
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mean = w @ support
    c = support - mean
    return (c.T * w) @ c / sigma ** 2


def optimal_denoiser(spec: EnvSpec, histories, y, sigma: float) -> np.ndarray:
    """f*(tau, y) = E[s | y, tau] for a fixed noise level ``sigma``."""
    post = exact_posterior(spec, histories)
    return mixture_mean(post.support, post.probs, y, sigma)


def noise_marginal_denoiser(support, probs, y, sigma_range=(0.0, 1.0), nodes: int = 200
                            ) -> np.ndarray:
    """MMSE denoiser when sigma ~ Uniform(sigma_range) is *not* given to it.

    This is the best any noise-unconditioned network trained with that noise
    range can do; the likelihood integral over sigma uses Gauss-Legendre
    quadrature.
    """
    support = np.atleast_2d(support)
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    d = support.shape[1]
    lo, hi = sigma_range
    x, wq = np.polynomial.legendre.leggauss(nodes)
    sig = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    wq = 0.5 * wq
    sig = np.maximum(sig, 1e-12)
    d2 = ((Y[:, None, :] - support[None, :, :]) ** 2).sum(-1)          # (N, k)
    log_lik = logsumexp(
        np.log(wq)[None, None, :] - d * np.log(sig)[None, None, :]
        - d2[:, :, None] / (2.0 * sig[None, None, :] ** 2), axis=2)     # (N, k)
    with np.errstate(divide="ignore"):
        logw = np.log(probs)[None, :] + log_lik
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    out = w @ support
    return out[0] if np.asarray(y).ndim == 1 else out


class OracleDenoiser:
    """Zero-error denoiser built from the exact posterior.

    Called as ``oracle(cond, y, step)``.  ``cond`` is either a conditioning
    vector (agent one-hot + history) or a list of ``(agent, tau)`` pairs for
    a joint history.  The noise level follows the geometric schedule
    ``max(sigma_min, sigma0 * rho**step)``; ``step=None`` means ``sigma_min``.
    """

    uses_step = True

    def __init__(self, spec: EnvSpec, sigma0: float = 1.0, rho: float = 0.7,
                 sigma_min: float = 0.05, max_states: int = DEFAULT_MAX_STATES):
        self.spec = spec
        self.sigma0 = sigma0
        self.rho = rho
        self.sigma_min = sigma_min
        self.max_states = max_states
        self._cache: dict = {}

    @classmethod
    def fixed(cls, spec: EnvSpec, sigma: float) -> "OracleDenoiser":
        return cls(spec, sigma0=sigma, rho=1.0, sigma_min=sigma)

    @property
    def settle_step(self) -> int:
        """First step index at which the schedule has reached ``sigma_min``."""
        if self.sigma0 <= self.sigma_min or self.rho >= 1.0:
            return 0
        k = int(np.ceil(np.log(self.sigma_min / self.sigma0) / np.log(self.rho)))
        while self.sigma_at(k) > self.sigma_min:
            k += 1
        while k > 0 and self.sigma_at(k - 1) <= self.sigma_min:
            k -= 1
        return k

    def sigma_at(self, step) -> float:
        if step is None:
            return self.sigma_min
        return max(self.sigma_min, self.sigma0 * self.rho ** step)

    def histories(self, cond) -> list:
        if isinstance(cond, np.ndarray) and cond.ndim == 1 and cond.dtype.kind == "f":
            agent, tau = split_condition(cond, self.spec.n_agents)
            return [(agent, tau)]
        return [(int(a), np.asarray(t, dtype=float)) for a, t in cond]

    def posterior(self, cond) -> PosteriorExact:
        hist = self.histories(cond)
        key = tuple((a, tuple(np.round(t, 9))) for a, t in hist)
        if key not in self._cache:
            self._cache[key] = exact_posterior(self.spec, hist, self.max_states)
        return self._cache[key]

    def __call__(self, cond, y, step=None):
        post = self.posterior(cond)
        return mixture_mean(post.support, post.probs, y, self.sigma_at(step))

    def jacobian_y(self, cond, y, step=None) -> np.ndarray:
        post = self.posterior(cond)
        return mixture_jacobian(post.support, post.probs, y, self.sigma_at(step))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class HistorySample:
    agent_id: int
    tau: np.ndarray
    state: np.ndarray


@dataclass
class Dataset:
    header: dict
    records: list[HistorySample]

    def __len__(self):
        return len(self.records)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec.from_dict(self.header["env_spec"])

    def arrays(self):
        """``(agents, taus, states)`` as arrays."""
        n_tau = self.header["history_len"] * (self.header["obs_dim"] + self.header["action_dim"]) \
            - self.header["action_dim"]
        if not self.records:
            return (np.zeros(0, dtype=int), np.zeros((0, n_tau)),
                    np.zeros((0, self.header["state_dim"])))
        agents = np.array([r.agent_id for r in self.records], dtype=int)
        taus = np.stack([r.tau for r in self.records])
        states = np.stack([r.state for r in self.records])
        return agents, taus, states

    def conditions(self) -> np.ndarray:
        agents, taus, _ = self.arrays()
        n = self.header["n_agents"]
        c = np.zeros((len(agents), n + taus.shape[1]))
        c[np.arange(len(agents)), agents] = 1.0
        c[:, n:] = taus
        return c

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header)]
        for r in self.records:
            lines.append(json.dumps({"agent": int(r.agent_id),
                                     "tau": [float(x) for x in r.tau],
                                     "s": [float(x) for x in r.state]}))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            for key in ("version", "obs_dim", "action_dim", "state_dim", "history_len",
                        "n_agents", "env_spec"):
                if key not in header:
                    raise ValueError(f"dataset header lacks {key!r}")
            if header["version"] != DATASET_VERSION:
                raise ValueError(f"unsupported dataset version {header['version']}")
            records = []
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                records.append(HistorySample(int(d["agent"]), np.array(d["tau"], dtype=float),
                                             np.array(d["s"], dtype=float)))
        return cls(header, records)


def dataset_header(spec: EnvSpec, history_len: int) -> dict:
    return {
        "version": DATASET_VERSION,
        "obs_dim": spec.obs_dim,
        "action_dim": spec.action_dim,
        "state_dim": spec.state_dim,
        "history_len": history_len,
        "n_agents": spec.n_agents,
        "env_spec": spec.to_dict(),
    }


def generate_dataset(spec: EnvSpec, episodes: int, history_len: int = 1, rng=None,
                     policy=None, episode_len: int = 10) -> Dataset:
    """Roll out ``episodes`` episodes and pair every agent's history window
    with the current true state.

    Records are emitted from the first timestep at which a full window of
    ``history_len`` observations exists, so each episode contributes
    ``(episode_len - history_len + 1) * n_agents`` records.
    """
    if episodes < 0:
        raise ValueError("episodes must be >= 0")
    if history_len < 1 or episode_len < history_len:
        raise ValueError("need 1 <= history_len <= episode_len")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    policy = random_scan_policy if policy is None else policy
    header = dataset_header(spec, history_len)
    records: list[HistorySample] = []
    for _ in range(episodes):
        state = sample_initial_state(spec, rng)
        obs_hist = [[o] for o in observe(spec, state, rng)]
        act_hist: list[list[int]] = [[] for _ in range(spec.n_agents)]
        for t in range(episode_len):
            if t >= history_len - 1:
                s_vec = state.vector(spec)
                for i in range(spec.n_agents):
                    o = obs_hist[i][-history_len:]
                    a = act_hist[i][len(act_hist[i]) - (history_len - 1):] if history_len > 1 else []
                    records.append(HistorySample(i, encode_history(spec, i, o, a), s_vec.copy()))
            if t == episode_len - 1:
                break
            actions = [policy(spec, i, rng) for i in range(spec.n_agents)]
            state, joint_obs, _ = step(spec, state, actions, rng)
            for i in range(spec.n_agents):
                act_hist[i].append(actions[i])
                obs_hist[i].append(joint_obs[i])
    return Dataset(header, records)
