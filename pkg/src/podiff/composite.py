"""Composite diffusion: agents take turns denoising one shared iterate.

A hop is one application of a single agent's conditional denoiser; the
iterate is the message passed along the chain to the next agent.  ``L`` hops
cycle through the agent order right to left, so ``n`` hops equal one
``composite_step``.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, dump_json
from .denoiser import spectral_radius
from .flow import FlowConfig, cluster_points, denoise, flow_endpoints, jacobian_y, run_flow

REASONS = ("eigenvalue", "distance", "non-finite")


class _FinalNoise:
    """View of a scheduled denoiser pinned at its final noise level."""

    uses_step = False

    def __init__(self, fn):
        self.fn = fn
        if hasattr(fn, "model"):
            self.model = fn.model

    def __call__(self, cond, y, step=None):
        return denoise(self.fn, cond, y, None)

    def jacobian_y(self, cond, y, step=None):
        return jacobian_y(self.fn, cond, y, None)


def at_final_noise(fn):
    return _FinalNoise(fn) if getattr(fn, "uses_step", False) else fn


def composite_step(fn, histories, y, step=None) -> np.ndarray:
    """``f(tau_1, f(tau_2, ... f(tau_n, y)))``: the last listed history acts first."""
    if len(histories) == 0:
        raise ValueError("need at least one history")
    dims = {np.size(h) for h in histories if isinstance(h, np.ndarray)}
    if len(dims) > 1:
        raise ValueError(f"history dimensions differ: {sorted(dims)}")
    out = np.asarray(y, dtype=float)
    for h in reversed(list(histories)):
        out = np.asarray(denoise(fn, h, out, step), dtype=float)
    return out


def parse_order(order, n: int) -> list[int]:
    """Explicit permutation of ``range(n)`` or ``"random(seed)"``."""
    if isinstance(order, str):
        m = re.fullmatch(r"\s*random\((-?\d+)\)\s*", order)
        if not m:
            raise ValueError(f"agent_order must be a permutation or 'random(seed)', got {order!r}")
        return [int(i) for i in np.random.default_rng(int(m.group(1))).permutation(n)]
    perm = [int(i) for i in order]
    if sorted(perm) != list(range(n)):
        raise ValueError(f"agent_order {perm} is not a permutation of 0..{n - 1}")
    return perm


@dataclass
class CompositeConfig:
    agent_order: object = "random(0)"
    K2: int = 100
    L: int | None = None          # None: 6 * number of participants
    D_phi: float | None = None
    init_sigma: float = 1.0
    flow: FlowConfig = field(default_factory=FlowConfig)

    def __post_init__(self):
        if self.K2 < 0:
            raise ValueError("K2 must be >= 0")
        if self.D_phi is not None and not self.D_phi > 0:
            raise ValueError("D_phi must be positive")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be positive")
        if isinstance(self.flow, dict):
            self.flow = FlowConfig(**self.flow)

    def hops(self, n: int) -> int:
        L = 6 * n if self.L is None else int(self.L)
        if L < n:
            raise ValueError(f"L = {L} is shorter than one cycle over {n} agents")
        return L


@dataclass
class SampleRecord:
    index: int
    y0: np.ndarray
    trace: np.ndarray                 # (L + 1, d): y0 then every hop
    hop_agents: list                  # position (into the history list) producing each hop
    accepted: bool
    reason: str | None
    estimate: np.ndarray
    error: float | None
    lambdas: np.ndarray               # |lambda_max| at the last n hops
    displacements: np.ndarray         # per-agent Step-2 displacement (inf: no convergence)


@dataclass
class CompositeRunReport:
    samples: list
    participants: list
    order: list
    L: int
    D_phi: float
    state_dim: int
    truth: np.ndarray | None = None

    @property
    def K2(self) -> int:
        return len(self.samples)

    @property
    def accepted(self) -> list:
        return [s for s in self.samples if s.accepted]

    @property
    def acceptance_rate(self) -> float:
        return len(self.accepted) / self.K2 if self.K2 else 0.0

    @property
    def estimates(self) -> np.ndarray:
        acc = self.accepted
        return np.array([s.estimate for s in acc]).reshape(len(acc), self.state_dim)

    def rejection_tally(self) -> dict:
        return {r: sum(s.reason == r for s in self.samples) for r in REASONS}

    def errors(self) -> np.ndarray:
        return np.array([s.error for s in self.accepted if s.error is not None])

    def aggregates(self) -> dict:
        err = self.errors()
        st = chain_stats(self)
        return {
            "K2": self.K2,
            "acceptance_rate": self.acceptance_rate,
            "rejections": self.rejection_tally(),
            "mean_error": float(err.mean()) if len(err) else None,
            "max_error": float(err.max()) if len(err) else None,
            "messages": st["messages"],
            "floats_per_message": st["floats_per_message"],
            "total_payload": st["total_payload"],
        }

    def to_json(self, path=None, with_traces: bool = False) -> str:
        recs = []
        for s in self.samples:
            r = {"sample": s.index, "accepted": s.accepted, "rejection_reason": s.reason,
                 "y0": s.y0.tolist(), "estimate": s.estimate.tolist(), "error": s.error,
                 "lambdas": s.lambdas.tolist(),
                 "displacements": [None if not np.isfinite(d) else float(d)
                                   for d in s.displacements]}
            if with_traces:
                r["trace"] = s.trace.tolist()
            recs.append(r)
        obj = {"participants": self.participants, "order": self.order, "L": self.L,
               "D_phi": self.D_phi,
               "truth": None if self.truth is None else self.truth.tolist(),
               "aggregates": self.aggregates(), "samples": recs}
        return dump_json(obj, path)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "accepted", "error", "rejection_reason"])
        for s in self.samples:
            w.writerow([s.index, int(s.accepted), "" if s.error is None else repr(s.error),
                        s.reason or ""])
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text


def hop_schedule(order, L: int) -> list[int]:
    """Position producing each of the ``L`` hops: ``order`` read right to left, cyclically."""
    n = len(order)
    return [order[n - 1 - (h % n)] for h in range(L)]


def _check_sample(fn, histories, trace, hop_agents, n, D_phi, flow_cfg):
    """Step-2 verdict for one stored trace: ``(reason, lambdas, displacements)``."""
    final = trace[-1]
    n_all = len(histories)
    if not np.all(np.isfinite(trace)):
        return "non-finite", np.full(n, np.nan), np.full(n_all, np.inf)
    fin = at_final_noise(fn)
    lam = np.array([spectral_radius(jacobian_y(fin, histories[a], trace[len(trace) - n + j]))
                    for j, a in enumerate(hop_agents[-n:])])
    disp = np.full(n_all, np.inf)
    for i, h in enumerate(histories):
        tr = run_flow(fin, h, final, flow_cfg) if np.all(np.isfinite(final)) else None
        if tr is not None and tr.converged:
            disp[i] = float(np.linalg.norm(tr.attractor - final))
    if np.any(lam >= 1.0):
        return "eigenvalue", lam, disp
    if np.any(disp >= 2 * D_phi):
        return "distance", lam, disp
    return None, lam, disp


def recheck(fn, histories, report: CompositeRunReport, sample: SampleRecord, flow_cfg=None):
    """Re-evaluate the Step-2 conditions on a stored trace; returns the reason (None = accept)."""
    flow_cfg = FlowConfig() if flow_cfg is None else flow_cfg
    reason, _, _ = _check_sample(fn, histories, sample.trace, sample.hop_agents,
                                 len(histories), report.D_phi, flow_cfg)
    return reason


def run_composite(fn, histories, cfg: CompositeConfig, rng=None, truth=None,
                  participants=None, state_dim: int | None = None) -> CompositeRunReport:
    """Two-step composite diffusion over all listed histories.

    Step 1 draws ``K2`` Gaussian starts and applies ``L`` hops.  Step 2 keeps
    a sample iff the Jacobian spectral radius is < 1 at each of the last
    ``n`` hops (under the hop's own history) and every agent's individual
    flow from the final iterate converges within ``2 * D_phi``.
    """
    histories = list(histories)
    n = len(histories)
    if n == 0:
        raise ValueError("need at least one history")
    if cfg.D_phi is None:
        raise ValueError("CompositeConfig.D_phi must be set (see measure_d_phi)")
    rng = np.random.default_rng(0) if rng is None else rng
    participants = list(range(n)) if participants is None else list(participants)
    order = parse_order(cfg.agent_order, n)
    L = cfg.hops(n)
    d = _infer_dim(fn, histories, state_dim, truth)
    truth = None if truth is None else np.asarray(truth, dtype=float)
    hop_agents = hop_schedule(order, L)
    report = CompositeRunReport([], participants, order, L, float(cfg.D_phi), d, truth)
    if cfg.K2 == 0:
        return report
    Y0 = cfg.init_sigma * rng.standard_normal((cfg.K2, d))
    traces = np.empty((cfg.K2, L + 1, d))
    traces[:, 0] = Y0
    Y = Y0.copy()
    with np.errstate(all="ignore"):
        for h, a in enumerate(hop_agents):
            Y = np.atleast_2d(np.asarray(denoise(fn, histories[a], Y, h // n), dtype=float))
            traces[:, h + 1] = Y
    for k in range(cfg.K2):
        reason, lam, disp = _check_sample(fn, histories, traces[k], hop_agents, n,
                                          cfg.D_phi, cfg.flow)
        est = traces[k, -1].copy()
        err = None
        if truth is not None and reason is None:
            err = float(np.linalg.norm(est - truth))
        report.samples.append(SampleRecord(k, Y0[k].copy(), traces[k].copy(), hop_agents,
                                           reason is None, reason, est, err, lam, disp))
    return report


def run_partial_composite(fn, subset_histories, cfg: CompositeConfig, rng=None, truth=None,
                          participants=None, state_dim: int | None = None
                          ) -> CompositeRunReport:
    """Composite diffusion restricted to a subset of agents.  The order
    permutes the subset; ``participants`` records which agents took part."""
    if len(subset_histories) == 0:
        raise ValueError("subset must be nonempty")
    return run_composite(fn, subset_histories, cfg, rng, truth, participants, state_dim)


def _infer_dim(fn, histories, state_dim, truth):
    if state_dim is not None:
        return int(state_dim)
    if truth is not None:
        return int(np.size(truth))
    model = getattr(fn, "model", None)
    if model is not None:
        return model.state_dim
    if hasattr(fn, "posterior"):
        return fn.posterior(histories[0]).support.shape[1]
    raise ValueError("cannot infer the state dimension")


def measure_d_phi(fn, pairs, flow_cfg: FlowConfig | None = None) -> float:
    """Largest deviation ``|s - attractor(s)|`` over ``(tau, s)`` pairs."""
    flow_cfg = FlowConfig() if flow_cfg is None else flow_cfg
    fin = at_final_noise(fn)
    worst = 0.0
    for tau, s in pairs:
        tr = run_flow(fin, tau, np.asarray(s, dtype=float), flow_cfg)
        if not tr.converged:
            return math.inf
        worst = max(worst, float(np.linalg.norm(tr.attractor - s)))
    return worst


def agent_deviations(fn, histories, truth, flow_cfg: FlowConfig | None = None) -> np.ndarray:
    """Per-agent deviation of the attractor reached by flowing from ``truth``."""
    flow_cfg = FlowConfig() if flow_cfg is None else flow_cfg
    fin = at_final_noise(fn)
    truth = np.asarray(truth, dtype=float)
    out = []
    for h in histories:
        tr = run_flow(fin, h, truth, flow_cfg)
        if not tr.converged:
            raise RuntimeError("an agent's flow from the true state did not converge")
        out.append(float(np.linalg.norm(tr.attractor - truth)))
    return np.array(out)


def composite_estimate(report: CompositeRunReport, merge_radius: float = 0.05):
    """Centre of the largest accepted cluster; with nothing accepted, the mean
    final iterate over all samples.  Returns ``(estimate, from_accepted)``."""
    acc = report.estimates
    if len(acc):
        labels = cluster_points(acc, merge_radius)
        return acc[labels == 0].mean(axis=0), True
    finals = np.array([s.trace[-1] for s in report.samples])
    finals = finals[np.all(np.isfinite(finals), axis=1)]
    if len(finals) == 0:
        return np.full(report.state_dim, np.nan), False
    return finals.mean(axis=0), False


def individual_estimate(fn, history, steps: int, rng, state_dim: int, init_sigma: float = 1.0):
    """One agent's own flow for a fixed number of denoising steps from noise."""
    y = init_sigma * rng.standard_normal(state_dim)
    for ell in range(steps):
        y = np.asarray(denoise(fn, history, y, ell), dtype=float)
    return y


def psnr(estimates, truths, peak: float | None = None) -> float:
    """``10 log10(peak^2 / MSE)``; returns ``inf`` for an exact match.

    ``peak`` defaults to the component range over ``truths``.
    """
    E = np.atleast_2d(np.asarray(estimates, dtype=float))
    T = np.atleast_2d(np.asarray(truths, dtype=float))
    if E.shape != T.shape:
        raise ValueError(f"estimates {E.shape} and truths {T.shape} differ in shape")
    if len(E) == 0:
        raise ValueError("need at least one pair")
    if peak is None:
        peak = float(T.max() - T.min()) or 1.0
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((E - T) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def thm8_check(fn, histories, truth, cfg: CompositeConfig, rng=None):
    """``(mean accepted composite error, mean per-agent fixed-point deviation)``."""
    right = float(agent_deviations(fn, histories, truth, cfg.flow).mean())
    rep = run_composite(fn, histories, cfg, rng, truth)
    err = rep.errors()
    if len(err) == 0:
        raise RuntimeError("no composite sample was accepted")
    return float(err.mean()), right


def chain_stats(report: CompositeRunReport) -> dict:
    messages = report.K2 * report.L
    return {"hops": report.L, "messages": messages, "floats_per_message": report.state_dim,
            "total_payload": messages * report.state_dim,
            "participants": list(report.participants)}


def chain_messages(report: CompositeRunReport, sample: int) -> list[dict]:
    """Message log of one sample: each hop's output sent to the next agent."""
    s = report.samples[sample]
    who = [report.participants[a] for a in s.hop_agents]
    out = []
    for h in range(report.L):
        out.append({"hop": h + 1, "from_agent": who[h],
                    "to_agent": who[h + 1] if h + 1 < report.L else None,
                    "payload": s.trace[h + 1].tolist()})
    return out


def order_invariance(rep_a: CompositeRunReport, rep_b: CompositeRunReport, radius: float) -> bool:
    """Every accepted estimate of ``rep_a`` lies within ``radius`` of one of ``rep_b``."""
    A, B = rep_a.estimates, rep_b.estimates
    if len(A) == 0:
        return True
    if len(B) == 0:
        return False
    d = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    return bool(np.all(d.min(axis=1) <= radius))
