"""Fixed-point deviations, local-linear shift predictions and the surrogate
regression bound.

Throughout, ``tau`` is whatever conditioning the denoise function takes (for
the shared network: agent one-hot followed by the history).  Functions that
report Jacobian ranks take ``history_offset``, the number of leading
conditioning columns that are not history entries, so that rank counts only
history directions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from ._io import atomic_write_text, dump_json
from .denoiser import jac_plus_from, spectral_radius
from .flow import DivergenceError, FlowConfig, FlowTrace, jacobian_y, run_flow


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, trace: FlowTrace | None = None):
        super().__init__(msg)
        self.trace = trace


class SingularJacobianError(np.linalg.LinAlgError):
    pass


def numerical_rank(matrix, rel_tol: float = 1e-3) -> int:
    """Number of singular values above ``rel_tol`` times the largest one."""
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.size == 0:
        return 0
    if not np.all(np.isfinite(A)):
        raise ValueError("numerical_rank needs a finite matrix")
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def local_jacobians(fn, tau, y):
    """``(jac_y, jac_tau)`` of a denoise function at one point.

    Functions without a ``jacobians`` method (the analytic oracle) are
    piecewise constant in the history, so their history Jacobian is zero.
    """
    if hasattr(fn, "jacobians"):
        rep = fn.jacobians(tau, y)
        return rep.jac_y, rep.jac_tau
    jy = jacobian_y(fn, tau, y)
    return jy, np.zeros((len(jy), np.size(tau) if isinstance(tau, np.ndarray) else 0))


@dataclass
class DeviationRecord:
    tau: np.ndarray
    s: np.ndarray
    attractor: np.ndarray
    deviation: float
    jac_plus_rank: int
    lambda_max_abs: float
    jac_y: np.ndarray | None = field(default=None, repr=False)
    iterations: int = 0


def _converged_flow(fn, tau, y0, flow_cfg):
    try:
        tr = run_flow(fn, tau, y0, flow_cfg)
    except DivergenceError as e:
        raise NonConvergenceError(str(e), e.trace) from e
    if not tr.converged:
        raise NonConvergenceError(f"flow did not converge in {flow_cfg.max_iters} steps", tr)
    return tr


def deviation(fn, tau, s, flow_cfg: FlowConfig | None = None, rank_tol: float = 1e-3,
              history_offset: int = 0) -> DeviationRecord:
    """Flow from the true state ``s`` and measure how far the attractor lies."""
    flow_cfg = FlowConfig() if flow_cfg is None else flow_cfg
    s = np.asarray(s, dtype=float)
    tr = _converged_flow(fn, tau, s, flow_cfg)
    y = tr.attractor
    jy, jt = local_jacobians(fn, tau, y)
    jp, _ = jac_plus_from(jy, jt[:, history_offset:])
    rank = numerical_rank(jp, rank_tol) if jp is not None else 0
    return DeviationRecord(np.asarray(tau, dtype=float) if isinstance(tau, np.ndarray) else tau,
                           s, y, float(np.linalg.norm(s - y)), rank,
                           spectral_radius(jy), jy, tr.iterations)


# ---------------------------------------------------------------------------
# shift prediction


def predict_shift(fn, tau, y_star, delta_tau) -> np.ndarray:
    """First-order fixed-point shift ``J+ dtau`` with ``J+ = (I - J_y)^-1 J_tau``."""
    jy, jt = local_jacobians(fn, tau, y_star)
    delta_tau = np.asarray(delta_tau, dtype=float)
    if not np.any(delta_tau):
        return np.zeros(len(jy))
    jp, cond = jac_plus_from(jy, jt)
    if jp is None:
        raise SingularJacobianError(f"I - jac_y is singular (cond {cond:.3g})")
    return jp @ delta_tau


def rerun_shift(fn, tau, y_star, delta_tau, flow_cfg: FlowConfig | None = None) -> np.ndarray:
    """Shift measured by re-running the flow from ``y_star`` under ``tau + delta_tau``."""
    flow_cfg = FlowConfig(max_iters=5000, convergence_tol=1e-12) if flow_cfg is None else flow_cfg
    tau2 = np.asarray(tau, dtype=float) + np.asarray(delta_tau, dtype=float)
    tr = _converged_flow(fn, tau2, y_star, flow_cfg)
    return tr.attractor - np.asarray(y_star, dtype=float)


def relative_error(pred, actual) -> float:
    pred, actual = np.asarray(pred, dtype=float), np.asarray(actual, dtype=float)
    den = np.linalg.norm(actual)
    if den == 0:
        return 0.0 if np.linalg.norm(pred) == 0 else math.inf
    return float(np.linalg.norm(pred - actual) / den)


@dataclass
class Cor1Report:
    prediction: np.ndarray | None
    reference: np.ndarray | None
    discrepancy: float | None
    note: str = ""


def cor1_shift(model, tau, y_star, delta_tau, max_cond: float = 1e10) -> Cor1Report:
    """Shift through the first-layer expansion ``E (I-L)^-1 L E^T W_y^+ W_tau dtau``.

    ``E``, ``L`` come from the eigendecomposition of ``jac_y``.  The formula
    assumes a symmetric PSD ``jac_y``; for other models the discrepancy
    against ``predict_shift`` is reported rather than hidden.
    """
    from .denoiser import ModelDenoiser, jacobians

    delta_tau = np.asarray(delta_tau, dtype=float)
    m = model.model if isinstance(model, ModelDenoiser) else model.astype(np.float64)
    rep = jacobians(m, tau, y_star)
    d = rep.jac_y.shape[0]
    reference = rep.jac_plus @ delta_tau if rep.jac_plus is not None else None
    if not np.any(delta_tau):
        z = np.zeros(d)
        return Cor1Report(z, z if reference is not None else None, 0.0)
    lam, E = np.linalg.eig(rep.jac_y)
    if not np.isfinite(np.linalg.cond(E)) or np.linalg.cond(E) > max_cond:
        return Cor1Report(None, reference, None, "jac_y is defective")
    if np.any(np.isclose(lam, 1.0)):
        return Cor1Report(None, reference, None, "jac_y has an eigenvalue at 1")
    W_y_pinv = np.linalg.pinv(m.W_y)
    core = E @ np.diag(lam / (1.0 - lam)) @ E.T
    pred = core @ (W_y_pinv @ (m.W_tau @ delta_tau))
    note = ""
    if np.max(np.abs(pred.imag)) > 1e-9 * max(1.0, np.max(np.abs(pred.real))):
        note = "complex spectrum; real part reported"
    pred = pred.real
    disc = None if reference is None else float(np.linalg.norm(pred - reference))
    return Cor1Report(pred, reference, disc, note)


# ---------------------------------------------------------------------------
# local data sets and the surrogate residual


class PairCache:
    """Deviation records keyed by ``(tau, s)`` so each flow runs once."""

    def __init__(self, fn, flow_cfg: FlowConfig | None = None, rank_tol: float = 1e-3,
                 history_offset: int = 0):
        self.fn = fn
        self.flow_cfg = FlowConfig() if flow_cfg is None else flow_cfg
        self.rank_tol = rank_tol
        self.history_offset = history_offset
        self._store: dict = {}

    @staticmethod
    def key(tau, s):
        return (np.asarray(tau, dtype=float).tobytes(), np.asarray(s, dtype=float).tobytes())

    def get(self, tau, s) -> DeviationRecord | None:
        """Record for the pair, or None when its flow does not converge."""
        k = self.key(tau, s)
        if k not in self._store:
            try:
                self._store[k] = deviation(self.fn, np.asarray(tau, dtype=float), s,
                                           self.flow_cfg, self.rank_tol, self.history_offset)
            except NonConvergenceError:
                self._store[k] = None
        return self._store[k]


def unique_pairs(taus, states):
    """Distinct ``(tau, s)`` rows in first-seen order."""
    taus = np.atleast_2d(np.asarray(taus, dtype=float))
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(taus) == 0:
        return taus, states
    joint = np.hstack([taus, states])
    _, idx = np.unique(joint, axis=0, return_index=True)
    idx = np.sort(idx)
    return taus[idx], states[idx]


@dataclass
class LocalDataset:
    anchor: tuple
    epsilon: float
    members: list
    r: int
    distances: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def build_local_dataset(pairs, fn, anchor, epsilon: float, flow_cfg: FlowConfig | None = None,
                        cache: PairCache | None = None, rank_tol: float = 1e-3) -> LocalDataset:
    """Pairs whose attractor Jacobian lies within ``epsilon`` (Frobenius) of the anchor's.

    ``pairs`` is an iterable of ``(tau, s)``; members whose flow does not
    converge are left out.
    """
    cache = PairCache(fn, flow_cfg) if cache is None else cache
    a_tau, a_s = anchor
    a_rec = cache.get(a_tau, a_s)
    if a_rec is None:
        raise NonConvergenceError("anchor flow did not converge")
    members, dists = [], []
    found_anchor = False
    for tau, s in pairs:
        rec = cache.get(tau, s)
        if rec is None:
            continue
        dist = float(np.linalg.norm(rec.jac_y - a_rec.jac_y))
        if dist <= epsilon:
            members.append((np.asarray(tau, dtype=float), np.asarray(s, dtype=float), rec.attractor))
            dists.append(dist)
            found_anchor |= PairCache.key(tau, s) == PairCache.key(a_tau, a_s)
    if not found_anchor:
        raise ValueError("anchor is not one of the dataset pairs")
    r = numerical_rank(np.stack([m[1] for m in members]), rank_tol)
    return LocalDataset((np.asarray(a_tau, dtype=float), np.asarray(a_s, dtype=float),
                         a_rec.attractor), float(epsilon), members, r, np.array(dists))


@dataclass
class SurrogateResidualReport:
    sigma_s: np.ndarray
    sigma_tau: np.ndarray
    sigma_s_tau: np.ndarray
    residual: float
    ridge: float
    n: int


def surrogate_residual(samples) -> SurrogateResidualReport:
    """``Tr(S_s) - Tr(S_st S_t^-1 S_ts)`` with population covariances.

    ``S_t`` gets a ridge of ``1e-8 * Tr(S_t) / |tau|`` on its diagonal.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("surrogate_residual needs at least 2 samples")
    T = np.stack([np.asarray(t, dtype=float) for t, _ in samples])
    S = np.stack([np.asarray(s, dtype=float) for _, s in samples])
    n = len(T)
    Tc, Sc = T - T.mean(axis=0), S - S.mean(axis=0)
    st = Tc.T @ Tc / n
    ss = Sc.T @ Sc / n
    s_t = Sc.T @ Tc / n
    ridge = 1e-8 * np.trace(st) / T.shape[1]
    if ridge > 0:
        explained = np.trace(s_t @ np.linalg.solve(st + ridge * np.eye(len(st)), s_t.T))
    else:
        explained = 0.0
    return SurrogateResidualReport(ss, st, s_t, float(np.trace(ss) - explained), float(ridge), n)


# ---------------------------------------------------------------------------
# rank / deviation study


@dataclass
class StudyRow:
    tau_id: int
    state_id: int
    rank: int
    deviation: float
    lambda_max: float


@dataclass
class BoundCheck:
    index: int
    deviation: float
    residual: float
    members: int
    holds: bool


@dataclass
class StudyResult:
    rows: list
    spearman_rho: float | None
    residuals: dict              # epsilon -> mean R_eps over checked anchors
    checks: dict                 # epsilon -> list[BoundCheck]
    jac_distances: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), repr=False)
    records: list = field(default_factory=list, repr=False)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau_id", "state_id", "rank", "deviation", "lambda_max"])
        for r in self.rows:
            w.writerow([r.tau_id, r.state_id, r.rank, repr(r.deviation), repr(r.lambda_max)])
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text

    def summary(self) -> dict:
        checks = {}
        for eps, cs in self.checks.items():
            checks[repr(eps)] = {"checked": len(cs), "held": sum(c.holds for c in cs)}
        return {"spearman_rho": self.spearman_rho,
                "residuals": {repr(k): v for k, v in self.residuals.items()},
                "bound_checks": checks}

    def to_json(self, path=None) -> str:
        return dump_json(self.summary(), path)


def spearman(x, y) -> float | None:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(spearmanr(x, y).statistic)


def pairwise_jacobian_distances(records) -> np.ndarray:
    J = np.stack([r.jac_y.ravel() for r in records]) if records else np.zeros((0, 0))
    if len(J) == 0:
        return np.zeros((0, 0))
    g = J @ J.T
    sq = np.diag(g)[:, None] + np.diag(g)[None, :] - 2 * g
    return np.sqrt(np.maximum(sq, 0.0))


def epsilon_percentile(dist: np.ndarray, q: float) -> float:
    iu = np.triu_indices(len(dist), k=1)
    if len(iu[0]) == 0:
        raise ValueError("need at least two fixed points for a distance percentile")
    return float(np.percentile(dist[iu], q))


def rank_deviation_study(fn, taus, states, flow_cfg: FlowConfig | None = None,
                         rank_tol: float = 1e-3, epsilons=(), history_offset: int = 0,
                         epsilon_percentiles=()) -> StudyResult:
    """Rank of J+ against deviation for every distinct dataset pair, plus the
    residual bound check for each requested epsilon.

    An anchor is checked at a given epsilon when its member set contains two
    members whose attractor Jacobians differ by more than epsilon (the
    hypothesis of the bound); the check is ``deviation < R`` over that set.
    ``epsilon_percentiles`` adds epsilons at those percentiles of the pairwise
    Jacobian distances.
    """
    taus, states = unique_pairs(taus, states)
    if len(taus) == 0:
        return StudyResult([], None, {float(e): None for e in epsilons},
                           {float(e): [] for e in epsilons})
    tau_ids = _row_ids(taus)
    state_ids = _row_ids(states)
    cache = PairCache(fn, flow_cfg, rank_tol, history_offset)
    recs, keep = [], []
    for k, (t, s) in enumerate(zip(taus, states)):
        rec = cache.get(t, s)
        if rec is not None:
            recs.append(rec)
            keep.append(k)
    if not recs:
        raise NonConvergenceError("no flow converged in the study")
    rows = [StudyRow(int(tau_ids[k]), int(state_ids[k]), r.jac_plus_rank, r.deviation,
                     r.lambda_max_abs) for k, r in zip(keep, recs)]
    rho = spearman([r.rank for r in rows], [r.deviation for r in rows])
    dist = pairwise_jacobian_distances(recs)
    epsilons = [float(e) for e in epsilons]
    if len(recs) >= 2:
        epsilons += [epsilon_percentile(dist, q) for q in epsilon_percentiles]
    residuals, checks = {}, {}
    for eps in epsilons:
        eps = float(eps)
        cs = []
        for a in range(len(recs)):
            idx = np.flatnonzero(dist[a] <= eps)
            if len(idx) < 2:
                continue
            if not np.any(dist[np.ix_(idx, idx)] > eps):
                continue
            rep = surrogate_residual([(recs[j].tau, recs[j].s) for j in idx])
            cs.append(BoundCheck(a, recs[a].deviation, rep.residual, len(idx),
                                 recs[a].deviation < rep.residual))
        checks[eps] = cs
        residuals[eps] = float(np.mean([c.residual for c in cs])) if cs else None
    return StudyResult(rows, rho, residuals, checks, dist, recs)


def _row_ids(X) -> np.ndarray:
    _, inv = np.unique(X, axis=0, return_inverse=True)
    return inv.ravel()
