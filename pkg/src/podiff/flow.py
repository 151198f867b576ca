"""Discrete-time denoising flow and its fixed points.

A *denoise function* is any callable ``fn(cond, y)`` returning a denoised
state (batched over rows of ``y``).  Callables with ``uses_step = True``
(the analytic oracle) are called as ``fn(cond, y, step)`` so they can follow
a noise schedule; such a flow may only stop once ``step >= fn.settle_step``.  When the callable has a ``jacobian_y(cond, y)`` method it
is used for stability tests; otherwise a central finite difference is taken.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from ._io import atomic_write_text
from .denoiser import spectral_radius


class DivergenceError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class InitDist:
    kind: str = "standard-normal"
    lo: float = -1.0
    hi: float = 1.0
    sigma: float = 1.0

    _KINDS = ("standard-normal", "uniform-box", "data-marginal")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"init_dist must be one of {self._KINDS}, got {self.kind!r}")

    @classmethod
    def parse(cls, text) -> "InitDist":
        """Accepts ``standard-normal``, ``uniform-box(lo,hi)``, ``data-marginal(sigma)``."""
        if isinstance(text, InitDist):
            return text
        m = re.fullmatch(r"\s*([a-z-]+)\s*(?:\(([^)]*)\))?\s*", str(text))
        if not m:
            raise ValueError(f"cannot parse init_dist {text!r}")
        kind, args = m.group(1), m.group(2)
        vals = [float(v) for v in args.split(",")] if args else []
        if kind == "uniform-box":
            return cls(kind, *(vals or [-1.0, 1.0]))
        if kind == "data-marginal":
            return cls(kind, sigma=vals[0] if vals else 1.0)
        if vals:
            raise ValueError("standard-normal takes no arguments")
        return cls(kind)

    def __str__(self):
        if self.kind == "uniform-box":
            return f"uniform-box({self.lo},{self.hi})"
        if self.kind == "data-marginal":
            return f"data-marginal({self.sigma})"
        return self.kind

    def sample(self, n, dim, rng, posterior=None) -> np.ndarray:
        if self.kind == "standard-normal":
            return rng.standard_normal((n, dim))
        if self.kind == "uniform-box":
            return rng.uniform(self.lo, self.hi, size=(n, dim))
        if posterior is None:
            raise ValueError("data-marginal initialisation needs the exact posterior")
        k = rng.choice(len(posterior.probs), size=n, p=posterior.probs)
        return posterior.support[k] + self.sigma * rng.standard_normal((n, dim))


@dataclass
class FlowConfig:
    max_iters: int = 200
    convergence_tol: float = 1e-5
    merge_radius: float = 0.05
    init_dist: InitDist = field(default_factory=InitDist)
    num_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.init_dist = InitDist.parse(self.init_dist)
        if self.convergence_tol <= 0 or self.merge_radius <= 0:
            raise ValueError("convergence_tol and merge_radius must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")


@dataclass
class FlowTrace:
    points: np.ndarray
    converged: bool
    attractor: np.ndarray | None
    iterations: int


@dataclass
class FixedPointSet:
    points: np.ndarray                  # (k, d) cluster centres
    stability: np.ndarray               # (k,) |lambda_max| < 1
    basin_mass: np.ndarray              # (k,) fraction of initial samples
    lambda_max: np.ndarray              # (k,)
    counts: np.ndarray                  # (k,) samples per cluster
    num_samples: int = 0
    diagnostic: str = ""

    def __len__(self):
        return len(self.points)

    @property
    def attractors(self) -> np.ndarray:
        return self.points[self.stability]

    def to_json(self, tau=None) -> dict:
        return {
            "tau": None if tau is None else np.asarray(tau, dtype=float).tolist(),
            "points": self.points.tolist(),
            "stability": [bool(b) for b in self.stability],
            "basin_mass": [float(m) for m in self.basin_mass],
            "lambda_max": [float(v) for v in self.lambda_max],
        }


def denoise(fn, cond, y, step=None):
    if getattr(fn, "uses_step", False):
        return fn(cond, y, step)
    return fn(cond, y)


def jacobian_y(fn, cond, y, step=None, h: float = 1e-6) -> np.ndarray:
    if hasattr(fn, "jacobian_y"):
        return np.asarray(fn.jacobian_y(cond, y, step) if getattr(fn, "uses_step", False)
                          else fn.jacobian_y(cond, y), dtype=float)
    y = np.asarray(y, dtype=float)
    d = len(y)
    E = np.eye(d) * h
    fp = np.asarray(denoise(fn, cond, y[None, :] + E, step), dtype=float).reshape(d, d)
    fm = np.asarray(denoise(fn, cond, y[None, :] - E, step), dtype=float).reshape(d, d)
    return ((fp - fm) / (2 * h)).T


def run_flow(denoise_fn, tau, y0, cfg: FlowConfig | None = None) -> FlowTrace:
    """Iterate ``y <- f(tau, y)`` until the step norm drops below tolerance."""
    cfg = FlowConfig() if cfg is None else cfg
    settle = getattr(denoise_fn, "settle_step", 0)
    y = np.asarray(y0, dtype=float).copy()
    pts = [y.copy()]
    for ell in range(cfg.max_iters):
        nxt = np.asarray(denoise(denoise_fn, tau, y, ell), dtype=float)
        pts.append(nxt.copy())
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"non-finite iterate at step {ell + 1}",
                                  FlowTrace(np.array(pts), False, None, ell + 1))
        if ell >= settle and np.linalg.norm(nxt - y) < cfg.convergence_tol:
            return FlowTrace(np.array(pts), True, nxt, ell + 1)
        y = nxt
    return FlowTrace(np.array(pts), False, None, cfg.max_iters)


def flow_endpoints(denoise_fn, tau, Y0, cfg: FlowConfig):
    """Batched ``run_flow`` without traces.

    Returns ``(endpoints, converged, iterations)``; non-finite rows count as
    not converged.
    """
    settle = getattr(denoise_fn, "settle_step", 0)
    Y = np.array(Y0, dtype=float, copy=True)
    n = len(Y)
    done = np.zeros(n, dtype=bool)
    bad = np.zeros(n, dtype=bool)
    iters = np.full(n, cfg.max_iters)
    for ell in range(cfg.max_iters):
        active = np.flatnonzero(~done & ~bad)
        if len(active) == 0:
            break
        nxt = np.atleast_2d(np.asarray(denoise(denoise_fn, tau, Y[active], ell), dtype=float))
        finite = np.all(np.isfinite(nxt), axis=1)
        bad[active[~finite]] = True
        step = np.linalg.norm(nxt - Y[active], axis=1)
        Y[active[finite]] = nxt[finite]
        if ell < settle:
            continue
        newly = active[finite & (step < cfg.convergence_tol)]
        done[newly] = True
        iters[newly] = ell + 1
    return Y, done & ~bad, iters


def cluster_points(points, radius: float, quantum: float | None = None):
    """Single-linkage clusters of ``points`` with cut distance ``radius``.

    Points are first bucketed on a grid of spacing ``quantum`` (default
    radius / 10) so large, highly repetitive endpoint clouds stay cheap.
    Returns ``labels`` in 0..k-1 ordered by descending size.
    """
    points = np.atleast_2d(points)
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    q = radius / 10 if quantum is None else quantum
    keys = np.round(points / q).astype(np.int64)
    _, bucket, bucket_inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    bucket_inv = bucket_inv.ravel()
    reps = np.array([points[bucket_inv == b].mean(axis=0) for b in range(len(bucket))])
    if len(reps) == 1:
        rep_label = np.zeros(1, dtype=int)
    else:
        rep_label = fcluster(linkage(reps, method="single"), t=radius, criterion="distance") - 1
    labels = rep_label[bucket_inv]
    sizes = np.bincount(labels)
    centres = np.array([points[labels == k].mean(axis=0) for k in range(len(sizes))])
    order = sorted(range(len(sizes)), key=lambda k: (-sizes[k], tuple(np.round(centres[k], 9))))
    remap = np.empty(len(sizes), dtype=int)
    remap[order] = np.arange(len(sizes))
    return remap[labels]


def _posterior_for(denoise_fn, tau, posterior):
    if posterior is not None:
        return posterior
    if hasattr(denoise_fn, "posterior"):
        return denoise_fn.posterior(tau)
    return None


def find_fixed_points(denoise_fn, tau, cfg: FlowConfig | None = None, rng=None,
                      posterior=None) -> FixedPointSet:
    """Flow ``num_samples`` draws of the initial distribution and cluster the
    converged endpoints into attractors.

    Cluster centres whose Jacobian spectral radius is >= 1 (saddles reached
    from exactly symmetric starts) are kept with ``stability=False`` and get
    no basin mass.
    """
    cfg = FlowConfig() if cfg is None else cfg
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    post = _posterior_for(denoise_fn, tau, posterior)
    dim = _state_dim(denoise_fn, tau, post)
    Y0 = cfg.init_dist.sample(cfg.num_samples, dim, rng, post)
    ends, conv, _ = flow_endpoints(denoise_fn, tau, Y0, cfg)
    pts = ends[conv]
    if len(pts) == 0:
        z = np.zeros(0)
        return FixedPointSet(np.zeros((0, dim)), z.astype(bool), z, z, z.astype(int),
                             cfg.num_samples, "no flow converged")
    labels = cluster_points(pts, cfg.merge_radius)
    k = labels.max() + 1
    counts = np.bincount(labels, minlength=k)
    centres = np.array([pts[labels == j].mean(axis=0) for j in range(k)])
    lam = np.array([spectral_radius(jacobian_y(denoise_fn, tau, c)) for c in centres])
    stable = lam < 1.0
    mass = np.where(stable, counts / max(cfg.num_samples, 1), 0.0)
    diag = ""
    if (~stable).any():
        diag = f"{int(counts[~stable].sum())} samples ended on unstable fixed points"
    return FixedPointSet(centres, stable, mass, lam, counts, cfg.num_samples, diag)


def _state_dim(denoise_fn, tau, post):
    if post is not None:
        return post.support.shape[1]
    model = getattr(denoise_fn, "model", None)
    if model is not None:
        return model.state_dim
    raise ValueError("cannot infer the state dimension of this denoise function")


def estimate_posterior(denoise_fn, tau, cfg: FlowConfig | None = None, rng=None,
                       posterior=None) -> FixedPointSet:
    """Attractors with ``basin_mass`` renormalised over samples that reached a
    stable fixed point: the empirical posterior over states."""
    fps = find_fixed_points(denoise_fn, tau, cfg, rng, posterior)
    total = fps.basin_mass.sum()
    if total > 0:
        fps.basin_mass = fps.basin_mass / total
    return fps


def intersect_fixed_points(sets, merge_radius: float = 0.05) -> np.ndarray:
    """Attractors present (within ``merge_radius``) in every set.

    Each returned vector is the mean of the matched attractors.
    """
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one fixed point set")
    pools = [np.atleast_2d(s.attractors if hasattr(s, "attractors") else np.asarray(s))
             for s in sets]
    out = []
    for p in pools[0]:
        matched = [p]
        for other in pools[1:]:
            if other.size == 0:
                matched = None
                break
            d = np.linalg.norm(other - p, axis=1)
            j = int(np.argmin(d))
            if d[j] > merge_radius:
                matched = None
                break
            matched.append(other[j])
        if matched is None:
            continue
        c = np.mean(matched, axis=0)
        if all(np.linalg.norm(c - q) > merge_radius for q in out):
            out.append(c)
    dim = pools[0].shape[1] if pools[0].ndim == 2 else 0
    return np.array(out).reshape(-1, dim)


def vector_field(denoise_fn, tau, dims, lo: float, hi: float, resolution: int,
                 fixed_coords, step=None):
    """Evaluate the denoiser on a 2-D grid over state dimensions ``dims``.

    Returns ``(header, rows)`` where each row is ``y_in`` followed by
    ``y_out = f(tau, y_in)``.
    """
    fixed = np.asarray(fixed_coords, dtype=float)
    d = len(fixed)
    if any(not 0 <= k < d for k in dims):
        raise ValueError("grid dims must index state dimensions")
    header = [f"y_in_{k}" for k in range(d)] + [f"y_out_{k}" for k in range(d)]
    if resolution <= 0:
        return header, np.zeros((0, 2 * d))
    axis = np.linspace(lo, hi, resolution)
    grids = np.meshgrid(*([axis] * len(dims)), indexing="ij")
    Y = np.tile(fixed, (grids[0].size, 1))
    for k, g in zip(dims, grids):
        Y[:, k] = g.ravel()
    out = np.atleast_2d(denoise(denoise_fn, tau, Y, step))
    return header, np.hstack([Y, out])


def rows_to_csv(header, rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    # counters (step, epoch) stay integers
    int_cols = {k for k, h in enumerate(header) if h in ("step", "epoch")}
    for r in rows:
        w.writerow([str(int(x)) if k in int_cols else repr(float(x)) for k, x in enumerate(r)])
    text = buf.getvalue()
    if path is not None:
        atomic_write_text(path, text)
    return text
