"""Fully-connected conditional denoiser ``f(cond, y)`` written against numpy.

Layout (weights are ``(out, in)`` so a layer computes ``W @ x + b``)::

    z0 = W_tau @ cond + W_y @ y + b0          first layer, stored split
    h  = relu(z0)
    h  = relu(W_k @ h + b_k)                  k = 1 .. hidden_layers-1
    f  = W_out @ h + b_out

With ``hidden_layers == 0`` the first layer is the output layer and the
model is affine.  The rectifier derivative at exactly zero is taken as 0.
There is no noise-level or step input and no normalisation layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text

MAGIC = b"PDF1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class ModelFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, checkpoint=None, loss_curve=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.loss_curve = loss_curve


@dataclass
class DenoiserModel:
    tau_dim: int
    state_dim: int
    hidden_width: int
    hidden_layers: int
    W_tau: np.ndarray
    W_y: np.ndarray
    b0: np.ndarray
    weights: list = field(default_factory=list)   # hidden-to-hidden, then output
    biases: list = field(default_factory=list)

    def __post_init__(self):
        m = self.first_width
        if self.W_tau.shape != (m, self.tau_dim) or self.W_y.shape != (m, self.state_dim):
            raise ValueError("first-layer split does not match (tau_dim, state_dim)")
        if self.b0.shape != (m,):
            raise ValueError("first-layer bias has the wrong size")
        expect = max(self.hidden_layers, 0)
        if len(self.weights) != expect or len(self.biases) != expect:
            raise ValueError(f"expected {expect} layers after the first")
        if self.hidden_layers and self.weights[-1].shape[0] != self.state_dim:
            raise ValueError("output layer must produce state_dim values")

    @property
    def first_width(self) -> int:
        return self.hidden_width if self.hidden_layers > 0 else self.state_dim

    @property
    def dtype(self):
        return self.W_y.dtype

    def params(self) -> list:
        """Parameters in file order: W_tau, W_y, b0, then (W_k, b_k) pairs."""
        out = [self.W_tau, self.W_y, self.b0]
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, arrays) -> None:
        arrays = list(arrays)
        self.W_tau, self.W_y, self.b0 = arrays[:3]
        self.weights = arrays[3::2]
        self.biases = arrays[4::2]

    def astype(self, dtype) -> "DenoiserModel":
        m = self.copy()
        m.set_params([p.astype(dtype) for p in m.params()])
        return m

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.tau_dim, self.state_dim, self.hidden_width, self.hidden_layers,
                             self.W_tau.copy(), self.W_y.copy(), self.b0.copy(),
                             [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def init_model(tau_dim: int, state_dim: int, hidden_width: int = 1024, hidden_layers: int = 6,
               rng=None, dtype=np.float32) -> DenoiserModel:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(rng)

    def he(fan_out, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in))

    m = hidden_width if hidden_layers > 0 else state_dim
    W0 = he(m, tau_dim + state_dim)
    weights, biases = [], []
    for _ in range(max(hidden_layers - 1, 0)):
        weights.append(he(hidden_width, hidden_width))
        biases.append(np.zeros(hidden_width))
    if hidden_layers > 0:
        weights.append(he(state_dim, hidden_width))
        biases.append(np.zeros(state_dim))
    model = DenoiserModel(tau_dim, state_dim, hidden_width, hidden_layers,
                          W0[:, :tau_dim], W0[:, tau_dim:], np.zeros(m), weights, biases)
    return model.astype(dtype)


# ---------------------------------------------------------------------------
# forward / backward


def _prep(model, tau, y):
    tau = np.asarray(tau, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)
    single = y.ndim == 1 and tau.ndim == 1
    Y = np.atleast_2d(y)
    T = np.atleast_2d(tau)
    if T.shape[0] == 1 and Y.shape[0] > 1:
        T = np.broadcast_to(T, (Y.shape[0], T.shape[1]))
    elif Y.shape[0] == 1 and T.shape[0] > 1:
        Y = np.broadcast_to(Y, (T.shape[0], Y.shape[1]))
    if T.shape[1] != model.tau_dim or Y.shape[1] != model.state_dim:
        raise ValueError(f"input dims ({T.shape[1]}, {Y.shape[1]}) do not match model "
                         f"({model.tau_dim}, {model.state_dim})")
    if T.shape[0] != Y.shape[0]:
        raise ValueError("batch sizes of tau and y differ")
    return T, Y, single


def _forward_cached(model, T, Y):
    z = T @ model.W_tau.T + Y @ model.W_y.T + model.b0
    pre = [z]
    if model.hidden_layers == 0:
        return z, pre
    h = np.maximum(z, 0)
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0)
    return h @ model.weights[-1].T + model.biases[-1], pre


def forward(model: DenoiserModel, tau, y) -> np.ndarray:
    """Evaluate the denoiser; ``tau``/``y`` may be single vectors or batches."""
    T, Y, single = _prep(model, tau, y)
    out, _ = _forward_cached(model, T, Y)
    return out[0] if single else out


def _backward(model, T, Y, pre, G):
    """Parameter gradients given dLoss/dOutput ``G`` (batch, state_dim)."""
    grads = [None] * len(model.params())
    if model.hidden_layers == 0:
        grads[0], grads[1], grads[2] = G.T @ T, G.T @ Y, G.sum(0)
        return grads
    acts = [np.maximum(z, 0) for z in pre]
    # output layer
    grads[-2] = G.T @ acts[-1]
    grads[-1] = G.sum(0)
    delta = G @ model.weights[-1]
    for k in range(len(model.weights) - 2, -1, -1):
        delta = delta * (pre[k + 1] > 0)
        grads[3 + 2 * k] = delta.T @ acts[k]
        grads[4 + 2 * k] = delta.sum(0)
        delta = delta @ model.weights[k]
    delta = delta * (pre[0] > 0)
    grads[0], grads[1], grads[2] = delta.T @ T, delta.T @ Y, delta.sum(0)
    return grads


def loss_and_grads(model: DenoiserModel, tau, y, s):
    """Mean over the batch of ||s - f(tau, y)||^2 and its parameter gradients."""
    T, Y, _ = _prep(model, tau, y)
    S = np.atleast_2d(np.asarray(s, dtype=model.dtype))
    out, pre = _forward_cached(model, T, Y)
    r = out - S
    B = len(S)
    loss = float((r.astype(np.float64) ** 2).sum() / B)
    grads = _backward(model, T, Y, pre, (2.0 / B) * r)
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 512
    noise_sigma_range: tuple = (0.0, 1.0)
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    # "cosine" anneals the step size from learning_rate to 0 over the run
    lr_schedule: str = "cosine"

    def __post_init__(self):
        lo, hi = self.noise_sigma_range
        self.noise_sigma_range = (float(lo), float(hi))
        if not 0 <= lo <= hi:
            raise ValueError("noise_sigma_range must satisfy 0 <= low <= high")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "constant" or total <= 1:
            return self.learning_rate
        return 0.5 * self.learning_rate * (1.0 + np.cos(np.pi * step / total))


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.dtype)


@dataclass
class TrainResult:
    model: DenoiserModel
    loss_curve: list
    steps: int


def _training_arrays(data):
    if hasattr(data, "conditions"):
        _, _, states = data.arrays()
        return data.conditions(), states
    conds, states = data
    return np.atleast_2d(np.asarray(conds, dtype=float)), np.atleast_2d(np.asarray(states, dtype=float))


def train(model: DenoiserModel, data, cfg: TrainConfig, rng=None, log_every: int = 0,
          logger=None) -> TrainResult:
    """Minimise E ||s - f(cond, s + sigma z)||^2 with Adam.

    ``data`` is a ``Dataset`` or a ``(conditions, states)`` pair.  Every
    sample in a batch gets its own sigma ~ U(noise_sigma_range).  The loss
    curve holds the per-epoch mean of the batch losses, weighted by batch
    size.  A non-finite loss raises ``TrainingError`` carrying the model as
    it was at the start of the failing epoch.
    """
    conds, states = _training_arrays(data)
    N = len(states)
    if N == 0:
        raise ValueError("cannot train on an empty dataset")
    if conds.shape[1] != model.tau_dim or states.shape[1] != model.state_dim:
        raise ValueError("dataset dims do not match the model")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dtype = np.dtype(cfg.dtype)
    model = model.astype(dtype)
    conds = conds.astype(dtype)
    states = states.astype(dtype)
    params = model.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    lo, hi = cfg.noise_sigma_range
    curve = []
    steps = 0
    total_steps = cfg.epochs * -(-N // cfg.batch_size)
    for epoch in range(cfg.epochs):
        checkpoint = model.copy()
        perm = rng.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            s = states[idx]
            sigma = rng.uniform(lo, hi, size=(len(idx), 1)).astype(dtype)
            y = s + sigma * rng.standard_normal(s.shape).astype(dtype)
            loss, grads = loss_and_grads(model, conds[idx], y, s)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}", checkpoint, curve)
            opt.lr = cfg.lr_at(steps, total_steps)
            opt.step(params, grads)
            total += loss * len(idx)
            steps += 1
        curve.append(total / N)
        if logger is not None and log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.6g", epoch + 1, curve[-1])
    return TrainResult(model, curve, steps)


# ---------------------------------------------------------------------------
# Jacobians


@dataclass
class JacobianReport:
    jac_y: np.ndarray
    jac_tau: np.ndarray
    eigenvalues: np.ndarray
    lambda_max_abs: float
    jac_plus: np.ndarray | None
    condition_number: float


def input_jacobian(model: DenoiserModel, tau, y) -> tuple[np.ndarray, np.ndarray]:
    """(df/dy, df/dtau) at one point, by back-propagating identity seeds."""
    T, Y, _ = _prep(model, tau, y)
    if T.shape[0] != 1:
        raise ValueError("input_jacobian takes a single point")
    _, pre = _forward_cached(model, T, Y)
    if model.hidden_layers == 0:
        return model.W_y.copy(), model.W_tau.copy()
    M = model.weights[-1]
    for k in range(len(model.weights) - 2, -1, -1):
        M = (M * (pre[k + 1][0] > 0)) @ model.weights[k]
    M = M * (pre[0][0] > 0)
    return M @ model.W_y, M @ model.W_tau


def spectral_radius(matrix) -> float:
    """Largest eigenvalue modulus (dense eigendecomposition)."""
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("spectral_radius needs a square matrix")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def jac_plus_from(jac_y, jac_tau, max_cond: float = 1e12):
    """(I - jac_y)^-1 jac_tau, or None when I - jac_y is numerically singular."""
    A = np.eye(len(jac_y)) - jac_y
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > max_cond:
        return None, cond
    return np.linalg.solve(A, jac_tau), cond


def jacobians(model: DenoiserModel, tau, y) -> JacobianReport:
    jy, jt = input_jacobian(model, tau, y)
    jy = jy.astype(np.float64)
    jt = jt.astype(np.float64)
    eig = np.linalg.eigvals(jy)
    jp, cond = jac_plus_from(jy, jt)
    return JacobianReport(jy, jt, eig, float(np.max(np.abs(eig))), jp, cond)


class ModelDenoiser:
    """Adapter giving a trained model the ``denoise_fn`` interface used by
    the flow code.  Evaluation happens on a float64 copy of the weights."""

    uses_step = False

    def __init__(self, model: DenoiserModel):
        self.model = model.astype(np.float64)

    def __call__(self, cond, y, step=None):
        return forward(self.model, cond, y)

    def jacobian_y(self, cond, y, step=None) -> np.ndarray:
        return input_jacobian(self.model, cond, y)[0]

    def jacobians(self, cond, y) -> JacobianReport:
        return jacobians(self.model, cond, y)


# ---------------------------------------------------------------------------
# serialisation


def model_to_bytes(model: DenoiserModel) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.tau_dim, model.state_dim,
                          model.hidden_width, model.hidden_layers)]
    for p in model.params():
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> DenoiserModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated model file (header)")
    magic, version, tau_dim, state_dim, width, layers = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC.decode()!r} (\"PDF1\")")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version} (this build reads {FORMAT_VERSION})")
    m = width if layers > 0 else state_dim
    shapes = [(m, tau_dim), (m, state_dim), (m,)]
    for _ in range(max(layers - 1, 0)):
        shapes += [(width, width), (width,)]
    if layers > 0:
        shapes += [(state_dim, width), (state_dim,)]
    need = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) < need:
        raise ModelFormatError(f"truncated model file ({len(data)} of {need} bytes)")
    if len(data) > need:
        raise ModelFormatError(f"trailing bytes in model file ({len(data)} > {need})")
    arrays, off = [], _HEADER.size
    for shp in shapes:
        n = int(np.prod(shp))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shp))
        off += 4 * n
    return DenoiserModel(tau_dim, state_dim, width, layers, arrays[0], arrays[1], arrays[2],
                         arrays[3::2], arrays[4::2])


def save_model(model: DenoiserModel, path) -> None:
    """Write the little-endian float32 model file atomically.  Weights that
    are not float32-representable are rounded."""
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> DenoiserModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def export_json(model: DenoiserModel, path=None) -> dict:
    names = ["W_tau", "W_y", "b0"]
    for k in range(1, len(model.weights) + 1):
        tag = "out" if k == len(model.weights) else str(k)
        names += [f"W_{tag}", f"b_{tag}"]
    d = {"magic": MAGIC.decode(), "version": FORMAT_VERSION, "tau_dim": model.tau_dim,
         "state_dim": model.state_dim, "hidden_width": model.hidden_width,
         "hidden_layers": model.hidden_layers,
         "params": {n: np.asarray(p, dtype=np.float32).astype(float).tolist()
                    for n, p in zip(names, model.params())}}
    if path is not None:
        atomic_write_text(path, json.dumps(d) + "\n")
    return d
