"""Function approximators mapping control vectors to voltage states.

A model is a feature map followed by a linear read-out matrix A, operating in
normalized input/target space: v_hat = denorm(A @ phi(norm(u))). The linear
feature map is [1, u...]; the mlp map is two tanh layers. Gradients are exact
reverse-mode, written out by hand, so training and the downstream
optimization tasks never rely on finite differences.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import FormatError, LineSearchFailure, NonFiniteLoss, ValidationError
from .network import Network
from .optim import minimize_adam, minimize_lbfgs
from .residual import VoltageState, assemble_residual, residual_jacobian, residual_norm

MODEL_FORMAT = "rpf-model-v1"
SCALE_FLOOR = 1e-8


@dataclass
class Normalizer:
    u_mean: np.ndarray
    u_scale: np.ndarray
    v_mean: np.ndarray
    v_scale: np.ndarray

    @classmethod
    def from_data(cls, U: np.ndarray, V: np.ndarray) -> "Normalizer":
        def stats(M):
            mean = M.mean(axis=0)
            scale = np.maximum(M.std(axis=0), SCALE_FLOOR)
            return mean, scale

        um, us = stats(U)
        vm, vs = stats(V)
        return cls(um, us, vm, vs)

    def norm_u(self, U):
        return (U - self.u_mean) / self.u_scale

    def norm_v(self, V):
        return (V - self.v_mean) / self.v_scale

    def denorm_v(self, Vn):
        return Vn * self.v_scale + self.v_mean


class LinearFeatures:
    """Affine features [1, u_1..u_m] on normalized inputs."""

    kind = "linear"

    def __init__(self, in_dim: int):
        self.in_dim = in_dim

    @property
    def n_features(self) -> int:
        return self.in_dim + 1

    def forward(self, X: np.ndarray) -> np.ndarray:
        return np.hstack([np.ones((X.shape[0], 1)), X])

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        J = np.zeros((self.n_features, self.in_dim))
        J[1:, :] = np.eye(self.in_dim)
        return J

    # the affine map has no trainable parameters
    def pack(self) -> np.ndarray:
        return np.zeros(0)

    def unpack(self, theta: np.ndarray) -> None:
        pass


class MlpFeatures:
    """Two tanh layers; the read-out happens outside via the A matrix."""

    kind = "mlp"

    def __init__(self, in_dim: int, widths=(100, 100)):
        if len(widths) != 2:
            raise ValidationError("mlp feature map uses exactly two hidden layers")
        self.in_dim = in_dim
        self.widths = tuple(int(w) for w in widths)
        h1, h2 = self.widths
        self.w1 = np.zeros((h1, in_dim))
        self.b1 = np.zeros(h1)
        self.w2 = np.zeros((h2, h1))
        self.b2 = np.zeros(h2)

    @property
    def n_features(self) -> int:
        return self.widths[1]

    def init_params(self, rng: np.random.Generator) -> None:
        def glorot(shape):
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-lim, lim, shape)

        self.w1 = glorot(self.w1.shape)
        self.b1 = np.zeros_like(self.b1)
        self.w2 = glorot(self.w2.shape)
        self.b2 = np.zeros_like(self.b2)

    def forward(self, X: np.ndarray, want_cache: bool = False):
        H1 = np.tanh(X @ self.w1.T + self.b1)
        H2 = np.tanh(H1 @ self.w2.T + self.b2)
        if want_cache:
            return H2, (X, H1, H2)
        return H2

    def backward(self, cache, dPhi: np.ndarray):
        """Gradients of the parameters given dL/dPhi."""
        X, H1, H2 = cache
        dZ2 = dPhi * (1.0 - H2 * H2)
        dW2 = dZ2.T @ H1
        db2 = dZ2.sum(axis=0)
        dH1 = dZ2 @ self.w2
        dZ1 = dH1 * (1.0 - H1 * H1)
        dW1 = dZ1.T @ X
        db1 = dZ1.sum(axis=0)
        return dW1, db1, dW2, db2

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        h1 = np.tanh(self.w1 @ x + self.b1)
        h2 = np.tanh(self.w2 @ h1 + self.b2)
        d1 = (1.0 - h1 * h1)[:, None] * self.w1
        return (1.0 - h2 * h2)[:, None] * (self.w2 @ d1)

    def pack(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )

    def unpack(self, theta: np.ndarray) -> None:
        h1, h2 = self.widths
        m = self.in_dim
        o = 0
        self.w1 = theta[o:o + h1 * m].reshape(h1, m); o += h1 * m
        self.b1 = theta[o:o + h1]; o += h1
        self.w2 = theta[o:o + h2 * h1].reshape(h2, h1); o += h2 * h1
        self.b2 = theta[o:o + h2]; o += h2


@dataclass
class NeuralSolver:
    feature_map: object  # LinearFeatures | MlpFeatures
    a_matrix: np.ndarray  # (out_dim, n_features)
    normalizer: Normalizer
    in_dim: int
    out_dim: int
    n_bus: int
    n_branch: int
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.feature_map.kind

    def predict_matrix(self, U: np.ndarray) -> np.ndarray:
        """Denormalized predictions, one row per input row."""
        Phi = self.feature_map.forward(self.normalizer.norm_u(np.atleast_2d(U)))
        return self.normalizer.denorm_v(Phi @ self.a_matrix.T)


def features(solver: NeuralSolver, u: np.ndarray) -> np.ndarray:
    """Feature vector phi(u) for one control vector (normalized input)."""
    x = solver.normalizer.norm_u(np.atleast_2d(u))
    return solver.feature_map.forward(x)[0]


def predict(solver: NeuralSolver, u: np.ndarray) -> VoltageState:
    """Predicted voltage state for one control vector. Out-of-domain outputs
    are returned as-is; check .in_domain."""
    if solver.meta.get("formulation", "rpf") != "rpf":
        raise ValidationError("model does not predict voltage states directly")
    out = solver.predict_matrix(u)[0]
    return VoltageState.from_vector(out, solver.n_bus)


def input_jacobian(solver: NeuralSolver, u: np.ndarray) -> np.ndarray:
    """d(prediction)/d(u) for one control vector, denormalized: (out, in)."""
    x = solver.normalizer.norm_u(np.asarray(u, dtype=float))
    dphi = solver.feature_map.input_jacobian(x)  # (F, in)
    core = solver.a_matrix @ dphi
    return (solver.normalizer.v_scale[:, None] * core) / solver.normalizer.u_scale


# ---------------------------------------------------------------------------
# fitting


@dataclass
class TrainConfig:
    features: str = "mlp"  # "linear" | "mlp"
    widths: tuple[int, int] = (100, 100)
    max_epochs: int = 6000
    optimizer: str = "lbfgs"  # "lbfgs" | "adam"
    history: int = 10
    adam_lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 200
    grad_tol: float = 1e-10

    def echo(self) -> dict:
        d = self.__dict__.copy()
        d["widths"] = list(self.widths)
        return d


@dataclass
class TrainingReport:
    epochs: int
    train_curve: list[float]
    val_curve: list[float]
    best_epoch: int
    final_train: float
    final_val: float
    optimizer: str
    status: str
    wall_time_s: float
    rank: int | None = None


def fit_linear(U: np.ndarray, V: np.ndarray,
               normalizer: Normalizer | None = None):
    """Least-squares fit of the affine model in normalized space. Rank
    deficiency resolves to the minimum-norm solution; the effective rank is
    returned alongside."""
    norm = normalizer or Normalizer.from_data(U, V)
    X = LinearFeatures(U.shape[1]).forward(norm.norm_u(U))
    Y = norm.norm_v(V)
    A_t, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    return A_t.T, norm, int(rank)


def _mse_loss(P, Y):
    E = P - Y
    return float(np.sum(E * E) / Y.shape[0]), 2.0 * E / Y.shape[0]


def train_arrays(X_raw: np.ndarray, Y_raw: np.ndarray, cfg: TrainConfig,
                 meta: dict | None = None) -> tuple[NeuralSolver, TrainingReport]:
    """Fit a model on raw (input, target) rows. Used directly by alternative
    encodings; train() wraps it for control -> voltage-state data."""
    t0 = time.perf_counter()
    n, in_dim = X_raw.shape
    out_dim = Y_raw.shape[1]
    norm = Normalizer.from_data(X_raw, Y_raw)
    meta = dict(meta or {})
    meta.setdefault("formulation", "rpf")
    meta["train_config"] = cfg.echo()

    if cfg.features == "linear":
        A, norm, rank = fit_linear(X_raw, Y_raw, norm)
        fm = LinearFeatures(in_dim)
        solver = NeuralSolver(fm, A, norm, in_dim, out_dim,
                              meta.get("n_bus", 0), meta.get("n_branch", 0), meta)
        X = fm.forward(norm.norm_u(X_raw))
        loss, _ = _mse_loss(X @ A.T, norm.norm_v(Y_raw))
        report = TrainingReport(
            epochs=0, train_curve=[loss], val_curve=[loss], best_epoch=0,
            final_train=loss, final_val=loss, optimizer="lstsq",
            status="fit", wall_time_s=time.perf_counter() - t0, rank=rank,
        )
        meta["rank"] = rank
        return solver, report
    if cfg.features != "mlp":
        raise ValidationError(f"unknown feature kind {cfg.features!r}")

    rng = np.random.default_rng(cfg.seed)
    X_all = norm.norm_u(X_raw)
    Y_all = norm.norm_v(Y_raw)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xt, Yt = X_all[tr_idx], Y_all[tr_idx]
    Xv, Yv = X_all[val_idx], Y_all[val_idx]

    fm = MlpFeatures(in_dim, cfg.widths)
    fm.init_params(rng)
    A0 = np.zeros((out_dim, fm.n_features))
    n_fm = fm.pack().shape[0]

    def split(theta):
        return theta[:n_fm], theta[n_fm:].reshape(out_dim, fm.n_features)

    def fun_grad(theta):
        fm.unpack(theta[:n_fm])
        A = theta[n_fm:].reshape(out_dim, fm.n_features)
        Phi, cache = fm.forward(Xt, want_cache=True)
        loss, dP = _mse_loss(Phi @ A.T, Yt)
        dA = dP.T @ Phi
        dPhi = dP @ A
        dW1, db1, dW2, db2 = fm.backward(cache, dPhi)
        grad = np.concatenate(
            [dW1.ravel(), db1, dW2.ravel(), db2, dA.ravel()]
        )
        return loss, grad

    def val_loss(theta):
        if len(val_idx) == 0:
            return None
        fm.unpack(theta[:n_fm])
        A = theta[n_fm:].reshape(out_dim, fm.n_features)
        return _mse_loss(fm.forward(Xv) @ A.T, Yv)[0]

    theta0 = np.concatenate([fm.pack(), A0.ravel()])
    train_curve: list[float] = []
    val_curve: list[float] = []
    best = {"theta": theta0.copy(), "val": np.inf, "epoch": 0}
    stall = {"count": 0}

    def callback(it, f, theta):
        train_curve.append(f)
        vl = val_loss(theta)
        score = f if vl is None else vl
        val_curve.append(score)
        if score < best["val"] - 1e-15:
            best.update(theta=theta.copy(), val=score, epoch=len(train_curve))
            stall["count"] = 0
        else:
            stall["count"] += 1
        return stall["count"] >= cfg.patience

    optimizer_used = cfg.optimizer
    status = "ok"
    res = None
    try:
        if cfg.optimizer == "lbfgs":
            try:
                res = minimize_lbfgs(fun_grad, theta0,
                                     max_epochs_left(cfg, train_curve),
                                     history=cfg.history, grad_tol=cfg.grad_tol,
                                     callback=callback)
            except LineSearchFailure:
                try:
                    res = minimize_lbfgs(fun_grad, best["theta"],
                                         max_epochs_left(cfg, train_curve),
                                         history=cfg.history, grad_tol=cfg.grad_tol,
                                         step0=0.5, callback=callback)
                    optimizer_used = "lbfgs(restart)"
                except LineSearchFailure:
                    res = minimize_adam(fun_grad, best["theta"], lr=cfg.adam_lr,
                                        max_iter=max_epochs_left(cfg, train_curve),
                                        grad_tol=cfg.grad_tol, callback=callback)
                    optimizer_used = "lbfgs+adam"
        elif cfg.optimizer == "adam":
            res = minimize_adam(fun_grad, theta0, lr=cfg.adam_lr,
                                max_iter=cfg.max_epochs, grad_tol=cfg.grad_tol,
                                callback=callback)
        else:
            raise ValidationError(f"unknown optimizer {cfg.optimizer!r}")
    except NonFiniteLoss:
        # keep the best finite iterate seen so far
        status = "aborted_non_finite"

    theta_best = best["theta"]
    fm.unpack(theta_best[:n_fm])
    A = theta_best[n_fm:].reshape(out_dim, fm.n_features).copy()
    solver = NeuralSolver(fm, A, norm, in_dim, out_dim,
                          meta.get("n_bus", 0), meta.get("n_branch", 0), meta)
    final_train = train_curve[-1] if train_curve else float("nan")
    final_val = val_curve[-1] if val_curve else float("nan")
    report = TrainingReport(
        epochs=len(train_curve),
        train_curve=train_curve,
        val_curve=val_curve,
        best_epoch=best["epoch"],
        final_train=final_train,
        final_val=final_val,
        optimizer=optimizer_used,
        status=status if status != "ok" else (res.status if res else "ok"),
        wall_time_s=time.perf_counter() - t0,
    )
    return solver, report


def max_epochs_left(cfg: TrainConfig, curve: list[float]) -> int:
    return max(cfg.max_epochs - len(curve), 1)


def train(network: Network, dataset: Dataset,
          cfg: TrainConfig | None = None) -> tuple[NeuralSolver, TrainingReport]:
    """Fit a control -> voltage-state model on a dataset."""
    cfg = cfg or TrainConfig()
    U, V, _, _ = dataset.to_arrays()
    meta = {
        "formulation": "rpf",
        "n_bus": network.n_bus,
        "n_branch": network.n_branch,
        "dataset_fingerprint": dataset.network_fingerprint,
    }
    solver, report = train_arrays(U, V, cfg, meta)
    solver.n_bus = network.n_bus
    solver.n_branch = network.n_branch
    return solver, report


# ---------------------------------------------------------------------------
# residual of a prediction


def predict_residual_and_grad(solver: NeuralSolver, network: Network,
                              u: np.ndarray, indices=None, weights=None,
                              return_state: bool = False):
    """rho(v_hat(u), u) and its exact gradient wrt the selected control
    entries, combining the direct control dependence of the residual with the
    chain through the model."""
    v_hat = predict(solver, u)
    r = assemble_residual(network, v_hat, u)
    rho = residual_norm(r, weights)
    if indices is None:
        indices = np.arange(len(u))
    indices = np.asarray(indices, dtype=int)
    w = np.ones(r.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    wr = w * r
    Jv = residual_jacobian(network, v_hat, u, "voltage")
    Ju = residual_jacobian(network, v_hat, u, indices)
    g_v = Jv.T @ wr
    grad = Ju.T @ wr + input_jacobian(solver, u)[:, indices].T @ g_v
    if return_state:
        return rho, grad, v_hat
    return rho, grad


# ---------------------------------------------------------------------------
# checkpoints


def save_model(solver: NeuralSolver, path) -> None:
    fm = solver.feature_map
    obj = {
        "format": MODEL_FORMAT,
        "kind": solver.kind,
        "in_dim": solver.in_dim,
        "out_dim": solver.out_dim,
        "n_bus": solver.n_bus,
        "n_branch": solver.n_branch,
        "a_matrix": {"shape": list(solver.a_matrix.shape),
                     "data": solver.a_matrix.ravel().tolist()},
        "normalizer": {
            "u_mean": solver.normalizer.u_mean.tolist(),
            "u_scale": solver.normalizer.u_scale.tolist(),
            "v_mean": solver.normalizer.v_mean.tolist(),
            "v_scale": solver.normalizer.v_scale.tolist(),
        },
        "meta": solver.meta,
    }
    if solver.kind == "mlp":
        obj["widths"] = list(fm.widths)
        obj["weights"] = {
            "w1": fm.w1.ravel().tolist(),
            "b1": fm.b1.tolist(),
            "w2": fm.w2.ravel().tolist(),
            "b2": fm.b2.tolist(),
        }
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)


def load_model(path) -> NeuralSolver:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("format") != MODEL_FORMAT:
        raise FormatError(f"unknown model format {obj.get('format')!r}")
    in_dim, out_dim = int(obj["in_dim"]), int(obj["out_dim"])
    if obj["kind"] == "linear":
        fm = LinearFeatures(in_dim)
    elif obj["kind"] == "mlp":
        fm = MlpFeatures(in_dim, tuple(obj["widths"]))
        w = obj["weights"]
        h1, h2 = fm.widths
        fm.w1 = np.array(w["w1"]).reshape(h1, in_dim)
        fm.b1 = np.array(w["b1"])
        fm.w2 = np.array(w["w2"]).reshape(h2, h1)
        fm.b2 = np.array(w["b2"])
    else:
        raise FormatError(f"unknown model kind {obj['kind']!r}")
    a_shape = obj["a_matrix"]["shape"]
    A = np.array(obj["a_matrix"]["data"]).reshape(a_shape)
    nz = obj["normalizer"]
    norm = Normalizer(
        np.array(nz["u_mean"]), np.array(nz["u_scale"]),
        np.array(nz["v_mean"]), np.array(nz["v_scale"]),
    )
    if A.shape != (out_dim, fm.n_features):
        raise FormatError("read-out matrix shape does not match the feature map")
    return NeuralSolver(fm, A, norm, in_dim, out_dim,
                        int(obj["n_bus"]), int(obj["n_branch"]),
                        dict(obj.get("meta", {})))
