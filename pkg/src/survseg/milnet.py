"""Autoencoder + multiple-instance hazard regressor for censored survival data.

Each tumour's feature vector is compressed by an encoder; a decoder
reconstructs it and a small regressor on the bottleneck predicts a
tumour-level log-hazard. Tumour hazards are pooled into one patient hazard
(mean, largest tumour, max or log-sum-exp). Training minimises

    (1 - alpha) * MSE(reconstruction) + alpha * CoxPH(patient hazards)

with ``alpha = epoch / epochs``, so early epochs focus on reconstruction.

Everything is plain numpy with hand-written backpropagation, which keeps
training bit-reproducible for a given seed and lets the gradients be
checked against finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

POOL_MODES = ("mean", "largest", "max", "lse")


class SurvivalError(ValueError):
    """Raised when a batch or cohort cannot support the requested fit."""


# --------------------------------------------------------------------------
# data


@dataclass
class PatientBag:
    patient_id: str
    instances: np.ndarray  # (n_tumours, d), already normalised
    time: float
    event: int
    largest: int | None = None  # index of the largest tumour in ``instances``

    def __post_init__(self):
        self.instances = np.atleast_2d(np.asarray(self.instances, dtype=np.float64))
        if self.instances.shape[0] < 1:
            raise SurvivalError(f"patient {self.patient_id}: empty bag")
        if not (np.isfinite(self.time) and self.time > 0):
            raise SurvivalError(f"patient {self.patient_id}: time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise SurvivalError(f"patient {self.patient_id}: event must be 0/1")
        if self.largest is not None and not 0 <= self.largest < self.instances.shape[0]:
            raise SurvivalError(f"patient {self.patient_id}: largest index out of range")


@dataclass
class Batch:
    """Bags flattened into one instance matrix; bag ``b`` owns rows ``offsets[b]:offsets[b+1]``."""

    X: np.ndarray
    offsets: np.ndarray
    times: np.ndarray
    events: np.ndarray
    largest: np.ndarray | None  # global row index of each bag's largest tumour

    @property
    def n_bags(self) -> int:
        return len(self.offsets) - 1

    @property
    def bag_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_bags), np.diff(self.offsets))

    def subset(self, idx) -> "Batch":
        """Batch of bags ``idx`` (in the given order) without re-stacking the bags."""
        idx = np.asarray(idx, dtype=np.int64)
        sizes = np.diff(self.offsets)[idx]
        offsets = np.r_[0, np.cumsum(sizes)].astype(np.int64)
        rows = np.repeat(self.offsets[idx] - offsets[:-1], sizes) + np.arange(offsets[-1])
        largest = None if self.largest is None else offsets[:-1] + (self.largest[idx] - self.offsets[idx])
        return Batch(self.X[rows], offsets, self.times[idx], self.events[idx], largest)

    @classmethod
    def from_bags(cls, bags: Sequence[PatientBag]) -> "Batch":
        if not bags:
            raise SurvivalError("empty batch")
        sizes = [b.instances.shape[0] for b in bags]
        offsets = np.r_[0, np.cumsum(sizes)].astype(np.int64)
        largest = None
        if all(b.largest is not None for b in bags):
            largest = offsets[:-1] + np.array([b.largest for b in bags], dtype=np.int64)
        return cls(
            np.concatenate([b.instances for b in bags]),
            offsets,
            np.array([b.time for b in bags], dtype=np.float64),
            np.array([b.event for b in bags], dtype=np.int64),
            largest,
        )


# --------------------------------------------------------------------------
# pooling


def pool(hazards: Sequence[float], mode: str = "lse", largest_index: int | None = None) -> float:
    """Pool one bag's tumour hazards into a patient hazard."""
    eta = np.asarray(hazards, dtype=np.float64).ravel()
    if eta.size == 0:
        raise SurvivalError("cannot pool an empty bag")
    offsets = np.array([0, eta.size])
    largest = None
    if mode == "largest":
        if largest_index is None:
            raise SurvivalError("largest pooling needs the index of the largest tumour")
        largest = np.array([largest_index])
    return float(pool_bags(eta, offsets, mode, largest)[0])


def pool_bags(eta: np.ndarray, offsets: np.ndarray, mode: str, largest: np.ndarray | None = None) -> np.ndarray:
    starts = offsets[:-1]
    if mode == "mean":
        return np.add.reduceat(eta, starts) / np.diff(offsets)
    if mode == "max":
        return np.maximum.reduceat(eta, starts)
    if mode == "largest":
        if largest is None:
            raise SurvivalError("largest pooling needs the largest-tumour index of every bag")
        return eta[largest]
    if mode == "lse":
        m = np.maximum.reduceat(eta, starts)
        shifted = np.exp(eta - np.repeat(m, np.diff(offsets)))
        # log1p of the non-max terms keeps lse strictly above max where representable
        return m + np.log1p(np.add.reduceat(shifted, starts) - 1.0)
    raise SurvivalError(f"unknown pooling mode {mode!r}; expected one of {POOL_MODES}")


def _pool_backward(eta, offsets, mode, largest, d_pooled) -> np.ndarray:
    sizes = np.diff(offsets)
    bag = np.repeat(np.arange(len(sizes)), sizes)
    if mode == "mean":
        return d_pooled[bag] / sizes[bag]
    d = np.zeros_like(eta)
    if mode == "largest":
        d[largest] = d_pooled
        return d
    if mode == "max":
        starts = offsets[:-1]
        m = np.maximum.reduceat(eta, starts)
        # first maximal row of each bag takes the whole gradient
        hit = np.flatnonzero(eta == m[bag])
        first = hit[np.r_[True, bag[hit][1:] != bag[hit][:-1]]]
        d[first] = d_pooled
        return d
    if mode == "lse":
        m = np.maximum.reduceat(eta, offsets[:-1])
        w = np.exp(eta - m[bag])
        w /= np.add.reduceat(w, offsets[:-1])[bag]
        return w * d_pooled[bag]
    raise SurvivalError(f"unknown pooling mode {mode!r}")


# --------------------------------------------------------------------------
# losses


def loss_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean over instances of the squared Euclidean reconstruction error."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if x.shape != x_hat.shape:
        raise SurvivalError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.sum((x - x_hat) ** 2) / x.shape[0])


def cox_loss_and_grad(eta: np.ndarray, times: np.ndarray, events: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative Breslow partial log-likelihood and its gradient w.r.t. ``eta``.

    The risk set of an event at ``T_i`` is every patient with ``T_j >= T_i``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    if not events.any():
        raise SurvivalError("no uncensored patient in batch")
    c = eta.max()
    w = np.exp(eta - c)
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    suffix = np.cumsum(w[order][::-1])[::-1]  # suffix[k] = sum of w over sorted rows k..n-1
    ev = np.flatnonzero(events)
    start = np.searchsorted(t_sorted, times[ev], side="left")
    S = suffix[start]
    loss = -float(np.sum(eta[ev] - c - np.log(S)))

    # each patient k collects 1/S_i from every event i with T_i <= T_k
    ev_order = np.argsort(times[ev], kind="stable")
    ev_t = times[ev][ev_order]
    cum_inv = np.r_[0.0, np.cumsum(1.0 / S[ev_order])]
    C = cum_inv[np.searchsorted(ev_t, times, side="right")]
    grad = w * C - events
    return loss, grad


def loss_cox(hazards, times, events) -> float:
    return cox_loss_and_grad(hazards, times, events)[0]


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class Architecture:
    n_features: int
    encoder: tuple[int, ...] = (64, 32, 16)
    regressor: tuple[int, ...] = (8,)

    @property
    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        enc = (self.n_features,) + self.encoder
        dec = tuple(reversed(enc))
        reg = (self.encoder[-1],) + self.regressor + (1,)
        shapes = {}
        for prefix, dims in (("enc", enc), ("dec", dec), ("reg", reg)):
            for i in range(len(dims) - 1):
                shapes[f"{prefix}{i}"] = (dims[i], dims[i + 1])
        return shapes


@dataclass
class NetworkParams:
    arch: Architecture
    weights: dict[str, np.ndarray]  # "enc0.W", "enc0.b", ...; views into ``flat``
    flat: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in self.weights.values()])
        views, i = {}, 0
        for k, v in self.weights.items():
            n = np.size(v)
            views[k] = self.flat[i:i + n].reshape(np.shape(v))
            i += n
        self.weights = views

    def pack(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        """Concatenate a gradient dict in parameter order."""
        return np.concatenate([grads[k].ravel() for k in self.weights])

    @property
    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.weights.items()})

    def layers(self, prefix: str) -> list[tuple[np.ndarray, np.ndarray]]:
        n = sum(1 for k in self.arch.layer_shapes if k.startswith(prefix))
        return [(self.weights[f"{prefix}{i}.W"], self.weights[f"{prefix}{i}.b"]) for i in range(n)]

    def to_dict(self) -> dict:
        return {
            "architecture": asdict(self.arch),
            "layers": [
                {"name": name, "shape": list(shape)} for name, shape in self.arch.layer_shapes.items()
            ],
            "weights": {k: v.ravel().tolist() for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkParams":
        a = d["architecture"]
        arch = Architecture(int(a["n_features"]), tuple(a["encoder"]), tuple(a["regressor"]))
        weights = {}
        for name, (fan_in, fan_out) in arch.layer_shapes.items():
            weights[f"{name}.W"] = np.asarray(d["weights"][f"{name}.W"], float).reshape(fan_in, fan_out)
            weights[f"{name}.b"] = np.asarray(d["weights"][f"{name}.b"], float)
        return cls(arch, weights)


def init_params(arch: Architecture, rng: np.random.Generator) -> NetworkParams:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    weights = {}
    for name, (fan_in, fan_out) in arch.layer_shapes.items():
        lim = np.sqrt(6.0 / fan_in)
        weights[f"{name}.W"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        weights[f"{name}.b"] = np.zeros(fan_out)
    return NetworkParams(arch, weights)


def _dense_forward(h, layers, dropout, rng, out_linear=True):
    caches = []
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i == last and out_linear:
            caches.append((h, None, None))
            h = z
            break
        relu = z > 0
        a = np.maximum(z, 0.0)
        mask = None
        if dropout > 0 and rng is not None:
            mask = (rng.random(a.shape) >= dropout) * (1.0 / (1.0 - dropout))
            a *= mask
        caches.append((h, relu, mask))
        h = a
    return h, caches


def _dense_backward(dout, layers, caches, prefix, grads):
    d = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h, relu, mask = caches[i]
        if relu is not None:
            d = d * relu
            if mask is not None:
                d *= mask
        grads[f"{prefix}{i}.W"] = h.T @ d
        grads[f"{prefix}{i}.b"] = d.sum(axis=0)
        d = d @ W.T
    return d


@dataclass
class HazardSet:
    tumour: np.ndarray
    patient: np.ndarray
    mode: str


def _forward(params: NetworkParams, X: np.ndarray, dropout: float, rng):
    z, enc_c = _dense_forward(X, params.layers("enc"), dropout, rng, out_linear=False)
    x_hat, dec_c = _dense_forward(z, params.layers("dec"), dropout, rng)
    eta, reg_c = _dense_forward(z, params.layers("reg"), dropout, rng)
    return x_hat, eta[:, 0], (enc_c, dec_c, reg_c)


def forward(params: NetworkParams, batch: Batch, mode: str = "lse") -> tuple[np.ndarray, HazardSet]:
    """Inference pass (no dropout): reconstructions and tumour/patient hazards."""
    if batch.X.shape[1] != params.arch.n_features:
        raise SurvivalError(f"expected {params.arch.n_features} features, got {batch.X.shape[1]}")
    x_hat, eta, _ = _forward(params, batch.X, 0.0, None)
    pooled = pool_bags(eta, batch.offsets, mode, batch.largest)
    return x_hat, HazardSet(eta, pooled, mode)


def loss_and_grad(
    params: NetworkParams,
    batch: Batch,
    mode: str,
    alpha: float,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    need_grad: bool = True,
) -> tuple[dict[str, float], dict[str, np.ndarray] | None]:
    """Combined loss ``(1 - alpha) * MSE + alpha * Cox`` and its parameter gradient."""
    x_hat, eta, (enc_c, dec_c, reg_c) = _forward(params, batch.X, dropout, rng)
    pooled = pool_bags(eta, batch.offsets, mode, batch.largest)
    N = batch.X.shape[0]
    mse = float(np.sum((x_hat - batch.X) ** 2) / N)
    if alpha > 0:
        cox, d_pooled = cox_loss_and_grad(pooled, batch.times, batch.events)
    else:
        cox, d_pooled = float("nan"), np.zeros(batch.n_bags)
    total = (1.0 - alpha) * mse + (alpha * cox if alpha > 0 else 0.0)
    info = {"loss": total, "mse": mse, "cox": cox}
    if not need_grad:
        return info, None

    grads: dict[str, np.ndarray] = {}
    d_xhat = (1.0 - alpha) * 2.0 * (x_hat - batch.X) / N
    d_eta = _pool_backward(eta, batch.offsets, mode, batch.largest, alpha * d_pooled)
    dz = _dense_backward(d_xhat, params.layers("dec"), dec_c, "dec", grads)
    dz = dz + _dense_backward(d_eta[:, None], params.layers("reg"), reg_c, "reg", grads)
    _dense_backward(dz, params.layers("enc"), enc_c, "enc", grads)
    return info, {k: grads[k] for k in params.weights}


# --------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam with decoupled weight decay (decay applied to every parameter)."""

    def __init__(self, lr=4e-4, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, params: NetworkParams, grads: Mapping[str, np.ndarray]) -> None:
        g = params.pack(grads)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        m, v, p = self.m, self.v, params.flat
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - self.lr * self.wd
        p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    learning_rate: float = 4e-4
    weight_decay: float = 1e-3
    dropout: float = 0.2
    seed: int = 0
    encoder: tuple[int, ...] = (64, 32, 16)
    regressor: tuple[int, ...] = (8,)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[dict] = field(default_factory=list)


def balanced_sample(events: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Equal numbers of censored and uncensored patients, without replacement.

    When one group is empty every patient of the other group is used.
    """
    events = np.asarray(events)
    unc = np.flatnonzero(events == 1)
    cen = np.flatnonzero(events == 0)
    k = min(len(unc), len(cen))
    if k == 0:
        return np.arange(len(events))
    pick = np.concatenate([rng.choice(unc, k, replace=False), rng.choice(cen, k, replace=False)])
    return np.sort(pick)


def train(bags: Sequence[PatientBag], config: TrainConfig = TrainConfig(), mode: str = "lse") -> TrainResult:
    """Fit the network; deterministic for a fixed ``config.seed``."""
    if mode not in POOL_MODES:
        raise SurvivalError(f"unknown pooling mode {mode!r}")
    events = np.array([b.event for b in bags])
    if events.sum() < 2:
        raise SurvivalError("training needs at least two uncensored patients")
    d = bags[0].instances.shape[1]
    if any(b.instances.shape[1] != d for b in bags):
        raise SurvivalError("bags have inconsistent feature dimension")
    if mode == "largest" and any(b.largest is None for b in bags):
        raise SurvivalError("largest pooling needs the largest tumour of every bag")

    init_ss, sample_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(Architecture(d, config.encoder, config.regressor), np.random.default_rng(init_ss))
    sample_rng = np.random.default_rng(sample_ss)
    drop_rng = np.random.default_rng(drop_ss)
    opt = AdamW(config.learning_rate, config.weight_decay)
    full = Batch.from_bags(bags)
    history = []
    for epoch in range(config.epochs):
        alpha = epoch / config.epochs
        batch = full.subset(balanced_sample(events, sample_rng))
        info, grads = loss_and_grad(params, batch, mode, alpha, config.dropout, drop_rng)
        opt.step(params, grads)
        history.append({"epoch": epoch, "alpha": alpha, **info})
    return TrainResult(params, history)


def predict(params: NetworkParams, bags: Sequence[PatientBag], mode: str = "lse") -> np.ndarray:
    """Patient hazards for ``bags`` (dropout off)."""
    if not bags:
        return np.zeros(0)
    return forward(params, Batch.from_bags(bags), mode)[1].patient


def late_fusion(pre: Mapping[str, float], post: Mapping[str, float], patients: Sequence[str] | None = None) -> dict[str, float]:
    """Mean of the available phase hazards per patient."""
    ids = list(patients) if patients is not None else sorted(set(pre) | set(post))
    out = {}
    for pid in ids:
        vals = [m[pid] for m in (pre, post) if pid in m]
        if not vals:
            raise SurvivalError(f"patient {pid} has no hazard in either phase")
        out[pid] = float(np.mean(vals))
    return out


# --------------------------------------------------------------------------
# gradient check


def gradient_check(
    params: NetworkParams,
    batch: Batch,
    mode: str = "lse",
    alpha: float = 0.5,
    h: float = 1e-5,
    per_array: int | None = 8,
    seed: int = 0,
    dropout: float = 0.0,
) -> float:
    """Max relative error between backprop and central differences.

    ``per_array`` entries are drawn at random from every weight array (``None``
    checks all; ``0`` checks none and returns 0). The relative error of one
    entry is ``|a - n| / max(|a|, |n|, 1e-4)``. Below that scale the check
    is effectively absolute, which keeps finite-difference round-off out of it. With ``dropout > 0`` the same
    dropout masks are replayed for every evaluation.
    """
    pick_rng = np.random.default_rng(seed)

    def evaluate(p):
        rng = np.random.default_rng(seed + 1) if dropout > 0 else None
        return loss_and_grad(p, batch, mode, alpha, dropout, rng, need_grad=False)[0]["loss"]

    rng = np.random.default_rng(seed + 1) if dropout > 0 else None
    _, analytic = loss_and_grad(params, batch, mode, alpha, dropout, rng)
    work = params.copy()
    worst = 0.0
    for name, arr in work.weights.items():
        flat = arr.reshape(-1)
        if per_array is None:
            idx = np.arange(flat.size)
        else:
            idx = pick_rng.choice(flat.size, min(per_array, flat.size), replace=False)
        g = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = evaluate(work)
            flat[i] = old - h
            down = evaluate(work)
            flat[i] = old
            num = (up - down) / (2 * h)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-4)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# model file


def save_model(path, models: Mapping[str, NetworkParams], normalizers: Mapping[str, dict], mode: str, seed: int, extra: dict | None = None) -> None:
    doc = {
        "format": "survseg-model/1",
        "pool": mode,
        "seed": seed,
        "phases": {
            phase: {"network": models[phase].to_dict(), "normalizer": normalizers[phase]}
            for phase in sorted(models)
        },
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    doc["networks"] = {ph: NetworkParams.from_dict(v["network"]) for ph, v in doc["phases"].items()}
    return doc
