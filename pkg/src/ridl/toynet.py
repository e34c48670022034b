"""Small deep branch with channel-attention fusion, trained with the bank loss.

Per sample:

    z       = tanh(W_e x + b_e)                 per voxel, C channels from (CT, mask)
    s       = r_l (+) z                         L local-radiomic channels first
    a       = sigmoid(MLP(m*avg(s)) + MLP(m*max(s))) * m
    pooled  = a * avg(s)                        = spatial mean of the fused map a * s
    h       = tanh(F1 pooled + c1)              high-level deep feature, the bank's Z
    logit   = F2 [h (+) r_g~] + c2              r_g~ = standardized global features

m is a fixed 0/1 channel mask; a masked channel has no path to the logit.
Gradients are written out by hand; :func:`grad_check` compares them with
central differences.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
from scipy.special import expit

from .errors import ConfigError, ShapeMismatchError
from .localmap import LocalFeatureMap
from .losses import FeatureBank, bank_stats, decorr_grad, decorr_loss, weighted_correlation

PARAM_NAMES = ("enc_w", "enc_b", "att_w1", "att_b1", "att_w2", "att_b2", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
RAW_CHANNELS = 2  # normalized CT and ROI mask


@dataclass
class DeepFeatureMap:
    values: np.ndarray  # (C, depth, height, width)

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ShapeMismatchError("deep feature map must be (C, z, y, x)")
        if not np.isfinite(self.values).all():
            raise ValueError("deep feature map holds non-finite values")


@dataclass
class ToyModel:
    channels: int
    local_channels: int
    global_dim: int
    hidden: int
    reduction: int
    params: dict[str, np.ndarray]
    attention_mask: np.ndarray
    rg_mean: np.ndarray
    rg_std: np.ndarray
    pool_center: np.ndarray | None = None
    pool_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.pool_center is None:
            self.pool_center = np.zeros(self.width)
        if self.pool_scale is None:
            self.pool_scale = np.ones(self.width)

    @property
    def width(self) -> int:
        return self.channels + self.local_channels

    def copy(self) -> "ToyModel":
        return ToyModel(self.channels, self.local_channels, self.global_dim, self.hidden, self.reduction,
                        {k: v.copy() for k, v in self.params.items()}, self.attention_mask.copy(),
                        self.rg_mean.copy(), self.rg_std.copy(), self.pool_center.copy(), self.pool_scale.copy())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "channels": self.channels, "local_channels": self.local_channels,
            "global_dim": self.global_dim, "hidden": self.hidden, "reduction": self.reduction,
            "attention_mask": self.attention_mask.tolist(),
            "rg_mean": self.rg_mean.tolist(), "rg_std": self.rg_std.tolist(),
            "pool_center": self.pool_center.tolist(), "pool_scale": self.pool_scale.tolist(),
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.params.items()},
        }
        path.write_text(json.dumps(doc) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ToyModel":
        d = json.loads(Path(path).read_text())
        params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        return cls(d["channels"], d["local_channels"], d["global_dim"], d["hidden"], d["reduction"], params,
                   np.array(d["attention_mask"], dtype=np.float64),
                   np.array(d["rg_mean"], dtype=np.float64), np.array(d["rg_std"], dtype=np.float64),
                   np.array(d["pool_center"], dtype=np.float64), np.array(d["pool_scale"], dtype=np.float64))


def init_model(channels: int, local_channels: int, global_dim: int, hidden: int = 8,
               reduction: int = 2, seed: int = 0) -> ToyModel:
    if channels < 1 or local_channels < 0 or global_dim < 0 or hidden < 1 or reduction < 1:
        raise ValueError("invalid toy model sizes")
    rng = np.random.default_rng(seed)
    k = channels + local_channels
    hk = max(1, k // reduction)

    def dense(n_out, n_in):
        return rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)

    params = {
        "enc_w": dense(channels, RAW_CHANNELS), "enc_b": np.zeros(channels),
        "att_w1": dense(hk, k), "att_b1": np.zeros(hk),
        "att_w2": dense(k, hk), "att_b2": np.zeros(k),
        "fc1_w": dense(hidden, k), "fc1_b": np.zeros(hidden),
        "fc2_w": dense(1, hidden + global_dim)[0], "fc2_b": np.zeros(1),
    }
    return ToyModel(channels, local_channels, global_dim, hidden, reduction, params,
                    np.ones(k), np.zeros(global_dim), np.ones(global_dim))


# --------------------------------------------------------------------------
# attention and fusion on full maps


def _mlp(p, u):
    pre = p["att_w1"] @ u + p["att_b1"]
    hid = np.maximum(pre, 0.0)
    return p["att_w2"] @ hid + p["att_b2"], pre, hid


def channel_attention(model: ToyModel, stacked: np.ndarray) -> np.ndarray:
    """One weight in (0, 1) per channel of a (C + L, ...) map; masked channels get 0."""
    if stacked.shape[0] != model.width:
        raise ShapeMismatchError(f"model expects {model.width} channels, got {stacked.shape[0]}")
    flat = stacked.reshape(model.width, -1)
    m = model.attention_mask
    t = _mlp(model.params, m * flat.mean(axis=1))[0] + _mlp(model.params, m * flat.max(axis=1))[0]
    return expit(t) * m


def fuse(local: LocalFeatureMap | None, deep: DeepFeatureMap, weights) -> np.ndarray:
    """weights * (r_l (+) z), broadcast over the volume."""
    parts = [] if local is None else [local.values]
    if local is not None and local.spatial_dims != deep.values.shape[1:]:
        raise ShapeMismatchError(f"local map dims {local.spatial_dims} != deep map dims {deep.values.shape[1:]}")
    stacked = np.concatenate(parts + [deep.values]) if parts else deep.values
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (stacked.shape[0],):
        raise ShapeMismatchError(f"{weights.size} attention weights for {stacked.shape[0]} channels")
    return stacked * weights[:, None, None, None]


def deep_features(model: ToyModel, raw: np.ndarray) -> DeepFeatureMap:
    """Encoder output for a (2, z, y, x) raw-channel volume."""
    if raw.shape[0] != RAW_CHANNELS:
        raise ShapeMismatchError(f"expected {RAW_CHANNELS} raw channels, got {raw.shape[0]}")
    p = model.params
    flat = raw.reshape(RAW_CHANNELS, -1)
    z = np.tanh(p["enc_w"] @ flat + p["enc_b"][:, None])
    return DeepFeatureMap(z.reshape((model.channels,) + raw.shape[1:]))


# --------------------------------------------------------------------------
# per-sample forward / backward on flattened arrays


@dataclass
class ToyInput:
    """One sample: raw (2, V), local (L, V) channels, raw global features, label."""

    id: str
    raw: np.ndarray
    local: np.ndarray
    r_global: np.ndarray
    label: int
    spatial_dims: tuple[int, int, int]


def make_input(sample, local: LocalFeatureMap | None, r_global) -> ToyInput:
    """Build a ToyInput from a Sample, its local-map stack and its global feature values."""
    from .volume import normalize_intensities

    ct = normalize_intensities(sample.volume).voxels.ravel()
    raw = np.stack([ct, sample.mask.voxels.ravel().astype(np.float64)])
    if local is None:
        loc = np.zeros((0, ct.size))
    else:
        if local.spatial_dims != sample.volume.dims:
            raise ShapeMismatchError("local map and volume dims differ")
        loc = local.values.reshape(local.values.shape[0], -1).astype(np.float64)
    return ToyInput(sample.id, raw, loc, np.asarray(r_global, dtype=np.float64), int(sample.label),
                    sample.volume.dims)


@dataclass
class Forward:
    logit: float
    prob: float
    h: np.ndarray
    pooled: np.ndarray
    attention: np.ndarray
    cache: dict = field(repr=False)


def toy_forward(model: ToyModel, x: ToyInput) -> Forward:
    p = model.params
    L = model.local_channels
    if x.local.shape[0] != L or x.raw.shape[0] != RAW_CHANNELS or x.r_global.shape != (model.global_dim,):
        raise ShapeMismatchError("input channels do not match the model")
    m = model.attention_mask
    z = np.tanh(p["enc_w"] @ x.raw + p["enc_b"][:, None])
    s = np.concatenate([x.local, z]) if L else z
    nvox = s.shape[1]
    avg = s.mean(axis=1)
    arg = s.argmax(axis=1)
    mx = s[np.arange(s.shape[0]), arg]
    t_avg, pre_avg, hid_avg = _mlp(p, m * avg)
    t_max, pre_max, hid_max = _mlp(p, m * mx)
    sig = expit(t_avg + t_max)
    a = sig * m
    centered = (avg - model.pool_center) / model.pool_scale
    pooled = a * centered
    h = np.tanh(p["fc1_w"] @ pooled + p["fc1_b"])
    rg = (x.r_global - model.rg_mean) / model.rg_std
    u = np.concatenate([h, rg])
    logit = float(p["fc2_w"] @ u + p["fc2_b"][0])
    cache = dict(x=x, z=z, avg=avg, centered=centered, arg=arg, mx=mx, pre_avg=pre_avg, hid_avg=hid_avg,
                 pre_max=pre_max, hid_max=hid_max, sig=sig, a=a, u=u, nvox=nvox)
    return Forward(logit, float(expit(logit)), h, pooled, a, cache)


def classification_loss(logit: float, label: int) -> tuple[float, float]:
    """Binary cross-entropy from the logit and its derivative."""
    loss = float(np.logaddexp(0.0, logit) - label * logit)
    return loss, float(expit(logit)) - label


def toy_backward(model: ToyModel, fwd: Forward, dlogit: float, dh_extra=None) -> dict[str, np.ndarray]:
    """Parameter gradients given d loss / d logit and an extra d loss / d h."""
    p = model.params
    c = fwd.cache
    L, H = model.local_channels, model.hidden
    m = model.attention_mask
    g = {}
    g["fc2_w"] = dlogit * c["u"]
    g["fc2_b"] = np.array([dlogit])
    dh = dlogit * p["fc2_w"][:H]
    if dh_extra is not None:
        dh = dh + dh_extra
    dpre1 = dh * (1.0 - fwd.h ** 2)
    g["fc1_w"] = np.outer(dpre1, fwd.pooled)
    g["fc1_b"] = dpre1
    dpooled = p["fc1_w"].T @ dpre1
    davg = dpooled * c["a"] / model.pool_scale
    dt = dpooled * c["centered"] * m * c["sig"] * (1.0 - c["sig"])
    g["att_w1"] = np.zeros_like(p["att_w1"])
    g["att_b1"] = np.zeros_like(p["att_b1"])
    g["att_w2"] = np.zeros_like(p["att_w2"])
    g["att_b2"] = 2.0 * dt
    dmx = np.zeros_like(davg)
    for inp, pre, hid, target in ((c["avg"], c["pre_avg"], c["hid_avg"], davg),
                                  (c["mx"], c["pre_max"], c["hid_max"], dmx)):
        g["att_w2"] += np.outer(dt, hid)
        dpre = (p["att_w2"].T @ dt) * (pre > 0)
        g["att_w1"] += np.outer(dpre, m * inp)
        g["att_b1"] += dpre
        target += m * (p["att_w1"].T @ dpre)
    # only the encoder channels (after the L local ones) carry parameters
    z = c["z"]
    dz = np.broadcast_to((davg[L:] / c["nvox"])[:, None], z.shape).copy()
    rows = np.arange(model.channels)
    dz[rows, c["arg"][L:]] += dmx[L:]
    dpre_z = dz * (1.0 - z ** 2)
    g["enc_w"] = dpre_z @ c["x"].raw.T
    g["enc_b"] = dpre_z.sum(axis=1)
    return g


# --------------------------------------------------------------------------
# objective with the bank term


def _objective_and_grad(model: ToyModel, x: ToyInput, bank: FeatureBank | None, w_corr: float,
                        push: bool = True):
    """L_cls + w_corr * L_corr for one sample; pushes (h, r_g~) into ``bank`` when ``push``."""
    fwd = toy_forward(model, x)
    l_cls, dlogit = classification_loss(fwd.logit, x.label)
    l_corr = 0.0
    dh_extra = None
    s_max = 0.0
    if bank is not None:
        if push:
            bank.push(fwd.h, fwd.cache["u"][model.hidden:])
        if len(bank) >= 2:
            stats = bank_stats(bank)
            s_max = float(np.abs(weighted_correlation(bank, stats)).max())
            if bank.active:
                l_corr = decorr_loss(bank, stats)
                if w_corr != 0.0:
                    dh_extra = w_corr * decorr_grad(bank, stats)[0]
    grads = toy_backward(model, fwd, dlogit, dh_extra)
    return fwd, l_cls, l_corr, s_max, grads


# --------------------------------------------------------------------------
# training


_CONFIG_ALIASES = {"N_k": "bank_size", "w": "decay", "C": "channels"}


@dataclass
class ToyConfig:
    epochs: int = 20
    lr: float = 1e-2
    w_corr: float = 2.0
    bank_size: int = 25
    decay: float = 0.9
    warm_up: int = -1  # iterations; negative means one epoch
    reduction: int = 2
    channels: int = 4
    hidden: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.w_corr < 0:
            raise ConfigError("epochs, lr and w_corr must be >= 0")
        if self.bank_size < 2:
            raise ConfigError("bank_size must be >= 2")
        if not 0.0 < self.decay < 1.0:
            raise ConfigError("decay must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, d) -> "ToyConfig":
        d = {_CONFIG_ALIASES.get(k, k): v for k, v in d.items()}
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown toy config keys: {sorted(unknown)}")
        casts = {"int": int, "float": float}
        try:
            return cls(**{k: casts[known[k]](v) for k, v in d.items()})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_file(cls, path) -> "ToyConfig":
        try:
            return cls.from_mapping(tomli.loads(Path(path).read_text()))
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_dataset(data: Sequence[ToyInput]):
    labels = np.array([x.label for x in data])
    if len(data) == 0 or min(np.sum(labels == 0), np.sum(labels == 1)) < 2:
        raise ValueError("toy training needs >= 2 samples per class")
    first = data[0]
    for x in data:
        if x.local.shape[0] != first.local.shape[0] or x.r_global.shape != first.r_global.shape:
            raise ShapeMismatchError("samples disagree on channel counts")


def toy_train(config: ToyConfig, data: Sequence[ToyInput], model: ToyModel | None = None):
    """Plain gradient descent with batch size 1; returns (model, per-iteration log rows)."""
    _check_dataset(data)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(config.channels, data[0].local.shape[0], data[0].r_global.size,
                           config.hidden, config.reduction, config.seed)
        rg = np.stack([x.r_global for x in data])
        std = rg.std(axis=0)
        model.rg_mean = rg.mean(axis=0)
        model.rg_std = np.where(std > 0, std, 1.0)
        # local channels are fixed inputs: standardize their spatial means over the training set
        L = model.local_channels
        avgs = np.stack([x.local.mean(axis=1) for x in data]).reshape(len(data), L)
        spread = avgs.std(axis=0)
        model.pool_center[:L] = avgs.mean(axis=0)
        model.pool_scale[:L] = np.where(spread > 1e-12, spread, 1.0)
    else:
        model = model.copy()
    warm = len(data) if config.warm_up < 0 else config.warm_up
    bank = FeatureBank(config.bank_size, config.decay, 1, warm)
    log = []
    for epoch in range(config.epochs):
        for i in rng.permutation(len(data)):
            fwd, l_cls, l_corr, s_max, grads = _objective_and_grad(model, data[i], bank, config.w_corr)
            for k in PARAM_NAMES:
                model.params[k] -= config.lr * grads[k]
            log.append({"epoch": epoch, "l_cls": l_cls, "l_corr": l_corr, "l_rec": 0.0,
                        "total": l_cls + config.w_corr * l_corr, "max_abs_s": s_max})
    return model, log


def predict(model: ToyModel, data: Sequence[ToyInput]) -> np.ndarray:
    return np.array([toy_forward(model, x).prob for x in data])


# --------------------------------------------------------------------------
# gradient check


def grad_check(model: ToyModel, x: ToyInput, w_corr: float = 0.0, bank: FeatureBank | None = None,
               step: float = 1e-5, seed: int = 0) -> float:
    """Max over parameter arrays of ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-8).

    With ``w_corr > 0`` the sample's h is pushed into ``bank`` (a random active
    bank of 12 older entries when None) and the bank statistics are then frozen
    for the finite differences.
    """
    if w_corr > 0:
        if bank is None:
            rng = np.random.default_rng(seed)
            bank = FeatureBank(25, 0.9, 1, 0)
            for _ in range(12):
                bank.push(rng.standard_normal(model.hidden), rng.standard_normal(model.global_dim))
        else:
            bank = bank.copy()
    fwd, _, _, _, grads = _objective_and_grad(model, x, bank if w_corr > 0 else None, w_corr)
    stats = bank_stats(bank) if w_corr > 0 else None

    def objective(mdl):
        f = toy_forward(mdl, x)
        loss = classification_loss(f.logit, x.label)[0]
        if w_corr > 0:
            loss += w_corr * decorr_loss(bank.with_newest(f.h[None]), stats)
        return loss

    worst = 0.0
    probe = model.copy()
    for name in PARAM_NAMES:
        arr = probe.params[name]
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = objective(probe)
            arr[idx] = orig - step
            down = objective(probe)
            arr[idx] = orig
            num[idx] = (up - down) / (2 * step)
        ana = grads[name]
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
