"""Lightweight CNN scoring an ambiguity map, trained from scratch.

Architecture, for a G x G map (G divisible by 4):

    conv 1->8, 3x3, pad 1, ReLU, maxpool 2
    conv 8->16, 3x3, pad 1, ReLU, maxpool 2
    fc 16*(G/4)^2 -> 64, ReLU
    fc 64 -> 1, sigmoid

about 70K parameters at G=32. Forward, reverse-mode backward, binary
cross-entropy and the AdamW update are all explicit numpy so gradients
can be verified against finite differences. Training is deterministic
given the seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO

import numpy as np

from ambimap.aggregate import AmbiguityMap

LOG_CLAMP = 1e-12  # numerical floor for log arguments, not part of the math
PARAMS_MAGIC = b"APB1"
PARAMS_VERSION = 1


@dataclass
class ProbeParams:
    conv1_w: np.ndarray  # (8, 1, 3, 3)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (16, 8, 3, 3)
    conv2_b: np.ndarray  # (16,)
    fc1_w: np.ndarray  # (64, 16*(G/4)^2)
    fc1_b: np.ndarray  # (64,)
    fc2_w: np.ndarray  # (1, 64)
    fc2_b: np.ndarray  # (1,)
    grid_side: int

    def items(self) -> list[tuple[str, np.ndarray]]:
        """Parameter tensors in a fixed order."""
        return [
            ("conv1_w", self.conv1_w),
            ("conv1_b", self.conv1_b),
            ("conv2_w", self.conv2_w),
            ("conv2_b", self.conv2_b),
            ("fc1_w", self.fc1_w),
            ("fc1_b", self.fc1_b),
            ("fc2_w", self.fc2_w),
            ("fc2_b", self.fc2_b),
        ]

    def copy(self) -> "ProbeParams":
        return ProbeParams(
            **{name: arr.copy() for name, arr in self.items()},
            grid_side=self.grid_side,
        )


@dataclass
class OptimizerState:
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LabeledMap:
    map: AmbiguityMap
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.15


def init_params(grid_side: int, seed: int) -> ProbeParams:
    """He-uniform weights, zero biases, deterministic from seed."""
    if grid_side % 4 != 0:
        raise ValueError(f"grid_side {grid_side} must be divisible by 4")
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    flat = 16 * (grid_side // 4) ** 2
    return ProbeParams(
        conv1_w=he((8, 1, 3, 3), 9),
        conv1_b=np.zeros(8),
        conv2_w=he((16, 8, 3, 3), 8 * 9),
        conv2_b=np.zeros(16),
        fc1_w=he((64, flat), flat),
        fc1_b=np.zeros(64),
        fc2_w=he((1, 64), 64),
        fc2_b=np.zeros(1),
        grid_side=grid_side,
    )


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, H*W, C*9) patches for a 3x3, pad-1 convolution."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = padded[:, :, ky : ky + h, kx : kx + w]
    return cols.transpose(0, 3, 4, 1, 2).reshape(n, h * w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the input."""
    n, c, h, w = shape
    dcols = dcols.reshape(n, h, w, c, 9).transpose(0, 3, 4, 1, 2)
    dpad = np.zeros((n, c, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            dpad[:, :, ky : ky + h, kx : kx + w] += dcols[:, :, ky * 3 + kx]
    return dpad[:, :, 1:-1, 1:-1]


def _conv_forward(x, w, b):
    cols = _im2col(x)
    wmat = w.reshape(w.shape[0], -1)  # (O, C*9)
    out = cols @ wmat.T + b  # (N, H*W, O)
    n, _, h, width = x.shape
    return out.reshape(n, h, width, w.shape[0]).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape):
    n, o, h, width = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(n, h * width, o)
    dw = np.einsum("npo,npf->of", dmat, cols).reshape(w.shape)
    db = dmat.sum(axis=(0, 1))
    dcols = dmat @ w.reshape(o, -1)
    return _col2im(dcols, x_shape), dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    blocks = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    dblocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    return (
        dblocks.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def _forward_batch(p: ProbeParams, x: np.ndarray):
    """x: (N, 1, G, G) -> probabilities (N,) plus the backprop cache."""
    a1, cols1 = _conv_forward(x, p.conv1_w, p.conv1_b)
    r1 = np.maximum(a1, 0.0)
    p1, idx1 = _pool_forward(r1)

    a2, cols2 = _conv_forward(p1, p.conv2_w, p.conv2_b)
    r2 = np.maximum(a2, 0.0)
    p2, idx2 = _pool_forward(r2)

    flat = p2.reshape(x.shape[0], -1)
    f1 = flat @ p.fc1_w.T + p.fc1_b
    rf1 = np.maximum(f1, 0.0)
    z = rf1 @ p.fc2_w.T + p.fc2_b  # (N, 1)
    prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
    cache = (x, a1, cols1, r1, idx1, p1, a2, cols2, r2, idx2, p2, flat, f1, rf1)
    return prob, cache


def _backward_batch(p: ProbeParams, cache, prob, y):
    """Mean-BCE gradients for a batch; dL/dz = (prob - y) / N."""
    x, a1, cols1, r1, idx1, p1, a2, cols2, r2, idx2, p2, flat, f1, rf1 = cache
    n = x.shape[0]
    dz = ((prob - y) / n)[:, None]  # (N, 1)

    dfc2_w = dz.T @ rf1
    dfc2_b = dz.sum(axis=0)
    drf1 = dz @ p.fc2_w
    df1 = drf1 * (f1 > 0)

    dfc1_w = df1.T @ flat
    dfc1_b = df1.sum(axis=0)
    dflat = df1 @ p.fc1_w
    dp2 = dflat.reshape(p2.shape)

    dr2 = _pool_backward(dp2, idx2, r2.shape)
    da2 = dr2 * (a2 > 0)
    dp1, dconv2_w, dconv2_b = _conv_backward(da2, cols2, p.conv2_w, p1.shape)

    dr1 = _pool_backward(dp1, idx1, r1.shape)
    da1 = dr1 * (a1 > 0)
    _, dconv1_w, dconv1_b = _conv_backward(da1, cols1, p.conv1_w, x.shape)

    return {
        "conv1_w": dconv1_w,
        "conv1_b": dconv1_b,
        "conv2_w": dconv2_w,
        "conv2_b": dconv2_b,
        "fc1_w": dfc1_w,
        "fc1_b": dfc1_b,
        "fc2_w": dfc2_w,
        "fc2_b": dfc2_b,
    }


def _check_map(p: ProbeParams, m: AmbiguityMap) -> np.ndarray:
    if m.grid_side != p.grid_side:
        raise ValueError(f"map grid {m.grid_side} != probe grid {p.grid_side}")
    return np.asarray(m.values, dtype=np.float64)[None, None]


def forward(p: ProbeParams, m: AmbiguityMap) -> float:
    """Ambiguity probability, strictly inside (0, 1)."""
    prob, _ = _forward_batch(p, _check_map(p, m))
    return float(prob[0])


def bce_loss(p_amb: float, y: int) -> float:
    """-y log p - (1-y) log(1-p), log arguments clamped at 1e-12."""
    if not 0.0 < p_amb < 1.0:
        raise ValueError(f"probability {p_amb} outside (0, 1)")
    return float(
        -y * np.log(max(p_amb, LOG_CLAMP))
        - (1 - y) * np.log(max(1.0 - p_amb, LOG_CLAMP))
    )


def backward(p: ProbeParams, m: AmbiguityMap, y: int) -> dict:
    """Exact gradients of bce_loss(forward(p, m), y) for every parameter."""
    x = _check_map(p, m)
    prob, cache = _forward_batch(p, x)
    return _backward_batch(p, cache, prob, np.array([float(y)]))


def init_optimizer(
    p: ProbeParams,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_opt: float = 1e-8,
) -> OptimizerState:
    state = OptimizerState(
        lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps_opt=eps_opt
    )
    for name, arr in p.items():
        state.first_moment[name] = np.zeros_like(arr)
        state.second_moment[name] = np.zeros_like(arr)
    return state


def adamw_step(
    p: ProbeParams, grads: dict, s: OptimizerState
) -> tuple[ProbeParams, OptimizerState]:
    """Decoupled weight decay update with bias correction.

    theta <- theta * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name}")
    step = s.step + 1
    bc1 = 1.0 - s.beta1**step
    bc2 = 1.0 - s.beta2**step
    new_params = {}
    for name, arr in p.items():
        g = grads[name]
        m = s.beta1 * s.first_moment[name] + (1 - s.beta1) * g
        v = s.beta2 * s.second_moment[name] + (1 - s.beta2) * g * g
        s.first_moment[name] = m
        s.second_moment[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + s.eps_opt)
        new_params[name] = arr * (1.0 - s.lr * s.weight_decay) - s.lr * update
    s.step = step
    return replace(p, **new_params), s


def _f1_of(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate_confusion(
    p: ProbeParams, dataset: list[LabeledMap], threshold: float = 0.5
) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) of thresholded predictions over the dataset."""
    maps = np.stack([np.asarray(d.map.values, dtype=np.float64) for d in dataset])
    prob, _ = _forward_batch(p, maps[:, None])
    pred = prob >= threshold
    y = np.array([d.label for d in dataset], dtype=bool)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    return tp, fp, tn, fn


def train(dataset: list[LabeledMap], cfg: TrainConfig) -> tuple[ProbeParams, list[dict]]:
    """Mini-batch AdamW training; deterministic given cfg.seed.

    Holds out cfg.val_fraction of the dataset (fixed split from the seed)
    and records per-epoch mean train loss and validation F1.
    """
    if not dataset:
        raise ValueError("empty dataset")
    labels = {d.label for d in dataset}
    if len(labels) < 2:
        raise ValueError("dataset must contain both classes")
    grid = dataset[0].map.grid_side

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(len(dataset) * cfg.val_fraction))
    val = [dataset[i] for i in order[:n_val]]
    tr = [dataset[i] for i in order[n_val:]]
    if not tr:
        raise ValueError("no training samples left after validation split")

    x_tr = np.stack([np.asarray(d.map.values, dtype=np.float64) for d in tr])[:, None]
    y_tr = np.array([float(d.label) for d in tr])

    params = init_params(grid, cfg.seed)
    state = init_optimizer(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(tr))
        losses = []
        for start in range(0, len(tr), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            prob, cache = _forward_batch(params, xb)
            clipped = np.clip(prob, LOG_CLAMP, 1.0 - LOG_CLAMP)
            loss = float(
                np.mean(-yb * np.log(clipped) - (1 - yb) * np.log(1 - clipped))
            )
            grads = _backward_batch(params, cache, prob, yb)
            params, state = adamw_step(params, grads, state)
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val:
            tp, fp, tn, fn = evaluate_confusion(params, val)
            entry["val_f1"] = _f1_of(tp, fp, fn)
        history.append(entry)
    return params, history


def predict(
    p: ProbeParams, m: AmbiguityMap, threshold: float = 0.5
) -> tuple[bool, float]:
    """(decision, probability); the tie at the threshold counts as ambiguous."""
    p_amb = forward(p, m)
    return p_amb >= threshold, p_amb


def save_params(p: ProbeParams, destination: BinaryIO) -> int:
    """Versioned little-endian f32 blob; shapes are implied by the grid side."""
    written = destination.write(PARAMS_MAGIC)
    written += destination.write(struct.pack("<HHI", PARAMS_VERSION, 0, p.grid_side))
    for _, arr in p.items():
        written += destination.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return written


def load_params(source: BinaryIO) -> ProbeParams:
    header = source.read(12)
    if len(header) != 12 or header[:4] != PARAMS_MAGIC:
        raise ValueError(f"not a probe params file (header {header!r})")
    version, _, grid_side = struct.unpack("<HHI", header[4:])
    if version != PARAMS_VERSION:
        raise ValueError(f"unsupported params version {version}")
    template = init_params(grid_side, seed=0)
    loaded = {}
    for name, arr in template.items():
        raw = source.read(4 * arr.size)
        if len(raw) != 4 * arr.size:
            raise ValueError(f"truncated params file at {name}")
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(arr.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite values in {name}")
        loaded[name] = values
    if source.read(1):
        raise ValueError("trailing bytes after params payload")
    return ProbeParams(**loaded, grid_side=grid_side)


def localize_peaks(
    m: AmbiguityMap, min_separation: int = 3, min_height: float = 0.5
) -> list[tuple[int, int]]:
    """Grid cells of local maxima above min_height.

    Candidates are cells not exceeded by any 8-neighbor; they are kept
    greedily by descending height subject to pairwise Chebyshev distance
    >= min_separation. Ties break row-major for determinism.
    """
    v = np.asarray(m.values, dtype=np.float64)
    g = m.grid_side
    padded = np.full((g + 2, g + 2), -np.inf)
    padded[1:-1, 1:-1] = v
    neighborhood = np.stack(
        [
            padded[1 + dy : 1 + dy + g, 1 + dx : 1 + dx + g]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
            if (dy, dx) != (0, 0)
        ]
    )
    is_max = (v >= neighborhood.max(axis=0)) & (v > min_height)
    candidates = sorted(
        ((r, c) for r, c in np.argwhere(is_max)),
        key=lambda rc: (-v[rc[0], rc[1]], rc[0], rc[1]),
    )
    peaks: list[tuple[int, int]] = []
    for r, c in candidates:
        if all(max(abs(r - pr), abs(c - pc)) >= min_separation for pr, pc in peaks):
            peaks.append((int(r), int(c)))
    return peaks
