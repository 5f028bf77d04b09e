"""Small dropout-equipped encoder-decoder pixel classifier.

A desk-scale stand-in for a full U-Net: two downsampling stages of
conv-ReLU blocks, mirrored nearest-neighbor upsampling with skip
connections, and a 2-class pixel softmax head.  Dropout lives in the
decoder blocks only and doubles as the Monte Carlo sampler for model
uncertainty.  Everything runs in float64 numpy with hand-written backward
passes; all stochastic pieces (init, batch order, dropout masks) draw from
keyed counter streams, so training trajectories and MC passes are pure
functions of their seeds.

Feature maps are kept channels-last (n, h, w, c) internally: convolutions
become nine shifted slice copies plus one GEMM, which avoids the large
strided gathers a naive im2col would pay for.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import GrayImage, LabelGrid
from .rng import Stream, stream_key


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    lr0: float = 0.01
    momentum: float = 0.9
    batch: int = 16
    max_steps: int = 500
    lr_power: float = 0.9
    lam: float = 1e-4  # weight of the l2 parameter norm
    precision: str = "f64"  # f32 roughly quadruples GEMM throughput here

    def __post_init__(self):
        if min(self.lr0, self.momentum, self.max_steps, self.lr_power) < 0 or self.lam < 0:
            raise ValueError("hyperparameters must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")


@dataclass(frozen=True, eq=False)
class SegModel:
    params: dict[str, np.ndarray]
    channel_widths: tuple[int, int, int]
    dropout_rate: float
    seed: int
    steps_trained: int = 0


@dataclass(frozen=True, eq=False)
class ProbMap:
    values: np.ndarray  # (h, w) foreground probability


@dataclass(frozen=True, eq=False)
class ExpectationMap:
    values: np.ndarray  # (h, w) mean of binarized MC passes
    passes: int


def _layer_specs(widths: tuple[int, int, int]):
    c1, c2, c3 = widths
    return (
        ("enc1a", 1, c1, 3), ("enc1b", c1, c1, 3),
        ("enc2a", c1, c2, 3), ("enc2b", c2, c2, 3),
        ("botta", c2, c3, 3), ("bottb", c3, c3, 3),
        ("dec2a", c3 + c2, c2, 3), ("dec2b", c2, c2, 3),
        ("dec1a", c2 + c1, c1, 3), ("dec1b", c1, c1, 3),
        ("head", c1, 2, 1),
    )


def init_model(seed: int, dropout_rate: float = 0.2, channel_widths: tuple[int, int, int] = (8, 16, 32)) -> SegModel:
    """Fan-in-scaled normal init, deterministic in the seed."""
    if any(c < 1 for c in channel_widths):
        raise ValueError("channel widths must be positive")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    params: dict[str, np.ndarray] = {}
    for name, cin, cout, k in _layer_specs(channel_widths):
        s = Stream(seed, "init", name)
        fan_in = cin * k * k
        # ReLU gain for the trunk; the softmax head starts small so a fresh
        # model sits near the 0.5 decision boundary
        scale = np.sqrt(2.0 / fan_in) if name != "head" else 0.1 * np.sqrt(1.0 / fan_in)
        params[f"{name}.w"] = s.normal((cout, cin, k, k)) * scale
        params[f"{name}.b"] = np.zeros(cout)
    return SegModel(params, tuple(channel_widths), dropout_rate, seed)


# ---------------------------------------------------------------------------
# channels-last layer primitives.  3x3 convolutions gather one contiguous
# column block per kernel offset and run nine small GEMMs; the big scratch
# arrays live in a thread-local workspace because repeated fresh
# allocations of this size pay mmap page-fault costs every step.

_workspace = threading.local()


def _buffer(tag, shape, dtype) -> np.ndarray:
    pool = getattr(_workspace, "pool", None)
    if pool is None:
        pool = _workspace.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


def _w_offsets(w: np.ndarray, dtype) -> np.ndarray:
    """(o, c, 3, 3) -> (9, c, o), offset index k = 3*dy + dx."""
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0), dtype=dtype).reshape(9, -1, w.shape[0])


def _conv3_forward(x, w, b, layer):
    n, h, wd, c = x.shape
    o = w.shape[0]
    padded = _buffer(("pad", layer), (n, h + 2, wd + 2, c), x.dtype)
    padded.fill(0)
    padded[:, 1:h + 1, 1:wd + 1] = x
    cols = _buffer(("cols", layer), (9, n * h * wd, c), x.dtype)
    cols_v = cols.reshape(9, n, h, wd, c)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols_v[k] = padded[:, dy:dy + h, dx:dx + wd]
            k += 1
    wo = _w_offsets(w, x.dtype)
    out = cols[0] @ wo[0]
    tmp = _buffer(("fwd-mm", layer), out.shape, x.dtype)
    for i in range(1, 9):
        np.matmul(cols[i], wo[i], out=tmp)
        out += tmp
    out += b.astype(x.dtype)
    return out.reshape(n, h, wd, o), cols


def _conv3_backward(dout, cols, w, x_shape, layer):
    n, h, wd, c = x_shape
    o = w.shape[0]
    dtype = dout.dtype
    dflat = dout.reshape(-1, o)
    wo = _w_offsets(w, dtype)
    dw9 = np.empty((9, c, o), dtype)
    dpad = _buffer(("dpad", layer), (n, h + 2, wd + 2, c), dtype)
    dpad.fill(0)
    tmp = _buffer(("bwd-mm", layer), (n * h * wd, c), dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            np.matmul(cols[k].T, dflat, out=dw9[k])
            np.matmul(dflat, wo[k].T, out=tmp)
            dpad[:, dy:dy + h, dx:dx + wd] += tmp.reshape(n, h, wd, c)
            k += 1
    db = dflat.sum(axis=0)
    dw = dw9.reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    return dpad[:, 1:h + 1, 1:wd + 1], dw, db


def _conv1_forward(x, w, b):
    w1 = np.asarray(w[:, :, 0, 0], dtype=x.dtype)
    out = x @ w1.T + b.astype(x.dtype)
    return out, None


def _conv1_backward(dout, w, x):
    cout = w.shape[0]
    w1 = np.asarray(w[:, :, 0, 0], dtype=x.dtype)
    dflat = dout.reshape(-1, cout)
    xflat = x.reshape(-1, x.shape[-1])
    dw = (dflat.T @ xflat)[:, :, None, None]
    db = dflat.sum(axis=0)
    dx = (dflat @ w1).reshape(x.shape)
    return dx, dw, db


def _maxpool(x):
    n, h, w, c = x.shape
    blocks = np.ascontiguousarray(
        x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    ).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    dblocks = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _softmax2(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_DROP_SITES = ("dec2a", "dec2b", "dec1a", "dec1b")


def _drop_mask(drop_key, site, shape, rate, dtype):
    u = Stream(drop_key, "dropmask", site).uniform(shape)
    return (u >= rate).astype(dtype) / dtype(1.0 - rate)


def _forward(params, widths, x, rate=0.0, drop_key=None, want_cache=False):
    """x is (n, h, w, 1); returns (probs (n, h, w, 2), cache)."""
    cache = {"drops": {}}

    def conv_relu(name, inp):
        out, cols = _conv3_forward(inp, params[f"{name}.w"], params[f"{name}.b"], name)
        act = np.maximum(out, 0.0)
        if want_cache:
            cache[name] = (inp.shape, cols, out > 0)
        if drop_key is not None and rate > 0.0 and name in _DROP_SITES:
            mask = _drop_mask(drop_key, name, act.shape, rate, x.dtype.type)
            act = act * mask
            if want_cache:
                cache["drops"][name] = mask
        return act

    e1 = conv_relu("enc1b", conv_relu("enc1a", x))
    p1, i1 = _maxpool(e1)
    e2 = conv_relu("enc2b", conv_relu("enc2a", p1))
    p2, i2 = _maxpool(e2)
    bott = conv_relu("bottb", conv_relu("botta", p2))
    u2 = np.concatenate([_upsample(bott), e2], axis=-1)
    d2 = conv_relu("dec2b", conv_relu("dec2a", u2))
    u1 = np.concatenate([_upsample(d2), e1], axis=-1)
    d1 = conv_relu("dec1b", conv_relu("dec1a", u1))
    logits, _ = _conv1_forward(d1, params["head.w"], params["head.b"])
    probs = _softmax2(logits)
    if want_cache:
        cache.update(i1=i1, i2=i2, e1_shape=e1.shape, e2_shape=e2.shape, d1=d1, probs=probs)
    return probs, cache


def _param_norm(params) -> float:
    return float(np.sqrt(sum(float((p * p).sum()) for p in params.values())))


def loss_and_grad(params, widths, x, y, v, lam, rate=0.0, drop_key=None):
    """Weighted pixel cross-entropy plus ``lam * ||W||_2``.

    ``x`` is (n, h, w, 1), ``y`` and ``v`` are (n, h, w).  The data term is
    ``sum(v * ce) / (n * h * w)``; the constant normalizer keeps the
    gradient exactly linear in the weights.  Returns (total loss, grads,
    per-pixel ce).
    """
    dtype = x.dtype
    probs, cache = _forward(params, widths, x, rate, drop_key, want_cache=True)
    n, h, w, _ = x.shape
    norm = n * h * w
    yf = y.astype(dtype)
    p_true = np.clip(np.where(y == 1, probs[..., 1], probs[..., 0]), np.finfo(dtype).tiny, None)
    ce = -np.log(p_true)
    v = v.astype(dtype, copy=False)
    data_loss = float((v * ce).sum()) / norm

    grads = {}
    onehot = np.stack([1.0 - yf, yf], axis=-1)
    dlogits = (probs - onehot) * (v / dtype.type(norm))[..., None]

    def conv_relu_backward(name, dact):
        x_shape, cols, relu_mask = cache[name]
        if name in cache["drops"]:
            dact = dact * cache["drops"][name]
        dout = dact * relu_mask
        dx, dw, db = _conv3_backward(dout, cols, params[f"{name}.w"], x_shape, name)
        grads[f"{name}.w"] = dw
        grads[f"{name}.b"] = db
        return dx

    dd1, dw, db = _conv1_backward(dlogits, params["head.w"], cache["d1"])
    grads["head.w"], grads["head.b"] = dw, db
    du1 = conv_relu_backward("dec1a", conv_relu_backward("dec1b", dd1))
    c2, c3 = widths[1], widths[2]
    dd2 = _upsample_backward(du1[..., :c2])
    de1_skip = du1[..., c2:]
    du2 = conv_relu_backward("dec2a", conv_relu_backward("dec2b", dd2))
    dbott = _upsample_backward(du2[..., :c3])
    de2_skip = du2[..., c3:]
    dp2 = conv_relu_backward("botta", conv_relu_backward("bottb", dbott))
    de2 = _maxpool_backward(dp2, cache["i2"], cache["e2_shape"]) + de2_skip
    dp1 = conv_relu_backward("enc2a", conv_relu_backward("enc2b", de2))
    de1 = _maxpool_backward(dp1, cache["i1"], cache["e1_shape"]) + de1_skip
    conv_relu_backward("enc1a", conv_relu_backward("enc1b", de1))

    total = data_loss
    if lam > 0.0:
        pnorm = _param_norm(params)
        total += lam * pnorm
        if pnorm > 0.0:
            for key, p in params.items():
                grads[key] = grads[key] + np.asarray((lam / pnorm) * p, dtype=grads[key].dtype)
    return total, grads, ce


def train_weighted(
    model: SegModel,
    images: list[GrayImage],
    labels: list[LabelGrid],
    weights: list[np.ndarray],
    hyper: TrainHyper,
    seed: int,
) -> SegModel:
    """SGD with momentum over ``max_steps`` mini-batch steps.

    Learning rate follows the polynomial decay
    ``lr0 * (1 - step / max_steps) ** lr_power``.  Dropout is active;
    batch order and masks derive from ``seed``, so the trajectory is
    deterministic.
    """
    dtype = np.float32 if hyper.precision == "f32" else np.float64
    xs = np.stack([im.data[..., None] for im in images]).astype(dtype)
    ys = np.stack([lb.labels for lb in labels])
    vs = np.stack(weights).astype(dtype)
    if (vs < 0).any():
        raise ValueError("latent weights must be non-negative")
    n = len(images)

    params = {k: p.astype(dtype) for k, p in model.params.items()}
    velocity = {k: np.zeros_like(p) for k, p in params.items()}
    batch = min(hyper.batch, n)

    for step in range(hyper.max_steps):
        lr = hyper.lr0 * (1.0 - step / hyper.max_steps) ** hyper.lr_power
        pick = Stream(seed, "batch", step).sample(n, batch)
        drop_key = stream_key(seed, "drop", step)
        loss, grads, _ = loss_and_grad(
            params, model.channel_widths, xs[pick], ys[pick], vs[pick],
            hyper.lam, model.dropout_rate, drop_key,
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr={lr:.2e})")
        momentum = dtype(hyper.momentum)
        lr_t = dtype(lr)
        for key in params:
            velocity[key] = momentum * velocity[key] + grads[key]
            params[key] = params[key] - lr_t * velocity[key]
    out_params = {k: p.astype(np.float64) for k, p in params.items()}
    return replace(model, params=out_params, steps_trained=model.steps_trained + hyper.max_steps)


# ---------------------------------------------------------------------------
# inference

def _pad_to_multiple(data: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, int, int]:
    h, w = data.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        data = np.pad(data, ((0, ph), (0, pw)), mode="reflect")
    return data, h, w


def _cast_params(model: SegModel, precision: str) -> dict[str, np.ndarray]:
    if precision == "f64":
        return model.params
    return {k: p.astype(np.float32) for k, p in model.params.items()}


def predict_proba(model: SegModel, image: GrayImage, precision: str = "f64") -> ProbMap:
    """Deterministic foreground probability; dropout disabled.

    Inputs whose sides are not divisible by 4 are reflect-padded for the
    forward pass and cropped back.
    """
    dtype = np.float32 if precision == "f32" else np.float64
    data, h, w = _pad_to_multiple(image.data)
    params = _cast_params(model, precision)
    probs, _ = _forward(params, model.channel_widths, data[None, ..., None].astype(dtype))
    return ProbMap(probs[0, :h, :w, 1].astype(np.float64))


def predict_binary(model: SegModel, image: GrayImage, precision: str = "f64") -> LabelGrid:
    """Foreground iff its probability >= 0.5 (ties go to foreground).

    This is the per-pixel argmin of cross-entropy over the two labels.
    """
    return LabelGrid((predict_proba(model, image, precision).values >= 0.5).astype(np.uint8))


def binarize(prob: np.ndarray) -> np.ndarray:
    return (prob >= 0.5).astype(np.uint8)


def mcdo_expectation(model: SegModel, image: GrayImage, passes: int, seed: int, precision: str = "f64") -> ExpectationMap:
    """Mean of ``passes`` binarized stochastic forward passes.

    The mask of pass d derives from (seed, d) alone, so results do not
    depend on evaluation order or concurrency.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    dtype = np.float32 if precision == "f32" else np.float64
    data, h, w = _pad_to_multiple(image.data)
    params = _cast_params(model, precision)
    batch = data[None, ..., None].astype(dtype)
    votes = np.zeros((h, w), dtype=np.int64)
    for d in range(passes):
        drop_key = stream_key(seed, "mcdo", d)
        probs, _ = _forward(params, model.channel_widths, batch, model.dropout_rate, drop_key)
        votes += binarize(probs[0, :h, :w, 1])
    return ExpectationMap(votes / passes, passes)


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, raw little-endian f64

_MAGIC = b"VBCK"
_VERSION = 1


def save_checkpoint(model: SegModel, path: str | Path) -> None:
    order = sorted(model.params)
    header = {
        "channel_widths": list(model.channel_widths),
        "dropout_rate": model.dropout_rate,
        "seed": model.seed,
        "steps_trained": model.steps_trained,
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in order],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for key in order:
            fh.write(np.ascontiguousarray(model.params[key], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> SegModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not a model checkpoint")
    version = int.from_bytes(raw[4:8], "little")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    hlen = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    params = {}
    for tensor in header["tensors"]:
        shape = tuple(tensor["shape"])
        count = int(np.prod(shape))
        params[tensor["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
    return SegModel(
        params=params,
        channel_widths=tuple(header["channel_widths"]),
        dropout_rate=header["dropout_rate"],
        seed=header["seed"],
        steps_trained=header["steps_trained"],
    )
