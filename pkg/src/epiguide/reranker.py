"""Desk-scale reranking transformer with hand-rolled backpropagation.

Token layout is [CLS, image-1 cells row-major, SEP, image-2 cells]; the
cross-attention supervision reads the UNscaled per-head QK' blocks of the
final layer while the forward softmax uses the conventional 1/sqrt(d_head)
scaling. Everything runs in float64 so finite-difference checks are exact
to first order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataio import read_archive, write_archive
from .errors import (
    CacheMismatch,
    MissingGeometry,
    NonFiniteActivation,
    ShapeMismatch,
)
from .geometry import CameraView, FundamentalMatrix, pair_plane_angles
from .guides import EpipolarGuide, GridSpec
from .losses import bce_with_logit, epipolar_loss, max_epipolar_loss

_INIT_SALT = 404
_REF_PIXEL_SALT = 505
_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

LOSS_VARIANTS = ("none", "epi", "max_epi")


@dataclass(frozen=True)
class ModelConfig:
    s: int = 7
    m: int = 32
    heads: int = 2
    layers: int = 2
    mlp_width: int = 64
    num_freqs: int = 4
    epe_enabled: bool = False
    lambda_epi: float = 1.0
    loss_variant: str = "epi"
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.m % self.heads != 0:
            raise ValueError("token width must divide evenly across heads")
        if 4 * self.num_freqs > self.m:
            raise ValueError("2D frequency encoding must fit the token width")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.lambda_epi < 0:
            raise ValueError("lambda_epi must be non-negative")

    @property
    def n_cells(self) -> int:
        return self.s * self.s

    @property
    def seq_len(self) -> int:
        return 2 * self.n_cells + 2

    @property
    def head_dim(self) -> int:
        return self.m // self.heads

    def as_json(self) -> dict:
        return {
            "s": self.s,
            "m": self.m,
            "heads": self.heads,
            "layers": self.layers,
            "mlp_width": self.mlp_width,
            "num_freqs": self.num_freqs,
            "epe_enabled": self.epe_enabled,
            "lambda_epi": self.lambda_epi,
            "loss_variant": self.loss_variant,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ModelConfig":
        return cls(**raw)


_LAYER_KEYS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")
_GLOBAL_KEYS = ("cls", "sep", "beta1", "beta2", "match_w", "match_b")


def _param_shapes(config: ModelConfig) -> dict[str, tuple]:
    m, w = config.m, config.mlp_width
    shapes = {
        "cls": (m,),
        "sep": (m,),
        "beta1": (m,),
        "beta2": (m,),
        "match_w": (m,),
        "match_b": (),
    }
    per_layer = {
        "wq": (m, m),
        "wk": (m, m),
        "wv": (m, m),
        "wo": (m, m),
        "ln1_g": (m,),
        "ln1_b": (m,),
        "w1": (m, w),
        "b1": (w,),
        "w2": (w, m),
        "b2": (m,),
        "ln2_g": (m,),
        "ln2_b": (m,),
    }
    for layer in range(config.layers):
        for key, shape in per_layer.items():
            shapes[f"layer{layer}.{key}"] = shape
    return shapes


@dataclass
class RerankerParams:
    """All learnable tensors keyed by name, plus the config they serve."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = _param_shapes(self.config)
        if set(self.tensors) != set(shapes):
            missing = set(shapes) - set(self.tensors)
            extra = set(self.tensors) - set(shapes)
            raise ValueError(f"parameter set mismatch (missing {missing}, extra {extra})")
        for name, shape in shapes.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name} contains non-finite values")
            self.tensors[name] = t

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def layer(self, index: int, key: str) -> np.ndarray:
        return self.tensors[f"layer{index}.{key}"]

    def copy(self) -> "RerankerParams":
        return RerankerParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig) -> RerankerParams:
    """Scaled-normal (std 0.02) weights from the config seed; layer norms at
    identity, biases at zero."""
    rng = np.random.default_rng([_INIT_SALT, config.seed])
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        key = name.rsplit(".", 1)[-1]
        if key in ("ln1_g", "ln2_g"):
            tensors[name] = np.ones(shape)
        elif key in ("ln1_b", "ln2_b", "b1", "b2", "match_b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = 0.02 * rng.standard_normal(shape)
    return RerankerParams(config, tensors)


# -- positional / epipolar encodings -----------------------------------------


def _freq_features(values: np.ndarray, num_freqs: int, m: int) -> np.ndarray:
    """Interleaved [sin(2^k pi v), cos(2^k pi v)] per coordinate, zero-padded.

    ``values`` is (n, c); the result is (n, m).
    """
    values = np.asarray(values, dtype=np.float64)
    n, c = values.shape
    out = np.zeros((n, m))
    col = 0
    for coord in range(c):
        for k in range(num_freqs):
            arg = (2.0**k) * math.pi * values[:, coord]
            out[:, col] = np.sin(arg)
            out[:, col + 1] = np.cos(arg)
            col += 2
    return out


def frequency_encode(p, num_freqs: int, m: int) -> np.ndarray:
    """Positional encoding of a 2D point in [0,1]^2 as an m-vector."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 2)
    if not np.isfinite(p).all():
        raise ValueError("coordinates must be finite")
    return _freq_features(p, num_freqs, m)[0]


def _cell_positions(s: int) -> np.ndarray:
    """(s*s, 2) normalized cell centers in [0,1]^2, row-major."""
    cols, rows = np.meshgrid(np.arange(s), np.arange(s))
    return np.column_stack([(cols.ravel() + 0.5) / s, (rows.ravel() + 0.5) / s])


@dataclass(frozen=True)
class EpeInput:
    """Geometry for the epipolar positional encoding of one pair.

    With both views present the true epipolar-plane angle is used (reference
    pixel drawn from the pair seed); with only F available, pixels map to the
    direction of their image-1 epipolar line around the epipole instead,
    which is what a random rank-2 stand-in for unknown geometry provides.
    """

    f: FundamentalMatrix
    view1: CameraView | None = None
    view2: CameraView | None = None
    pair_seed: int = 0


def _pencil_angles(f: FundamentalMatrix, pix1: np.ndarray, pix2: np.ndarray):
    """Normalized pencil coordinates in [0,1) for both images' pixels."""
    m = f.m
    _, _, vt = np.linalg.svd(m)
    e1 = vt[-1]

    h1 = np.hstack([pix1, np.ones((pix1.shape[0], 1))])
    lines1 = np.cross(h1, e1[None, :])
    lines2_back = np.hstack([pix2, np.ones((pix2.shape[0], 1))]) @ m

    def direction_angle(lines):
        d = np.column_stack([-lines[:, 1], lines[:, 0]])
        norms = np.hypot(d[:, 0], d[:, 1])
        ang = np.where(norms > 1e-12, np.arctan2(d[:, 1], d[:, 0]), 0.0)
        return np.mod(ang, math.pi) / math.pi

    return direction_angle(lines1), direction_angle(lines2_back)


def epe_vectors_for_pixels(epe: EpeInput, config: ModelConfig, pix1, pix2):
    """Per-pixel epipolar encodings ((n1, m), (n2, m)); pixels on one
    epipolar line receive identical vectors."""
    pix1 = np.asarray(pix1, dtype=np.float64).reshape(-1, 2)
    pix2 = np.asarray(pix2, dtype=np.float64).reshape(-1, 2)
    if epe.view1 is not None and epe.view2 is not None:
        rng = np.random.default_rng([_REF_PIXEL_SALT, epe.pair_seed])
        ref = np.array(
            [rng.uniform(0.0, epe.view1.width), rng.uniform(0.0, epe.view1.height)]
        )
        ang1, ang2 = pair_plane_angles(epe.view1, epe.view2, pix1, pix2, ref)
        v1 = (ang1 + math.pi) / (2.0 * math.pi)
        v2 = (ang2 + math.pi) / (2.0 * math.pi)
    else:
        v1, v2 = _pencil_angles(epe.f, pix1, pix2)
    enc1 = _freq_features(v1[:, None], config.num_freqs, config.m)
    enc2 = _freq_features(v2[:, None], config.num_freqs, config.m)
    return enc1, enc2


def _epe_vectors(epe: EpeInput, config: ModelConfig, width: int, height: int):
    pix = _cell_positions(config.s) * np.array([width, height])
    return epe_vectors_for_pixels(epe, config, pix, pix)


@dataclass(frozen=True)
class TokenSequence:
    """(2s^2 + 2) x m matrix laid out [CLS, image-1 cells, SEP, image-2 cells]."""

    tokens: np.ndarray
    s: int

    def __post_init__(self):
        if self.tokens.shape[0] != 2 * self.s * self.s + 2:
            raise ValueError("sequence length must be 2*s^2 + 2")


def assemble_tokens(
    grid1,
    grid2,
    params: RerankerParams,
    config: ModelConfig | None = None,
    epe_input: EpeInput | None = None,
    image_size: tuple[int, int] = (224, 224),
) -> TokenSequence:
    """Cell token = feature + positional encoding + image-identity embedding."""
    config = config or params.config
    grid1 = np.asarray(grid1, dtype=np.float64)
    grid2 = np.asarray(grid2, dtype=np.float64)
    n, m = config.n_cells, config.m
    if grid1.shape != (n, m) or grid2.shape != (n, m):
        raise ShapeMismatch(
            f"feature grids must be {(n, m)}, got {grid1.shape} and {grid2.shape}"
        )
    psi = _freq_features(_cell_positions(config.s), config.num_freqs, m)
    block1 = grid1 + psi + params["beta1"]
    block2 = grid2 + psi + params["beta2"]
    if config.epe_enabled:
        if epe_input is None:
            raise MissingGeometry("epe_enabled model needs an EpeInput per pair")
        enc1, enc2 = _epe_vectors(epe_input, config, *image_size)
        block1 = block1 + enc1
        block2 = block2 + enc2
    tokens = np.vstack([params["cls"][None, :], block1, params["sep"][None, :], block2])
    return TokenSequence(tokens=tokens, s=config.s)


# -- forward / backward ------------------------------------------------------


@dataclass(frozen=True)
class CrossAttentionMaps:
    """Raw (pre-softmax, unscaled) final-layer cross blocks, heads x s^2 x s^2."""

    a12: np.ndarray
    a21: np.ndarray

    def __post_init__(self):
        if self.a12.shape != self.a21.shape or self.a12.ndim != 3:
            raise ValueError("cross maps must share a (heads, n, n) shape")
        if not (np.isfinite(self.a12).all() and np.isfinite(self.a21).all()):
            raise ValueError("cross maps must be finite")


@dataclass
class ForwardCache:
    params: RerankerParams
    tokens: np.ndarray
    layers: list[dict]
    final: np.ndarray


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, xhat, inv


def _layer_norm_backward(dy, xhat, inv, g):
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    mean1 = dxhat.mean(axis=1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - mean1 - xhat * mean2) * inv
    return dx, dg, db


def _gelu(x: np.ndarray):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return y, dydx


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, m = x.shape
    return x.reshape(t, heads, m // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, d = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * d)


def forward(params: RerankerParams, sequence: TokenSequence):
    """Pre-norm transformer stack; returns (match logit, raw cross maps, cache)."""
    config = params.config
    if sequence.s != config.s:
        raise ShapeMismatch(f"sequence built for s={sequence.s}, model has s={config.s}")
    n = config.n_cells
    scale = 1.0 / math.sqrt(config.head_dim)
    h = sequence.tokens
    caches = []
    last_raw = None
    for layer in range(config.layers):
        p = lambda key: params.layer(layer, key)
        # overflow here surfaces as NonFiniteActivation below, not a warning
        with np.errstate(over="ignore", invalid="ignore"):
            normed1, xhat1, inv1 = _layer_norm(h, p("ln1_g"), p("ln1_b"))
            q = _split_heads(normed1 @ p("wq"), config.heads)
            k = _split_heads(normed1 @ p("wk"), config.heads)
            v = _split_heads(normed1 @ p("wv"), config.heads)
            raw = q @ k.transpose(0, 2, 1)
            scaled = raw * scale
            scaled -= scaled.max(axis=2, keepdims=True)
            att = np.exp(scaled)
            att /= att.sum(axis=2, keepdims=True)
            ctx = _merge_heads(att @ v)
            attn_out = ctx @ p("wo")
            h_mid = h + attn_out
            normed2, xhat2, inv2 = _layer_norm(h_mid, p("ln2_g"), p("ln2_b"))
            z1 = normed2 @ p("w1") + p("b1")
            a1, da1 = _gelu(z1)
            mlp_out = a1 @ p("w2") + p("b2")
            h_out = h_mid + mlp_out
        if not np.isfinite(h_out).all():
            raise NonFiniteActivation(f"non-finite activations after layer {layer}")
        caches.append(
            dict(
                h_in=h,
                xhat1=xhat1,
                inv1=inv1,
                normed1=normed1,
                q=q,
                k=k,
                v=v,
                att=att,
                ctx=ctx,
                h_mid=h_mid,
                xhat2=xhat2,
                inv2=inv2,
                normed2=normed2,
                z1=z1,
                a1=a1,
                da1=da1,
            )
        )
        last_raw = raw
        h = h_out
    logit = float(params["match_w"] @ h[0] + params["match_b"])
    if not np.isfinite(logit):
        raise NonFiniteActivation("non-finite match logit")
    maps = CrossAttentionMaps(
        a12=last_raw[:, 1 : n + 1, n + 2 : 2 * n + 2].copy(),
        a21=last_raw[:, n + 2 : 2 * n + 2, 1 : n + 1].copy(),
    )
    cache = ForwardCache(params=params, tokens=sequence.tokens, layers=caches, final=h)
    return logit, maps, cache


def backward(
    params: RerankerParams,
    cache: ForwardCache,
    d_logit: float = 0.0,
    d_maps: CrossAttentionMaps | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of d_logit * logit + <d_maps, raw cross maps> w.r.t. params."""
    if cache.params is not params:
        raise CacheMismatch("cache was produced by a different parameter set")
    config = params.config
    n = config.n_cells
    scale = 1.0 / math.sqrt(config.head_dim)
    grads = {name: np.zeros_like(t) for name, t in params.tensors.items()}

    dh = np.zeros_like(cache.final)
    dh[0] = d_logit * params["match_w"]
    grads["match_w"] += d_logit * cache.final[0]
    grads["match_b"] += np.asarray(d_logit)

    for layer in range(config.layers - 1, -1, -1):
        c = cache.layers[layer]
        p = lambda key: params.layer(layer, key)
        name = lambda key: f"layer{layer}.{key}"

        # h_out = h_mid + a1 @ w2 + b2
        d_mlp = dh
        grads[name("w2")] += c["a1"].T @ d_mlp
        grads[name("b2")] += d_mlp.sum(axis=0)
        da1 = d_mlp @ p("w2").T
        dz1 = da1 * c["da1"]
        grads[name("w1")] += c["normed2"].T @ dz1
        grads[name("b1")] += dz1.sum(axis=0)
        d_normed2 = dz1 @ p("w1").T
        dx2, dg2, db2 = _layer_norm_backward(d_normed2, c["xhat2"], c["inv2"], p("ln2_g"))
        grads[name("ln2_g")] += dg2
        grads[name("ln2_b")] += db2
        d_hmid = dh + dx2

        # h_mid = h_in + merge(att @ v) @ wo
        grads[name("wo")] += c["ctx"].T @ d_hmid
        d_ctx = _split_heads(d_hmid @ p("wo").T, config.heads)
        d_att = d_ctx @ c["v"].transpose(0, 2, 1)
        dv = c["att"].transpose(0, 2, 1) @ d_ctx
        inner = (d_att * c["att"]).sum(axis=2, keepdims=True)
        d_scaled = c["att"] * (d_att - inner)
        d_raw = d_scaled * scale
        if layer == config.layers - 1 and d_maps is not None:
            d_raw[:, 1 : n + 1, n + 2 : 2 * n + 2] += d_maps.a12
            d_raw[:, n + 2 : 2 * n + 2, 1 : n + 1] += d_maps.a21
        dq = d_raw @ c["k"]
        dk = d_raw.transpose(0, 2, 1) @ c["q"]
        d_normed1 = (
            _merge_heads(dq) @ p("wq").T
            + _merge_heads(dk) @ p("wk").T
            + _merge_heads(dv) @ p("wv").T
        )
        grads[name("wq")] += c["normed1"].T @ _merge_heads(dq)
        grads[name("wk")] += c["normed1"].T @ _merge_heads(dk)
        grads[name("wv")] += c["normed1"].T @ _merge_heads(dv)
        dx1, dg1, db1 = _layer_norm_backward(d_normed1, c["xhat1"], c["inv1"], p("ln1_g"))
        grads[name("ln1_g")] += dg1
        grads[name("ln1_b")] += db1
        dh = d_hmid + dx1

    # dh is now the gradient w.r.t. the assembled token matrix
    grads["cls"] += dh[0]
    grads["sep"] += dh[n + 1]
    grads["beta1"] += dh[1 : n + 1].sum(axis=0)
    grads["beta2"] += dh[n + 2 : 2 * n + 2].sum(axis=0)
    return grads


def match_logit(params: RerankerParams, grid1, grid2, epe_input: EpeInput | None = None) -> float:
    logit, _, _ = forward(params, assemble_tokens(grid1, grid2, params, epe_input=epe_input))
    return logit


# -- pair loss ---------------------------------------------------------------


def _attention_loss(maps: CrossAttentionMaps, guide: EpipolarGuide, variant: str):
    """Mean-over-heads supervision on the raw cross blocks."""
    fn = epipolar_loss if variant == "epi" else max_epipolar_loss
    heads = maps.a12.shape[0]
    total = 0.0
    d12 = np.zeros_like(maps.a12)
    d21 = np.zeros_like(maps.a21)
    for h in range(heads):
        result = fn(maps.a12[h], maps.a21[h], guide)
        total += result.value / heads
        d12[h] = result.grad12 / heads
        d21[h] = result.grad21 / heads
    return total, CrossAttentionMaps(a12=d12, a21=d21)


@dataclass(frozen=True)
class PairLoss:
    total: float
    match_bce: float
    attn_value: float | None
    grads: dict[str, np.ndarray]


def pair_loss(
    params: RerankerParams,
    sequence: TokenSequence,
    label: int,
    guide: EpipolarGuide | None = None,
) -> PairLoss:
    """Match BCE plus (for supervised matching pairs) the attention loss.

    The attention term contributes lambda_epi * its own backward pass, so the
    attention component of every gradient is exactly linear in lambda.
    """
    config = params.config
    logit, maps, cache = forward(params, sequence)
    bce, d_logit = bce_with_logit(logit, label)
    grads = backward(params, cache, d_logit=d_logit)
    attn_value = None
    use_attention = (
        config.loss_variant != "none"
        and config.lambda_epi > 0
        and label == 1
        and guide is not None
    )
    if use_attention:
        attn_value, d_maps = _attention_loss(maps, guide, config.loss_variant)
        attn_grads = backward(params, cache, d_logit=0.0, d_maps=d_maps)
        for key in grads:
            grads[key] += config.lambda_epi * attn_grads[key]
        total = bce + config.lambda_epi * attn_value
    else:
        total = bce
    return PairLoss(total=total, match_bce=bce, attn_value=attn_value, grads=grads)


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainingPair:
    """One labeled example; guide/epe present only where geometry allows."""

    grid1: np.ndarray
    grid2: np.ndarray
    label: int
    guide: EpipolarGuide | None = None
    epe: EpeInput | None = None
    image_size: tuple[int, int] = (224, 224)


@dataclass(frozen=True)
class TrainSchedule:
    phase1_epochs: int = 3
    phase2_epochs: int = 3
    learning_rate: float = 3e-4
    pairs_per_epoch: int | None = None
    concentration_pairs: int = 8

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


class _Adam:
    def __init__(self, tensors: dict[str, np.ndarray], lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        correction = self.lr * math.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for key, g in grads.items():
            self.m[key] = b1 * self.m[key] + (1.0 - b1) * g
            self.v[key] = b2 * self.v[key] + (1.0 - b2) * g * g
            tensors[key] = tensors[key] - correction * self.m[key] / (
                np.sqrt(self.v[key]) + eps
            )


def _pair_sequence(pair: TrainingPair, params: RerankerParams) -> TokenSequence:
    return assemble_tokens(
        pair.grid1,
        pair.grid2,
        params,
        epe_input=pair.epe,
        image_size=pair.image_size,
    )


def attention_concentration(params: RerankerParams, pairs: Sequence[TrainingPair]) -> float:
    """Softmax mass inside the guide over the cross blocks, relative to the
    guide's positive-cell fraction (1.0 = no better than uniform)."""
    ratios = []
    for pair in pairs:
        if pair.guide is None:
            continue
        _, maps, _ = forward(params, _pair_sequence(pair, params))
        for raw, g in ((maps.a12, pair.guide.g12), (maps.a21, pair.guide.g21)):
            frac = float(g.mean())
            if frac == 0.0:
                continue
            shifted = raw - raw.max(axis=2, keepdims=True)
            soft = np.exp(shifted)
            soft /= soft.sum(axis=2, keepdims=True)
            mass = float((soft * g[None, :, :]).sum(axis=2).mean())
            ratios.append(mass / frac)
    if not ratios:
        raise ValueError("no supervised pairs to measure")
    return float(np.mean(ratios))


def train(
    dataset: Sequence[TrainingPair],
    config: ModelConfig,
    schedule: TrainSchedule = TrainSchedule(),
):
    """Two-phase deterministic training: match loss alone, then + attention.

    Returns the trained parameters and one structured log entry per epoch.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    params = init_params(config)
    adam = _Adam(params.tensors, schedule.learning_rate)
    log: list[dict] = []
    monitor = [p for p in dataset if p.label == 1 and p.guide is not None]
    monitor = monitor[: schedule.concentration_pairs]
    total_epochs = schedule.phase1_epochs + schedule.phase2_epochs
    for epoch in range(total_epochs):
        phase = 1 if epoch < schedule.phase1_epochs else 2
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
        if schedule.pairs_per_epoch is not None:
            order = order[: schedule.pairs_per_epoch]
        bces = []
        attns = []
        epoch_config = config if phase == 2 else replace(config, loss_variant="none")
        epoch_params = RerankerParams(epoch_config, params.tensors)
        for step, idx in enumerate(order):
            pair = dataset[int(idx)]
            try:
                result = pair_loss(
                    epoch_params,
                    _pair_sequence(pair, epoch_params),
                    pair.label,
                    pair.guide,
                )
            except NonFiniteActivation as exc:
                raise NonFiniteActivation(
                    f"epoch {epoch} step {step}: {exc}"
                ) from exc
            adam.step(params.tensors, result.grads)
            bces.append(result.match_bce)
            if result.attn_value is not None:
                attns.append(result.attn_value)
        entry = {
            "epoch": epoch,
            "phase": phase,
            "steps": len(order),
            "match_bce": float(np.mean(bces)),
            "attn_loss": float(np.mean(attns)) if attns else None,
        }
        if monitor:
            entry["concentration"] = attention_concentration(params, monitor)
        log.append(entry)
    if config.loss_variant == "none" or config.lambda_epi == 0.0:
        # an inert attention term trains identically either way; record one
        # canonical config so equivalent runs produce identical artifacts
        config = replace(config, loss_variant="none", lambda_epi=0.0)
        params = RerankerParams(config=config, tensors=params.tensors)
    return params, log


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: RerankerParams) -> None:
    blob = json.dumps(params.config.as_json(), sort_keys=True).encode("utf-8")
    tensors = {"config_json": np.frombuffer(blob, dtype=np.uint8).copy()}
    for name in sorted(params.tensors):
        tensors[name] = params.tensors[name].astype(np.float32)
    write_archive(path, tensors)


def load_checkpoint(path) -> RerankerParams:
    archive = read_archive(path)
    config = ModelConfig.from_json(json.loads(bytes(archive.pop("config_json")).decode("utf-8")))
    tensors = {name: t.astype(np.float64) for name, t in archive.items()}
    return RerankerParams(config, tensors)
