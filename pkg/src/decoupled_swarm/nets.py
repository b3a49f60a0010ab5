"""Segmentation network, prior/posterior latent encoders and the adaptation net.

All forward functions are stateless: parameters come in as a
:class:`ParameterSet`, inputs are ``(C, H, W)`` tensors or batched
``(N, C, H, W)`` tensors, and latent vectors are ``(D,)`` or ``(N, D)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, ShapeError, Tensor

DA_MODES = ("distribution", "image", "fixed")


@dataclass(frozen=True)
class NetConfig:
    classes: int = 2
    latent_dim: int = 8
    base_channels: int = 8
    depth: int = 3
    height: int = 32
    width: int = 32
    encoder_channels: int = 8
    da_channels: int = 16
    # hidden 1x1 conv layers that mix the latent with the last feature map
    comb_layers: int = 2

    def __post_init__(self):
        step = 2 ** self.depth
        if self.height % step or self.width % step:
            raise ValueError(f"H, W = {self.height}, {self.width} must be divisible by 2**depth = {step}")
        if self.classes < 2 or self.latent_dim < 1 or self.depth < 1 or self.comb_layers < 0:
            raise ValueError("classes >= 2, latent_dim >= 1, depth >= 1 and comb_layers >= 0 required")


@dataclass
class GaussianDiag:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class AdaptationField:
    """Per-pixel ``C x C`` column-stochastic matrices, ``w[i, j] = p(local=i | global=j)``."""

    w: Tensor

    @property
    def classes(self) -> int:
        return self.w.shape[-4]

    @property
    def pixels(self) -> int:
        return self.w.shape[-2] * self.w.shape[-1]

    def check(self, tol: float = 1e-6) -> None:
        w = self.w.data
        if w.shape[-4] != w.shape[-3]:
            raise ShapeError("AdaptationField", w.shape)
        if np.any(w < 0):
            raise ValueError("adaptation field has negative entries")
        if np.max(np.abs(w.sum(axis=-4) - 1.0)) > tol:
            raise ValueError("adaptation field columns do not sum to 1")

    def mean_trace(self) -> float:
        c = self.classes
        return float(np.mean(np.sum([self.w.data[..., i, i, :, :] for i in range(c)], axis=0)))

    @classmethod
    def identity(cls, classes: int, h: int, w: int) -> "AdaptationField":
        eye = np.broadcast_to(np.eye(classes)[:, :, None, None], (classes, classes, h, w))
        return cls(Tensor(eye.copy()))


# ---------------------------------------------------------------------------
# initialisation

def _conv(rng: np.random.Generator, cin: int, cout: int, k: int = 3, scale: float | None = None):
    std = np.sqrt(2.0 / (cin * k * k)) if scale is None else scale
    return rng.normal(0.0, std, size=(cout, cin, k, k)), np.zeros(cout)


def _add_conv(ps: ParameterSet, name: str, rng, cin, cout, k=3, scale=None) -> None:
    w, b = _conv(rng, cin, cout, k, scale)
    ps[f"{name}.w"] = w
    ps[f"{name}.b"] = b


def init_seg(cfg: NetConfig, rng: np.random.Generator, with_latent: bool = True) -> ParameterSet:
    ps = ParameterSet()
    widths = [cfg.base_channels * 2 ** level for level in range(cfg.depth + 1)]
    cin = 1
    for level, c in enumerate(widths):
        _add_conv(ps, f"enc{level}.0", rng, cin, c)
        _add_conv(ps, f"enc{level}.1", rng, c, c)
        cin = c
    for level in reversed(range(cfg.depth)):
        c = widths[level]
        _add_conv(ps, f"dec{level}.0", rng, cin + c, c)
        _add_conv(ps, f"dec{level}.1", rng, c, c)
        cin = c
    cin += cfg.latent_dim if with_latent else 0
    for i in range(cfg.comb_layers):
        _add_conv(ps, f"comb{i}", rng, cin, cfg.base_channels, k=1)
        cin = cfg.base_channels
    _add_conv(ps, "head", rng, cin, cfg.classes, k=1, scale=0.1)
    return ps


def init_encoder(cfg: NetConfig, rng: np.random.Generator, in_channels: int) -> ParameterSet:
    ps = ParameterSet()
    cin = in_channels
    for level in range(3):
        c = cfg.encoder_channels * 2 ** level
        _add_conv(ps, f"conv{level}", rng, cin, c)
        cin = c
    ps["mu.w"] = rng.normal(0.0, 0.1 / np.sqrt(cin), size=(cin, cfg.latent_dim))
    ps["mu.b"] = np.zeros(cfg.latent_dim)
    ps["log_sigma.w"] = rng.normal(0.0, 0.1 / np.sqrt(cin), size=(cin, cfg.latent_dim))
    ps["log_sigma.b"] = np.zeros(cfg.latent_dim)
    return ps


def init_prior(cfg: NetConfig, rng: np.random.Generator) -> ParameterSet:
    return init_encoder(cfg, rng, 1)


def init_posterior(cfg: NetConfig, rng: np.random.Generator) -> ParameterSet:
    return init_encoder(cfg, rng, 1 + cfg.classes)


def da_input_channels(cfg: NetConfig, mode: str) -> int:
    if mode == "distribution":
        return cfg.latent_dim
    if mode == "image":
        return 1
    if mode == "fixed":
        return 0
    raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {DA_MODES}")


def init_da(cfg: NetConfig, rng: np.random.Generator, mode: str = "distribution") -> ParameterSet:
    cin = da_input_channels(cfg, mode)
    c2 = cfg.classes * cfg.classes
    ps = ParameterSet()
    if mode == "fixed":
        ps["field"] = rng.normal(0.0, 0.01, size=(c2, cfg.height, cfg.width))
        return ps
    hidden = cfg.da_channels
    for i in range(4):
        _add_conv(ps, f"conv{i}", rng, cin, hidden, scale=np.sqrt(1.0 / (cin * 9)))
        cin = hidden
    _add_conv(ps, "conv4", rng, cin, c2, scale=0.01)
    return ps


# ---------------------------------------------------------------------------
# forward passes

def _conv_apply(ps: ParameterSet, name: str, x: Tensor) -> Tensor:
    return T.conv2d(x, ps[f"{name}.w"], ps[f"{name}.b"])


def _check_image(image: Tensor, channels: int, op: str) -> None:
    if image.ndim not in (3, 4) or image.shape[-3] != channels:
        raise ShapeError(op, image.shape, (channels, "H", "W"))


def broadcast_latent(z: Tensor, h: int, w: int) -> Tensor:
    """Tile ``(D,)`` / ``(N, D)`` latents into ``(D, H, W)`` / ``(N, D, H, W)`` maps."""
    z = T.as_tensor(z)
    if z.ndim not in (1, 2):
        raise ShapeError("broadcast_latent", z.shape)
    z4 = T.reshape(z, z.shape + (1, 1))
    return T.broadcast_to(z4, z.shape + (h, w))


def forward_seg(theta_s: ParameterSet, image: Tensor, z: Tensor | None = None) -> Tensor:
    """Per-pixel class probabilities ``(C, H, W)`` of the tiny U-Net.

    The tiled latent joins the last decoder feature map and passes through
    ``comb*`` 1x1 convs (ReLU) before the 1x1 ``head``.
    """
    image = T.as_tensor(image)
    _check_image(image, 1, "forward_seg")
    depth = sum(1 for n in theta_s if n.startswith("dec") and n.endswith(".0.w"))
    h, w = image.shape[-2:]
    if h % 2 ** depth or w % 2 ** depth:
        raise ShapeError("forward_seg", image.shape, (f"divisible by {2 ** depth}",))
    x = image
    skips = []
    for level in range(depth + 1):
        if level:
            x = T.maxpool2(x)
        x = T.relu(_conv_apply(theta_s, f"enc{level}.0", x))
        x = T.relu(_conv_apply(theta_s, f"enc{level}.1", x))
        skips.append(x)
    for level in reversed(range(depth)):
        x = T.concat_channels([T.upsample_nearest2(x), skips[level]])
        x = T.relu(_conv_apply(theta_s, f"dec{level}.0", x))
        x = T.relu(_conv_apply(theta_s, f"dec{level}.1", x))
    n_comb = sum(1 for n in theta_s if n.startswith("comb") and n.endswith(".w"))
    first = "comb0" if n_comb else "head"
    extra = theta_s[f"{first}.w"].shape[1] - x.shape[-3]
    if extra:
        if z is None:
            raise ShapeError("forward_seg", (extra,), ("missing latent",))
        z = T.as_tensor(z)
        if z.shape[-1] != extra or (image.ndim == 4) != (z.ndim == 2):
            raise ShapeError("forward_seg", z.shape, (extra,))
        x = T.concat_channels([x, broadcast_latent(z, h, w)])
    elif z is not None:
        raise ShapeError("forward_seg", T.as_tensor(z).shape, ("no latent input",))
    for i in range(n_comb):
        x = T.relu(_conv_apply(theta_s, f"comb{i}", x))
    return T.channel_softmax(_conv_apply(theta_s, "head", x))


def _encode(ps: ParameterSet, x: Tensor) -> GaussianDiag:
    for level in range(3):
        if level:
            x = T.maxpool2(x)
        x = T.relu(_conv_apply(ps, f"conv{level}", x))
    feat = T.mean(x, axis=(-2, -1))
    batched = feat.ndim == 2
    if not batched:
        feat = T.reshape(feat, (1, feat.shape[0]))
    mu = feat @ ps["mu.w"] + ps["mu.b"]
    log_sigma = feat @ ps["log_sigma.w"] + ps["log_sigma.b"]
    if not batched:
        mu = T.reshape(mu, (mu.shape[1],))
        log_sigma = T.reshape(log_sigma, (log_sigma.shape[1],))
    return GaussianDiag(mu, log_sigma)


def forward_prior(psi: ParameterSet, image: Tensor) -> GaussianDiag:
    image = T.as_tensor(image)
    _check_image(image, psi["conv0.w"].shape[1], "forward_prior")
    return _encode(psi, image)


def forward_posterior(phi: ParameterSet, image: Tensor, onehot_label: Tensor) -> GaussianDiag:
    image, onehot_label = T.as_tensor(image), T.as_tensor(onehot_label)
    if image.shape[-2:] != onehot_label.shape[-2:] or image.ndim != onehot_label.ndim:
        raise ShapeError("forward_posterior", image.shape, onehot_label.shape)
    x = T.concat_channels([image, onehot_label])
    _check_image(x, phi["conv0.w"].shape[1], "forward_posterior")
    return _encode(phi, x)


def sample_latent(g: GaussianDiag, noise) -> Tensor:
    """Reparameterised draw ``mu + exp(log_sigma) * noise``."""
    noise = T.as_tensor(noise)
    if noise.shape != g.mu.shape:
        raise ShapeError("sample_latent", g.mu.shape, noise.shape)
    return g.mu + T.exp(g.log_sigma) * noise


def forward_da(theta_p: ParameterSet, conditioning, mode: str = "distribution",
               classes: int | None = None) -> AdaptationField:
    """Adaptation matrices from the conditioning map.

    ``distribution`` expects a broadcast latent ``(D, H, W)``, ``image`` the
    raw image ``(1, H, W)``; ``fixed`` ignores ``conditioning`` beyond its
    batch size and returns a learned constant field.
    """
    if mode not in DA_MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {DA_MODES}")
    if mode == "fixed":
        if "field" not in theta_p:
            raise ShapeError("forward_da", ("fixed",), tuple(theta_p.names()))
        raw = T.softplus(theta_p["field"])
        if conditioning is not None and T.as_tensor(conditioning).ndim == 4:
            n = T.as_tensor(conditioning).shape[0]
            raw = T.broadcast_to(raw, (n,) + raw.shape)
    else:
        if "conv0.w" not in theta_p:
            raise ShapeError("forward_da", (mode,), tuple(theta_p.names()))
        x = T.as_tensor(conditioning)
        _check_image(x, theta_p["conv0.w"].shape[1], "forward_da")
        for i in range(4):
            x = T.softplus(_conv_apply(theta_p, f"conv{i}", x))
        raw = T.softplus(_conv_apply(theta_p, "conv4", x))
    c2 = raw.shape[-3]
    c = int(round(np.sqrt(c2)))
    if c * c != c2 or (classes is not None and c != classes):
        raise ShapeError("forward_da", raw.shape, (classes,))
    w = T.reshape(raw, raw.shape[:-3] + (c, c) + raw.shape[-2:])
    col = T.sum(w, axis=-4)
    w = w / T.reshape(col, col.shape[:-3] + (1,) + col.shape[-3:])
    return AdaptationField(w)


def apply_adaptation(field: AdaptationField, probs) -> Tensor:
    """Pixel-wise ``W @ p``: ``out[i] = sum_j W[i, j] * p[j]``."""
    probs = T.as_tensor(probs)
    w = field.w
    if w.shape[-4] != probs.shape[-3] or w.shape[-2:] != probs.shape[-2:] \
            or (w.ndim == 5 and probs.ndim == 4 and w.shape[0] != probs.shape[0]):
        raise ShapeError("apply_adaptation", w.shape, probs.shape)
    p = T.reshape(probs, probs.shape[:-3] + (1,) + probs.shape[-3:])
    return T.sum(w * p, axis=-3)


# ---------------------------------------------------------------------------
# checkpoints

def save_params(ps: ParameterSet, path: str | Path) -> None:
    Path(path).write_bytes(ps.to_bytes())


def load_params(path: str | Path) -> ParameterSet:
    return ParameterSet.from_bytes(Path(path).read_bytes())
