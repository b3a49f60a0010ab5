"""Decentralised training: local epochs at every center, peer exchange of the
global-model parameters, size-weighted aggregation. Personalised adaptation
parameters never leave their center.
"""
from __future__ import annotations

import csv
import io
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from . import losses as L
from . import nets
from . import tensor as T
from .synthdata import FederationData, SegSample, augment, onehot
from .tensor import AdamState, NonFiniteError, ParameterSet

if TYPE_CHECKING:
    from .config import ExperimentConfig

log = logging.getLogger(__name__)

METHODS = ("ours", "swarm_plain", "single", "fixed_adapt", "img_adapt")
GLOBAL_PARTS = ("seg", "prior", "post")

MESSAGE_MAGIC = b"RMSG"
MESSAGE_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
assert _HEADER.size == 24


class ProtocolError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    name: str
    adaptive: bool
    da_mode: str | None
    aggregate: bool


def method_spec(name: str) -> MethodSpec:
    specs = {
        "ours": MethodSpec("ours", True, "distribution", True),
        "fixed_adapt": MethodSpec("fixed_adapt", True, "fixed", True),
        "img_adapt": MethodSpec("img_adapt", True, "image", True),
        "swarm_plain": MethodSpec("swarm_plain", False, None, True),
        "single": MethodSpec("single", False, None, False),
    }
    if name not in specs:
        raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
    return specs[name]


@dataclass(frozen=True)
class TrainSchedule:
    rounds: int = 60
    local_epochs: int = 2
    # None -> first 10% of all local epochs
    warmup_epochs: int | None = None
    batch_size: int = 4
    lr: float = 1e-3
    augment: bool = True
    # evaluate mean-latent Dice every this many rounds for the history (0 = never)
    eval_every: int = 10

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("rounds, local_epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.rounds * self.local_epochs

    @property
    def warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return int(round(0.1 * self.total_epochs))


@dataclass
class CenterState:
    center_id: int
    n_k: int
    train: list[SegSample]
    test: list[SegSample]
    theta_s: ParameterSet
    psi: ParameterSet | None = None
    phi: ParameterSet | None = None
    theta_p: ParameterSet | None = None
    da_mode: str | None = None
    adam: dict[str, AdamState] = field(default_factory=dict)
    epochs_done: int = 0

    def networks(self) -> dict[str, ParameterSet]:
        nets_ = {"seg": self.theta_s, "prior": self.psi, "post": self.phi, "da": self.theta_p}
        return {k: v for k, v in nets_.items() if v is not None}

    def global_part(self) -> ParameterSet:
        """The exchanged parameters: segmentation net and both latent encoders."""
        out = ParameterSet()
        for key in GLOBAL_PARTS:
            ps = self.networks().get(key)
            if ps is not None:
                for n, t in ps.items():
                    out[f"{key}.{n}"] = t
        return out

    def load_global(self, ps: ParameterSet) -> None:
        mine = self.global_part()
        if mine.schema() != ps.schema():
            raise ProtocolError(f"center {self.center_id}: aggregate schema mismatch")
        for (_, dst), (_, src) in zip(mine.items(), ps.items()):
            dst.data = src.data.copy()


def init_center(cfg: nets.NetConfig, method: MethodSpec, center_id: int, train, test,
                seed: int, lr: float = 1e-3) -> CenterState:
    """Shared global initialisation (seeded by ``seed`` only) plus a per-center DA net."""
    g = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
    theta_s = nets.init_seg(cfg, g, with_latent=method.adaptive)
    state = CenterState(center_id, len(train), list(train), list(test), theta_s)
    if method.adaptive:
        state.psi = nets.init_prior(cfg, g)
        state.phi = nets.init_posterior(cfg, g)
        p = np.random.default_rng(np.random.SeedSequence([seed, 0xDA, center_id]))
        state.theta_p = nets.init_da(cfg, p, method.da_mode)
        state.da_mode = method.da_mode
    state.adam = {k: AdamState(lr=lr) for k in state.networks()}
    return state


# ---------------------------------------------------------------------------
# aggregation and wire format

def aggregate(params: list[ParameterSet], sizes: list[int]) -> ParameterSet:
    """Size-weighted average ``sum_k (n_k / N) theta_k`` in list order.

    Evaluated as ``theta_0 + sum_k w_k (theta_k - theta_0)`` so that identical
    inputs come back bit-for-bit.
    """
    if not params or len(params) != len(sizes):
        raise ValueError("aggregate needs one size per parameter set and at least one set")
    schema = params[0].schema()
    for ps in params[1:]:
        if ps.schema() != schema:
            raise ProtocolError("aggregate: parameter schemas differ")
    if any(n <= 0 for n in sizes):
        raise ValueError(f"aggregate: sizes must be positive, got {sizes}")
    total = float(np.sum(sizes))
    flats = [ps.flat() for ps in params]
    base = flats[0]
    acc = np.zeros_like(base)
    for n, f in zip(sizes, flats):
        acc += (n / total) * (f - base)
    out = params[0].copy()
    out.load_flat(base + acc)
    return out


@dataclass(frozen=True)
class RoundMessage:
    center_id: int
    round: int
    n_k: int
    payload: bytes

    def encode(self) -> bytes:
        return _HEADER.pack(MESSAGE_MAGIC, MESSAGE_VERSION, self.center_id, self.round, self.n_k) + self.payload

    @classmethod
    def decode(cls, blob: bytes) -> "RoundMessage":
        magic, version, cid, rnd, n_k = _HEADER.unpack(blob[:_HEADER.size])
        if magic != MESSAGE_MAGIC or version != MESSAGE_VERSION:
            raise ProtocolError(f"bad message header {magic!r} v{version}")
        return cls(cid, rnd, n_k, blob[_HEADER.size:])

    def params(self) -> ParameterSet:
        return ParameterSet.from_bytes(self.payload)


def make_message(state: CenterState, rnd: int) -> bytes:
    return RoundMessage(state.center_id, rnd, state.n_k, state.global_part().to_bytes()).encode()


def aggregate_messages(blobs: list[bytes], schema=None) -> ParameterSet:
    """What a receiving center does: decode, order by center id, aggregate."""
    msgs = sorted((RoundMessage.decode(b) for b in blobs), key=lambda m: m.center_id)
    params = [m.params() for m in msgs]
    if schema is not None and any(p.schema() != schema for p in params):
        raise ProtocolError("message payload does not match the shared schema")
    return aggregate(params, [m.n_k for m in msgs])


# ---------------------------------------------------------------------------
# local training

@dataclass(frozen=True)
class TrainContext:
    cfg: nets.NetConfig
    weights: L.LossWeights
    schedule: TrainSchedule
    method: MethodSpec
    seed: int


def center_rng(seed: int, center_id: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, center_id, rnd]))


def _batch(samples: list[SegSample], classes: int):
    img = np.stack([s.image for s in samples])
    lab = np.stack([s.label for s in samples])
    return T.Tensor(img), T.Tensor(onehot(lab, classes))


def _failing_term(checks: dict) -> str:
    for name, fn in checks.items():
        try:
            fn()
        except NonFiniteError:
            return name
    return "total"


def _adaptive_step(state: CenterState, img, oh, rng, ctx: TrainContext, phase: str) -> dict:
    cfg = ctx.cfg
    post = nets.forward_posterior(state.phi, img, oh)
    prior = nets.forward_prior(state.psi, img)
    z = nets.sample_latent(post, rng.standard_normal(post.mu.shape))
    seg = nets.forward_seg(state.theta_s, img, z)
    if state.da_mode == "distribution":
        cond = nets.broadcast_latent(z, cfg.height, cfg.width)
    else:
        cond = img
    field_ = nets.forward_da(state.theta_p, cond, state.da_mode, cfg.classes)
    terms: dict = {}
    local = nets.apply_adaptation(field_, seg)
    try:
        if phase == "warmup":
            loss = L.warmup_loss(seg, oh, field_, post, prior, ctx.weights, terms)
        else:
            loss = L.total_loss(seg, local, oh, field_, post, prior, ctx.weights, terms)
    except NonFiniteError:
        name = _failing_term({
            "ce": lambda: L.ce_loss(seg if phase == "warmup" else local, oh),
            "nr": lambda: L.nr_loss(seg, oh, ctx.weights.q),
            "tr": lambda: L.tr_loss(field_),
            "kl": lambda: L.kl_diag_gauss(post, prior),
        })
        raise NonFiniteError(f"loss term {name}") from None
    terms["loss"] = loss.item()
    T.backward(loss)
    return terms


def _plain_step(state: CenterState, img, oh) -> dict:
    seg = nets.forward_seg(state.theta_s, img)
    loss = L.ce_loss(seg, oh)
    T.backward(loss)
    return {"loss": loss.item(), "ce": loss.item()}


def local_train(state: CenterState, epochs: int, phase: str, ctx: TrainContext,
                rng: np.random.Generator, rnd: int = 0) -> list[dict]:
    """Run ``epochs`` local epochs in ``phase`` ('warmup' or 'main'); returns per-epoch mean terms."""
    if phase not in ("warmup", "main"):
        raise ValueError(f"unknown phase {phase!r}")
    warm = ctx.schedule.warmup if ctx.method.adaptive else 0
    if phase == "warmup" and epochs and state.epochs_done + epochs > warm:
        raise ValueError(f"center {state.center_id}: warm-up slice runs past epoch {warm}")
    if phase == "main" and epochs and state.epochs_done < warm:
        raise ValueError(f"center {state.center_id}: main phase requested during warm-up")
    metrics = []
    bs = ctx.schedule.batch_size
    for _ in range(epochs):
        order = rng.permutation(len(state.train))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), bs):
            samples = [state.train[i] for i in order[start:start + bs]]
            if ctx.schedule.augment:
                samples = [augment(s, rng) for s in samples]
            img, oh = _batch(samples, ctx.cfg.classes)
            try:
                if ctx.method.adaptive:
                    terms = _adaptive_step(state, img, oh, rng, ctx, phase)
                else:
                    terms = _plain_step(state, img, oh)
            except NonFiniteError as err:
                raise TrainingError(
                    f"round {rnd} center {state.center_id} epoch {state.epochs_done}: "
                    f"non-finite value in {err.op}") from err
            for name, v in terms.items():
                if not np.isfinite(v):
                    raise TrainingError(f"round {rnd} center {state.center_id}: non-finite {name}")
                sums[name] = sums.get(name, 0.0) + v
            for key, ps in state.networks().items():
                T.adam_step(ps, state.adam[key])
            n_batches += 1
        metrics.append({"epoch": state.epochs_done, "phase": phase,
                        **{k: v / n_batches for k, v in sorted(sums.items())}})
        state.epochs_done += 1
    return metrics


def train_round(state: CenterState, ctx: TrainContext, rnd: int) -> tuple[CenterState, list[dict]]:
    """One round of local epochs, switching from warm-up to main at the scheduled epoch."""
    rng = center_rng(ctx.seed, state.center_id, rnd)
    epochs = ctx.schedule.local_epochs
    warm = ctx.schedule.warmup if ctx.method.adaptive else 0
    n_warm = min(epochs, max(0, warm - state.epochs_done))
    metrics = local_train(state, n_warm, "warmup", ctx, rng, rnd)
    metrics += local_train(state, epochs - n_warm, "main", ctx, rng, rnd)
    return state, metrics


def _train_round_job(args):
    return train_round(*args)


# ---------------------------------------------------------------------------
# full runs

@dataclass
class ExperimentHistory:
    method: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    centers: list[CenterState] = field(default_factory=list)
    messages: list[list[bytes]] = field(default_factory=list)
    initial_global: ParameterSet | None = None

    COLUMNS = ("round", "center", "epoch", "phase", "loss", "ce", "nr", "tr", "kl",
               "local_dice", "generic_dice")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row.get(c, "")) for c in self.COLUMNS])
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def build_centers(config: "ExperimentConfig", data: FederationData, method: MethodSpec) -> list[CenterState]:
    return [init_center(config.net, method, c.spec.center_id, c.train, c.test, config.seed, config.schedule.lr)
            for c in sorted(data.centers, key=lambda c: c.spec.center_id)]


def run_swarm(config: "ExperimentConfig", data: FederationData, method: str | None = None,
              message_dir: str | Path | None = None) -> ExperimentHistory:
    """Synchronous rounds of local training and peer-to-peer aggregation."""
    from .evaluation import round_dice

    spec = method_spec(method or config.method)
    centers = build_centers(config, data, spec)
    ctx = TrainContext(config.net, config.weights, config.schedule, spec, config.seed)
    hist = ExperimentHistory(spec.name, config.seed)
    hist.initial_global = centers[0].global_part().copy()
    keep_messages = bool(config.log_messages) or message_dir is not None
    pool = ProcessPoolExecutor(config.jobs) if config.jobs > 1 else None
    try:
        for rnd in range(config.schedule.rounds):
            jobs = [(c, ctx, rnd) for c in centers]
            results = list(pool.map(_train_round_job, jobs)) if pool else [train_round(*j) for j in jobs]
            centers = [s for s, _ in results]
            for state, metrics in results:
                for m in metrics:
                    hist.rows.append({"round": rnd, "center": state.center_id, **m})
            if spec.aggregate:
                blobs = [make_message(c, rnd) for c in centers]
                schema = centers[0].global_part().schema()
                agg = [aggregate_messages(blobs, schema) for _ in centers]
                ref = agg[0].to_bytes()
                for c, a in zip(centers, agg):
                    if a.to_bytes() != ref:
                        raise ProtocolError(f"round {rnd}: center {c.center_id} diverged from the aggregate")
                    c.load_global(a)
                if keep_messages:
                    hist.messages.append(blobs)
                if message_dir is not None:
                    _log_messages(Path(message_dir), rnd, blobs)
            every = config.schedule.eval_every
            if every and ((rnd + 1) % every == 0 or rnd + 1 == config.schedule.rounds):
                for cid, local, generic in round_dice(centers, data, config):
                    hist.rows.append({"round": rnd, "center": cid, "phase": "eval",
                                      "local_dice": local, "generic_dice": generic})
            log.info("%s seed %d round %d/%d done", spec.name, config.seed, rnd + 1, config.schedule.rounds)
    finally:
        if pool:
            pool.shutdown()
    hist.centers = centers
    return hist


def run_baseline(config: "ExperimentConfig", data: FederationData, method: str,
                 message_dir: str | Path | None = None) -> ExperimentHistory:
    if method not in ("swarm_plain", "single", "fixed_adapt", "img_adapt"):
        raise ValueError(f"{method!r} is not a baseline")
    return run_swarm(config, data, method, message_dir)


def _log_messages(root: Path, rnd: int, blobs: list[bytes]) -> None:
    folder = root / f"round{rnd:04d}"
    folder.mkdir(parents=True, exist_ok=True)
    for b in blobs:
        m = RoundMessage.decode(b)
        (folder / f"center{m.center_id}.msg").write_bytes(b)


def replay_aggregation(messages: list[list[bytes]]) -> list[ParameterSet]:
    """Recompute every round's aggregate from logged messages alone."""
    return [aggregate_messages(blobs) for blobs in messages]
