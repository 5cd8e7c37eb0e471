"""Heterogeneous self-supervised training: networks, losses and the step loop.

The student base model produces a token sequence; every auxiliary head is
applied serially to that sequence, pooled and projected. The teacher is an
EMA copy of the whole student and only ever sees global views.

Supervision modes
-----------------
``heterogeneous``
    the head's teacher distribution supervises both the student base and the
    student head: ``L(z1h, z2b) + L(z1h, z2h)``.
``homogeneous``
    each branch supervises itself: ``L(z1b, z2b) + L(z1h, z2h)``.
``base_only``
    plain self-distillation of the base model, no heads.
"""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AugmentPolicy, ImageDataset, ViewBatch, iter_view_batches, steps_per_epoch
from .errors import ConfigError, ContractError, DimensionError, NumericalError
from .nn import Linear, Module, Parameter, trunc_normal
from .objectives import (MemoryBank, ProjectionHead, center_update, clustering_loss, ema_update,
                         infonce_loss, masked_reconstruction_loss, teacher_distribution)
from .optim import AdamW, clip_grad_norm
from .zoo import AuxiliaryHead, BaseModel, BaseModelSpec, build_base_model

LOSS_KINDS = ("clustering", "contrastive", "masked")
SUPERVISION_MODES = ("heterogeneous", "homogeneous", "base_only")
MULTI_HEAD_MODES = ("concat", "parallel")


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "clustering"
    out_dim: int = 256
    hidden_dim: int = 512
    bottleneck_dim: int = 128
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    symmetrize: bool = True
    granularity: str = "image"
    bank_size: int = 1024
    contrastive_temp: float = 0.2
    mask_ratio: float = 0.4
    norm_last_layer: bool = True

    def validate(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}", keys=["kind"])
        if self.granularity == "patch":
            raise ConfigError("patch-level heterogeneous supervision is not implemented; "
                              "use granularity 'image'", keys=["granularity"])
        if self.granularity != "image":
            raise ConfigError(f"unknown granularity {self.granularity!r}", keys=["granularity"])
        for key in ("student_temp", "teacher_temp", "contrastive_temp"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive", keys=[key])
        for key in ("center_momentum", "ema_momentum"):
            if not 0 <= getattr(self, key) <= 1:
                raise ConfigError(f"{key} must lie in [0, 1]", keys=[key])
        if self.out_dim < 1 or self.bank_size < 1:
            raise ConfigError("out_dim and bank_size must be >= 1", keys=["out_dim", "bank_size"])
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)", keys=["mask_ratio"])


@dataclass(frozen=True)
class OptimConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-4
    min_lr: float = 1e-5
    warmup_epochs: float = 1.0
    weight_decay: float = 0.04
    grad_clip: float = 3.0
    beta1: float = 0.9
    beta2: float = 0.999

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1", keys=["epochs", "batch_size"])
        if self.lr < 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be non-negative",
                              keys=["lr", "min_lr", "weight_decay"])


@dataclass(frozen=True)
class HsslConfig:
    base: BaseModelSpec = field(default_factory=BaseModelSpec)
    heads: tuple = ()
    share_projections: bool = False
    multi_head: str = "concat"
    supervision: str = "heterogeneous"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0
    workers: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))

    @property
    def uses_heads(self) -> bool:
        return self.supervision != "base_only"

    def validate(self):
        self.base.validate()
        self.objective.validate()
        self.optim.validate()
        self.augment.validate(self.base.patch_size)
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}", keys=["supervision"])
        if self.multi_head not in MULTI_HEAD_MODES:
            raise ConfigError(f"multi_head must be one of {MULTI_HEAD_MODES}", keys=["multi_head"])
        if self.uses_heads and not self.heads:
            raise ConfigError("at least one auxiliary head is required", keys=["heads"])
        ids = [h.id for h in self.heads]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate auxiliary head ids {ids}", keys=["heads"])
        for h in self.heads:
            h.validate()
        if self.objective.kind != "masked" and self.augment.global_count < 2:
            raise ConfigError("two-view losses need at least two global views", keys=["global_count"])
        if self.share_projections and self.uses_heads:
            widths = [h.width for h in self.heads]
            if self.multi_head == "concat" and sum(widths) != self.base.embed_width or \
                    self.multi_head == "parallel" and any(w != self.base.embed_width for w in widths):
                raise ConfigError("shared projections need head features of the base width",
                                  keys=["share_projections"])
        return self


def _head_seed(seed: int, head_id) -> list:
    return [int(seed), 1, zlib.crc32(str(head_id).encode())]


def multi_head_concat(features: list) -> Tensor:
    """Concatenate pooled head features on the channel axis, in list order."""
    if not features:
        raise ContractError("need at least one head feature")
    if len(features) == 1:
        return ag.as_tensor(features[0])
    lead = {tuple(ag.as_tensor(f).shape[:-1]) for f in features}
    if len(lead) != 1:
        raise DimensionError(f"head features disagree on batch extents: {sorted(lead)}")
    return ag.concat([ag.as_tensor(f) for f in features], axis=-1)


@dataclass
class Stream:
    """One (base projection, head projection) pair and the heads feeding it."""

    name: str
    heads: tuple


class HsslNetwork(Module):
    """Base model + serial auxiliary heads + projections (one copy: teacher or student)."""

    def __init__(self, config: HsslConfig):
        cfg = config
        obj = cfg.objective
        self.base = build_base_model(cfg.base, cfg.seed)
        width = self.base.width
        tokens = cfg.base.num_patches
        heads = cfg.heads if cfg.uses_heads else ()
        self.heads = [AuxiliaryHead(h, width, tokens, np.random.default_rng(_head_seed(cfg.seed, h.id)))
                      for h in heads]
        self.kind = obj.kind
        self.supervision = cfg.supervision

        if not heads:
            self.streams = [Stream("base", ())]
            head_in = []
        elif cfg.multi_head == "parallel" or len(heads) == 1:
            self.streams = [Stream(str(h.id), (i,)) for i, h in enumerate(heads)]
            head_in = [h.width for h in heads]
        else:
            self.streams = [Stream("concat", tuple(range(len(heads))))]
            head_in = [sum(h.width for h in heads)]

        rng = np.random.default_rng([cfg.seed, 2])
        self.base_projs, self.head_projs = [], []
        self.mask_token = None
        if self.kind == "masked":
            self.mask_token = Parameter(trunc_normal(rng, (width,)))
            # independent feature decoders for the base and head branches
            self.base_decoders = [Linear(width, w if self.supervision == "heterogeneous" else width, rng)
                                  for w in (head_in or [width])]
            self.head_decoders = [Linear(w, w, rng) for w in head_in]
            return
        for s, w in zip(self.streams, head_in or [None]):
            base_proj = ProjectionHead(width, obj.out_dim, rng, obj.hidden_dim, obj.bottleneck_dim,
                                       weight_norm=obj.norm_last_layer)
            self.base_projs.append(base_proj)
            if w is not None:
                self.head_projs.append(base_proj if cfg.share_projections else
                                       ProjectionHead(w, obj.out_dim, rng, obj.hidden_dim, obj.bottleneck_dim,
                                                      weight_norm=obj.norm_last_layer))

    @property
    def has_heads(self) -> bool:
        return bool(self.heads)

    def features(self, images, mask=None):
        """Token sequences and pooled features of the base and every head."""
        mt = self.mask_token if mask is not None else None
        tokens = self.base(images, mask, mt)
        zb = self.base.pool(tokens)
        head_tokens = [h(tokens, self.base.has_cls) for h in self.heads]
        zh = [self.base.pool(t) for t in head_tokens]
        return tokens, zb, head_tokens, zh

    def project(self, zb, zh) -> list:
        """Per stream ``(base output, head output or None)``.

        Clustering returns logits, contrastive returns unit vectors.
        """
        out = []
        for i, s in enumerate(self.streams):
            fn = (lambda p, x: p.embed(x)) if self.kind == "contrastive" else (lambda p, x: p(x))
            b = fn(self.base_projs[i], zb)
            h = fn(self.head_projs[i], multi_head_concat([zh[j] for j in s.heads])) if s.heads else None
            out.append((b, h))
        return out


# -- loss assembly --------------------------------------------------------------

def _pair_terms(supervision: str) -> tuple:
    """(target branch, prediction branch) pairs of one teacher/student view pair."""
    if supervision == "heterogeneous":
        return (("h", "b"), ("h", "h"))
    if supervision == "homogeneous":
        return (("b", "b"), ("h", "h"))
    if supervision == "base_only":
        return (("b", "b"),)
    raise ConfigError(f"unknown supervision {supervision!r}", keys=["supervision"])


def hssl_total_loss(z1b, z2b, z1h, z2h, supervision: str = "heterogeneous",
                    loss_fn: Callable = clustering_loss) -> Tensor:
    """Loss of one teacher/student view pair; ``loss_fn(target, prediction)``.

    Heterogeneous: ``L(z1h, z2b) + L(z1h, z2h)``, both terms weighted equally.
    """
    z = {"t": {"b": z1b, "h": z1h}, "s": {"b": z2b, "h": z2h}}
    total = None
    for tgt, pred in _pair_terms(supervision):
        term = loss_fn(z["t"][tgt], z["s"][pred])
        total = term if total is None else total + term
    return total


@dataclass
class ForwardOutputs:
    """Teacher targets and student predictions, indexed ``[stream][view]``.

    ``teacher`` arrays cover the global views only; ``student`` tensors cover
    globals followed by locals.
    """

    streams: list
    teacher_logits: dict       # branch -> [stream][view] raw teacher outputs
    targets: dict              # branch -> [stream][view] teacher distributions or keys
    predictions: dict          # branch -> [stream][view] student tensors
    num_globals: int


def _split(t: Tensor, parts: int) -> list:
    n = t.shape[0] // parts
    return [t[i * n:(i + 1) * n] for i in range(parts)]


def _branch_outputs(net: HsslNetwork, images: np.ndarray):
    _, zb, _, zh = net.features(images)
    return net.project(zb, zh)


def hssl_forward(views: ViewBatch, state: "TeacherStudentState") -> ForwardOutputs:
    """Teacher on global views (no gradient); student on every view."""
    cfg = state.config
    obj = cfg.objective
    net_t, net_s = state.teacher, state.student
    g = len(views.globals)
    globals_ = np.concatenate(views.globals)
    with ag.no_grad():
        t_out = _branch_outputs(net_t, globals_)
    s_out = _branch_outputs(net_s, globals_)
    l_out = _branch_outputs(net_s, np.concatenate(views.locals)) if views.locals else None

    branches = ("b", "h") if net_s.has_heads else ("b",)
    logits = {b: [] for b in branches}
    targets = {b: [] for b in branches}
    preds = {b: [] for b in branches}
    for si, s in enumerate(net_s.streams):
        for bi, b in enumerate(branches):
            t = t_out[si][bi].data
            per_view = np.split(t, g)
            logits[b].append(per_view)
            if obj.kind == "clustering":
                c = state.centers[f"{s.name}/{b}"]
                targets[b].append([teacher_distribution(v, c, obj.teacher_temp).data for v in per_view])
                to_prob = lambda x: ag.softmax(x, obj.student_temp)
            else:
                targets[b].append(per_view)
                to_prob = lambda x: x
            pv = _split(s_out[si][bi], g)
            if l_out is not None:
                pv += _split(l_out[si][bi], len(views.locals))
            preds[b].append([to_prob(x) for x in pv])
    return ForwardOutputs([s.name for s in net_s.streams], logits, targets, preds, g)


def multicrop_loss(out: ForwardOutputs, state: "TeacherStudentState") -> Tensor:
    """Average of the pair loss over teacher-global x student-view pairs (v != j), then over streams."""
    cfg = state.config
    obj = cfg.objective
    sup = cfg.supervision if state.student.has_heads else "base_only"
    n_views = len(out.predictions["b"][0])
    teachers = range(out.num_globals) if obj.symmetrize else range(1)
    stream_losses = []
    for si, name in enumerate(out.streams):
        if obj.kind == "contrastive":
            banks = {b: state.banks[f"{name}/{b}"] for b in out.targets}

            def loss_fn(target, pred, _tb=None):
                return infonce_loss(pred, target[0], banks[target[1]], obj.contrastive_temp)

            tgt = {b: [(v, b) for v in out.targets[b][si]] for b in out.targets}
        else:
            loss_fn = clustering_loss
            tgt = {b: out.targets[b][si] for b in out.targets}
        total, count = None, 0
        for j in teachers:
            for v in range(n_views):
                if v == j:
                    continue
                term = hssl_total_loss(tgt["b"][j], out.predictions["b"][si][v],
                                       tgt["h"][j] if "h" in tgt else None,
                                       out.predictions["h"][si][v] if "h" in out.predictions else None,
                                       sup, loss_fn)
                total = term if total is None else total + term
                count += 1
        stream_losses.append(total / float(count))
    loss = stream_losses[0]
    for extra in stream_losses[1:]:
        loss = loss + extra
    return loss / float(len(stream_losses))


def _token_mask(rng: np.random.Generator, batch: int, tokens: int, ratio: float) -> np.ndarray:
    k = max(1, int(round(ratio * tokens)))
    mask = np.zeros((batch, tokens), dtype=bool)
    for i in range(batch):
        mask[i, rng.choice(tokens, size=k, replace=False)] = True
    return mask


def masked_step_loss(views: ViewBatch, state: "TeacherStudentState") -> Tensor:
    """Masked-feature reconstruction on global views.

    The student base sees a masked view and reconstructs the teacher head's
    token features on the unmasked view (heterogeneous target); the student
    head reconstructs its own teacher counterpart.
    """
    cfg = state.config
    net_t, net_s = state.teacher, state.student
    cls = 1 if net_s.base.has_cls else 0
    total, count = None, 0
    for j, view in enumerate(views.globals):
        rng = np.random.default_rng([cfg.seed, 5, state.step, j])
        n = view.shape[0]
        mask = _token_mask(rng, n, (view.shape[-1] // cfg.base.patch_size) ** 2, cfg.objective.mask_ratio)
        with ag.no_grad():
            t_tokens, _, t_head, _ = net_t.features(view)
        s_tokens, _, s_head, _ = net_s.features(view, np.concatenate(
            [np.zeros((n, cls), bool), mask], axis=1) if cls else mask)
        if net_s.has_heads:
            groups = [s.heads for s in net_s.streams]
            base_targets = [ag.concat([t_head[i] for i in g], axis=-1).data if len(g) > 1 else t_head[g[0]].data
                            for g in groups]
            if cfg.supervision == "homogeneous":
                base_targets = [t_tokens.data for _ in groups]
        else:
            groups, base_targets = [()], [t_tokens.data]
        for k, g in enumerate(groups):
            pred = net_s.base_decoders[k](s_tokens)[:, cls:]
            term = masked_reconstruction_loss(pred, base_targets[k][:, cls:], mask)
            if g:
                h_in = multi_head_concat([s_head[i] for i in g]) if len(g) > 1 else s_head[g[0]]
                h_tgt = ag.concat([t_head[i] for i in g], axis=-1).data if len(g) > 1 else t_head[g[0]].data
                term = term + masked_reconstruction_loss(
                    net_s.head_decoders[k](h_in)[:, cls:], h_tgt[:, cls:], mask)
            total = term if total is None else total + term
            count += 1
    return total / float(count)


# -- state and step -------------------------------------------------------------

class TeacherStudentState:
    """Everything a training run mutates: networks, optimizer, centers, banks, step."""

    def __init__(self, config: HsslConfig, steps_per_epoch: int = 1):
        config.validate()
        self.config = config
        self.student = HsslNetwork(config)
        self.teacher = HsslNetwork(config)
        self.teacher.load_state_dict(self.student.state_dict())
        self.teacher.freeze()
        self.steps_per_epoch = max(1, int(steps_per_epoch))
        o = config.optim
        self.optimizer = AdamW(self.student.named_parameters(), (o.beta1, o.beta2),
                               weight_decay=o.weight_decay)
        self.step = 0
        obj = config.objective
        branches = ("b", "h") if self.student.has_heads else ("b",)
        self.centers = {}
        self.banks = {}
        if obj.kind == "clustering":
            self.centers = {f"{s.name}/{b}": np.zeros(obj.out_dim, np.float32) for s in self.student.streams
                            for b in branches}
        elif obj.kind == "contrastive":
            rng = np.random.default_rng([config.seed, 4])
            for s in self.student.streams:
                for b in branches:
                    bank = MemoryBank(obj.bank_size, obj.bottleneck_dim)
                    bank.enqueue(rng.standard_normal((obj.bank_size, obj.bottleneck_dim)))
                    self.banks[f"{s.name}/{b}"] = bank

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        o = self.config.optim
        total = max(1, o.epochs * self.steps_per_epoch)
        warm = int(round(o.warmup_epochs * self.steps_per_epoch))
        if step < warm:
            return o.lr * step / warm
        t = min(1.0, (step - warm) / max(1, total - warm))
        return o.min_lr + 0.5 * (o.lr - o.min_lr) * (1 + math.cos(math.pi * t))


def mean_discrepancy(out: ForwardOutputs) -> dict:
    """Batch-mean KL(z1b || z1h) per stream on the teacher global views."""
    result = {}
    if "h" not in out.targets:
        return result
    for si, name in enumerate(out.streams):
        pb = np.concatenate(out.targets["b"][si]).astype(np.float64)
        ph = np.concatenate(out.targets["h"][si]).astype(np.float64)
        kl = np.sum(pb * (np.log(np.maximum(pb, 1e-12)) - np.log(np.maximum(ph, 1e-12))), axis=-1)
        result[name] = float(kl.mean())
    return result


def train_step(batch: ViewBatch, state: TeacherStudentState, lr: float | None = None):
    """One optimizer update of the student, then EMA/center updates of the teacher.

    Returns ``(loss value, state, metrics)``; the state is updated in place.
    """
    cfg = state.config
    obj = cfg.objective
    t0 = time.perf_counter()
    lr = state.lr_at(state.step) if lr is None else float(lr)
    state.student.zero_grad()
    out = None
    seeds = [p["seed"][:2] for p in batch.provenance[:2]]
    where = f"at step {state.step} (records {batch.ids[:8].tolist()}, view seeds {seeds})"
    try:
        if obj.kind == "masked":
            loss = masked_step_loss(batch, state)
        else:
            out = hssl_forward(batch, state)
            loss = multicrop_loss(out, state)
    except NumericalError as exc:
        raise NumericalError(f"{exc} {where}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} {where}")
    loss.backward()
    params = state.student.parameters()
    grad_norm = clip_grad_norm(params, cfg.optim.grad_clip)
    if not math.isfinite(grad_norm):
        raise NumericalError(f"non-finite gradient norm at step {state.step}")
    state.optimizer.step(lr)

    ema_update(state.teacher, state.student, obj.ema_momentum)
    disc = {}
    if out is not None:
        if obj.kind == "clustering":
            for b, per_stream in out.teacher_logits.items():
                for si, name in enumerate(out.streams):
                    key = f"{name}/{b}"
                    state.centers[key] = center_update(state.centers[key], np.concatenate(per_stream[si]),
                                                       obj.center_momentum).astype(np.float32)
            disc = mean_discrepancy(out)
        else:
            for b, per_stream in out.teacher_logits.items():
                for si, name in enumerate(out.streams):
                    state.banks[f"{name}/{b}"].enqueue(np.concatenate(per_stream[si]))
    metrics = {"step": state.step, "epoch": state.epoch, "loss": value, "lr": lr,
               "grad_norm": grad_norm, "discrepancy": disc,
               "wall_time": time.perf_counter() - t0}
    state.step += 1
    return value, state, metrics


def fit(state: TeacherStudentState, dataset: ImageDataset, epochs: int | None = None,
        on_step: Callable | None = None) -> list:
    """Train from ``state.epoch`` up to ``epochs`` (default: the configured count)."""
    cfg = state.config
    epochs = cfg.optim.epochs if epochs is None else epochs
    spe = steps_per_epoch(len(dataset), cfg.optim.batch_size)
    if spe != state.steps_per_epoch:
        raise ContractError(f"state schedule assumes {state.steps_per_epoch} steps per epoch, "
                            f"dataset gives {spe}")
    history = []
    while state.epoch < epochs:
        epoch = state.epoch
        skip = state.step - epoch * spe
        batches = iter_view_batches(dataset, cfg.augment, cfg.optim.batch_size, epoch,
                                    seed=cfg.seed, workers=cfg.workers, step_offset=epoch * spe)
        for k, batch in enumerate(batches):
            if k < skip:
                continue
            _, _, metrics = train_step(batch, state)
            history.append(metrics)
            if on_step is not None:
                on_step(metrics)
    return history


def new_state(config: HsslConfig, dataset: ImageDataset) -> TeacherStudentState:
    return TeacherStudentState(config, steps_per_epoch(len(dataset), config.optim.batch_size))


def detach_auxiliary(state: TeacherStudentState) -> BaseModel:
    """The teacher base model alone; heads and projections are dropped."""
    return state.teacher.base


def extract_features(model: BaseModel, images: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """Pooled frozen features, float64 ``[N, C]``."""
    rows = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            rows.append(model.pool(model(images[i:i + batch_size])).data.astype(np.float64))
    return np.concatenate(rows) if rows else np.zeros((0, model.width))


def extract_head_features(net: HsslNetwork, images: np.ndarray, head: int = 0,
                          batch_size: int = 200) -> np.ndarray:
    rows = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            _, _, _, zh = net.features(images[i:i + batch_size])
            rows.append(zh[head].data.astype(np.float64))
    return np.concatenate(rows)


def epoch_means(history: Iterable[dict], key: str = "loss") -> list:
    per = {}
    for m in history:
        per.setdefault(m["epoch"], []).append(m[key])
    return [float(np.mean(per[e])) for e in sorted(per)]
