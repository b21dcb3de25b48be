"""Joint pre-training, direct application, fine-tuning and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CLASSIFICATION, REGRESSION, TASKS, EncodedDataset, SplitIndices
from .errors import ConfigError, ContextTooSmall, CorruptCheckpoint, EmptyCorpus
from .metarep import DEFAULT_K, DEFAULT_KINDS, build_meta_batch, input_dim
from .metric import KINDS, MetricSpec, MiConfig, metric_specs
from .model import (
    ScorerParams,
    batch_scores,
    head_indices,
    init_optimizer,
    init_params,
    loss_and_grad,
    optimizer_step,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"TMRPCKPT"


@dataclass
class TrainConfig:
    """Pre-training and fine-tuning hyperparameters.

    ``K`` and ``kinds`` left as None resolve to the task defaults
    (K=128 with manhattan/euclidean/braycurtis for classification, K=16
    with manhattan for regression).
    """

    task: str = CLASSIFICATION
    K: int | None = None
    kinds: tuple[str, ...] | None = None
    hidden_width: int = 256
    depth: int = 3
    dropout: float = 0.1
    batch_size: int = 1024
    pretrain_lr: float = 0.001
    pretrain_iters: int = 10_000
    finetune_lr: float = 0.01
    finetune_epochs: int = 30
    finetune_mode: str = "all"
    optimizer: str = "adam"
    seed: int = 0
    self_exclude: bool = True
    normalize_meta: bool = True
    eval_every: int = 100
    patience: int = 20
    mi_bins: int = 16
    dtype: str = "float32"
    threads: int | None = None

    def __post_init__(self):
        if isinstance(self.kinds, str):
            self.kinds = tuple(k.strip() for k in self.kinds.split(",") if k.strip())
        elif self.kinds is not None:
            self.kinds = tuple(self.kinds)
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.K is not None and self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.kinds is not None:
            if not self.kinds:
                raise ConfigError("at least one distance kind is required")
            bad = [k for k in self.kinds if k not in KINDS]
            if bad:
                raise ConfigError(f"unknown distance kind {bad[0]!r}; valid kinds: {', '.join(KINDS)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # a zero rate is accepted so that no-op runs can be expressed
        if self.pretrain_lr < 0 or self.finetune_lr < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.pretrain_iters < 0 or self.finetune_epochs < 0:
            raise ConfigError("iteration and epoch counts must be nonnegative")
        if self.finetune_mode not in ("all", "head-only"):
            raise ConfigError("finetune_mode must be 'all' or 'head-only'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.hidden_width < 1 or self.depth < 1:
            raise ConfigError("hidden_width and depth must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.mi_bins < 2:
            raise ConfigError("mi_bins must be >= 2")

    @property
    def k(self) -> int:
        return self.K if self.K is not None else DEFAULT_K[self.task]

    @property
    def kind_list(self) -> tuple[str, ...]:
        return self.kinds if self.kinds is not None else DEFAULT_KINDS[self.task]

    @property
    def input_dim(self) -> int:
        return input_dim(self.k, len(self.kind_list))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def resolved(self) -> "TrainConfig":
        return dataclasses.replace(self, K=self.k, kinds=self.kind_list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self.resolved())
        d["kinds"] = list(d["kinds"])
        return d

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build a config from string or typed values, on top of ``base``."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        current = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown configuration key {key!r}")
            current[key] = _coerce(key, raw)
        return cls(**current)


_INT_FIELDS = {"K", "hidden_width", "depth", "batch_size", "pretrain_iters", "finetune_epochs", "seed",
               "eval_every", "patience", "mi_bins", "threads"}
_FLOAT_FIELDS = {"dropout", "pretrain_lr", "finetune_lr"}
_BOOL_FIELDS = {"self_exclude", "normalize_meta"}


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in _INT_FIELDS:
            return None if text.lower() in ("", "none") else int(text)
        if key in _FLOAT_FIELDS:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    if key in _BOOL_FIELDS:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    return text


def read_config_file(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


@dataclass
class CorpusMember:
    dataset: EncodedDataset
    split: SplitIndices
    specs: list[MetricSpec]


@dataclass
class PretrainCorpus:
    members: list[CorpusMember]
    task: str

    def __post_init__(self):
        if not self.members:
            raise EmptyCorpus("pre-training corpus is empty")
        for m in self.members:
            if m.dataset.task != self.task:
                raise ConfigError(f"dataset {m.dataset.name!r} is {m.dataset.task}, corpus is {self.task}")

    def __len__(self):
        return len(self.members)


def make_member(dataset: EncodedDataset, split: SplitIndices, kinds: Sequence[str], mi_bins: int = 16) -> CorpusMember:
    """Attach MI-weighted metrics fitted on the training split."""
    tr = split.train
    specs = metric_specs(dataset.X[tr], dataset.Y[tr], dataset.task, kinds, MiConfig(bins=mi_bins))
    return CorpusMember(dataset, split, specs)


def _check_contexts(dataset: EncodedDataset, rows: np.ndarray, self_exclude: bool):
    need = 2 if self_exclude else 1
    if dataset.task == CLASSIFICATION:
        counts = np.bincount(dataset.Y[rows], minlength=dataset.n_classes)
        if counts.min() < need:
            c = int(np.argmin(counts))
            raise ContextTooSmall(
                f"{dataset.name or 'dataset'}: class {c} has {counts[c]} training members, need {need}"
            )
    elif len(rows) < need:
        raise ContextTooSmall(f"{dataset.name or 'dataset'}: too few training rows")


def training_meta(member: CorpusMember, cfg: TrainConfig, rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Meta-representations of training rows against the training split.

    Each row is excluded from its own neighborhood when ``self_exclude`` is
    on.  Returns (blocks, labels).
    """
    ds, train = member.dataset, member.split.train
    rows = train if rows is None else np.asarray(rows, dtype=np.int64)
    blocks = build_meta_batch(
        ds.X[rows], ds, member.specs, cfg.k, subset=train,
        exclude=rows if cfg.self_exclude else None,
        normalize=cfg.normalize_meta, dtype=cfg.np_dtype,
    )
    return blocks, ds.Y[rows]


def query_meta(member: CorpusMember, cfg: TrainConfig, X) -> np.ndarray:
    """Meta-representations of unseen rows against the training split."""
    return build_meta_batch(
        X, member.dataset, member.specs, cfg.k, subset=member.split.train,
        normalize=cfg.normalize_meta, dtype=cfg.np_dtype,
    )


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    datasets: list[int] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    stopped_at: int | None = None


def _validation_loss(params, cache, task) -> float:
    total, count = 0.0, 0
    for blocks, labels in cache:
        if len(labels) == 0:
            continue
        loss, _ = loss_and_grad(params, blocks, labels, task, need_grad=False)
        total += loss * len(labels)
        count += len(labels)
    return total / count if count else float("nan")


def pretrain(corpus: PretrainCorpus, cfg: TrainConfig, params: ScorerParams | None = None,
             history: TrainHistory | None = None) -> ScorerParams:
    """Jointly train one scorer over every dataset of the corpus.

    Each iteration draws a dataset uniformly, samples a mini-batch of its
    training rows without replacement and takes one optimizer step on the
    mean loss.  Training meta-representations are computed once up front.
    """
    if cfg.task != corpus.task:
        raise ConfigError(f"config task {cfg.task!r} does not match corpus task {corpus.task!r}")
    init_rng, pick_rng, drop_rng = _seeds(cfg.seed, 3)
    if params is None:
        params = init_params(cfg.input_dim, cfg.hidden_width, int(init_rng.integers(2**63)),
                             cfg.depth, cfg.dropout, cfg.np_dtype)
    elif params.input_dim != cfg.input_dim:
        raise ConfigError(f"scorer expects input_dim {params.input_dim}, config implies {cfg.input_dim}")

    train_cache, val_cache = [], []
    for m in corpus.members:
        _check_contexts(m.dataset, m.split.train, cfg.self_exclude)
        train_cache.append(training_meta(m, cfg))
        if cfg.patience > 0 and len(m.split.val):
            val_cache.append((query_meta(m, cfg, m.dataset.X[m.split.val]), m.dataset.Y[m.split.val]))

    state = init_optimizer(params, cfg.optimizer)
    best, stale = np.inf, 0
    for it in range(cfg.pretrain_iters):
        t = int(pick_rng.integers(len(corpus)))
        blocks, labels = train_cache[t]
        rows = pick_rng.choice(len(labels), size=min(cfg.batch_size, len(labels)), replace=False)
        loss, grads = loss_and_grad(params, blocks[rows], labels[rows], cfg.task, drop_rng)
        params, state = optimizer_step(params, grads, state, cfg.pretrain_lr)
        if history is not None:
            history.losses.append(loss)
            history.datasets.append(t)
        if cfg.patience > 0 and val_cache and (it + 1) % cfg.eval_every == 0:
            val = _validation_loss(params, val_cache, cfg.task)
            if history is not None:
                history.val_losses.append((it + 1, val))
            log.debug("iter %d train %.4f val %.4f", it + 1, loss, val)
            if not np.isfinite(best) or val < best - 1e-4 * abs(best):
                best, stale = val, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    if history is not None:
                        history.stopped_at = it + 1
                    log.info("early stop at iteration %d (val loss %.4f)", it + 1, best)
                    break
    return params


def predict_batch(params: ScorerParams, dataset: EncodedDataset, train_idx, specs: Sequence[MetricSpec],
                  cfg: TrainConfig, X) -> np.ndarray:
    """Direct predictions for query rows X using the training split as reference.

    Returns class indices, or regression values in original target units.
    """
    member = CorpusMember(dataset, SplitIndices(np.asarray(train_idx), np.array([], int), np.array([], int)), list(specs))
    blocks = query_meta(member, cfg, X)
    scores = batch_scores(params, blocks)
    if dataset.task == CLASSIFICATION:
        return np.argmax(scores, axis=1)
    out = scores[:, 0].astype(np.float64)
    return dataset.stats.destandardize(out) if dataset.stats is not None else out


def predict_direct(params: ScorerParams, dataset: EncodedDataset, train_idx, specs: Sequence[MetricSpec],
                   cfg: TrainConfig, query):
    """Predict one unseen row without touching the parameters."""
    pred = predict_batch(params, dataset, train_idx, specs, cfg, np.asarray(query, dtype=np.float64)[None, :])[0]
    return int(pred) if dataset.task == CLASSIFICATION else float(pred)


def finetune(params: ScorerParams, member: CorpusMember, cfg: TrainConfig, mode: str | None = None,
             history: TrainHistory | None = None) -> ScorerParams:
    """Continue training on one downstream training split.

    ``mode`` is ``"all"`` (every tensor) or ``"head-only"`` (final linear
    layer); the parameters after the last epoch are returned.
    """
    mode = mode or cfg.finetune_mode
    if mode not in ("all", "head-only"):
        raise ConfigError(f"unknown fine-tune mode {mode!r}")
    if cfg.finetune_epochs == 0:
        return params.copy()
    _check_contexts(member.dataset, member.split.train, cfg.self_exclude)
    params = params.astype(cfg.np_dtype)
    blocks, labels = training_meta(member, cfg)
    order_rng, drop_rng = _seeds(cfg.seed + 1, 2)
    trainable = head_indices(params) if mode == "head-only" else None
    state = init_optimizer(params, cfg.optimizer)
    n = len(labels)
    for _ in range(cfg.finetune_epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(params, blocks[rows], labels[rows], cfg.task, drop_rng)
            params, state = optimizer_step(params, grads, state, cfg.finetune_lr, trainable)
            if history is not None:
                history.losses.append(loss)
    return params


def training_loss(params: ScorerParams, member: CorpusMember, cfg: TrainConfig) -> float:
    """Dropout-free mean loss over the training split (self-excluded meta-reps)."""
    blocks, labels = training_meta(member, cfg)
    return loss_and_grad(params, blocks, labels, cfg.task, need_grad=False)[0]


@dataclass
class Checkpoint:
    params: ScorerParams
    task: str
    K: int
    kinds: tuple[str, ...]
    normalize_meta: bool = True
    specs: list[MetricSpec] = field(default_factory=list)
    header: dict = field(default_factory=dict)


def _header(params: ScorerParams, cfg: TrainConfig, specs) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "task": cfg.task,
        "K": cfg.k,
        "kinds": list(cfg.kind_list),
        "input_dim": params.input_dim,
        "hidden_width": params.hidden_width,
        "depth": params.depth,
        "dropout": params.dropout,
        "normalize_meta": cfg.normalize_meta,
        "shapes": [list(t.shape) for t in params.tensors()],
        "metrics": [s.to_dict() for s in (specs or [])],
    }


def _expected_shapes(h: dict) -> list[list[int]]:
    widths = [h["input_dim"]] + [h["hidden_width"]] * h["depth"] + [1]
    shapes = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        shapes.extend([[fan_out, fan_in], [fan_out]])
    return shapes


def save_checkpoint(params: ScorerParams, cfg: TrainConfig, path, specs: Sequence[MetricSpec] | None = None) -> None:
    """Write magic, header length, JSON header, then little-endian float32 tensors."""
    if params.input_dim != cfg.input_dim:
        raise ConfigError(f"scorer input_dim {params.input_dim} does not match K/kinds ({cfg.input_dim})")
    header = json.dumps(_header(params, cfg, specs), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in params.tensors())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic, not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(
            f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        shapes = _expected_shapes(header)
        declared = header.get("shapes", shapes)
        if [list(s) for s in declared] != shapes:
            raise CorruptCheckpoint(f"{path}: tensor shapes do not match the header dimensions")
        if header["input_dim"] != input_dim(header["K"], len(header["kinds"])):
            raise CorruptCheckpoint(f"{path}: input_dim does not match K and kinds")
        task = header["task"]
        dropout = float(header["dropout"])
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed header ({exc})") from None
    if task not in TASKS:
        raise CorruptCheckpoint(f"{path}: unknown task {task!r}")

    data = blob[start + hlen:]
    sizes = [int(np.prod(s)) for s in shapes]
    if len(data) != 4 * sum(sizes):
        raise CorruptCheckpoint(f"{path}: expected {4 * sum(sizes)} bytes of tensor data, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4")
    tensors, offset = [], 0
    for shape, size in zip(shapes, sizes):
        tensors.append(flat[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    params = ScorerParams.from_tensors(tensors, dropout)
    specs = [MetricSpec.from_dict(m) for m in header.get("metrics", [])]
    return Checkpoint(params, task, int(header["K"]), tuple(header["kinds"]),
                      bool(header.get("normalize_meta", True)), specs, header)


def config_for_checkpoint(ckpt: Checkpoint, base: TrainConfig | None = None) -> TrainConfig:
    """A TrainConfig whose task, K, kinds and scorer shape follow the checkpoint."""
    base = base or TrainConfig(task=ckpt.task)
    return dataclasses.replace(
        base, task=ckpt.task, K=ckpt.K, kinds=ckpt.kinds, hidden_width=ckpt.params.hidden_width,
        depth=ckpt.params.depth, dropout=ckpt.params.dropout, normalize_meta=ckpt.normalize_meta,
    )
