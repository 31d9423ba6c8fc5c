"""Run configuration, training loop and evaluation runs.

A run is fully described by a :class:`RunConfig` (stored as JSON next to the
checkpoints). Training is deterministic given the config: sample order,
augmentation and projection noise all come from generators seeded by
``(seed, epoch)`` or ``(seed, step)``, so a resumed run continues exactly
where an uninterrupted one would be.
"""
from __future__ import annotations

import json
import logging
import math
import queue
import shutil
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .diff import OptimizerState, Schedule, adamw_step, load_checkpoint, load_pretrained, lr_at
from .diff.checkpoint import read_checkpoint, save_checkpoint
from .drr import ProjectionConfig, synthesize_drr
from .encoder import PRESETS, ModelConfig
from .metrics import MetricsReport, evaluate, summarize
from .network import forward, infer, init_params
from .objective import total_loss
from .phantoms import AugmentParams, Manifest, augment, load_manifest

log = logging.getLogger(__name__)

PRESET_FIELDS = ("embed_dim", "depths", "heads")


class ConfigError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass
class OptimConfig:
    lr: float = 3e-5
    weight_decay: float = 0.5
    epochs: int = 250
    warmup_epochs: float = 20
    batch_size: int = 1
    max_steps: int | None = None  # stop early (smoke tests); the schedule still spans ``epochs``


@dataclass
class RunConfig:
    preset: str = "tiny"  # tiny|small|base|large|custom
    model: dict = field(default_factory=dict)  # ModelConfig field overrides
    projection: dict = field(default_factory=dict)  # ProjectionConfig fields
    augment: dict = field(default_factory=dict)  # AugmentParams fields
    optim: OptimConfig = field(default_factory=OptimConfig)
    disable_transformer_skips: bool = False
    disable_conv_skips: bool = False
    disable_cross_loss: bool = False
    load_pretrained: str | None = None
    disable_augmentation: bool = False
    kl_reduction: str = "mean"
    train_split: str = "train"  # or "all"
    val_split: str = "val"
    prefetch: int = 2  # samples prepared ahead of the optimizer; 0 = inline
    checkpoint_every: int = 1  # epochs; the final step is always saved
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        self.model = dict(self.model)
        self.projection = dict(self.projection)
        self.augment = dict(self.augment)

    # -- derived configs ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        """The network config with ablation flags applied.

        A named preset fixes embed_dim, depths and heads; other fields
        (volume dims, classes, window, ...) may be overridden.
        """
        overrides = dict(self.model)
        for key in ("depths", "heads", "volume_dims"):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        if self.preset == "custom":
            base = ModelConfig()
        elif self.preset in PRESETS:
            base = PRESETS[self.preset]
            for key in PRESET_FIELDS:
                if key in overrides and overrides[key] != getattr(base, key):
                    raise ConfigError(f"preset {self.preset!r} fixes {key}={getattr(base, key)}, "
                                      f"config asks for {overrides[key]}")
        else:
            raise ConfigError(f"unknown preset {self.preset!r}")
        known = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"unknown model fields: {unknown}")
        if self.disable_transformer_skips:
            overrides["transformer_skip"] = False
        if self.disable_conv_skips:
            overrides["conv_skip"] = False
        try:
            return replace(base, **overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def projection_config(self) -> ProjectionConfig:
        doc = dict(self.projection)
        doc.setdefault("n_views", self.model_config().n_views)
        if doc.get("attenuation") is not None:
            doc["attenuation"] = {int(k): float(v) for k, v in doc["attenuation"].items()}
        return ProjectionConfig(**doc)

    def augment_params(self) -> AugmentParams:
        p = AugmentParams(**self.augment)
        return replace(p, enabled=False) if self.disable_augmentation else p

    def schedule(self) -> Schedule:
        return Schedule(self.optim.lr, self.optim.warmup_epochs, self.optim.epochs)

    @property
    def cross_weight(self) -> float:
        return 0.0 if self.disable_cross_loss else 1.0

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def validate(self) -> "RunConfig":
        """Build every derived config once so errors surface before training."""
        if min(self.optim.batch_size, self.optim.epochs, self.checkpoint_every) < 1:
            raise ConfigError("batch_size, epochs and checkpoint_every must be positive")
        if self.kl_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown kl_reduction {self.kl_reduction!r}")
        self.model_config()
        try:
            self.projection_config()
            self.augment_params()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return self


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def set_field(cfg: RunConfig, dotted: str, value) -> None:
    """Override one field by dotted path, e.g. ``optim.lr`` or ``model.window``."""
    head, _, rest = dotted.partition(".")
    if not hasattr(cfg, head):
        raise ConfigError(f"unknown config key {head!r}")
    if not rest:
        setattr(cfg, head, value)
        return
    target = getattr(cfg, head)
    if isinstance(target, dict):
        target[rest] = value
    elif hasattr(target, rest):
        setattr(target, rest, value)
    else:
        raise ConfigError(f"unknown config key {dotted!r}")


# -- data ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    step: int
    name: str
    cor: np.ndarray
    sag: np.ndarray
    volume: object


def _sample_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 1]).permutation(n)


def _prepare(manifest: Manifest, sample: dict, step: int, cfg: RunConfig,
             aug: AugmentParams, proj: ProjectionConfig) -> TrainSample:
    vol = manifest.volume(sample)
    if aug.enabled:
        vol = augment(vol, aug, np.random.default_rng([cfg.seed, step, 2]))
        p = replace(proj, seed=int(np.random.default_rng([cfg.seed, step, 3]).integers(2 ** 31)))
        ps = synthesize_drr(vol, p)
    else:
        ps = manifest.projections(sample)
    return TrainSample(step, sample["volume"], ps.stack("coronal"), ps.stack("sagittal"), vol)


class _Prefetcher:
    """Prepares samples on a worker thread, consumed strictly in step order."""

    def __init__(self, make, steps: range, depth: int):
        self._make, self._steps = make, steps
        self._q: queue.Queue = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        for s in self._steps:
            if self._stop.is_set():
                return
            try:
                item = self._make(s)
            except Exception as e:  # handed to the consumer
                item = e
            while not self._stop.is_set():
                try:
                    self._q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def get(self, step: int) -> TrainSample:
        item = self._q.get()
        if isinstance(item, Exception):
            raise item
        assert item.step == step
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    steps: int
    last_checkpoint: Path | None
    best_checkpoint: Path | None
    best_val_dice: float | None
    losses: list[float]


def _log_record(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def _train_samples(manifest: Manifest, split: str) -> list[dict]:
    if split == "all":
        return list(manifest.samples)
    return manifest.split(split)


def validate_model(params, model_cfg: ModelConfig, manifest: Manifest,
                   samples: list[dict]) -> dict:
    reports = []
    for s in samples:
        gt = manifest.volume(s)
        pred = infer(manifest.projections(s), params, model_cfg, gt.spacing, gt.class_names)
        reports.append(evaluate(pred, gt))
    return summarize(reports)


def train(cfg: RunConfig, manifest, resume: str | Path | None = None) -> TrainResult:
    """Optimise the network on the manifest's training split.

    Writes ``config.json``, ``train.jsonl`` (one record per step plus one
    per epoch-end validation) and ``checkpoints/epoch_XXXX.ckv1`` under
    ``cfg.out_dir``; ``best.ckv1`` tracks the best validation Dice.
    """
    cfg.validate()
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    model_cfg = cfg.model_config()
    proj = cfg.projection_config()
    aug = cfg.augment_params()
    samples = _train_samples(manifest, cfg.train_split)
    if not samples:
        raise ConfigError(f"split {cfg.train_split!r} of {manifest.root} is empty")
    first = manifest.volume(samples[0])
    if first.dims != model_cfg.volume_dims:
        raise ConfigError(f"dataset volumes are {first.dims}, model expects {model_cfg.volume_dims}")
    if first.num_classes != model_cfg.num_classes:
        raise ConfigError(f"dataset has {first.num_classes} classes, model expects "
                          f"{model_cfg.num_classes}")
    val_samples = manifest.split(cfg.val_split) if cfg.val_split else []

    out = Path(cfg.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    params = init_params(model_cfg, cfg.seed)
    state = OptimizerState(weight_decay=cfg.optim.weight_decay, schedule=cfg.schedule())
    if resume is not None:
        state = load_checkpoint(resume, params)
        if state is None:
            raise ConfigError(f"{resume} holds no optimizer state")
    elif cfg.load_pretrained:
        load_pretrained(cfg.load_pretrained, params)

    batch = cfg.optim.batch_size
    per_epoch = math.ceil(len(samples) / batch)
    total = cfg.optim.epochs * per_epoch
    if cfg.optim.max_steps is not None:
        total = min(total, cfg.optim.max_steps)
    start = state.step
    extra = {"run_config": cfg.to_dict()}

    def make(i: int) -> TrainSample:
        # sample i of the flattened (epoch, position) sequence
        epoch, pos = divmod(i, per_epoch * batch)
        order = _sample_order(len(samples), cfg.seed, epoch)
        return _prepare(manifest, samples[order[pos % len(samples)]], i, cfg, aug, proj)

    best_dice, best_path, last_path = None, None, None
    if resume is not None:
        _, header = read_checkpoint(resume)
        best_dice = header.get("extra", {}).get("best_val_dice")
    losses = []
    mode = "a" if resume is not None else "w"
    items = range(start * batch, total * batch)
    feeder = _Prefetcher(make, items, cfg.prefetch) if cfg.prefetch > 0 else None
    try:
        with open(out / "train.jsonl", mode) as fh:
            for step in range(start, total):
                epoch_f = (step + 1) / per_epoch
                lr = lr_at(epoch_f, state.schedule)
                for p in params.values():
                    p.zero_grad()
                parts = []
                for j in range(batch):
                    i = step * batch + j
                    s = feeder.get(i) if feeder else make(i)
                    try:
                        res = forward((s.cor, s.sag), params, model_cfg)
                        br = total_loss(res.pair.p, res.pair.q, s.volume, cfg.kl_reduction,
                                        cfg.cross_weight)
                    except FloatingPointError as e:
                        _log_record(fh, {"step": step, "error": str(e)})
                        raise NonFiniteLoss(step, str(e)) from None
                    if not math.isfinite(br.total):
                        _log_record(fh, {"step": step, "error": "non-finite loss"})
                        raise NonFiniteLoss(step, f"total={br.total}")
                    br.graph.backward(np.full((), 1.0 / batch, dtype=br.graph.dtype))
                    parts.append(br.as_dict())
                loss = {k: float(np.mean([d[k] for d in parts])) for k in parts[0]}
                adamw_step(params, state, lr)
                losses.append(loss["total"])
                _log_record(fh, {"step": step, "epoch": step // per_epoch, "lr": lr, "loss": loss})

                epoch = step // per_epoch
                epoch_done = (step + 1) % per_epoch == 0
                if (epoch_done and (epoch + 1) % cfg.checkpoint_every == 0) or step + 1 == total:
                    record = {"step": step, "epoch": epoch, "checkpoint": None}
                    if val_samples:
                        val = validate_model(params, model_cfg, manifest, val_samples)
                        record["val"] = val
                        d = val["mean_dice"]
                        if d is not None and (best_dice is None or d > best_dice):
                            best_dice = d
                            record["best"] = True
                    extra["best_val_dice"] = best_dice
                    last_path = ckpt_dir / f"epoch_{epoch:04d}.ckv1"
                    save_checkpoint(last_path, params, state, extra)
                    record["checkpoint"] = last_path.name
                    if record.get("best"):
                        best_path = out / "best.ckv1"
                        shutil.copyfile(last_path, best_path)
                    _log_record(fh, record)
    finally:
        if feeder:
            feeder.close()
    return TrainResult(out, total - start, last_path, best_path, best_dice, losses)


# -- evaluation -------------------------------------------------------------------------

def load_model(checkpoint) -> tuple[dict, ModelConfig, RunConfig]:
    """Rebuild the network stored in a checkpoint written by :func:`train`."""
    _, header = read_checkpoint(checkpoint)
    doc = header.get("extra", {}).get("run_config")
    if doc is None:
        raise ConfigError(f"{checkpoint} carries no run config")
    cfg = RunConfig.from_dict(doc)
    model_cfg = cfg.model_config()
    params = init_params(model_cfg, cfg.seed)
    load_checkpoint(checkpoint, params)
    return params, model_cfg, cfg


@dataclass
class RunReport:
    split: str
    rows: list[dict]
    aggregate: dict

    def to_dict(self) -> dict:
        return {"split": self.split, "aggregate": self.aggregate, "samples": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_run(checkpoint, manifest, split: str = "test") -> RunReport:
    """Infer every sample of ``split`` and score it against its ground truth."""
    params, model_cfg, _ = load_model(checkpoint)
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    samples = _train_samples(manifest, split)
    rows, reports = [], []
    for s in samples:
        gt = manifest.volume(s)
        pred = infer(manifest.projections(s), params, model_cfg, gt.spacing, gt.class_names)
        rep = evaluate(pred, gt)
        reports.append(rep)
        rows.append({"sample": s["volume"], "seed": s["seed"], **_row(rep)})
    return RunReport(split, rows, summarize(reports))


def _row(rep: MetricsReport) -> dict:
    return {"mean_dice": rep.mean_dice, "mean_hd95": rep.mean_hd95,
            "mean_l_error": rep.mean_l_error, "id_rate": rep.id_rate}
