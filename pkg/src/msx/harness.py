"""Training loops, multi-seed orchestration, ablation grid, and reporting.

Runs are deterministic under (seed, deterministic=true): one Generator per
run drives the data split, parameter init, and batch shuffles, and reports
omit wall-clock timing so repeated runs serialize byte-identically.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .data import ClsSample, DataError, SegSample, apply_mask, save_pgm
from .fusion import FusionClassifier, FusionConfig, bce_loss, parameter_count
from .metrics import METRIC_NAMES, MetricSuite, metric_suite, tally
from .nn import collect_state, load_state, trainable
from .tensor import Tensor
from .transunet import TransUNet, UNetConfig, seg_loss


class ConfigError(Exception):
    """Malformed config/grid file or invalid option combination."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""


class ReportError(Exception):
    """A result is missing fields the report requires."""


# -- optimizer ---------------------------------------------------------------


def adam_step(params, grads, m, v, t: int, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> None:
    """One in-place Adam update with bias correction over aligned lists."""
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} vs param {p.data.shape}")
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * (g * g)
        p.data -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.m, self.v, self.t, self.lr, self.b1, self.b2, self.eps)


# -- configuration -------------------------------------------------------------

PROFILE_DEFAULTS = {
    # lr, batch_size, epochs
    "paper": (1e-5, 64, 30),
    "desk": (1e-3, 8, 100),
}
FUSION_WIDTHS = {"desk": (16, 8), "paper": (64, 32)}
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


@dataclass
class TrainConfig:
    task: str = "cls"
    profile: str = "desk"
    lr: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    use_masks: bool = False
    use_multiscale: bool = True
    use_transformer: bool = True
    blocks: tuple[int, ...] = (2, 3, 4)
    merge23: bool = True
    deterministic: bool = True
    dice_weight: float = 0.0
    val_fraction: float = 0.2
    early_stop_value: float | None = None
    frozen_backbone: bool = False

    def __post_init__(self):
        if self.task not in ("seg", "cls"):
            raise ConfigError(f"task must be seg or cls, got {self.task!r}")
        if self.profile not in PROFILE_DEFAULTS:
            raise ConfigError(f"profile must be desk or paper, got {self.profile!r}")
        lr, batch, epochs = PROFILE_DEFAULTS[self.profile]
        self.lr = lr if self.lr is None else self.lr
        self.batch_size = batch if self.batch_size is None else self.batch_size
        self.epochs = epochs if self.epochs is None else self.epochs
        self.blocks = tuple(sorted(set(int(b) for b in self.blocks)))
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if not self.blocks:
            raise ConfigError("at least one block must be selected")
        if 4 not in self.blocks:
            raise ConfigError("block 4 must always be selected")
        if any(b not in (2, 3, 4) for b in self.blocks):
            raise ConfigError(f"blocks must be a subset of {{2,3,4}}, got {self.blocks}")
        if not 0.0 < self.val_fraction < 0.9:
            raise ConfigError("val_fraction must be in (0, 0.9)")

    @property
    def metric_name(self) -> str:
        return "dice" if self.task == "seg" else "accuracy"

    def effective_blocks(self) -> tuple[tuple[int, ...], bool]:
        """(blocks, merge23) after applying the multiscale switch."""
        if not self.use_multiscale:
            return (4,), False
        merge = self.merge23 and {2, 3} <= set(self.blocks)
        return self.blocks, merge


_CONFIG_KEYS: dict[str, Callable[[str], object]] = {}


def _key(name, conv):
    _CONFIG_KEYS[name] = conv


def _to_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


_key("task", str)
_key("profile", str)
_key("lr", float)
_key("batch_size", int)
_key("epochs", int)
_key("seeds", _to_ints)
_key("use_masks", _to_bool)
_key("use_multiscale", _to_bool)
_key("use_transformer", _to_bool)
_key("blocks", _to_ints)
_key("merge23", _to_bool)
_key("deterministic", _to_bool)
_key("dice_weight", float)
_key("val_fraction", float)
_key("early_stop_value", float)
_key("frozen_backbone", _to_bool)
# paths handled by the CLI layer
_key("train_manifest", str)
_key("test_manifest", str)
_key("masks_dir", str)
_key("out_dir", str)
_key("threshold", float)

_PATH_KEYS = ("train_manifest", "test_manifest", "masks_dir", "out_dir", "threshold")


def parse_config_text(text: str, source: str = "<config>") -> tuple[TrainConfig, dict]:
    """Parse line-oriented ``key = value`` text; unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"{source} line {lineno}: bad value for {key}: {exc}") from None
    paths = {k: values.pop(k) for k in list(values) if k in _PATH_KEYS}
    try:
        cfg = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg, paths


# -- models ---------------------------------------------------------------------


class ClsPipeline:
    """Backbone feature extraction feeding the fusion classifier."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator, dtype=np.float32):
        bb_cfg = BackboneConfig.desk() if cfg.profile == "desk" else BackboneConfig.paper()
        r4, r23 = FUSION_WIDTHS[cfg.profile]
        c2, c3, c4 = bb_cfg.block_channels
        blocks, merge = cfg.effective_blocks()
        self.backbone = Backbone(bb_cfg, rng, dtype=dtype)
        if cfg.frozen_backbone:
            self.backbone.set_frozen(True)
        self.fusion = FusionClassifier(
            FusionConfig(c2, c3, c4, r4=r4, r23=r23),
            rng,
            blocks=blocks,
            merge23=merge,
            use_transformer=cfg.use_transformer,
            dtype=dtype,
        )

    def forward(self, images: Tensor, training: bool = False) -> Tensor:
        feats = self.backbone.forward(images, training)
        return self.fusion.classify(feats.block2, feats.block3, feats.block4)

    def named_params(self, prefix: str = ""):
        yield from self.backbone.named_params(prefix + ".backbone")
        yield from self.fusion.named_params(prefix + ".fusion")

    def named_state(self, prefix: str = ""):
        yield from self.backbone.named_state(prefix + ".backbone")
        yield from self.fusion.named_state(prefix + ".fusion")

    def param_groups(self) -> dict[str, list[Tensor]]:
        groups = self.fusion.param_groups()
        groups["backbone"] = self.backbone.param_groups()["backbone"]
        return groups


def build_model(cfg: TrainConfig, rng: np.random.Generator):
    if cfg.task == "seg":
        ucfg = UNetConfig.desk() if cfg.profile == "desk" else UNetConfig.paper()
        return TransUNet(ucfg, rng)
    return ClsPipeline(cfg, rng)


# -- evaluation -------------------------------------------------------------------

EVAL_BATCH = 32


def _stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def evaluate_seg(model: TransUNet, samples: Sequence[SegSample]) -> tuple[float, MetricSuite]:
    """Mean pixel BCE loss plus metric suite over all pixels at threshold 0.5."""
    total_loss = 0.0
    total_pixels = 0
    counts = None
    with T.no_grad():
        for i in range(0, len(samples), EVAL_BATCH):
            chunk = samples[i : i + EVAL_BATCH]
            imgs = Tensor(_stack_images(chunk))
            masks = np.stack([s.mask for s in chunk]).astype(np.float32)
            logits = model.forward(imgs, training=False)
            loss = T.bce_with_logits(logits, masks)
            total_loss += loss.item() * masks.size
            total_pixels += masks.size
            pred = (logits.data >= 0.0).astype(np.int8)  # sigmoid(z) >= 0.5 iff z >= 0
            c = tally(pred, masks.astype(np.int8))
            counts = c if counts is None else counts + c
    return total_loss / total_pixels, metric_suite(counts)


def evaluate_cls(model: ClsPipeline, samples: Sequence[ClsSample]) -> tuple[float, MetricSuite]:
    total_loss = 0.0
    counts = None
    with T.no_grad():
        for i in range(0, len(samples), EVAL_BATCH):
            chunk = samples[i : i + EVAL_BATCH]
            imgs = Tensor(_stack_images(chunk))
            labels = np.array([s.label for s in chunk], dtype=np.float32)
            probs = model.forward(imgs, training=False)
            total_loss += bce_loss(probs, labels).item() * len(chunk)
            c = tally((probs.data >= 0.5).astype(np.int8), labels.astype(np.int8))
            counts = c if counts is None else counts + c
    return total_loss / len(samples), metric_suite(counts)


# -- training ---------------------------------------------------------------------


@dataclass
class RunResult:
    task: str
    profile: str
    seed: int
    epochs_run: int
    best_epoch: int
    train_losses: list[float]
    val_losses: list[float]
    val_metrics: list[float]
    metric_name: str
    eval_metrics: dict[str, float]
    confusion: tuple[int, int, int, int]
    param_counts: dict[str, int]
    sec_per_image: float
    state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


@dataclass
class MultiSeedResult:
    config: TrainConfig
    runs: list[RunResult]

    def metric_values(self, name: str) -> list[float]:
        return [r.eval_metrics[name] for r in self.runs]


def masked_cls_samples(samples: Sequence[ClsSample], masks: Sequence[np.ndarray]) -> list[ClsSample]:
    if len(samples) != len(masks):
        raise DataError(f"{len(samples)} samples vs {len(masks)} masks")
    out = []
    for s, m in zip(samples, masks):
        out.append(ClsSample(apply_mask(s.image, m).astype(np.float32), s.label, s.source + "+mask"))
    return out


def train_one(
    cfg: TrainConfig,
    seed: int,
    train_samples: Sequence,
    test_samples: Sequence | None = None,
    backbone_state: dict[str, np.ndarray] | None = None,
) -> RunResult:
    """One seeded training run; returns history, metrics, and final weights.

    ``backbone_state`` installs pretrained feature-extractor weights before
    training (classification only); with ``cfg.frozen_backbone`` they stay
    untouched and only the fusion stage learns.
    """
    rng = np.random.default_rng(seed)
    n = len(train_samples)
    order = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.val_fraction)))
    val_set = [train_samples[i] for i in order[:n_val]]
    tr_idx = order[n_val:]
    model = build_model(cfg, rng)
    if backbone_state is not None:
        if cfg.task != "cls":
            raise ConfigError("backbone_state only applies to classification runs")
        from .backbone import load_freeze

        load_freeze(model.backbone, backbone_state, cfg.frozen_backbone)
    params = trainable(model)
    opt = Adam(params, cfg.lr)
    evaluate = evaluate_seg if cfg.task == "seg" else evaluate_cls

    images = _stack_images(train_samples)
    if cfg.task == "seg":
        targets = np.stack([s.mask for s in train_samples]).astype(np.float32)
    else:
        targets = np.array([s.label for s in train_samples], dtype=np.float32)

    train_losses: list[float] = []
    val_losses: list[float] = []
    val_metrics: list[float] = []
    best_key = (-np.inf, -np.inf)  # maximize val metric, tie-break on lower loss
    best_epoch = 0
    best_state = collect_state(model)
    train_time = 0.0
    images_seen = 0
    epochs_run = 0

    for epoch in range(cfg.epochs):
        perm = rng.permutation(tr_idx)
        epoch_loss = 0.0
        t0 = time.perf_counter()
        for i in range(0, len(perm), cfg.batch_size):
            bidx = perm[i : i + cfg.batch_size]
            xb = Tensor(images[bidx])
            if cfg.task == "seg":
                loss = seg_loss(model.forward(xb, training=True), targets[bidx], cfg.dice_weight)
            else:
                loss = bce_loss(model.forward(xb, training=True), targets[bidx])
            lv = loss.item()
            if not np.isfinite(lv):
                raise DivergenceError(
                    f"non-finite loss at seed {seed}, epoch {epoch + 1}, batch {i // cfg.batch_size}"
                )
            epoch_loss += lv * len(bidx)
            opt.zero_grad()
            loss.backward()
            opt.step()
        train_time += time.perf_counter() - t0
        images_seen += len(perm)
        epochs_run = epoch + 1
        train_losses.append(epoch_loss / len(perm))
        vl, suite = evaluate(model, val_set)
        val_losses.append(vl)
        metric = getattr(suite, cfg.metric_name)
        val_metrics.append(metric)
        key = (metric, -vl)
        if key > best_key:
            best_key = key
            best_epoch = epochs_run
            best_state = collect_state(model)
        if cfg.early_stop_value is not None and metric >= cfg.early_stop_value:
            break

    load_state(model, best_state)
    eval_set = test_samples if test_samples else val_set
    _, final_suite = evaluate(model, eval_set)
    pred_counts = _final_confusion(model, eval_set, cfg)
    return RunResult(
        task=cfg.task,
        profile=cfg.profile,
        seed=seed,
        epochs_run=epochs_run,
        best_epoch=best_epoch,
        train_losses=train_losses,
        val_losses=val_losses,
        val_metrics=val_metrics,
        metric_name=cfg.metric_name,
        eval_metrics=final_suite.as_dict(),
        confusion=pred_counts,
        param_counts=parameter_count(model.param_groups()),
        sec_per_image=train_time / max(1, images_seen),
        state=best_state,
    )


def _final_confusion(model, samples, cfg) -> tuple[int, int, int, int]:
    counts = None
    with T.no_grad():
        for i in range(0, len(samples), EVAL_BATCH):
            chunk = samples[i : i + EVAL_BATCH]
            imgs = Tensor(_stack_images(chunk))
            if cfg.task == "seg":
                truth = np.stack([s.mask for s in chunk]).astype(np.int8)
                pred = (model.forward(imgs, training=False).data >= 0.0).astype(np.int8)
            else:
                truth = np.array([s.label for s in chunk], dtype=np.int8)
                pred = (model.forward(imgs, training=False).data >= 0.5).astype(np.int8)
            c = tally(pred, truth)
            counts = c if counts is None else counts + c
    return (counts.tp, counts.tn, counts.fp, counts.fn)


def run_seeds(
    cfg: TrainConfig,
    train_samples: Sequence,
    test_samples: Sequence | None = None,
    backbone_state: dict[str, np.ndarray] | None = None,
) -> MultiSeedResult:
    runs = [
        train_one(cfg, seed, train_samples, test_samples, backbone_state) for seed in cfg.seeds
    ]
    return MultiSeedResult(cfg, runs)


def extract_backbone_state(run: RunResult) -> dict[str, np.ndarray]:
    """Pull the feature-extractor weights out of a classification run."""
    prefix = "backbone."
    state = {k[len(prefix) :]: v for k, v in run.state.items() if k.startswith(prefix)}
    if not state:
        raise DataError("run holds no backbone tensors")
    return state


# -- two-stage pipeline --------------------------------------------------------------


def pipeline_predict_masks(
    seg_model: TransUNet,
    samples: Sequence[ClsSample],
    threshold: float = 0.5,
    out_dir=None,
) -> tuple[list[ClsSample], list[np.ndarray]]:
    """Replace every image with its masked version using predicted lung masks."""
    side = seg_model.cfg.input_side
    masked: list[ClsSample] = []
    masks: list[np.ndarray] = []
    for i in range(0, len(samples), EVAL_BATCH):
        chunk = samples[i : i + EVAL_BATCH]
        for s in chunk:
            if s.image.shape[-1] != side or s.image.shape[-2] != side:
                raise DataError(
                    f"profile mismatch: model expects {side}px, sample {s.source} is {s.image.shape}"
                )
        imgs = Tensor(_stack_images(chunk))
        with T.no_grad():
            logits = seg_model.forward(imgs, training=False)
        probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
        pred = (probs >= threshold).astype(np.float32)
        for j, s in enumerate(chunk):
            m = pred[j]
            masks.append(m)
            masked.append(
                ClsSample(apply_mask(s.image, m).astype(np.float32), s.label, s.source + "+predmask")
            )
    if out_dir is not None:
        out = Path(out_dir)
        for i, m in enumerate(masks):
            save_pgm(out / f"mask_{i:05d}.pgm", m)
    return masked, masks


# -- ablation --------------------------------------------------------------------


@dataclass
class AblateCell:
    name: str
    config: TrainConfig


@dataclass
class AblateRow:
    name: str
    error: str | None
    result: MultiSeedResult | None

    def mean_metric(self, name: str) -> float:
        return float(np.mean(self.result.metric_values(name)))


def ablate(
    cells: Sequence[AblateCell],
    train_samples: Sequence,
    test_samples: Sequence | None,
    masks: Sequence[np.ndarray] | None = None,
) -> list[AblateRow]:
    """Train every grid cell; failures are contained, other cells continue."""
    rows = []
    for cell in cells:
        try:
            tr = train_samples
            te = test_samples
            if cell.config.use_masks:
                if masks is None:
                    raise DataError(f"cell {cell.name}: use_masks set but no masks supplied")
                tr = masked_cls_samples(train_samples, masks[: len(train_samples)])
                if test_samples:
                    te = masked_cls_samples(test_samples, masks[len(train_samples) :])
            rows.append(AblateRow(cell.name, None, run_seeds(cell.config, tr, te)))
        except (DivergenceError, DataError, ConfigError) as exc:
            rows.append(AblateRow(cell.name, f"{type(exc).__name__}: {exc}", None))
    return rows


def ablate_table(rows: Sequence[AblateRow]) -> str:
    """Fixed-width summary table, one row per grid cell."""
    header = (
        f"{'cell':<16} {'accuracy':>9} {'precision':>10} {'recall':>8} "
        f"{'f1':>8} {'params':>10} {'s/img':>9}"
    )
    lines = [header, "-" * len(header)]
    for row in rows:
        if row.error is not None:
            lines.append(f"{row.name:<16} ERROR {row.error}")
            continue
        m = {k: row.mean_metric(k) for k in ("accuracy", "precision", "recall", "f1")}
        params = row.result.runs[0].param_counts["total"]
        if row.result.config.deterministic:
            timing = "-"
        else:
            timing = f"{np.mean([r.sec_per_image for r in row.result.runs]):.4f}"
        lines.append(
            f"{row.name:<16} {m['accuracy']:>9.4f} {m['precision']:>10.4f} "
            f"{m['recall']:>8.4f} {m['f1']:>8.4f} {params:>10d} {timing:>9}"
        )
    return "\n".join(lines) + "\n"


# -- reporting --------------------------------------------------------------------


def format_mean_std(values: Sequence[float], percent: bool = True) -> str:
    arr = np.asarray(values, dtype=np.float64)
    mean = arr.mean()
    std = arr.std()  # population std: a single seed reports 0
    if percent:
        return f"{mean * 100:.1f}%±{std * 100:.1f}"
    return f"{mean:.4f}±{std:.4f}"


def report_lines(result: MultiSeedResult) -> list[str]:
    """Line-oriented key=value report with stable field ordering."""
    cfg = result.config
    if not result.runs:
        raise ReportError("no completed runs to report")
    lines = [
        "msx report v1",
        f"task = {cfg.task}",
        f"profile = {cfg.profile}",
        f"deterministic = {str(cfg.deterministic).lower()}",
        f"seeds = {','.join(str(s) for s in cfg.seeds)}",
    ]
    counts = result.runs[0].param_counts
    for name in sorted(counts):
        lines.append(f"params.{name} = {counts[name]}")
    for run in result.runs:
        p = f"seed.{run.seed}"
        lines.append(f"{p}.epochs_run = {run.epochs_run}")
        lines.append(f"{p}.best_epoch = {run.best_epoch}")
        lines.append(f"{p}.final_train_loss = {run.train_losses[-1]:.6f}")
        lines.append(f"{p}.best_val_loss = {min(run.val_losses):.6f}")
        for name in METRIC_NAMES:
            if name not in run.eval_metrics:
                raise ReportError(f"seed {run.seed}: missing metric field {name!r}")
            lines.append(f"{p}.eval.{name} = {run.eval_metrics[name]:.6f}")
        tp, tn, fp, fn = run.confusion
        lines.append(f"{p}.eval.confusion = tp={tp},tn={tn},fp={fp},fn={fn}")
        if not cfg.deterministic:
            lines.append(f"{p}.sec_per_image = {run.sec_per_image:.6f}")
    for name in METRIC_NAMES:
        values = result.metric_values(name)
        lines.append(f"summary.eval.{name}.mean = {float(np.mean(values)):.6f}")
        lines.append(f"summary.eval.{name}.std = {float(np.std(values)):.6f}")
        lines.append(f"summary.eval.{name}.pct = {format_mean_std(values)}")
    return lines


def report_text(result: MultiSeedResult) -> str:
    return "\n".join(report_lines(result)) + "\n"


def write_report(path, text: str) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def result_to_json(result: MultiSeedResult) -> str:
    cfg = result.config
    payload = {
        "config": {
            "task": cfg.task,
            "profile": cfg.profile,
            "lr": cfg.lr,
            "batch_size": cfg.batch_size,
            "epochs": cfg.epochs,
            "seeds": list(cfg.seeds),
            "use_masks": cfg.use_masks,
            "use_multiscale": cfg.use_multiscale,
            "use_transformer": cfg.use_transformer,
            "blocks": list(cfg.blocks),
            "merge23": cfg.merge23,
            "deterministic": cfg.deterministic,
            "dice_weight": cfg.dice_weight,
            "val_fraction": cfg.val_fraction,
            "early_stop_value": cfg.early_stop_value,
            "frozen_backbone": cfg.frozen_backbone,
        },
        "runs": [
            {
                "seed": r.seed,
                "epochs_run": r.epochs_run,
                "best_epoch": r.best_epoch,
                "train_losses": r.train_losses,
                "val_losses": r.val_losses,
                "val_metrics": r.val_metrics,
                "metric_name": r.metric_name,
                "eval_metrics": r.eval_metrics,
                "confusion": list(r.confusion),
                "param_counts": r.param_counts,
                **({} if cfg.deterministic else {"sec_per_image": r.sec_per_image}),
            }
            for r in result.runs
        ],
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def result_from_json(text: str) -> MultiSeedResult:
    payload = json.loads(text)
    cfg_d = dict(payload["config"])
    cfg_d["seeds"] = tuple(cfg_d["seeds"])
    cfg_d["blocks"] = tuple(cfg_d["blocks"])
    cfg = TrainConfig(**cfg_d)
    runs = []
    for r in payload["runs"]:
        runs.append(
            RunResult(
                task=cfg.task,
                profile=cfg.profile,
                seed=r["seed"],
                epochs_run=r["epochs_run"],
                best_epoch=r["best_epoch"],
                train_losses=r["train_losses"],
                val_losses=r["val_losses"],
                val_metrics=r["val_metrics"],
                metric_name=r["metric_name"],
                eval_metrics=r["eval_metrics"],
                confusion=tuple(r["confusion"]),
                param_counts=r["param_counts"],
                sec_per_image=r.get("sec_per_image", 0.0),
            )
        )
    return MultiSeedResult(cfg, runs)


# -- checkpoint metadata ----------------------------------------------------------


def model_state_with_meta(model, cfg: TrainConfig) -> dict[str, np.ndarray]:
    state = collect_state(model)
    if cfg.task == "seg":
        u = model.cfg
        state["_cfg.kind"] = np.array([0.0], dtype=np.float32)
        state["_cfg.unet"] = np.array(
            [u.depth, u.base_channels, u.input_side, float(u.gate_projections)], dtype=np.float32
        )
    else:
        state["_cfg.kind"] = np.array([1.0], dtype=np.float32)
        state["_cfg.profile"] = np.array(
            [0.0 if cfg.profile == "desk" else 1.0], dtype=np.float32
        )
        blocks, merge = cfg.effective_blocks()
        state["_cfg.fusion"] = np.array(
            [
                float(cfg.use_transformer),
                float(merge),
                float(sum(1 << b for b in blocks)),
                float(cfg.frozen_backbone),
            ],
            dtype=np.float32,
        )
    return state


def model_from_state(state: dict[str, np.ndarray]):
    """Rebuild a seg or cls model (and its TrainConfig) from checkpoint meta."""
    if "_cfg.kind" not in state:
        raise DataError("checkpoint carries no model metadata")
    rng = np.random.default_rng(0)
    if int(state["_cfg.kind"][0]) == 0:
        depth, base, side, proj = state["_cfg.unet"]
        ucfg = UNetConfig(int(depth), int(base), int(side), bool(proj))
        model = TransUNet(ucfg, rng)
        cfg = TrainConfig(task="seg", profile="desk" if int(side) == 64 else "paper")
    else:
        profile = "desk" if int(state["_cfg.profile"][0]) == 0 else "paper"
        use_tr, merge, blockbits, frozen = state["_cfg.fusion"]
        blocks = tuple(b for b in (2, 3, 4) if int(blockbits) & (1 << b))
        cfg = TrainConfig(
            task="cls",
            profile=profile,
            use_transformer=bool(use_tr),
            use_multiscale=len(blocks) > 1,
            blocks=blocks if blocks else (4,),
            merge23=bool(merge),
            frozen_backbone=bool(frozen),
        )
        model = ClsPipeline(cfg, rng)
    load_state(model, state)
    return model, cfg
