"""Experiment driver: per-fold training, unseen-domain evaluation across
inference methods, the full leave-one-subject-out protocol, report emission,
and model checkpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregation import (
    AGGREGATE_METHODS,
    SELECTION_METHODS,
    BranchOutputs,
    aggregate,
    parse_method,
)
from .autodiff import Adam, cross_entropy, softmax_np
from .data import (
    EegSample,
    SyntheticConfig,
    generate_synthetic,
    group_by_subject,
    load_dataset,
    split_loso,
)
from .errors import (
    ConfigurationError,
    ContractViolationError,
    IngestionError,
    LeakageError,
)
from .metrics import MetricsReport, compute_metrics
from .models import ModelConfig, ResNet1D, build_model
from .norms import DOMAIN_SPECIFIC_KINDS

REPORT_FORMAT_VERSION = 1

# Caveats attached to every report: these knobs are this library's defaults,
# not values recovered from any upstream training recipe.
SUBSTITUTE_HYPERPARAMETER_NOTE = (
    "optimizer settings, epochs, and batch size are library defaults, "
    "not taken from any published reference configuration"
)
DEFAULT_NOTES = (
    SUBSTITUTE_HYPERPARAMETER_NOTE,
    "fold means are unweighted per-subject averages",
    "residual block layer order and channel widths are library defaults",
    "mixture weights of dson are per-layer and per-domain",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run (plus the seed)."""

    model: str = "resnet1d8"
    norm: str = "dsbn"
    methods: tuple[str, ...] = ("avg_prob",)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    dropout_rate: float = 0.1
    kernel_size: int = 3
    norm_momentum: float = 0.1
    block_channels: tuple[int, ...] | None = None
    manifest: str | None = None
    synthetic: SyntheticConfig | None = None
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        if self.block_channels is not None:
            d["block_channels"] = list(self.block_channels)
        if self.synthetic is not None:
            d["synthetic"] = asdict(self.synthetic)
            d["synthetic"]["domain_gain_range"] = list(self.synthetic.domain_gain_range)
            d["synthetic"]["domain_offset_range"] = list(self.synthetic.domain_offset_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "methods" in d:
            d["methods"] = tuple(d["methods"])
        if d.get("block_channels") is not None:
            d["block_channels"] = tuple(d["block_channels"])
        if d.get("synthetic") is not None:
            s = dict(d["synthetic"])
            s["domain_gain_range"] = tuple(s["domain_gain_range"])
            s["domain_offset_range"] = tuple(s["domain_offset_range"])
            d["synthetic"] = SyntheticConfig(**s)
        return cls(**d)


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray
    domain: str | None


def stack_batch(samples: list[EegSample], require_homogeneous: bool) -> Batch:
    """Stack samples into one batch; rejects mixed-domain batches when the
    batch is destined for a domain-specific branch."""
    subjects = {s.subject for s in samples}
    if require_homogeneous and len(subjects) != 1:
        raise ContractViolationError(
            f"domain-specific batches must be domain-homogeneous, got {sorted(subjects)}"
        )
    x = np.stack([s.signal for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    domain = samples[0].subject if len(subjects) == 1 else None
    return Batch(x=x, labels=labels, domain=domain)


def make_batches(samples: list[EegSample], batch_size: int,
                 rng: np.random.Generator, by_domain: bool) -> list[Batch]:
    """Shuffle and chunk the epoch's batches.

    by_domain: shuffle within each domain and interleave the domains'
    batches round-robin, one domain per batch. Otherwise shuffle the whole
    pool and allow mixed batches.
    """
    if by_domain:
        groups = group_by_subject(samples)
        per_domain: list[list[Batch]] = []
        for subject in sorted(groups):
            pool = groups[subject]
            order = rng.permutation(len(pool))
            shuffled = [pool[i] for i in order]
            per_domain.append([
                stack_batch(shuffled[i:i + batch_size], require_homogeneous=True)
                for i in range(0, len(shuffled), batch_size)
            ])
        batches: list[Batch] = []
        for round_idx in range(max(len(b) for b in per_domain)):
            for domain_batches in per_domain:
                if round_idx < len(domain_batches):
                    batches.append(domain_batches[round_idx])
        return batches
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    return [
        stack_batch(shuffled[i:i + batch_size], require_homogeneous=False)
        for i in range(0, len(shuffled), batch_size)
    ]


def _model_config(config: ExperimentConfig, samples: list[EegSample]) -> ModelConfig:
    subjects = tuple(sorted({s.subject for s in samples}))
    channels = samples[0].signal.shape[0]
    return ModelConfig(
        variant=config.model,
        norm_kind=config.norm,
        input_channels=channels,
        num_classes=2,
        domains=subjects,
        block_channels=config.block_channels,
        kernel_size=config.kernel_size,
        dropout_rate=config.dropout_rate,
        momentum=config.norm_momentum,
    )


def train_fold(train_samples: list[EegSample], config: ExperimentConfig,
               seed=None) -> tuple[ResNet1D, list[float]]:
    """Train one fold's model; returns the frozen model and per-epoch loss."""
    if not train_samples:
        raise ConfigurationError("cannot train on an empty sample set")
    seed = config.seed if seed is None else seed
    seed = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    rng_init = np.random.default_rng(seed + [0])
    rng_train = np.random.default_rng(seed + [1])

    model = build_model(_model_config(config, train_samples), rng_init)
    opt = Adam(model.parameters(), lr=config.lr, beta1=config.beta1,
               beta2=config.beta2, eps=config.adam_eps)
    by_domain = config.norm in DOMAIN_SPECIFIC_KINDS

    loss_curve: list[float] = []
    model.train()
    for _ in range(config.epochs):
        total, count = 0.0, 0
        for batch in make_batches(train_samples, config.batch_size, rng_train, by_domain):
            logits = model.forward(batch.x, domain=batch.domain, rng=rng_train)
            loss = cross_entropy(logits, batch.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(batch.labels)
            count += len(batch.labels)
        loss_curve.append(total / count)
    model.eval()
    return model, loss_curve


@dataclass
class FoldResult:
    held_out: str
    metrics: dict[str, MetricsReport]
    loss_curve: list[float] = field(default_factory=list)
    selection_histograms: dict[str, list[list[int]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "held_out": self.held_out,
            "metrics": {m: r.to_dict() for m, r in self.metrics.items()},
            "loss_curve": self.loss_curve,
            "selection_histograms": self.selection_histograms,
        }


def evaluate_fold(model: ResNet1D, test_samples: list[EegSample],
                  methods: tuple[str, ...],
                  loss_curve: list[float] | None = None) -> FoldResult:
    """Score every requested inference method on held-out samples.

    The held-out subjects must be absent from the model's source domains;
    a hit raises a leakage error. Domain-specific models aggregate over all
    branches (or run statistic selection); domain-invariant models use a
    plain forward, so every aggregate method reports identical numbers.
    """
    if model.training:
        raise ContractViolationError("evaluate_fold needs a frozen (eval-mode) model")
    if not test_samples:
        raise ContractViolationError("cannot evaluate an empty test set")
    methods = tuple(parse_method(m) for m in methods)
    test_subjects = sorted({s.subject for s in test_samples})
    leaked = [s for s in test_subjects if s in model.domains]
    if leaked:
        raise LeakageError(
            f"held-out subject(s) {leaked} found among the model's source domains"
        )

    labels = np.array([s.label for s in test_samples], dtype=np.int64)
    x_all = np.stack([s.signal for s in test_samples])
    n = len(test_samples)

    metrics: dict[str, MetricsReport] = {}
    histograms: dict[str, list[list[int]]] = {}

    aggregate_requested = [m for m in methods if m in AGGREGATE_METHODS]
    selection_requested = [m for m in methods if m in SELECTION_METHODS]

    if model.is_domain_specific:
        if aggregate_requested:
            # one batched eval pass per branch; rows j are the per-sample logits
            branch_logits = np.stack([
                model.forward(x_all, branch=i).data for i in range(model.num_domains)
            ])
            for method in aggregate_requested:
                preds = np.empty(n, dtype=np.int64)
                scores = np.empty(n)
                for j in range(n):
                    outputs = BranchOutputs.from_logits(branch_logits[:, j, :])
                    pred, vec = aggregate(outputs, method)
                    preds[j] = pred
                    scores[j] = vec[1]
                metrics[method] = compute_metrics(scores, preds, labels)
        for method in selection_requested:
            metric_name = method.removeprefix("select_")
            preds = np.empty(n, dtype=np.int64)
            scores = np.empty(n)
            counts = np.zeros((model.num_norm_layers, model.num_domains), dtype=np.int64)
            for j in range(n):
                result = model.forward_selective(x_all[j:j + 1], metric_name)
                preds[j] = result.predicted
                scores[j] = result.probabilities[1]
                for layer, branch in enumerate(result.selected_branches):
                    counts[layer, branch] += 1
            metrics[method] = compute_metrics(scores, preds, labels)
            histograms[method] = counts.tolist()
    else:
        if selection_requested:
            raise ConfigurationError(
                "statistic selection needs domain-specific normalization; "
                f"model uses {model.config.norm_kind!r}"
            )
        probs = softmax_np(model.forward(x_all).data, axis=1)
        preds = probs.argmax(axis=1)
        scores = probs[:, 1]
        plain = compute_metrics(scores, preds, labels)
        for method in aggregate_requested:
            metrics[method] = plain

    return FoldResult(
        held_out=",".join(test_subjects),
        metrics=metrics,
        loss_curve=list(loss_curve or []),
        selection_histograms=histograms,
    )


@dataclass
class LosoReport:
    config: ExperimentConfig
    folds: list[FoldResult]
    means: dict[str, dict[str, float]]
    notes: tuple[str, ...] = DEFAULT_NOTES

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "positive_class": "alert",
            "config": self.config.to_dict(),
            "notes": list(self.notes),
            "means": self.means,
            "folds": [f.to_dict() for f in self.folds],
        }


METRIC_COLUMNS = ("accuracy", "f1", "precision", "recall", "auroc")


def _mean_metrics(folds: list[FoldResult]) -> dict[str, dict[str, float]]:
    means: dict[str, dict[str, float]] = {}
    if not folds:
        return means
    for method in folds[0].metrics:
        per_metric = {}
        for name in METRIC_COLUMNS:
            values = [getattr(f.metrics[method], name) for f in folds]
            per_metric[name] = float(np.mean(values))
        means[method] = per_metric
    return means


def load_experiment_samples(config: ExperimentConfig) -> list[EegSample]:
    if config.manifest:
        _, samples = load_dataset(config.manifest)
        return samples
    if config.synthetic is not None:
        samples, _ = generate_synthetic(config.synthetic)
        return samples
    raise ConfigurationError("config needs either a manifest path or a synthetic spec")


def run_loso(config: ExperimentConfig,
             samples: list[EegSample] | None = None) -> LosoReport:
    """Full leave-one-subject-out protocol over every requested method."""
    if samples is None:
        samples = load_experiment_samples(config)
    folds = split_loso(samples)
    results: list[FoldResult] = []
    for fold_idx, fold in enumerate(folds):
        if any(s.subject == fold.held_out for s in fold.train):
            raise LeakageError(f"fold {fold.held_out}: held-out subject in training set")
        try:
            model, loss_curve = train_fold(fold.train, config,
                                           seed=(config.seed, fold_idx))
            results.append(
                evaluate_fold(model, fold.test, config.methods, loss_curve=loss_curve)
            )
        except Exception as exc:
            raise type(exc)(f"fold {fold.held_out}: {exc}") from exc
    report = LosoReport(config=config, folds=results, means=_mean_metrics(results))
    if config.out_dir:
        emit_report(report.to_dict(), config.out_dir)
    return report


# -- report rendering -----------------------------------------------------


def render_table(report: dict) -> str:
    """Deterministic text rendering of a report dictionary."""
    cfg = report["config"]
    lines = [
        "leave-one-subject-out classification report",
        f"model={cfg['model']} norm={cfg['norm']} seed={cfg['seed']} "
        f"epochs={cfg['epochs']} batch_size={cfg['batch_size']} lr={cfg['lr']}",
        f"positive class: {report['positive_class']}",
    ]
    for note in report["notes"]:
        lines.append(f"note: {note}")
    lines.append("")

    def table(rows: dict[str, dict[str, float]], title: str) -> None:
        lines.append(title)
        header = f"{'method':<20}" + "".join(f"{c:>11}" for c in METRIC_COLUMNS)
        lines.append(header)
        for method in sorted(rows):
            row = f"{method:<20}" + "".join(
                f"{100.0 * rows[method][c]:>11.2f}" for c in METRIC_COLUMNS
            )
            lines.append(row)
        lines.append("")

    table(report["means"], f"mean over {len(report['folds'])} folds (%):")
    for fold in report["folds"]:
        rows = {
            method: {c: m[c] for c in METRIC_COLUMNS}
            for method, m in fold["metrics"].items()
        }
        table(rows, f"fold held_out={fold['held_out']} (%):")
        for method, counts in sorted(fold.get("selection_histograms", {}).items()):
            lines.append(f"branch selections for {method} (rows=layers):")
            for layer, row in enumerate(counts):
                lines.append(f"  layer {layer:02d}: " + " ".join(str(c) for c in row))
            lines.append("")
    return "\n".join(lines)


def emit_report(report: dict, out_dir) -> dict[str, Path]:
    """Write the machine-readable rows and the text table; deterministic bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "results.json"
    text_path = out / "report.txt"
    json_path.write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    text_path.write_text(render_table(report), encoding="utf-8")
    return {"json": json_path, "table": text_path}


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"DSN1"


def save_checkpoint(model: ResNet1D, path) -> None:
    """One binary file per model: typed header, JSON meta, named f64 arrays."""
    cfg = model.config
    meta = {
        "variant": cfg.variant,
        "norm_kind": cfg.norm_kind,
        "input_channels": cfg.input_channels,
        "num_classes": cfg.num_classes,
        "domains": list(cfg.domains) if cfg.domains else None,
        "block_channels": list(cfg.block_channels) if cfg.block_channels else None,
        "kernel_size": cfg.kernel_size,
        "stride": cfg.stride,
        "dropout_rate": cfg.dropout_rate,
        "eps": cfg.eps,
        "momentum": cfg.momentum,
    }
    entries = [(name, p.data) for name, p in model.named_parameters()]
    entries += list(model.named_buffers())
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            blob = name.encode("utf-8")
            array = np.asarray(array, dtype="<f8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", array.ndim))
            for extent in array.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(array.tobytes())


def load_checkpoint(path) -> ResNet1D:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise IngestionError(f"{path}: not a checkpoint (bad magic)")
    offset = 4
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != 1:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    meta = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_entries,) = struct.unpack_from("<I", blob, offset)
    offset += 4

    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = []
        for _ in range(ndim):
            (extent,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape.append(extent)
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            blob, dtype="<f8", count=size, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += size * 8

    config = ModelConfig(
        variant=meta["variant"],
        norm_kind=meta["norm_kind"],
        input_channels=meta["input_channels"],
        num_classes=meta["num_classes"],
        domains=tuple(meta["domains"]) if meta["domains"] else None,
        block_channels=tuple(meta["block_channels"]) if meta["block_channels"] else None,
        kernel_size=meta["kernel_size"],
        stride=meta["stride"],
        dropout_rate=meta["dropout_rate"],
        eps=meta["eps"],
        momentum=meta["momentum"],
    )
    model = build_model(config, np.random.default_rng(0))
    expected = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    all_names = set(expected) | set(buffers)
    if all_names != set(arrays):
        missing = sorted(all_names - set(arrays))
        extra = sorted(set(arrays) - all_names)
        raise IngestionError(
            f"{path}: state mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, param in expected.items():
        if param.data.shape != arrays[name].shape:
            raise IngestionError(f"{path}: shape mismatch for {name}")
        param.data[...] = arrays[name]
    for name, buf in buffers.items():
        buf[...] = arrays[name]
    model.eval()
    return model
