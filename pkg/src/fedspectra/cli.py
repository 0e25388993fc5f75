"""Command-line front end: configure, train, sweep, and verify.

Artifacts are deterministic functions of (config, seed): CSV traces with
17-significant-digit floats, JSON reports, and self-contained SVG loss plots.
Exit codes: 0 success, 1 verification failure, 2 runtime divergence,
3 configuration error.
"""

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .data import (
    Dataset,
    load_idx,
    partition_iid,
    partition_noniid,
    preprocess_unit_norm,
    relu_targets,
    synth_linear_dataset,
)
from .federation import (
    DivergenceError,
    FederationConfig,
    run_fedavg,
)
from .models import (
    LabeledBatch,
    init_deep_linear,
    init_two_layer,
    loss_of,
    predict,
    vec_residual,
)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_DIVERGED = 2
EXIT_CONFIG = 3

MODEL_DEEP_LINEAR = "deep-linear"
MODEL_TWO_LAYER = "two-layer-relu"

CSV_HEADER = "t,participants,loss,ratio,rho_theory,bound_cum"

_LINEAR_CHECKS = (
    "init-spectra",
    "gram-floor",
    "local-descent",
    "local-deviation",
    "global-drift",
    "local-drift",
    "first-order",
)
_RELU_CHECKS = ("ntk-trace", "local-descent", "local-deviation", "global-drift")


class ConfigError(ValueError):
    """Configuration rejected; the message starts with the offending key path."""


@dataclass(frozen=True)
class ModelSection:
    kind: str = MODEL_DEEP_LINEAR
    depth: int = 3
    width: int = 500
    d_in: int = 10
    d_out: int = 5
    dim: int = 10  # two-layer input dimension (synthetic data only)


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"
    n: int = 80
    images: str | None = None
    labels: str | None = None
    subset: int | None = None
    classes_per_client: int = 3
    partition: str | None = None  # None = by-label when labels exist, else round-robin
    preprocess: bool = False


@dataclass(frozen=True)
class FederationSection:
    n_clients: int = 20
    local_steps: int = 5
    rounds: int = 100
    eta: float = 0.0005
    rate: float = 1.0
    schedule: tuple | None = None
    seed: int = 0
    workers: int = 1
    stop_loss_fraction: float | None = None


@dataclass(frozen=True)
class VerifySection:
    checks: tuple | None = None  # None = every check applicable to the model kind
    rounds: tuple | None = None  # None = {0, T//2, T-1}


@dataclass(frozen=True)
class SweepSection:
    rates: tuple = (0.1, 0.5, 1.0)
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class AnalysisSection:
    max_gram_dim: int = 1024


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    federation: FederationSection = FederationSection()
    verify: VerifySection = VerifySection()
    sweep: SweepSection = SweepSection()
    analysis: AnalysisSection = AnalysisSection()


def _reject_unknown(obj, path, allowed):
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def _typed(obj, key, path, kind, default):
    if key not in obj:
        return default
    v = obj[key]
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{path}.{key}: expected a boolean, got {v!r}")
        return v
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}.{key}: expected an integer, got {v!r}")
        return v
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}.{key}: expected a number, got {v!r}")
        return float(v)
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(f"{path}.{key}: expected a string, got {v!r}")
        return v
    raise AssertionError(kind)


def _positive(value, path):
    if value is not None and value <= 0:
        raise ConfigError(f"{path}: must be positive, got {value}")
    return value


def _parse_model(obj) -> ModelSection:
    kind = _typed(obj, "kind", "model", str, MODEL_DEEP_LINEAR)
    if kind == MODEL_DEEP_LINEAR:
        _reject_unknown(obj, "model", {"kind", "depth", "width", "d_in", "d_out"})
        return ModelSection(
            kind=kind,
            depth=_positive(_typed(obj, "depth", "model", int, 3), "model.depth"),
            width=_positive(_typed(obj, "width", "model", int, 500), "model.width"),
            d_in=_positive(_typed(obj, "d_in", "model", int, 10), "model.d_in"),
            d_out=_positive(_typed(obj, "d_out", "model", int, 5), "model.d_out"),
        )
    if kind == MODEL_TWO_LAYER:
        _reject_unknown(obj, "model", {"kind", "width", "dim"})
        return ModelSection(
            kind=kind,
            width=_positive(_typed(obj, "width", "model", int, 500), "model.width"),
            dim=_positive(_typed(obj, "dim", "model", int, 10), "model.dim"),
        )
    raise ConfigError(
        f"model.kind: expected {MODEL_DEEP_LINEAR!r} or {MODEL_TWO_LAYER!r}, got {kind!r}"
    )


def _parse_data(obj) -> DataSection:
    kind = _typed(obj, "kind", "data", str, "synthetic")
    if kind == "synthetic":
        _reject_unknown(obj, "data", {"kind", "n", "partition", "preprocess"})
        partition = _typed(obj, "partition", "data", str, None)
        if partition not in (None, "iid"):
            raise ConfigError("data.partition: synthetic data has no labels to split by")
        return DataSection(
            kind=kind,
            n=_positive(_typed(obj, "n", "data", int, 80), "data.n"),
            partition=partition,
            preprocess=_typed(obj, "preprocess", "data", bool, False),
        )
    if kind == "idx":
        _reject_unknown(
            obj,
            "data",
            {"kind", "images", "labels", "subset", "classes_per_client", "partition", "preprocess"},
        )
        images = _typed(obj, "images", "data", str, None)
        labels = _typed(obj, "labels", "data", str, None)
        if images is None or labels is None:
            raise ConfigError("data.images: idx data needs both images and labels paths")
        partition = _typed(obj, "partition", "data", str, None)
        if partition not in (None, "iid", "noniid"):
            raise ConfigError(f"data.partition: expected 'iid' or 'noniid', got {partition!r}")
        return DataSection(
            kind=kind,
            images=images,
            labels=labels,
            subset=_positive(_typed(obj, "subset", "data", int, None), "data.subset"),
            classes_per_client=_positive(
                _typed(obj, "classes_per_client", "data", int, 3), "data.classes_per_client"
            ),
            partition=partition,
            preprocess=_typed(obj, "preprocess", "data", bool, False),
        )
    raise ConfigError(f"data.kind: expected 'synthetic' or 'idx', got {kind!r}")


def _parse_federation(obj) -> FederationSection:
    _reject_unknown(
        obj,
        "federation",
        {
            "n_clients",
            "local_steps",
            "rounds",
            "eta",
            "rate",
            "schedule",
            "seed",
            "workers",
            "stop_loss_fraction",
        },
    )
    rate = _typed(obj, "rate", "federation", float, 1.0)
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"federation.rate: must lie in (0, 1], got {rate}")
    schedule = None
    if "schedule" in obj:
        if "rate" in obj:
            raise ConfigError("federation.schedule: give either rate or schedule, not both")
        raw = obj["schedule"]
        if not isinstance(raw, list) or not all(isinstance(r, list) for r in raw):
            raise ConfigError("federation.schedule: expected a list of client index lists")
        schedule = tuple(tuple(int(c) for c in r) for r in raw)
    rounds = _typed(obj, "rounds", "federation", int, 100)
    if rounds < 0:
        raise ConfigError(f"federation.rounds: must be >= 0, got {rounds}")
    section = FederationSection(
        n_clients=_positive(_typed(obj, "n_clients", "federation", int, 20), "federation.n_clients"),
        local_steps=_positive(
            _typed(obj, "local_steps", "federation", int, 5), "federation.local_steps"
        ),
        rounds=rounds,
        eta=_positive(_typed(obj, "eta", "federation", float, 0.0005), "federation.eta"),
        rate=rate,
        schedule=schedule,
        seed=_typed(obj, "seed", "federation", int, 0),
        workers=_positive(_typed(obj, "workers", "federation", int, 1), "federation.workers"),
        stop_loss_fraction=_positive(
            _typed(obj, "stop_loss_fraction", "federation", float, None),
            "federation.stop_loss_fraction",
        ),
    )
    try:
        section_to_federation_config(section)
    except ValueError as e:
        raise ConfigError(f"federation: {e}") from e
    return section


def section_to_federation_config(section: FederationSection) -> FederationConfig:
    participation = section.schedule if section.schedule is not None else section.rate
    return FederationConfig(
        n_clients=section.n_clients,
        local_steps=section.local_steps,
        rounds=section.rounds,
        eta=section.eta,
        participation=participation,
        seed=section.seed,
    )


def _parse_verify(obj, model_kind, rounds_total) -> VerifySection:
    _reject_unknown(obj, "verify", {"checks", "rounds"})
    known = _LINEAR_CHECKS if model_kind == MODEL_DEEP_LINEAR else _RELU_CHECKS
    checks = None
    if "checks" in obj:
        raw = obj["checks"]
        if not isinstance(raw, list) or not all(isinstance(c, str) for c in raw):
            raise ConfigError("verify.checks: expected a list of check names")
        for c in raw:
            if c not in known:
                raise ConfigError(
                    f"verify.checks: {c!r} is not a known check for {model_kind} "
                    f"(choose from {', '.join(known)})"
                )
        checks = tuple(raw)
    rounds = None
    if "rounds" in obj:
        raw = obj["rounds"]
        if not isinstance(raw, list) or any(
            isinstance(t, bool) or not isinstance(t, int) for t in raw
        ):
            raise ConfigError("verify.rounds: expected a list of integers")
        for t in raw:
            if not 0 <= t < max(rounds_total, 1):
                raise ConfigError(
                    f"verify.rounds: round {t} outside [0, {rounds_total})"
                )
        rounds = tuple(sorted(set(raw)))
    return VerifySection(checks=checks, rounds=rounds)


def _parse_sweep(obj) -> SweepSection:
    _reject_unknown(obj, "sweep", {"rates", "seeds"})
    rates = (0.1, 0.5, 1.0)
    if "rates" in obj:
        raw = obj["rates"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("sweep.rates: expected a nonempty list")
        for r in raw:
            if isinstance(r, bool) or not isinstance(r, (int, float)) or not 0.0 < r <= 1.0:
                raise ConfigError(f"sweep.rates: rate {r!r} must lie in (0, 1]")
        rates = tuple(float(r) for r in raw)
    seeds = (0, 1, 2, 3, 4)
    if "seeds" in obj:
        raw = obj["seeds"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("sweep.seeds: expected a nonempty list")
        if any(isinstance(s, bool) or not isinstance(s, int) for s in raw):
            raise ConfigError("sweep.seeds: expected integers")
        seeds = tuple(raw)
    return SweepSection(rates=rates, seeds=seeds)


def _parse_analysis(obj) -> AnalysisSection:
    _reject_unknown(obj, "analysis", {"max_gram_dim"})
    return AnalysisSection(
        max_gram_dim=_positive(
            _typed(obj, "max_gram_dim", "analysis", int, 1024), "analysis.max_gram_dim"
        )
    )


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment description; unspecified fields take defaults.

    Unknown keys, type mismatches, and constraint violations raise ConfigError
    with the dotted path of the offending key.
    """
    try:
        obj = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(obj, "config", {"model", "data", "federation", "verify", "sweep", "analysis"})
    for key in ("model", "data", "federation", "verify", "sweep", "analysis"):
        if key in obj and not isinstance(obj[key], dict):
            raise ConfigError(f"{key}: expected an object")
    model = _parse_model(obj.get("model", {}))
    data = _parse_data(obj.get("data", {}))
    federation = _parse_federation(obj.get("federation", {}))
    verify = _parse_verify(obj.get("verify", {}), model.kind, federation.rounds)
    sweep = _parse_sweep(obj.get("sweep", {}))
    analysis_section = _parse_analysis(obj.get("analysis", {}))
    if model.kind == MODEL_TWO_LAYER and data.kind == "synthetic" and data.n < model.dim:
        raise ConfigError("data.n: need at least dim samples for synthetic data")
    if model.kind == MODEL_DEEP_LINEAR and data.kind == "synthetic" and data.n < model.d_in:
        raise ConfigError("data.n: need at least d_in samples for synthetic data")
    return ExperimentConfig(
        model=model,
        data=data,
        federation=federation,
        verify=verify,
        sweep=sweep,
        analysis=analysis_section,
    )


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical JSON for a parsed config; parse_config(serialize_config(c))
    reproduces c exactly."""

    def drop_none(d):
        return {k: v for k, v in d.items() if v is not None}

    model = {"kind": cfg.model.kind, "width": cfg.model.width}
    if cfg.model.kind == MODEL_DEEP_LINEAR:
        model.update(depth=cfg.model.depth, d_in=cfg.model.d_in, d_out=cfg.model.d_out)
    else:
        model.update(dim=cfg.model.dim)
    data = drop_none(
        {
            "kind": cfg.data.kind,
            "n": cfg.data.n if cfg.data.kind == "synthetic" else None,
            "images": cfg.data.images,
            "labels": cfg.data.labels,
            "subset": cfg.data.subset,
            "classes_per_client": cfg.data.classes_per_client
            if cfg.data.kind == "idx"
            else None,
            "partition": cfg.data.partition,
            "preprocess": cfg.data.preprocess,
        }
    )
    federation = drop_none(
        {
            "n_clients": cfg.federation.n_clients,
            "local_steps": cfg.federation.local_steps,
            "rounds": cfg.federation.rounds,
            "eta": cfg.federation.eta,
            "rate": None if cfg.federation.schedule is not None else cfg.federation.rate,
            "schedule": [list(r) for r in cfg.federation.schedule]
            if cfg.federation.schedule is not None
            else None,
            "seed": cfg.federation.seed,
            "workers": cfg.federation.workers,
            "stop_loss_fraction": cfg.federation.stop_loss_fraction,
        }
    )
    verify = drop_none(
        {
            "checks": list(cfg.verify.checks) if cfg.verify.checks is not None else None,
            "rounds": list(cfg.verify.rounds) if cfg.verify.rounds is not None else None,
        }
    )
    sweep = {"rates": list(cfg.sweep.rates), "seeds": list(cfg.sweep.seeds)}
    doc = {
        "model": model,
        "data": data,
        "federation": federation,
        "sweep": sweep,
        "analysis": {"max_gram_dim": cfg.analysis.max_gram_dim},
    }
    if verify:
        doc["verify"] = verify
    return json.dumps(doc, indent=2)


@dataclass(frozen=True)
class Experiment:
    """Everything a command needs: client batches in client order, the global
    data they concatenate to, initial parameters, and the contraction rate's
    spectral input (None when the Gram matrix exceeds max_gram_dim)."""

    cfg: ExperimentConfig
    batches: tuple
    X: np.ndarray
    Y: np.ndarray
    init_params: object
    lambda_min: float | None
    perturbed_columns: int
    dropped_samples: int


def _load_dataset(cfg: ExperimentConfig):
    if cfg.data.kind == "synthetic":
        if cfg.model.kind == MODEL_DEEP_LINEAR:
            ds, _ = synth_linear_dataset(
                cfg.model.d_in, cfg.model.d_out, cfg.data.n, cfg.federation.seed
            )
        else:
            ds, _ = synth_linear_dataset(cfg.model.dim, 1, cfg.data.n, cfg.federation.seed)
        return ds
    try:
        ds = load_idx(cfg.data.images, cfg.data.labels)
    except OSError as e:
        raise ConfigError(f"data.images: cannot read dataset ({e})") from e
    if cfg.data.subset is not None:
        s = cfg.data.subset
        if s > ds.n:
            raise ConfigError(f"data.subset: {s} exceeds the {ds.n} available samples")
        ds = Dataset(X=ds.X[:, :s], Y=ds.Y[:, :s], labels=ds.labels[:s])
    return ds


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    """Materialize data, partition, targets, and initial parameters."""
    ds = _load_dataset(cfg)
    perturbed = 0
    if cfg.data.preprocess:
        ds, perturbed = preprocess_unit_norm(ds)
    N = cfg.federation.n_clients
    dropped = 0
    use_labels = ds.labels is not None and cfg.data.partition != "iid"
    if use_labels:
        part = partition_noniid(
            ds, N, cfg.data.classes_per_client, cfg.federation.seed
        )
        index_lists = [np.asarray(ix, dtype=int) for ix in part.client_indices]
        dropped = part.dropped
    else:
        index_lists = partition_iid(ds.n, N)
    if cfg.model.kind == MODEL_DEEP_LINEAR:
        targets = ds.Y
        batches = tuple(
            LabeledBatch(X=ds.X[:, ix], Y=targets[:, ix]) for ix in index_lists
        )
    else:
        if ds.labels is not None:
            y = relu_targets(ds.labels, ds.Y.shape[0])
        else:
            y = np.ravel(ds.Y)
        batches = tuple(LabeledBatch(X=ds.X[:, ix], Y=y[ix]) for ix in index_lists)
    X = np.hstack([b.X for b in batches])
    if cfg.model.kind == MODEL_DEEP_LINEAR:
        Y = np.hstack([b.Y for b in batches])
        init = init_deep_linear(
            cfg.model.depth, cfg.model.width, X.shape[0], Y.shape[0], cfg.federation.seed
        )
        lam = None
        if X.shape[1] * Y.shape[0] <= cfg.analysis.max_gram_dim:
            lam = analysis.rank_restricted_lambda_min(
                analysis.gram_P0(init, X), analysis.effective_rank(X) * Y.shape[0]
            )
    else:
        Y = np.concatenate([b.Y for b in batches])
        init = init_two_layer(cfg.model.width, X.shape[0], cfg.federation.seed)
        lam = None
        if X.shape[1] <= cfg.analysis.max_gram_dim:
            spec = analysis.spectrum(analysis.gram_H_infinity(X), need_eigen=True)
            lam = spec.lambda_min
    return Experiment(
        cfg=cfg,
        batches=batches,
        X=X,
        Y=Y,
        init_params=init,
        lambda_min=lam,
        perturbed_columns=perturbed,
        dropped_samples=dropped,
    )


def _g17(v) -> str:
    if v is None:
        return "nan"
    return f"{float(v):.17g}"


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (tuple, list, set, frozenset)):
        seq = sorted(v) if isinstance(v, (set, frozenset)) else v
        return [_jsonable(x) for x in seq]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, float) and not np.isfinite(v):
        return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _report_dict(report) -> dict:
    return _jsonable(dataclasses.asdict(report))


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_plot(path, curves, *, title, x_label, y_label, width=720, height=480):
    """Write a minimal log-y line plot: curves is a list of (label, points)
    with points as (x, y) pairs; nonpositive and non-finite y are skipped."""
    left, right, top, bottom = 72, 24, 36, 48
    xs, ys = [], []
    for _, pts in curves:
        for x, y in pts:
            if np.isfinite(x) and np.isfinite(y) and y > 0.0:
                xs.append(float(x))
                ys.append(float(y))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]
    if xs:
        x0, x1 = min(xs), max(xs)
        ly0, ly1 = np.log10(min(ys)), np.log10(max(ys))
        if x1 == x0:
            x1 = x0 + 1.0
        if ly1 == ly0:
            ly1 = ly0 + 1.0
        plot_w = width - left - right
        plot_h = height - top - bottom

        def px(x):
            return left + (x - x0) / (x1 - x0) * plot_w

        def py(y):
            return top + (ly1 - np.log10(y)) / (ly1 - ly0) * plot_h

        parts.append(
            f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
            f'fill="none" stroke="#333"/>'
        )
        for exp in range(int(np.floor(ly0)), int(np.ceil(ly1)) + 1):
            y = 10.0**exp
            if not (min(ys) <= y <= max(ys)):
                continue
            parts.append(
                f'<line x1="{left}" y1="{py(y):.2f}" x2="{left + plot_w}" y2="{py(y):.2f}" '
                f'stroke="#ddd"/>'
                f'<text x="{left - 6}" y="{py(y) + 4:.2f}" text-anchor="end" font-size="11" '
                f'font-family="sans-serif">1e{exp}</text>'
            )
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            x = x0 + frac * (x1 - x0)
            parts.append(
                f'<text x="{px(x):.2f}" y="{top + plot_h + 16}" text-anchor="middle" '
                f'font-size="11" font-family="sans-serif">{x:g}</text>'
            )
        for idx, (label, pts) in enumerate(curves):
            color = _PALETTE[idx % len(_PALETTE)]
            coords = " ".join(
                f"{px(x):.2f},{py(y):.2f}"
                for x, y in pts
                if np.isfinite(x) and np.isfinite(y) and y > 0.0
            )
            if coords:
                parts.append(
                    f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
                )
            ly = top + 16 + 16 * idx
            parts.append(
                f'<rect x="{left + plot_w - 150}" y="{ly - 9}" width="10" height="10" fill="{color}"/>'
                f'<text x="{left + plot_w - 136}" y="{ly}" font-size="11" '
                f'font-family="sans-serif">{label}</text>'
            )
        parts.append(
            f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{x_label}</text>'
        )
        parts.append(
            f'<text x="16" y="{top + plot_h / 2:.1f}" text-anchor="middle" font-size="12" '
            f'font-family="sans-serif" transform="rotate(-90 16 {top + plot_h / 2:.1f})">'
            f"{y_label}</text>"
        )
    else:
        parts.append(
            f'<text x="{width / 2:.1f}" y="{height / 2:.1f}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">no data</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _run_training(cfg: ExperimentConfig, exp: Experiment):
    fed_cfg = section_to_federation_config(cfg.federation)
    stop = None
    if cfg.federation.stop_loss_fraction is not None:
        loss0 = sum(loss_of(exp.init_params, b) for b in exp.batches)
        stop = cfg.federation.stop_loss_fraction * loss0
    return run_fedavg(
        fed_cfg,
        exp.init_params,
        list(exp.batches),
        lambda_min=exp.lambda_min,
        workers=cfg.federation.workers,
        stop_loss=stop,
    )


def cmd_train(cfg: ExperimentConfig, out_dir) -> int:
    """Run one federated training job; write trace.csv, trace.json, loss.svg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = build_experiment(cfg)
    result = _run_training(cfg, exp)

    bound_values = None
    if exp.lambda_min is not None and exp.lambda_min > 0.0:
        try:
            series = analysis.bound_series(
                result.losses[0],
                cfg.federation.eta,
                cfg.federation.local_steps,
                cfg.federation.n_clients,
                exp.lambda_min,
                [len(tr.members) for tr in result.traces],
            )
            bound_values = series.values
        except ValueError:
            bound_values = None

    lines = [CSV_HEADER]
    for tr in result.traces:
        bound = bound_values[tr.t] if bound_values is not None else None
        lines.append(
            ",".join(
                [
                    str(tr.t),
                    ";".join(str(c) for c in tr.members),
                    _g17(tr.loss),
                    _g17(tr.ratio),
                    _g17(tr.rho_theory),
                    _g17(bound),
                ]
            )
        )
    (out / "trace.csv").write_text("\n".join(lines) + "\n")

    rows = []
    for tr in result.traces:
        rows.append(
            {
                "t": tr.t,
                "participants": list(tr.members),
                "loss": tr.loss,
                "ratio": tr.ratio,
                "rho_theory": tr.rho_theory,
                "bound_cum": bound_values[tr.t] if bound_values is not None else None,
                "local_losses": [list(ls) for ls in tr.local_losses],
            }
        )
    (out / "trace.json").write_text(
        json.dumps(
            _jsonable(
                {
                    "config": json.loads(serialize_config(cfg)),
                    "lambda_min": exp.lambda_min,
                    "perturbed_columns": exp.perturbed_columns,
                    "dropped_samples": exp.dropped_samples,
                    "losses": list(result.losses),
                    "final_loss": result.final_loss,
                    "rows": rows,
                }
            ),
            indent=2,
        )
        + "\n"
    )

    curves = [("loss", [(t, v) for t, v in enumerate(result.losses)])]
    if bound_values is not None:
        curves.append(("bound", [(t, v) for t, v in enumerate(bound_values)]))
    _svg_plot(
        out / "loss.svg",
        curves,
        title="training loss per round",
        x_label="round",
        y_label="loss (log scale)",
    )
    print(f"train: {len(result.traces)} rounds, final loss {result.final_loss:.6g}")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, out_dir, rates=None, seeds=None) -> int:
    """Cross product of participation rates and seeds; per-rate mean/min/max
    loss curves to sweep.csv and an overlay plot to sweep.svg. Failed cells
    are reported on stderr and excluded from the aggregates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rates = list(rates if rates is not None else cfg.sweep.rates)
    seeds = list(seeds if seeds is not None else cfg.sweep.seeds)
    if not rates or not seeds:
        raise ConfigError("sweep: rates and seeds must be nonempty")

    per_rate = {}
    failures = []
    for rate in rates:
        runs = []
        for seed in seeds:
            cell_cfg = dataclasses.replace(
                cfg,
                federation=dataclasses.replace(
                    cfg.federation, rate=rate, schedule=None, seed=seed
                ),
            )
            try:
                exp = build_experiment(cell_cfg)
                runs.append(list(_run_training(cell_cfg, exp).losses))
            except DivergenceError as e:
                failures.append((rate, seed, str(e)))
                print(f"sweep: rate={rate} seed={seed} diverged: {e}", file=sys.stderr)
        per_rate[rate] = runs

    lines = ["rate,t,mean_loss,min_loss,max_loss"]
    curves = []
    for rate in rates:
        runs = per_rate[rate]
        if not runs:
            continue
        horizon = max(len(r) for r in runs)
        # converged cells that stopped early hold their final value
        padded = np.array([r + [r[-1]] * (horizon - len(r)) for r in runs])
        mean = padded.mean(axis=0)
        lo = padded.min(axis=0)
        hi = padded.max(axis=0)
        for t in range(horizon):
            lines.append(
                ",".join([_g17(rate), str(t), _g17(mean[t]), _g17(lo[t]), _g17(hi[t])])
            )
        curves.append((f"rate {rate:g}", [(t, mean[t]) for t in range(horizon)]))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    _svg_plot(
        out / "sweep.svg",
        curves,
        title="mean training loss by participation rate",
        x_label="round",
        y_label="loss (log scale)",
    )
    done = sum(len(r) for r in per_rate.values())
    print(f"sweep: {done} cells completed, {len(failures)} failed")
    return EXIT_OK


def _literal_lambda_min_gram(Xc) -> float:
    """Least eigenvalue of Xc^T Xc: zero when the columns are dependent."""
    if Xc.shape[1] == 0:
        return 0.0
    if analysis.effective_rank(Xc) < Xc.shape[1]:
        return 0.0
    sv = np.linalg.svd(Xc, compute_uv=False)
    return float(sv[-1] ** 2)


def _verify_reports(cfg: ExperimentConfig, exp: Experiment):
    model_kind = cfg.model.kind
    known = _LINEAR_CHECKS if model_kind == MODEL_DEEP_LINEAR else _RELU_CHECKS
    checks = cfg.verify.checks if cfg.verify.checks is not None else known
    T = cfg.federation.rounds
    if cfg.verify.rounds is not None:
        rounds = [t for t in cfg.verify.rounds if t < T]
    else:
        rounds = sorted({0, T // 2, T - 1} & set(range(T))) if T > 0 else []

    reports = []
    gram_dim = exp.X.shape[1] * (exp.Y.shape[0] if exp.Y.ndim == 2 else 1)
    if "init-spectra" in checks:
        reports.extend(analysis.check_init_spectra(exp.init_params, exp.X))
    if "gram-floor" in checks:
        if gram_dim > cfg.analysis.max_gram_dim:
            raise ConfigError(
                f"analysis.max_gram_dim: gram-floor needs a {gram_dim}-dim Gram matrix; "
                f"raise the limit or shrink the data"
            )
        reports.append(analysis.check_gram_floor(exp.init_params, exp.X))
    if "ntk-trace" in checks:
        reports.append(analysis.check_ntk_trace(exp.X))

    round_checks = [c for c in checks if c in (
        "local-descent", "local-deviation", "global-drift", "local-drift", "first-order"
    )]
    if not round_checks or not rounds:
        return reports

    norm_x = float(np.linalg.norm(exp.X, ord=2))
    d_out = exp.Y.shape[0] if exp.Y.ndim == 2 else 1
    n_total = exp.X.shape[1]
    relu_lam = exp.lambda_min if model_kind == MODEL_TWO_LAYER else None

    snapshots = {}
    result = run_fedavg(
        section_to_federation_config(cfg.federation),
        exp.init_params,
        list(exp.batches),
        lambda_min=exp.lambda_min,
        workers=cfg.federation.workers,
        observer=lambda snap: snapshots.setdefault(snap.t, snap),
        observe_rounds=set(rounds),
    )
    loss0 = result.losses[0]

    if model_kind == MODEL_DEEP_LINEAR:
        drift_radius = analysis.drift_radius_deep_linear(
            loss0,
            d_out,
            cfg.federation.n_clients,
            norm_x,
            cfg.model.depth,
            analysis.sigma_min_nonzero(exp.X),
        )
    else:
        drift_radius = analysis.drift_radius_two_layer(
            cfg.federation.n_clients,
            n_total,
            np.sqrt(2.0 * loss0),
            cfg.model.width,
            relu_lam,
        )

    for t in rounds:
        snap = snapshots.get(t)
        if snap is None:
            continue
        members = list(snap.members)
        if "local-descent" in checks:
            worst = None
            for i, c in enumerate(members):
                if model_kind == MODEL_DEEP_LINEAR:
                    rep = analysis.check_local_descent(
                        snap.local_losses[i],
                        cfg.federation.eta,
                        lam=_literal_lambda_min_gram(exp.batches[c].X),
                        depth=cfg.model.depth,
                        d_out=d_out,
                    )
                else:
                    rep = analysis.check_local_descent(
                        snap.local_losses[i], cfg.federation.eta, lam=relu_lam
                    )
                if worst is None or rep.slack > worst[0].slack:
                    worst = (rep, c)
            rep, c = worst
            reports.append(
                dataclasses.replace(rep, context=rep.context | {"t": t, "client": c})
            )
        if "local-deviation" in checks:
            bar_parts = [
                vec_residual(
                    predict(snap.global_params, exp.batches[c].X), exp.batches[c].Y
                )
                for c in members
            ]
            xi_bar_S = np.concatenate(bar_parts)
            for form in ("proportional", "crude"):
                if form == "crude" and model_kind == MODEL_DEEP_LINEAR:
                    continue
                worst = None
                for k in range(1, cfg.federation.local_steps + 1):
                    xi_k = np.concatenate(
                        [
                            vec_residual(
                                predict(snap.trajectories[i][k], exp.batches[c].X),
                                exp.batches[c].Y,
                            )
                            for i, c in enumerate(members)
                        ]
                    )
                    if form == "proportional":
                        rep = analysis.check_local_deviation(
                            xi_k, xi_bar_S, cfg.federation.eta, k,
                            norm_x=norm_x, d_out=d_out,
                        )
                    else:
                        rep = analysis.check_local_deviation(
                            xi_k, xi_bar_S, cfg.federation.eta, k,
                            n_total=n_total, local_steps=cfg.federation.local_steps,
                        )
                    if worst is None or rep.slack > worst.slack:
                        worst = rep
                name = "local-deviation" if form == "proportional" else "local-deviation-crude"
                reports.append(
                    dataclasses.replace(worst, name=name, context=worst.context | {"t": t})
                )
        if "global-drift" in checks:
            rep = analysis.check_drift(
                snap.global_params,
                exp.init_params,
                drift_radius,
                context={"t": t, "loss0": loss0, "radius": drift_radius},
            )
            reports.append(rep)
        if "local-drift" in checks and model_kind == MODEL_DEEP_LINEAR:
            worst = None
            for i, c in enumerate(members):
                for k in range(1, cfg.federation.local_steps + 1):
                    rep = analysis.check_local_drift(
                        snap.trajectories[i][k], snap.global_params, exp.batches[c]
                    )
                    if worst is None or rep.slack > worst[0].slack:
                        worst = (rep, c, k)
            rep, c, k = worst
            reports.append(
                dataclasses.replace(rep, context=rep.context | {"t": t, "client": c, "k": k})
            )
        if "first-order" in checks and model_kind == MODEL_DEEP_LINEAR:
            if gram_dim > cfg.analysis.max_gram_dim:
                raise ConfigError(
                    f"analysis.max_gram_dim: first-order needs {gram_dim}-dim Gram blocks"
                )
            full, half, ratio = analysis.first_order_scaling(
                snap.global_params,
                exp.init_params,
                list(exp.batches),
                members,
                cfg.federation.eta,
                cfg.federation.local_steps,
            )
            ctx = {
                "t": t,
                "scaling_ratio": ratio,
                "reconstruction_gap": full.reconstruction_gap,
                "term_contraction": full.term_contraction,
                "term_gram_shift": full.term_gram_shift,
                "term_local_deviation": full.term_local_deviation,
                "term_local_deviation_padded": full.term_local_deviation_padded,
            }
            reports.append(
                analysis.make_report(
                    "first-order:relative-error",
                    measured=full.relative_error,
                    bound=1e-2,
                    context=ctx,
                )
            )
            reports.append(
                analysis.make_report(
                    "first-order:halving",
                    measured=abs(ratio - 4.0),
                    bound=0.5,
                    context={"t": t, "scaling_ratio": ratio},
                )
            )
    return reports


def cmd_verify(cfg: ExperimentConfig, out_dir) -> int:
    """Run the configured checks and write verify.json; exit 0 iff all pass."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = build_experiment(cfg)
    reports = _verify_reports(cfg, exp)
    all_passed = all(r.passed for r in reports)
    (out / "verify.json").write_text(
        json.dumps(
            _jsonable(
                {
                    "passed": all_passed,
                    "config": json.loads(serialize_config(cfg)),
                    "lambda_min": exp.lambda_min,
                    "perturbed_columns": exp.perturbed_columns,
                    "checks": [_report_dict(r) for r in reports],
                }
            ),
            indent=2,
        )
        + "\n"
    )
    for r in reports:
        state = "PASS" if r.passed else "FAIL"
        print(f"{state} {r.name}: measured={r.measured:.6g} bound={r.bound:.6g}")
    return EXIT_OK if all_passed else EXIT_VERIFY_FAILED


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    fed = cfg.federation
    if args.seed is not None:
        fed = dataclasses.replace(fed, seed=args.seed)
    if args.rate is not None:
        if not 0.0 < args.rate <= 1.0:
            raise ConfigError(f"--rate: must lie in (0, 1], got {args.rate}")
        fed = dataclasses.replace(fed, rate=args.rate, schedule=None)
    if args.rounds is not None:
        if args.rounds < 0:
            raise ConfigError(f"--rounds: must be >= 0, got {args.rounds}")
        fed = dataclasses.replace(fed, rounds=args.rounds)
        if fed.schedule is not None and len(fed.schedule) != args.rounds:
            raise ConfigError("--rounds: conflicts with the explicit schedule length")
    cfg = dataclasses.replace(cfg, federation=fed)
    if args.command == "sweep" and args.seed is not None:
        cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, seeds=(args.seed,)))
    if args.command == "sweep" and args.rate is not None:
        cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, rates=(args.rate,)))
    try:
        section_to_federation_config(cfg.federation)
    except ValueError as e:
        raise ConfigError(f"federation: {e}") from e
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedspectra",
        description="Federated averaging simulator with convergence-theory checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("train", "run one training job and emit trace files"),
        ("sweep", "run a participation-rate x seed grid and emit summaries"),
        ("verify", "run theory checks and emit verify.json"),
    ):
        sp = sub.add_parser(name, help=doc)
        sp.add_argument("--config", required=True, help="path to a JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the run seed")
        sp.add_argument("--rate", type=float, default=None, help="override the participation rate")
        sp.add_argument("--rounds", type=int, default=None, help="override the round count")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as e:
        print(f"config error: cannot read {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _apply_overrides(parse_config(text), args)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out)
        return cmd_verify(cfg, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
