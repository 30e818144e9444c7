"""Command-line pipelines over a JSON run config.

Subcommands: stable-rank, detect, cka, sensitivity, compress, bias.
Each reads one config file, runs the corresponding analysis over one or
more model checkpoints, and writes CSV files whose first lines record the
config hash and root seed, so a rerun with the same config and seed is
byte-identical. Exit codes: 0 success, 2 validation failure, 3 numeric
failure.

Config fields (JSON object):
    model: manifest path, or models: [paths] for checkpoint aggregation
    datasets: {id_train, id_test, ood: {name: path, ...}}
    taps: "all" or list of tap/layer ids (command-specific default)
    epsilon: relative singular-value cut (default 0.01)
    epsilons: sweep list for compress (default 7-point)
    seed, n_samples, noise_norm, batch_size, out_dir
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine, io, metrics, sensitivity, similarity, spectral, stats
from .errors import NumericError, ValidationError

DEFAULT_EPSILONS = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]


@dataclass
class RunConfig:
    model_paths: list[Path]
    id_train: Path | None
    id_test: Path | None
    ood: dict[str, Path]
    taps: list[str] | str | None
    epsilon: float
    epsilons: list[float]
    seed: int
    n_samples: int
    noise_norm: float
    batch_size: int
    out_dir: Path
    method: str | None = None
    config_hash: str = ""
    raw: dict = field(default_factory=dict)


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise ValidationError(f"{what} not found: {path}")
    return path


def load_config(path: str, overrides: argparse.Namespace) -> RunConfig:
    cfg_path = _require_file(Path(path), "config file")
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{cfg_path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{cfg_path}: config must be a JSON object")

    merged = dict(doc)
    if overrides.seed is not None:
        merged["seed"] = overrides.seed
    if overrides.epsilon is not None:
        merged["epsilon"] = overrides.epsilon
    if overrides.taps is not None:
        merged["taps"] = "all" if overrides.taps == "all" else [
            t.strip() for t in overrides.taps.split(",") if t.strip()
        ]
    if overrides.out is not None:
        merged["out_dir"] = overrides.out
    if getattr(overrides, "method", None) is not None:
        merged["method"] = overrides.method

    digest = hashlib.sha256(
        json.dumps(merged, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()

    base = cfg_path.parent

    def respath(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    if "models" in merged:
        model_paths = [respath(p) for p in merged["models"]]
    elif "model" in merged:
        model_paths = [respath(merged["model"])]
    else:
        raise ValidationError("config needs a 'model' path or 'models' list")
    for p in model_paths:
        _require_file(p, "model manifest")

    ds = merged.get("datasets", {})
    if not isinstance(ds, dict):
        raise ValidationError("'datasets' must be an object")
    id_train = respath(ds["id_train"]) if "id_train" in ds else None
    id_test = respath(ds["id_test"]) if "id_test" in ds else None
    ood = {name: respath(p) for name, p in ds.get("ood", {}).items()}
    for p in filter(None, [id_train, id_test, *ood.values()]):
        _require_file(p, "dataset blob")

    taps = merged.get("taps")
    if taps is not None and taps != "all" and not isinstance(taps, list):
        raise ValidationError("'taps' must be \"all\" or a list of tap ids")

    return RunConfig(
        model_paths=model_paths,
        id_train=id_train,
        id_test=id_test,
        ood=ood,
        taps=taps,
        epsilon=float(merged.get("epsilon", spectral.DEFAULT_EPSILON)),
        epsilons=[float(e) for e in merged.get("epsilons", DEFAULT_EPSILONS)],
        seed=int(merged.get("seed", 0)),
        n_samples=int(merged.get("n_samples", 10000)),
        noise_norm=float(merged.get("noise_norm", sensitivity.DEFAULT_NOISE_NORM)),
        batch_size=int(merged.get("batch_size", 256)),
        out_dir=Path(merged.get("out_dir", "out")),
        method=merged.get("method"),
        config_hash=digest,
        raw=merged,
    )


def _write_csv(cfg: RunConfig, name: str, header: list[str], rows: list[list]) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / name
    lines = [f"# config_hash={cfg.config_hash}", f"# seed={cfg.seed}"]
    lines.append(",".join(header))
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(f"{v:.6f}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _load_models(cfg: RunConfig) -> list[io.ModelGraph]:
    return [io.load_model(p) for p in cfg.model_paths]


def _need(cfg: RunConfig, attr: str) -> Path:
    value = getattr(cfg, attr)
    if value is None:
        raise ValidationError(f"config is missing datasets.{attr}")
    return value


def _agg(values: list[float]) -> tuple[float, float]:
    """Median and error bar across checkpoints; a single value has no bar."""
    if len(values) == 1:
        return values[0], 0.0
    q = metrics.quantile_summary(values)
    return q.median, q.error_bar


def _analysis_pairs(graph: io.ModelGraph, taps) -> list[tuple[str, str]]:
    pairs = engine.analysis_taps(graph)
    if taps is None or taps == "all":
        return pairs
    wanted = set(taps)
    picked = [p for p in pairs if p[0] in wanted or p[1] in wanted]
    if not picked:
        raise ValidationError(f"no weighted layer matches taps {sorted(wanted)}")
    return picked


def _equalized(id_set: metrics.ScoreSet, ood_set: metrics.ScoreSet, cfg: RunConfig) -> float:
    n = min(len(id_set), len(ood_set), cfg.n_samples)
    return metrics.auroc(
        metrics.subsample(id_set, n, cfg.seed + 101),
        metrics.subsample(ood_set, n, cfg.seed + 102),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_stable_rank(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    train = io.load_dataset(_need(cfg, "id_train"))
    per_layer: dict[tuple[str, str], dict[str, list[float]]] = {}
    order: list[tuple[str, str]] = []
    for graph in models:
        for layer_id, tap_id in _analysis_pairs(graph, cfg.taps):
            op = spectral.conv_local_operator(graph, layer_id)
            rank_w = spectral.stable_rank(op.matrix)
            bundle = stats.fit_covariance(graph, train, tap_id, batch_size=cfg.batch_size)
            if bundle.degenerate:
                raise NumericError(f"covariance at tap {tap_id!r} is identically zero")
            rank_cov = spectral.stable_rank(bundle.tied_cov)
            key = (layer_id, tap_id)
            if key not in per_layer:
                per_layer[key] = {"w": [], "cov": []}
                order.append(key)
            per_layer[key]["w"].append(rank_w)
            per_layer[key]["cov"].append(rank_cov)
    rows = []
    for layer_id, tap_id in order:
        w_med, w_err = _agg(per_layer[(layer_id, tap_id)]["w"])
        c_med, c_err = _agg(per_layer[(layer_id, tap_id)]["cov"])
        rows.append([layer_id, tap_id, w_med, w_err, c_med, c_err])
    path = _write_csv(cfg, "stable_rank.csv",
                      ["layer", "input_tap", "stable_rank_weight", "stable_rank_weight_err",
                       "stable_rank_cov", "stable_rank_cov_err"], rows)
    return [path]


def _detect_pairs(graph: io.ModelGraph, cfg: RunConfig) -> list[tuple[str, str]]:
    if cfg.taps is None:
        return [engine.penultimate_tap(graph)]
    return _analysis_pairs(graph, cfg.taps)


def cmd_detect(cfg: RunConfig) -> list[Path]:
    methods = ("probability", "feature", "projection")
    if cfg.method and cfg.method != "all":
        if cfg.method not in methods:
            raise ValidationError(f"unknown method {cfg.method!r}; pick one of {methods} or all")
        methods = (cfg.method,)
    models = _load_models(cfg)
    id_test = io.load_dataset(_need(cfg, "id_test"))
    oods = {name: io.load_dataset(p) for name, p in cfg.ood.items()}
    if not oods:
        raise ValidationError("detect needs at least one datasets.ood entry")
    train = io.load_dataset(cfg.id_train) if cfg.id_train else None

    acc: dict[tuple, list[float]] = {}
    order: list[tuple] = []

    def record(key: tuple, value: float):
        if key not in acc:
            acc[key] = []
            order.append(key)
        acc[key].append(value)

    for graph in models:
        pairs = _detect_pairs(cfg=cfg, graph=graph)
        if "probability" in methods:
            id_logits, _ = engine.forward(graph, id_test, batch_size=cfg.batch_size)
            id_scores = metrics.max_softmax(id_logits)
            for name, blob in oods.items():
                logits, _ = engine.forward(graph, blob, batch_size=cfg.batch_size)
                record(("probability", "final", "logits", "max_softmax", name),
                       _equalized(id_scores, metrics.max_softmax(logits), cfg))
        if "feature" in methods:
            if train is None:
                raise ValidationError("feature method needs datasets.id_train (labeled)")
            for layer_id, tap_id in pairs:
                bundle = stats.fit_covariance(graph, train, tap_id, batch_size=cfg.batch_size)
                _, feats = engine.forward(graph, id_test, taps=[tap_id], batch_size=cfg.batch_size)
                id_scores = stats.mahalanobis(bundle, feats[0])
                for name, blob in oods.items():
                    _, ofeats = engine.forward(graph, blob, taps=[tap_id], batch_size=cfg.batch_size)
                    record(("feature", layer_id, tap_id, "mahalanobis", name),
                           _equalized(id_scores, stats.mahalanobis(bundle, ofeats[0]), cfg))
        if "projection" in methods:
            for layer_id, tap_id in pairs:
                op = spectral.conv_local_operator(graph, layer_id)
                basis = spectral.projection_basis(op, cfg.epsilon)
                _, feats = engine.forward(graph, id_test, taps=[tap_id], batch_size=cfg.batch_size)
                id_proj = spectral.projection_scores(basis, feats[0])
                for name, blob in oods.items():
                    _, ofeats = engine.forward(graph, blob, taps=[tap_id], batch_size=cfg.batch_size)
                    ood_proj = spectral.projection_scores(basis, ofeats[0])
                    record(("projection", layer_id, tap_id, "projection_ratio", name),
                           _equalized(id_proj.ratio, ood_proj.ratio, cfg))
                    record(("projection", layer_id, tap_id, "projection_norm", name),
                           _equalized(id_proj.norm, ood_proj.norm, cfg))

    rows = []
    for key in order:
        med, err = _agg(acc[key])
        rows.append(list(key) + [med, err])
    path = _write_csv(cfg, "detect.csv",
                      ["method", "layer", "tap", "score", "ood_dataset", "auroc", "auroc_err"],
                      rows)
    return [path]


def _cka_taps(graph: io.ModelGraph, cfg: RunConfig) -> list[str]:
    if cfg.taps == "all":
        return engine.all_tap_ids(graph)
    if cfg.taps:
        for t in cfg.taps:
            engine.validate_tap(graph, t)
        return list(cfg.taps)
    seen = []
    for _, tap_id in engine.analysis_taps(graph):
        if tap_id not in seen:
            seen.append(tap_id)
    last = graph.layers[-1].id
    if last not in seen:
        seen.append(last)
    return seen


def cmd_cka(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    dataset = io.load_dataset(_need(cfg, "id_test"))
    n = min(cfg.n_samples, len(dataset))
    written = []
    pair_rows = []
    for idx, graph in enumerate(models):
        taps = _cka_taps(graph, cfg)
        grid = similarity.cka_grid(graph, dataset, taps, n_samples=n, seed=cfg.seed,
                                   batch_size=cfg.batch_size)
        suffix = "" if len(models) == 1 else f"_{idx}"
        grid_path = cfg.out_dir / f"cka_grid{suffix}.csv"
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        preamble = f"# config_hash={cfg.config_hash}\n# seed={cfg.seed}\n"
        grid_path.write_text(preamble + similarity.grid_csv(grid), encoding="utf-8")
        written.append(grid_path)
        for i in range(len(taps)):
            for j in range(len(taps)):
                rep = grid.reports[i][j]
                pair_rows.append([idx, rep.tap_a, rep.tap_b, rep.cka, rep.lr, rep.cca,
                                  rep.cka_matrix_stable_rank])
    written.append(_write_csv(cfg, "cka_pairs.csv",
                              ["checkpoint", "tap_a", "tap_b", "cka", "lr", "cca",
                               "cka_matrix_stable_rank"], pair_rows))
    return written


def cmd_sensitivity(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    id_test = io.load_dataset(_need(cfg, "id_test"))
    oods = {name: io.load_dataset(p) for name, p in cfg.ood.items()}
    rows = []
    for idx, graph in enumerate(models):
        final = graph.layers[-1].id
        boundary = set(engine.block_boundary_taps(graph))
        if cfg.taps and cfg.taps != "all":
            inject_taps = list(cfg.taps)
            for t in inject_taps:
                if t not in boundary:
                    raise ValidationError(
                        f"tap {t!r} is inside a residual span; valid taps: {sorted(boundary)}"
                    )
        else:
            inject_taps = [t for _, t in engine.analysis_taps(graph) if t in boundary]
            if "input" not in inject_taps:
                inject_taps.insert(0, "input")
        n = min(cfg.n_samples, len(id_test))
        id_slice = id_test.images[:n]
        for k, tap in enumerate(inject_taps):
            rep = sensitivity.noise_sensitivity(
                graph, id_slice, tap, final,
                noise_norm=cfg.noise_norm, seed=cfg.seed + k, batch_size=cfg.batch_size,
            )
            row = [idx, "id_test", tap, final, rep.median_psi,
                   rep.quartiles[0], rep.quartiles[1], len(rep.per_sample_psi),
                   rep.excluded_count, ""]
            rows.append(row)
            for name, blob in oods.items():
                m = min(cfg.n_samples, len(blob))
                orep = sensitivity.noise_sensitivity(
                    graph, blob.images[:m], tap, final,
                    noise_norm=cfg.noise_norm, seed=cfg.seed + k, batch_size=cfg.batch_size,
                )
                auc = sensitivity.sensitivity_auroc(rep, orep)
                rows.append([idx, name, tap, final, orep.median_psi,
                             orep.quartiles[0], orep.quartiles[1], len(orep.per_sample_psi),
                             orep.excluded_count, f"{auc:.6f}"])
    path = _write_csv(cfg, "sensitivity.csv",
                      ["checkpoint", "dataset", "inject_tap", "observe_tap", "median_psi",
                       "q25", "q75", "n", "excluded", "auroc_vs_id"], rows)
    return [path]


def cmd_compress(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    id_test = io.load_dataset(_need(cfg, "id_test"))
    if id_test.labels is None:
        raise ValidationError("compress needs a labeled id_test to report accuracy")
    n = min(cfg.n_samples, len(id_test))
    images = id_test.images[:n]
    labels = id_test.labels[:n]
    rows = []
    for idx, graph in enumerate(models):
        for eps in cfg.epsilons:
            census = spectral.parameter_census(graph, eps)
            logits, _ = engine.forward_truncated(graph, eps, images, batch_size=cfg.batch_size)
            accuracy = float((np.argmax(logits, axis=1) == labels).mean())
            rows.append([idx, eps, census["kept"], census["total"],
                         census["ratio"], accuracy])
    path = _write_csv(cfg, "compress.csv",
                      ["checkpoint", "epsilon", "kept_params", "total_params",
                       "kept_ratio", "accuracy"], rows)
    return [path]


def cmd_bias(cfg: RunConfig) -> list[Path]:
    models = _load_models(cfg)
    named = {}
    if cfg.id_test is not None:
        named["id_test"] = io.load_dataset(cfg.id_test)
    for name, p in cfg.ood.items():
        named[name] = io.load_dataset(p)
    if not named:
        raise ValidationError("bias needs id_test or ood datasets")
    acc: dict[str, dict] = {}
    order = []
    k = None
    for graph in models:
        k = graph.class_count
        for name, blob in named.items():
            n = min(cfg.n_samples, len(blob))
            logits, _ = engine.forward(graph, blob.images[:n], batch_size=cfg.batch_size)
            rates = metrics.prediction_rates(logits)
            cv = metrics.coefficient_of_variation(rates)
            if name not in acc:
                acc[name] = {"cv": [], "rates": []}
                order.append(name)
            acc[name]["cv"].append(cv)
            acc[name]["rates"].append(rates)
    rows = []
    for name in order:
        cv_med, cv_err = _agg(acc[name]["cv"])
        mean_rates = np.mean(np.stack(acc[name]["rates"]), axis=0)
        rows.append([name, cv_med, cv_err] + [float(r) for r in mean_rates])
    path = _write_csv(cfg, "bias.csv",
                      ["dataset", "cv", "cv_err"] + [f"rate_{i}" for i in range(k)], rows)
    return [path]


# ---------------------------------------------------------------------------


_COMMANDS = {
    "stable-rank": cmd_stable_rank,
    "detect": cmd_detect,
    "cka": cmd_cka,
    "sensitivity": cmd_sensitivity,
    "compress": cmd_compress,
    "bias": cmd_bias,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerlens",
        description="Layerwise spectral analysis and OOD detection over exported checkpoints.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--epsilon", type=float, help="relative singular-value cut")
        p.add_argument("--taps", help='comma-separated tap ids, or "all"')
        if name == "detect":
            p.add_argument("--method", choices=["probability", "feature", "projection", "all"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "method"):
        args.method = None
    try:
        cfg = load_config(args.config, args)
        written = _COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
