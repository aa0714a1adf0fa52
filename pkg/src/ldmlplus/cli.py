"""Command-line front end: ``ldmlplus {synth,pca,train,eval,histogram}``.

Every command accepts ``--config`` (YAML or JSON), ``--seed`` and ``--out``.
Flags override config values. Each command writes its outputs into ``--out``
and prints a one-line JSON summary on stdout.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .dataset import PairPolicy
from .errors import ConfigError, InputError, LdmlError
from .evaluation import distance_histograms, overlap_coefficient, project_views
from .formats import (
    FeatureTable,
    load_model,
    model_summary,
    read_features,
    save_model,
    write_features_binary,
    write_features_csv,
)
from .objective import HyperParams
from .optimizer import TrainConfig
from .pipeline import MODES, evaluate, fit, make_pair_set
from .preprocess import pca_fit, pca_transform
from .synth import PrivilegedSpec, SynthConfig, ViewSpec, generate

__all__ = ["main", "load_config", "build_train_config", "build_synth_config", "build_pair_policy"]

_SECTIONS = ("synth", "train", "pairs", "pca", "eval")
_TRAIN_KEYS = {"lam", "r", "eta0_m", "eta0_p", "cap_s", "max_iters", "rel_tol", "use_beta",
               "beta_over", "freeze_p", "sigma"}
_PAIR_KEYS = {"mode", "neg_ratio", "max_negatives", "cross_camera"}
_PCA_KEYS = {"energy"}
_EVAL_KEYS = {"protocol", "n_repeats", "threads", "ranks"}
_SYNTH_KEYS = {"n_ids", "samples_per_id_per_cam", "n_cams", "latent_dim", "views", "privileged",
               "difficulty_spread"}


# ---------------------------------------------------------------- config


def load_config(path: Optional[str]) -> dict:
    """Parse a YAML/JSON config file into a dict of sections (empty when ``path`` is None)."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"--config: file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"--config: cannot parse {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("--config: top level must be a mapping of sections")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"--config: unknown sections {sorted(unknown)}; expected {list(_SECTIONS)}")
    for name, section in data.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"--config: section {name!r} must be a mapping")
    return {k: dict(v or {}) for k, v in data.items()}


def _section(cfg: dict, name: str, allowed: set) -> dict:
    sec = dict(cfg.get(name, {}))
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    return sec


def _config_values(build):
    # value errors raised while building configs are configuration problems
    try:
        return build()
    except ConfigError:
        raise
    except (InputError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_train_config(cfg: dict, seed: int = 0, sigma_one: bool = False) -> TrainConfig:
    sec = _section(cfg, "train", _TRAIN_KEYS)
    sigma = 1.0 if sigma_one else sec.pop("sigma", "mean-euclidean")
    sec.pop("sigma", None)

    def build():
        hp = HyperParams(lam=float(sec.pop("lam", 1e-3)), r=float(sec.pop("r", 3.0)),
                         global_sigma=sigma if isinstance(sigma, str) else float(sigma))
        return TrainConfig(hp=hp, seed=seed, **sec)

    return _config_values(build)


def build_pair_policy(cfg: dict, seed: int = 0) -> PairPolicy:
    sec = _section(cfg, "pairs", _PAIR_KEYS)
    return _config_values(lambda: PairPolicy(seed=seed, **sec))


def build_synth_config(cfg: dict, seed: int = 0) -> SynthConfig:
    sec = _section(cfg, "synth", _SYNTH_KEYS)

    def build():
        kw = dict(sec)
        if "views" in kw:
            kw["views"] = tuple(
                ViewSpec(int(v["dim"]), float(v["noise_sigma"]), int(v.get("projection_seed", m + 1)),
                         tuple(v.get("corrupt", ())), float(v.get("corrupt_sigma", 0.0)))
                for m, v in enumerate(kw["views"])
            )
        if "privileged" in kw:
            p = kw["privileged"]
            kw["privileged"] = (PrivilegedSpec(random=True) if p == "random"
                                else PrivilegedSpec(**p))
        return SynthConfig(seed=seed, **kw)

    return _config_values(build)


def _pca_energy(cfg: dict, flag: Optional[float]) -> Optional[float]:
    if flag is not None:
        return flag
    return _section(cfg, "pca", _PCA_KEYS).get("energy")


def _eval_options(cfg: dict, args) -> dict:
    sec = _section(cfg, "eval", _EVAL_KEYS)
    opts = {
        "protocol": sec.get("protocol", "single-shot"),
        "n_repeats": sec.get("n_repeats", 1),
        "threads": sec.get("threads", 1),
        "ranks": sec.get("ranks", [1, 5, 10, 20]),
    }
    for key in ("protocol", "n_repeats", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    if not isinstance(opts["n_repeats"], int) or opts["n_repeats"] < 1:
        raise ConfigError("n_repeats must be an integer >= 1")
    if not isinstance(opts["threads"], int) or opts["threads"] < 1:
        raise ConfigError("threads must be an integer >= 1")
    return opts


# ---------------------------------------------------------------- io helpers


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_flag(path: Optional[str], flag: str) -> FeatureTable:
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not Path(path).exists():
        raise InputError(f"{flag}: file not found: {path}")
    return read_features(path)


def _read_views(paths: Sequence[str]) -> list:
    if not paths:
        raise ConfigError("--view is required (repeat it for several views)")
    return [_read_flag(p, "--view") for p in paths]


def _check_aligned(tables: Sequence[FeatureTable], names: Sequence[str]) -> None:
    ref = tables[0]
    for t, name in zip(tables[1:], names[1:]):
        if len(t) != len(ref) or not (np.array_equal(t.ids, ref.ids) and np.array_equal(t.cams, ref.cams)):
            raise InputError(f"{name}: identity/camera columns differ from {names[0]}")


def _write_table(path: Path, fmt: str, ids, cams, x) -> None:
    if fmt == "csv":
        write_features_csv(path, ids, cams, x)
    else:
        write_features_binary(path, ids, cams, x)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> dict:
    config = build_synth_config(cfg, args.seed)
    data = generate(config)
    out = _out_dir(args.out)
    ext = "csv" if args.format == "csv" else "bin"
    files = []
    for split_name, split in (("train", data.train), ("test", data.test)):
        for m, x in enumerate(split.views):
            path = out / f"{split_name}_view{m}.{ext}"
            _write_table(path, args.format, split.ids, split.cams, x)
            files.append(path.name)
        if split.privileged is not None:
            path = out / f"{split_name}_privileged.{ext}"
            _write_table(path, args.format, split.ids, split.cams, split.privileged)
            files.append(path.name)
    summary = {"command": "synth", "seed": args.seed, "files": files, "config": asdict(config)}
    _write_json(out / "synth.json", summary)
    return {"command": "synth", "files": files}


def cmd_pca(args, cfg) -> dict:
    energy = _pca_energy(cfg, args.energy)
    if energy is None:
        energy = 1.0
    table = _read_flag(args.input, "--input")
    energy = _config_values(lambda: float(energy))
    transform = pca_fit(table.features, energy)
    out = _out_dir(args.out)
    outputs = []
    for path in [args.input] + list(args.apply or []):
        tab = table if path == args.input else _read_flag(path, "--apply")
        y = pca_transform(transform, tab.features)
        dest = out / f"pca_{Path(path).stem}.csv"
        write_features_csv(dest, tab.ids, tab.cams, y)
        outputs.append(dest.name)
    info = {
        "command": "pca",
        "input_dim": transform.dim,
        "n_components": transform.n_components,
        "retained_energy": transform.retained_energy,
        "energy": energy,
        "mean": transform.mean.tolist(),
        "basis": transform.basis.tolist(),
        "files": outputs,
    }
    _write_json(out / "pca.json", info)
    return {k: info[k] for k in ("command", "input_dim", "n_components", "retained_energy", "files")}


def cmd_train(args, cfg) -> dict:
    if args.mode != "ldml" and args.privileged is None:
        raise ConfigError(f"--privileged is required for mode {args.mode}")
    views = _read_views(args.view)
    tables = list(views)
    names = [f"--view {p}" for p in args.view]
    priv = None
    if args.mode != "ldml":
        priv = _read_flag(args.privileged, "--privileged")
        tables.append(priv)
        names.append(f"--privileged {args.privileged}")
    _check_aligned(tables, names)
    if args.mode != "mvldml+" and len(views) != 1:
        raise ConfigError(f"mode {args.mode} takes exactly one --view")
    config = build_train_config(cfg, args.seed, args.sigma_one)
    if args.sigma_one and args.mode != "ldml":
        raise ConfigError("--sigma-one applies to mode ldml only")
    policy = build_pair_policy(cfg, args.seed)
    energy = _pca_energy(cfg, args.pca_energy)
    ref = views[0]
    start = time.perf_counter()
    model = fit(args.mode, ref.ids, ref.cams, [v.features for v in views],
                None if priv is None else priv.features, config,
                pca_energy=energy, policy=policy)
    elapsed = time.perf_counter() - start
    out = _out_dir(args.out)
    save_model(model, out / "model.pmlm")
    log = model_summary(model)
    log.update({
        "command": "train",
        "seed": args.seed,
        "sigma_one": bool(args.sigma_one),
        "pca_energy": energy,
        "wall_clock_s": elapsed,
        "eta_first": {str(k): v for k, v in model.eta_first.items()},
    })
    _write_json(out / "train_log.json", log)
    return {"command": "train", "mode": model.mode, "iterations": model.n_iters,
            "final_objective": model.history[-1], "converged": model.converged}


def _split_seeds(master: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


def _report_row(report, ranks) -> dict:
    row = {f"rank{k}": report.rank(k) for k in ranks if k <= report.cmc.size}
    row["map"] = report.map
    row["n_probes"] = report.n_probes
    row["n_excluded"] = report.n_excluded
    return row


def _split_by_identity(tables, seed: int):
    ids = tables[0].ids
    uniq = np.unique(ids)
    if uniq.size < 4:
        raise InputError("need at least four identities to split into train and test")
    perm = np.random.default_rng(seed).permutation(uniq)
    train_mask = np.isin(ids, np.sort(perm[: uniq.size // 2]))
    return train_mask, ~train_mask


def _one_repeat(args, cfg, opts, seed: int, tables):
    """Train and evaluate one split. ``tables`` is None for synthetic data."""
    config = build_train_config(cfg, seed, args.sigma_one)
    policy = build_pair_policy(cfg, seed)
    energy = _pca_energy(cfg, args.pca_energy)
    if tables is None:
        data = generate(build_synth_config(cfg, seed))
        tr, te = data.train, data.test
        tr_ids, tr_cams, tr_views, tr_priv = tr.ids, tr.cams, tr.views, tr.privileged
        te_ids, te_cams, te_views = te.ids, te.cams, te.views
    else:
        views, priv = tables
        tr_mask, te_mask = _split_by_identity(views, seed)
        ref = views[0]
        tr_ids, tr_cams = ref.ids[tr_mask], ref.cams[tr_mask]
        te_ids, te_cams = ref.ids[te_mask], ref.cams[te_mask]
        tr_views = [v.features[tr_mask] for v in views]
        te_views = [v.features[te_mask] for v in views]
        tr_priv = None if priv is None else priv.features[tr_mask]
    indices = None if args.view_index is None else list(args.view_index)
    model = fit(args.mode, tr_ids, tr_cams, tr_views, None if args.mode == "ldml" else tr_priv,
                config, view_indices=indices, pca_energy=energy, policy=policy)
    if indices is None:
        indices = list(range(len(te_views))) if args.mode == "mvldml+" else [0]
    return evaluate(model, te_ids, te_cams, te_views, indices, opts["protocol"])


def _write_reports(out: Path, reports, seeds, opts, extra) -> dict:
    ranks = opts["ranks"]
    rows = [_report_row(r, ranks) for r in reports]
    length = min(r.cmc.size for r in reports)
    cmcs = np.vstack([r.cmc[:length] for r in reports])
    keys = [k for k in rows[0] if k not in ("n_probes", "n_excluded")]
    summary = {k: {"mean": float(np.mean([row[k] for row in rows])),
                   "std": float(np.std([row[k] for row in rows]))} for k in keys}
    doc = {
        "command": "eval",
        "protocol": opts["protocol"],
        "n_repeats": len(reports),
        "split_seeds": seeds,
        "summary": summary,
        "splits": rows,
        "cmc_mean": cmcs.mean(axis=0).tolist(),
        "cmc_std": cmcs.std(axis=0).tolist(),
    }
    doc.update(extra)
    _write_json(out / "report.json", doc)
    with open(out / "cmc.csv", "w") as fh:
        fh.write("rank,cmc_mean,cmc_std\n")
        for k, (m, s) in enumerate(zip(cmcs.mean(axis=0), cmcs.std(axis=0)), start=1):
            fh.write(f"{k},{float(m)!r},{float(s)!r}\n")
    return {"command": "eval", "n_repeats": len(reports), "rank1": summary["rank1"], "map": summary["map"]}


def cmd_eval(args, cfg) -> dict:
    opts = _eval_options(cfg, args)
    out = _out_dir(args.out)
    if args.model is not None:
        model = load_model(args.model)
        views = _read_views(args.view)
        _check_aligned(views, [f"--view {p}" for p in args.view])
        indices = list(range(len(views))) if args.view_index is None else list(args.view_index)
        ref = views[0]
        report = evaluate(model, ref.ids, ref.cams, [v.features for v in views], indices, opts["protocol"])
        return _write_reports(out, [report], [], opts, {"model": str(args.model), "mode": model.mode})

    if args.mode is None:
        raise ConfigError("eval needs either --model or --mode")
    tables = None
    if args.view:
        views = _read_views(args.view)
        priv = None
        names = [f"--view {p}" for p in args.view]
        if args.mode != "ldml":
            priv = _read_flag(args.privileged, "--privileged")
            names.append(f"--privileged {args.privileged}")
        _check_aligned(views + ([priv] if priv is not None else []), names)
        tables = (views, priv)
    seeds = _split_seeds(args.seed, opts["n_repeats"])
    with ThreadPoolExecutor(max_workers=opts["threads"]) as pool:
        reports = list(pool.map(lambda s: _one_repeat(args, cfg, opts, s, tables), seeds))
    source = "features" if tables is not None else "synth"
    return _write_reports(out, reports, seeds, opts, {"mode": args.mode, "source": source,
                                                      "master_seed": args.seed})


def cmd_histogram(args, cfg) -> dict:
    model = load_model(args.model)
    views = _read_views(args.view)
    tables = list(views)
    names = [f"--view {p}" for p in args.view]
    priv = None
    if args.privileged is not None:
        priv = _read_flag(args.privileged, "--privileged")
        tables.append(priv)
        names.append(f"--privileged {args.privileged}")
    _check_aligned(tables, names)
    if len(views) != model.n_views:
        raise InputError(f"model has {model.n_views} views but {len(views)} --view files were given")
    projected = project_views(model, [v.features for v in views])
    ref = views[0]
    pair_set = make_pair_set(ref.ids, ref.cams, projected, None if priv is None else priv.features,
                             build_pair_policy(cfg, args.seed))
    out = _out_dir(args.out)
    overlaps = {}
    jobs = []
    for m in range(model.n_views):
        jobs.append((f"original_view{m}_euclidean", "original", m, None))
        jobs.append((f"original_view{m}_learned", "original", m, model.metrics[m]))
    if priv is not None:
        jobs.append(("privileged_euclidean", "privileged", 0, None))
        if model.privileged_metric is not None:
            jobs.append(("privileged_learned", "privileged", 0, model.privileged_metric))
    for name, space, m, metric in jobs:
        h = distance_histograms(pair_set, metric, space=space, view=m, bins=args.bins)
        h.to_csv(out / f"hist_{name}.csv")
        overlaps[name] = overlap_coefficient(h)
    _write_json(out / "histogram.json", {"command": "histogram", "bins": args.bins, "overlap": overlaps})
    return {"command": "histogram", "overlap": overlaps}


# ---------------------------------------------------------------- parser


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with synth/train/pairs/pca/eval sections")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out", default=".", help="output directory (created if missing)")

    p = argparse.ArgumentParser(prog="ldmlplus", description="Metric learning with privileged information.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic train/test features")
    s.add_argument("--format", choices=("csv", "binary"), default="csv")

    s = sub.add_parser("pca", parents=[common], help="fit PCA on a feature file")
    s.add_argument("--input", help="feature file used to fit the projection")
    s.add_argument("--apply", action="append", help="extra feature file to project (repeatable)")
    s.add_argument("--energy", type=float, help="retained variance fraction in (0, 1]")

    s = sub.add_parser("train", parents=[common], help="train an ldml / ldml+ / mvldml+ model")
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--view", action="append", help="original-view feature file (repeatable)")
    s.add_argument("--privileged", help="privileged feature file (ldml+ and mvldml+)")
    s.add_argument("--sigma-one", action="store_true", help="ldml with the fixed threshold sigma=1")
    s.add_argument("--pca-energy", type=float, help="PCA each view first, keeping this energy")

    s = sub.add_parser("eval", parents=[common], help="rank test identities (CMC, mAP)")
    s.add_argument("--model", help="trained model file; evaluates --view files directly")
    s.add_argument("--mode", choices=MODES, help="train+evaluate over repeated identity splits")
    s.add_argument("--view", action="append", help="feature file (repeatable)")
    s.add_argument("--view-index", type=int, action="append", help="select views by index")
    s.add_argument("--privileged", help="privileged feature file for repeated-split training")
    s.add_argument("--sigma-one", action="store_true")
    s.add_argument("--pca-energy", type=float)
    s.add_argument("--protocol", choices=("single-shot", "market"))
    s.add_argument("--n-repeats", dest="n_repeats", type=int)
    s.add_argument("--threads", type=int, help="worker threads for repeated splits")

    s = sub.add_parser("histogram", parents=[common], help="pair-distance histograms of a model")
    s.add_argument("--model", required=True)
    s.add_argument("--view", action="append")
    s.add_argument("--privileged")
    s.add_argument("--bins", type=int, default=50)
    return p


_COMMANDS = {
    "synth": cmd_synth,
    "pca": cmd_pca,
    "train": cmd_train,
    "eval": cmd_eval,
    "histogram": cmd_histogram,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        # BLAS pinned to one thread keeps results bitwise independent of the machine
        with threadpool_limits(limits=1):
            summary = _COMMANDS[args.command](args, cfg)
    except LdmlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(summary, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
