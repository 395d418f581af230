"""Command-line front end.

Subcommands: ``train``, ``eval``, ``demo``, ``synth`` and ``sweep``.  Output
files go to ``--out``, else to ``$TRUSTFUSION_OUT``, else to ``./runs/<cmd>``.

Files written by ``train`` (``eval`` writes the last four):

    manifest.txt        key = value; enough to repeat the run (``train --manifest``)
    checkpoint.txt      network tensors plus the resolved config
    epochs.csv          one row per epoch: stage, epoch, loss, accuracies
    metrics.txt         key = value metrics on the test split
    metrics.csv         the same as one header row plus one value row
    conflict_ratio.csv  V x V pairwise conflict ratio between view predictions
    predictions.csv     one row per test instance
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import data as data_mod
from .data import DatasetError, SynthSpec, inject_noise, load_dataset, save_dataset, split
from .metrics import conflict_matrix, summarize
from .neural import assign_params, load_checkpoint, save_checkpoint
from .sl_core import (
    MultinomialOpinion,
    ReferralOpinion,
    bcf_fuse_all,
    degree_of_trust,
    projected_probability,
    trust_discount,
)
from .training import (
    DATASET_LR,
    TrainConfig,
    TrainResult,
    build_nets,
    predict_batch,
    predict_full,
    prepare,
    read_config_file,
    train,
)

OUT_ENV = "TRUSTFUSION_OUT"
METRIC_KEYS = ("top1", "fleiss_kappa", "mvagt", "auroc")

log = logging.getLogger("trustfusion")


class CliError(Exception):
    pass


# -- small helpers ----------------------------------------------------------


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _out_dir(args, default: str) -> str:
    path = args.out or os.environ.get(OUT_ENV) or os.path.join("runs", default)
    os.makedirs(path, exist_ok=True)
    return path


def _write_kv(path, items) -> None:
    with open(path, "w") as fh:
        for key, value in items:
            fh.write(f"{key} = {_fmt(value)}\n")


def _read_kv(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            key, sep, value = line.partition("=")
            if sep:
                out[key.strip()] = value.strip()
    return out


# -- config resolution -------------------------------------------------------


def _preset_for(name: str | None):
    if not name:
        return None
    return DATASET_LR.get(name.lower())


def resolve_config(args, ds_name: str | None = None, base: dict | None = None) -> TrainConfig:
    """Defaults, then per-dataset preset, then config file, then flags."""
    raw = dict(base or {})
    preset = _preset_for(getattr(args, "preset", None) or ds_name)
    if getattr(args, "preset", None) and preset is None:
        raise CliError(f"unknown preset {args.preset!r}; choose from {', '.join(DATASET_LR)}")
    if preset is not None and not base:
        raw["lr"], raw["rlr"] = map(str, preset)
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad configuration: {exc}") from exc
    flags = {
        "seed": args.seed,
        "lr": args.lr,
        "rlr": args.rlr,
        "warmup_epochs": args.warmup_epochs,
        "smoothing_eta": args.smoothing,
        "stage_epochs": args.stage_epochs,
        "batch_size": args.batch_size,
        "normalize": args.normalize,
    }
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    if args.pseudo_view:
        cfg = replace(cfg, use_pseudo_view=True)
    if args.no_td:
        cfg = replace(cfg, use_td=False)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return cfg


def _load(path) -> data_mod.MultiViewDataset:
    if not path:
        raise CliError("--dataset is required")
    return load_dataset(path)


# -- output writers ------------------------------------------------------------


def rater_views(cfg: TrainConfig, v: int) -> list[int]:
    """Real views only; the pseudo view (last) is not a rater."""
    return list(range(v - 1 if cfg.use_pseudo_view else v))


def evaluation_outputs(nets, ds, cfg: TrainConfig, out: str, extra=()) -> dict[str, float]:
    """Write metrics.txt/.csv, conflict_ratio.csv and predictions.csv."""
    xs, y = ds.subset(ds.test_idx)
    pred = predict_full(nets, xs, cfg.use_td)
    record = predict_batch(nets, xs, y, cfg.use_td)
    raters = rater_views(cfg, ds.v)
    scores = summarize(record, ds.k, rater_views=raters)
    rows = [(key, scores[key]) for key in METRIC_KEYS]
    rows += [("n_test", len(y)), ("n_conflict", int(pred.conflict.sum())), *extra]
    _write_kv(os.path.join(out, "metrics.txt"), rows)
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([k for k, _ in rows])
        w.writerow([_fmt(v) for _, v in rows])

    view_labels = np.argmax(pred.view_belief, axis=2)
    names = [f"view{v}" for v in range(ds.v)]
    with open(os.path.join(out, "conflict_ratio.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *names])
        for name, row in zip(names, conflict_matrix(view_labels)):
            w.writerow([name, *map(_fmt, row)])

    with open(os.path.join(out, "predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["index", "true", "pred", "conflict", "uncertainty"]
            + [f"belief{k}" for k in range(ds.k)]
            + [f"{n}_{kind}" for n in names for kind in ("label", "dot", "uncertainty")]
        )
        for i, idx in enumerate(ds.test_idx):
            row = [idx, y[i], pred.labels[i], int(pred.conflict[i]), pred.fused_uncertainty[i]]
            row += list(pred.fused_belief[i])
            for v in range(ds.v):
                row += [view_labels[i, v], pred.trust[i, v], pred.view_uncertainty[i, v]]
            w.writerow(map(_fmt, row))
    return scores


def write_epochs(path, result: TrainResult) -> None:
    v = result.dataset.v
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "mean_loss", "train_accuracy", "annealing", "skipped"]
                   + [f"view{i}_accuracy" for i in range(v)])
        for r in result.reports:
            w.writerow(map(_fmt, [r.stage, r.epoch, r.mean_loss, r.train_accuracy, r.annealing, r.skipped,
                                  *r.view_accuracies]))


def checkpoint_meta(cfg: TrainConfig, raw_ds) -> dict[str, str]:
    meta = {f"config.{k}": v for k, v in cfg.to_dict().items()}
    meta["dataset.fingerprint"] = raw_ds.fingerprint()
    meta["dataset.name"] = raw_ds.name or "dataset"
    return meta


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    base = None
    if args.manifest:
        man = _read_kv(args.manifest)
        base = {k[len("config."):]: v for k, v in man.items() if k.startswith("config.")}
        args.dataset = args.dataset or man.get("dataset")
    raw_ds = _load(args.dataset)
    cfg = resolve_config(args, raw_ds.name, base)
    out = _out_dir(args, "train")
    result = train(raw_ds, cfg)
    cfg = result.config

    ck_path = os.path.join(out, "checkpoint.txt")
    save_checkpoint(ck_path, result.nets.all_params(), checkpoint_meta(cfg, raw_ds))
    write_epochs(os.path.join(out, "epochs.csv"), result)
    scores = evaluation_outputs(result.nets, result.dataset, cfg, out, [("skipped_train", result.skipped)])

    manifest = [(f"config.{k}", v) for k, v in cfg.to_dict().items()]
    manifest += [
        ("seed", cfg.seed),
        ("td", "true" if cfg.use_td else "false"),
        ("views", result.dataset.v),
        ("dataset", os.path.abspath(args.dataset)),
        ("dataset_fingerprint", raw_ds.fingerprint()),
        ("checkpoint", os.path.abspath(ck_path)),
        ("epochs", os.path.abspath(os.path.join(out, "epochs.csv"))),
        ("metrics", os.path.abspath(os.path.join(out, "metrics.txt"))),
        ("metrics_csv", os.path.abspath(os.path.join(out, "metrics.csv"))),
        ("predictions", os.path.abspath(os.path.join(out, "predictions.csv"))),
    ]
    _write_kv(os.path.join(out, "manifest.txt"), manifest)
    print(" ".join(f"{k}={scores[k]:.4f}" for k in METRIC_KEYS))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    params, meta = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    raw_ds = _load(args.dataset)
    if meta.get("dataset.fingerprint") != raw_ds.fingerprint():
        raise CliError("dataset does not match the one the checkpoint was trained on")
    ds = prepare(raw_ds, cfg)
    if (ds.k, ds.v) != (cfg.k, cfg.v):
        raise CliError("checkpoint and dataset disagree on classes or views")
    nets = build_nets(ds, cfg)
    assign_params(nets, params)
    if args.noise_level:
        seed = cfg.seed if args.noise_seed is None else args.noise_seed
        ds = inject_noise(ds, args.noise_level, args.noise_fraction, seed)
    out = _out_dir(args, "eval")
    extra = [("noise_level", float(args.noise_level or 0.0)), ("noise_fraction", float(args.noise_fraction))]
    scores = evaluation_outputs(nets, ds, cfg, out, extra)
    print(" ".join(f"{k}={scores[k]:.4f}" for k in METRIC_KEYS))
    return 0


# worked example: views' (safe, unsafe) opinions and (trust, distrust, u) referrals
DEMO_VIEWS = {
    "Captain": ((0.85, 0.05), 0.10),
    "Dolphin": ((0.05, 0.90), 0.05),
    "PolarBear": ((0.75, 0.20), 0.05),
}
DEMO_REFERRALS = {
    "Captain": (0.6, 0.3, 0.1),
    "Dolphin": (0.9, 0.0, 0.1),
    "PolarBear": (0.2, 0.7, 0.1),
}
# printed two-decimal values the demo must reproduce
DEMO_GOLDEN = {
    "fused": (0.68, 0.31, 0.01),
    "dot": (0.65, 0.95, 0.25),
    "discounted": {"Captain": (0.55, 0.03, 0.42), "Dolphin": (0.04, 0.86, 0.10), "PolarBear": (0.19, 0.05, 0.76)},
    "fused_td": (0.22, 0.70, 0.08),
}
CLASSES = ("Safe", "Unsafe")


def table_form(op: MultinomialOpinion) -> tuple[float, float, float]:
    """Two-decimal table form: beliefs truncated, uncertainty as the remainder."""
    b = np.floor(np.asarray(op.belief) * 100 + 1e-9) / 100
    return (float(b[0]), float(b[1]), round(1.0 - float(b.sum()), 2))


def demo_values():
    views = {n: MultinomialOpinion(b, u) for n, (b, u) in DEMO_VIEWS.items()}
    dots = {n: degree_of_trust(ReferralOpinion(*r)) for n, r in DEMO_REFERRALS.items()}
    discounted = {n: trust_discount(views[n], dots[n]) for n in views}
    return {
        "views": views,
        "fused": bcf_fuse_all(list(views.values())),
        "dot": dots,
        "discounted": discounted,
        "fused_td": bcf_fuse_all(list(discounted.values())),
    }


def _table(op: MultinomialOpinion) -> str:
    return "table ({:.2f}, {:.2f}, {:.2f})".format(*table_form(op))


def _row(op: MultinomialOpinion) -> str:
    return f"b=({op.belief[0]:.4f}, {op.belief[1]:.4f}) u={op.uncertainty:.4f}"


def demo_checks(vals) -> list[tuple[str, bool]]:
    """Golden comparisons on the two-decimal table form, one hundredth of slack."""

    def close(got, want):
        return all(abs(round(g * 100) - round(w * 100)) <= 1 for g, w in zip(got, want))

    checks = [("plain fused", close(table_form(vals["fused"]), DEMO_GOLDEN["fused"]))]
    checks.append(("degrees of trust", close([vals["dot"][n] for n in DEMO_VIEWS], DEMO_GOLDEN["dot"])))
    for name, want in DEMO_GOLDEN["discounted"].items():
        checks.append((f"discounted {name}", close(table_form(vals["discounted"][name]), want)))
    checks.append(("discounted fused", close(table_form(vals["fused_td"]), DEMO_GOLDEN["fused_td"])))
    label = CLASSES[int(np.argmax(vals["fused_td"].belief))]
    checks.append(("discounted label Unsafe", label == "Unsafe"))
    return checks


def cmd_demo(args) -> int:
    vals = demo_values()
    print("Functional opinions (safe, unsafe):")
    for name, op in vals["views"].items():
        print(f"  {name:<10} {_row(op)}  P={np.round(projected_probability(op), 4)}")
    fused = vals["fused"]
    print(f"BCF fused         {_row(fused)}  {_table(fused)}  -> {CLASSES[int(np.argmax(fused.belief))]}")
    print("Degree of trust:")
    for name, p in vals["dot"].items():
        print(f"  {name:<10} {p:.4f}")
    print("Trust-discounted opinions:")
    for name, op in vals["discounted"].items():
        print(f"  {name:<10} {_row(op)}  {_table(op)}")
    ftd = vals["fused_td"]
    print(f"TD + BCF fused    {_row(ftd)}  {_table(ftd)}  -> {CLASSES[int(np.argmax(ftd.belief))]}")
    failed = [name for name, ok in demo_checks(vals) if not ok]
    for name in failed:
        print(f"golden mismatch: {name}", file=sys.stderr)
    return 1 if failed else 0


def cmd_synth(args) -> int:
    if args.fixture:
        ds = data_mod.conflict_fixture(args.seed)
    else:
        v = args.views
        dims = args.dims or (8,) * v
        sep = args.separation or (2.0,)
        noise = args.noise or (1.0,)
        spec = SynthSpec(
            k=args.k,
            v=v,
            n=args.n,
            dims=dims if len(dims) == v else dims * v,
            separation=sep if len(sep) == v else sep * v,
            noise=noise if len(noise) == v else noise * v,
            misleading=args.misleading_views or (),
            permutation=args.permutation,
            mislead_fraction=args.mislead_fraction,
            seed=args.seed,
        )
        ds = data_mod.synth_conflict(spec)
        if args.split:
            ds = split(ds, args.split, args.seed)
    out = _out_dir(args, "synth")
    save_dataset(ds, out)
    print(f"wrote {ds.n} rows, {ds.v} views, K={ds.k} to {out}")
    return 0


SWEEP_DEFAULTS = {
    "noise": (0.0, 1.0, 2.0, 5.0, 10.0),
    "warmup": (0, 1, 2, 5, 10),
    "smoothing": (0.6, 0.7, 0.8, 0.9, 1.0),
}


def _sweep_point(raw_ds, cfg, param, values, seed, noise_fraction):
    """Metrics for every grid value at one seed (noise: one model, many test sets)."""
    cfg = replace(cfg, seed=seed)
    rows = []
    if param == "noise":
        result = train(raw_ds, cfg)
        for level in values:
            ds = inject_noise(result.dataset, level, noise_fraction, seed)
            xs, y = ds.subset(ds.test_idx)
            rec = predict_batch(result.nets, xs, y, cfg.use_td)
            rows.append(summarize(rec, ds.k, rater_views(result.config, ds.v)))
        return rows
    for value in values:
        point = replace(cfg, warmup_epochs=int(value)) if param == "warmup" else replace(cfg, smoothing_eta=value)
        result = train(raw_ds, point)
        xs, y = result.dataset.subset(result.dataset.test_idx)
        rec = predict_batch(result.nets, xs, y, point.use_td)
        rows.append(summarize(rec, result.dataset.k, rater_views(result.config, result.dataset.v)))
    return rows


def cmd_sweep(args) -> int:
    raw_ds = _load(args.dataset)
    cfg = resolve_config(args, raw_ds.name)
    values = args.values if args.values is not None else SWEEP_DEFAULTS[args.param]
    if not values or not args.seeds:
        raise CliError("sweep grid is empty")
    if args.param == "warmup" and any(v < 0 or v != int(v) for v in values):
        raise CliError("warm-up epochs must be non-negative integers")
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        per_seed = list(
            pool.map(lambda s: _sweep_point(raw_ds, cfg, args.param, values, s, args.noise_fraction), args.seeds)
        )
    out = _out_dir(args, "sweep")
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "seeds"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")])
        for i, value in enumerate(values):
            row = [args.param, _fmt(value), len(args.seeds)]
            for key in METRIC_KEYS:
                col = np.array([per_seed[s][i][key] for s in range(len(args.seeds))])
                row += [_fmt(col.mean()), _fmt(col.std())]
            w.writerow(row)
            print(f"{args.param}={value}: top1 {row[3]} +- {row[4]}")
    print(f"wrote {os.path.join(out, 'sweep.csv')}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", help=f"per-dataset learning rates: {', '.join(DATASET_LR)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="functional learning rate")
    p.add_argument("--rlr", type=float, help="referral learning rate")
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--smoothing", type=float, help="label smoothing factor eta")
    p.add_argument("--stage-epochs", type=_ints, help="epochs of stages 2,3,4, e.g. 100,50,100")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pseudo-view", action="store_true", help="add the concatenated view")
    p.add_argument("--no-td", action="store_true", help="plain fusion, no trust discounting")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs/<cmd>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustfusion", description=__doc__.split("\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="hide per-epoch lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    _train_flags(p)
    p.add_argument("--manifest", help="repeat the run described by a manifest.txt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--noise-level", type=float, default=0.0)
    p.add_argument("--noise-fraction", type=float, default=1.0)
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo", help="print the worked three-view example")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("synth", help="write a synthetic multi-view dataset")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--dims", type=_ints)
    p.add_argument("--separation", type=_floats)
    p.add_argument("--noise", type=_floats)
    p.add_argument("--misleading-views", type=_ints)
    p.add_argument("--permutation", type=_ints)
    p.add_argument("--mislead-fraction", type=float, default=0.5)
    p.add_argument("--split", type=float, help="also write an 80/20-style split with this train share")
    p.add_argument("--fixture", action="store_true", help="write the seeded conflict benchmark instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="metric mean/std over seeds across a grid")
    _train_flags(p)
    p.add_argument("--param", choices=sorted(SWEEP_DEFAULTS), required=True)
    p.add_argument("--values", type=_floats)
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    p.add_argument("--noise-fraction", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except (CliError, DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
