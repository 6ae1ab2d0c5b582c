"""Command-line surface: synth, segment, split, train, score, eval, report.

Configuration resolves in three layers: preset defaults, then an INI config
file, then explicit flags. Exit codes are part of the contract: 0 success,
1 usage or configuration error, 2 data error, 3 numeric failure.

Relative output paths resolve under $SALAD_OUTPUT_ROOT when it is set.
"""

import argparse
import configparser
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .dataprep import (
    SynthConfig,
    hysteresis_segment,
    load_dataset,
    materialize_dataset,
    read_image,
    read_manifest,
    split_grouped,
    synth_generate,
    write_manifest,
    write_mask,
)
from .membank import init_bank, load_bank
from .metrics import LabeledScores, auprc, roc_auc
from .model import Architecture, init_params, load_checkpoint
from .report import render_report
from .scorer import read_scores_csv, score_dataset, write_scores_csv
from .trainer import (
    AugmentSpec,
    TrainingConfig,
    desk_preset,
    paper_preset,
    pretrain,
    train_progressive,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# seed offset separating bank initialization from weight initialization
BANK_SEED_OFFSET = 1000003

ABLATIONS = {
    "no-agg": dict(use_agg=False),
    "no-mse": dict(use_mse=False),
    "no-ss": dict(use_ss=False),
    # plain autoencoder: latent terms carry zero weight and views collapse
    # to the input, so the run matches a reconstruction-only trajectory
    "dae": dict(loss_weight=0.0, augment=AugmentSpec.identity()),
    # bank is still maintained but neither latent term is ever evaluated
    "memdae": dict(use_ss=False, use_agg=False),
}

PRESETS = {"paper": paper_preset, "desk": desk_preset}


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out_path(p):
    p = Path(p)
    root = os.environ.get("SALAD_OUTPUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# ---------------------------------------------------------- config plumbing

_AUGMENT_KEYS = ("flip_prob", "min_crop_area", "noise_scale", "n_views")
_TRAINING_KEYS = tuple(f.name for f in fields(TrainingConfig) if f.name != "augment")
_INT_KEYS = {
    "score_neighbors",
    "batch_size",
    "pretrain_epochs",
    "rounds",
    "epochs_per_round",
    "k_max",
    "init_seed",
    "shuffle_seed",
    "n_views",
    "latent",
    "replicates",
}
_BOOL_KEYS = {"use_mse", "use_ss", "use_agg"}
_STR_KEYS = {"k_schedule", "preset", "ablate"}


def _coerce(key, value):
    if key == "hidden":
        return tuple(int(v) for v in str(value).split(",") if str(v).strip())
    if key in _STR_KEYS:
        return str(value)
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        lowered = str(value).strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise UsageError(f"config key {key} wants a boolean, got {value!r}")
    if key in _INT_KEYS:
        return int(value)
    return float(value)


def _read_config_file(path):
    parser = configparser.ConfigParser()
    if not Path(path).exists():
        raise DataError(f"config file {path} does not exist")
    parser.read(path)
    if not parser.has_section("salad"):
        raise UsageError(f"config file {path} needs a [salad] section")
    known = set(_TRAINING_KEYS) | set(_AUGMENT_KEYS) | {"hidden", "latent", "preset", "replicates"}
    out = {}
    for key, value in parser.items("salad"):
        if key not in known:
            raise UsageError(f"unknown config key {key!r} in {path}")
        out[key] = _coerce(key, value)
    return out


def _resolve_run_settings(args):
    """Merge preset, config file, and flags into one settings dict."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}

    preset = getattr(args, "preset", None) or file_values.get("preset") or "desk"
    if preset not in PRESETS:
        raise UsageError(f"preset must be one of {sorted(PRESETS)}, got {preset!r}")
    base = PRESETS[preset]()

    settings = {k: getattr(base, k) for k in _TRAINING_KEYS}
    settings.update({k: getattr(base.augment, k) for k in _AUGMENT_KEYS})
    settings.update(hidden=(128,), latent=16, replicates=1)
    settings.update({k: v for k, v in file_values.items() if k != "preset"})

    flag_map = dict(
        temperature="temperature",
        loss_weight="loss_weight",
        update_rate="bank_update_rate",
        neighbors="score_neighbors",
        batch_size="batch_size",
        learning_rate="learning_rate",
        pretrain_epochs="pretrain_epochs",
        rounds="rounds",
        epochs_per_round="epochs_per_round",
        k_schedule="k_schedule",
        k_max="k_max",
        init_seed="init_seed",
        shuffle_seed="shuffle_seed",
        hidden="hidden",
        latent="latent",
        replicates="replicates",
    )
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = _coerce(key, value)

    if settings["replicates"] < 1:
        raise UsageError("replicate count must be >= 1")

    try:
        augment = AugmentSpec(**{k: settings[k] for k in _AUGMENT_KEYS})
        cfg = TrainingConfig(
            augment=augment, **{k: settings[k] for k in _TRAINING_KEYS if k != "augment"}
        )
        if getattr(args, "ablate", None):
            cfg = replace(cfg, **ABLATIONS[args.ablate])
    except ValueError as e:
        raise UsageError(f"invalid configuration: {e}") from e
    return cfg, tuple(settings["hidden"]), settings["latent"], settings["replicates"]


# ------------------------------------------------------------ data commands


def cmd_synth(args):
    try:
        cfg = SynthConfig(
            n_images=args.count,
            image_size=args.size,
            anomaly_fraction=args.anomaly_fraction,
            images_per_group=args.per_group,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    samples = synth_generate(cfg, seed=args.seed)
    out = _out_path(args.out)
    manifest = materialize_dataset(samples, out)
    n_anom = sum(s.label == "anomalous" for s in samples)
    print(f"synth: wrote {len(samples)} images ({n_anom} anomalous) and {manifest}")
    return EXIT_OK


def cmd_segment(args):
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        base = Path(args.manifest).parent
        paths = [base / row["path"] for row in read_manifest(args.manifest)]
    else:
        paths = [Path(p) for p in args.image]
    if not paths:
        raise DataError("nothing to segment")
    total_fg = 0
    for p in paths:
        img = read_image(p)
        mask = hysteresis_segment(
            img, lo=args.lo, hi=args.hi, connectivity=args.connectivity
        )
        total_fg += int(mask.sum())
        write_mask(out / f"{p.stem}_mask.png", mask)
    print(f"segment: wrote {len(paths)} masks to {out} ({total_fg} foreground pixels)")
    return EXIT_OK


def cmd_split(args):
    samples = load_dataset(args.manifest)
    rows = read_manifest(args.manifest)
    src_base = Path(args.manifest).parent
    path_by_ident = {Path(r["path"]).stem: src_base / r["path"] for r in rows}

    split = split_grouped(
        samples,
        seed=args.seed,
        train_group_fraction=args.train_fraction,
        train_anomaly_fraction=args.anomaly_fraction,
        tolerance=args.tolerance,
    )
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = (("train", split.train), ("val", split.validation), ("test", split.test))
    for name, part in parts:
        rels = [os.path.relpath(path_by_ident[s.ident], out) for s in part]
        write_manifest(out / f"{name}.csv", part, rels)
    counts = {name: (len({s.group_id for s in part}), len(part)) for name, part in parts}
    frac = split.stats["train_anomaly_fraction"]
    print(
        "split: train {}/{}, val {}/{}, test {}/{} (groups/images), "
        "train anomaly fraction {:.3f}".format(
            counts["train"][0], counts["train"][1],
            counts["val"][0], counts["val"][1],
            counts["test"][0], counts["test"][1],
            frac,
        )
    )
    return EXIT_OK


# -------------------------------------------------------------- train/score


def _flatten_dataset(samples):
    if not samples:
        raise DataError("manifest holds no samples")
    shape = samples[0].image.shape
    if any(s.image.shape != shape for s in samples):
        raise DataError("images in one dataset must share a single shape")
    return shape[0] * shape[1]


def _final_artifacts(run_dir, rounds=None):
    """Locate the last checkpoint pair a run produced."""
    ckpts = sorted(Path(run_dir, "checkpoints").glob("round_*.ckpt"))
    if rounds is not None:
        wanted = Path(run_dir, "checkpoints", f"round_{rounds:02d}.ckpt")
        ckpts = [c for c in ckpts if c == wanted]
    if not ckpts:
        pre = Path(run_dir, "checkpoints", "pretrain.ckpt")
        if pre.exists():
            ckpts = [pre]
    if not ckpts:
        raise DataError(f"no checkpoints under {run_dir}")
    ckpt = ckpts[-1]
    bank = ckpt.with_suffix(".bank")
    if not bank.exists():
        raise DataError(f"bank snapshot {bank} is missing")
    return ckpt, bank


def _train_one(manifest, run_dir, cfg_dict, hidden, latent, resume):
    """One full training run; module-level so replicate processes can fork it."""
    cfg = TrainingConfig(augment=AugmentSpec(**cfg_dict.pop("augment")), **cfg_dict)
    samples = load_dataset(manifest)
    input_dim = _flatten_dataset(samples)
    arch = Architecture(input_dim=input_dim, encoder_hidden=list(hidden), latent_dim=latent)

    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    loss_csv = run_dir / "losses.csv"
    run_dir.mkdir(parents=True, exist_ok=True)

    params = bank = adam = None
    start_round = 1
    skip_pretrain = False
    if resume:
        rounds_done = sorted(ckpt_dir.glob("round_*.ckpt")) if ckpt_dir.exists() else []
        if rounds_done:
            last = rounds_done[-1]
            params, adam, _ = load_checkpoint(last)
            bank = load_bank(last.with_suffix(".bank"))
            start_round = int(last.stem.split("_")[1]) + 1
            skip_pretrain = True
        elif (ckpt_dir / "pretrain.ckpt").exists():
            params, _, _ = load_checkpoint(ckpt_dir / "pretrain.ckpt")
            bank = load_bank(ckpt_dir / "pretrain.bank")
            adam = None
            skip_pretrain = True
    if params is None:
        params = init_params(arch, seed=cfg.init_seed)
        bank = init_bank(len(samples), arch.latent_dim, seed=cfg.init_seed + BANK_SEED_OFFSET)
        loss_csv.unlink(missing_ok=True)

    if not skip_pretrain:
        pretrain(samples, params, bank, cfg, loss_csv=loss_csv, checkpoint_dir=ckpt_dir)
    if start_round <= cfg.rounds:
        report = train_progressive(
            samples,
            params,
            bank,
            cfg,
            adam=adam,
            start_round=start_round,
            loss_csv=loss_csv,
            checkpoint_dir=ckpt_dir,
        )
        final = report.epochs[-1].total if report.epochs else float("nan")
    else:
        final = float("nan")
    return str(run_dir), len(samples), final


def cmd_train(args):
    cfg, hidden, latent, replicates = _resolve_run_settings(args)
    out = _out_path(args.out)
    jobs = []
    for rep in range(replicates):
        run_dir = out if replicates == 1 else out / f"replicate_{rep:02d}"
        rep_cfg = replace(cfg, init_seed=cfg.init_seed + rep, shuffle_seed=cfg.shuffle_seed + rep)
        jobs.append((args.manifest, str(run_dir), asdict(rep_cfg), hidden, latent, args.resume))

    if args.parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.parallel, len(jobs))) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(*job) for job in jobs]

    for run_dir, n, final in results:
        tail = f"final total {final:.4f}" if np.isfinite(final) else "no progressive rounds"
        print(f"train: {run_dir}: {n} samples, {tail}")
    return EXIT_OK


def _score_one(manifest, ckpt, bank_path, out_file, k):
    samples = load_dataset(manifest)
    _flatten_dataset(samples)
    params, _, stored = load_checkpoint(ckpt)
    bank = load_bank(bank_path)
    if k is None:
        k = int(stored["score_neighbors"]) if stored and "score_neighbors" in stored else 100
    flats = [s.image.reshape(-1) for s in samples]
    try:
        scores = score_dataset(flats, params, bank, k=k)
    except ValueError as e:
        raise DataError(str(e)) from e
    labeled = all(s.label in ("normal", "anomalous") for s in samples)
    labels = [int(s.label == "anomalous") for s in samples] if labeled else None
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out_file, [s.ident for s in samples], scores, labels=labels)
    return len(samples), k


def cmd_score(args):
    if args.run:
        run = Path(args.run)
        replicate_dirs = sorted(d for d in run.glob("replicate_*") if d.is_dir())
        if replicate_dirs:
            out_dir = _out_path(args.out) if args.out else run
            for i, rep_dir in enumerate(replicate_dirs):
                ckpt, bank_path = _final_artifacts(rep_dir)
                out_file = Path(out_dir) / f"scores_{i:02d}.csv"
                n, k = _score_one(args.manifest, ckpt, bank_path, out_file, args.neighbors)
                print(f"score: {n} samples with k={k} -> {out_file}")
            return EXIT_OK
        ckpt, bank_path = _final_artifacts(run)
        out_file = _out_path(args.out) if args.out else run / "scores.csv"
        if out_file.is_dir():
            out_file = out_file / "scores.csv"
    else:
        if not (args.checkpoint and args.bank):
            raise UsageError("pass either --run or both --checkpoint and --bank")
        ckpt, bank_path = Path(args.checkpoint), Path(args.bank)
        if not args.out:
            raise UsageError("--out is required with explicit --checkpoint/--bank")
        out_file = _out_path(args.out)
        if out_file.is_dir():
            out_file = out_file / "scores.csv"
    n, k = _score_one(args.manifest, ckpt, bank_path, Path(out_file), args.neighbors)
    print(f"score: {n} samples with k={k} -> {out_file}")
    return EXIT_OK


def cmd_eval(args):
    rows = []
    for f in args.scores:
        _, raw, _, labels = read_scores_csv(f)
        if labels is None:
            raise DataError(f"{f} carries no labels; cannot evaluate")
        try:
            ls = LabeledScores(raw, labels)
            rows.append((Path(f).stem, roc_auc(ls), auprc(ls)))
        except ValueError as e:
            raise DataError(f"{f}: {e}") from e

    aucs = np.array([r[1] for r in rows])
    aps = np.array([r[2] for r in rows])
    ci_auc = 1.96 * float(np.std(aucs))
    ci_ap = 1.96 * float(np.std(aps))

    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["source,auc,auprc,auc_ci95,auprc_ci95"]
    for name, auc, ap in rows:
        lines.append(f"{name},{auc!r},{ap!r},,")
    lines.append(f"summary,{float(aucs.mean())!r},{float(aps.mean())!r},{ci_auc!r},{ci_ap!r}")
    out.write_text("\n".join(lines) + "\n")
    print(
        f"eval: AUC {aucs.mean():.4f} +/- {ci_auc:.4f}, "
        f"AUPRC {aps.mean():.4f} +/- {ci_ap:.4f} over {len(rows)} score file(s) -> {out}"
    )
    return EXIT_OK


def cmd_report(args):
    out = _out_path(args.out) if args.out else Path(args.run) / "report"
    try:
        written = render_report(args.run, out)
    except ValueError as e:
        raise DataError(str(e)) from e
    print(f"report: wrote {len(written)} files to {out}")
    for p in written:
        print(f"  {p.name}")
    return EXIT_OK


# ------------------------------------------------------------------ parsing


def build_parser():
    parser = _Parser(
        prog="salad",
        description="Self-supervised aggregation learning for anomaly detection.",
        epilog="Relative output paths resolve under $SALAD_OUTPUT_ROOT when set.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--anomaly-fraction", type=float, default=0.1)
    p.add_argument("--per-group", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="hysteresis-threshold images into masks")
    p.add_argument("--manifest", help="dataset manifest listing images")
    p.add_argument("--image", nargs="*", default=[], help="individual image files")
    p.add_argument("--out", required=True)
    p.add_argument("--lo", type=float, default=0.1)
    p.add_argument("--hi", type=float, default=0.3)
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("split", help="grouped train/val/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--anomaly-fraction", type=float, default=0.05)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="two-phase progressive training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="INI config file with a [salad] section")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--replicates", type=int)
    p.add_argument("--parallel", type=int, default=0, help="concurrent replicate processes")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--temperature", type=float)
    p.add_argument("--loss-weight", type=float)
    p.add_argument("--update-rate", type=float)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs-per-round", type=int)
    p.add_argument("--k-schedule", choices=("linear", "double"))
    p.add_argument("--k-max", type=int)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--shuffle-seed", type=int)
    p.add_argument("--hidden", help="comma-separated encoder widths, e.g. 256,64")
    p.add_argument("--latent", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a manifest against a trained run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", help="run directory (finds the final checkpoint)")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--bank", help="explicit bank snapshot path")
    p.add_argument("--out", help="output CSV (or directory for replicate runs)")
    p.add_argument("--neighbors", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUC/AUPRC over one or more score files")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures and metric CSVs for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"salad: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"salad: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"salad: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as e:
        print(f"salad: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
