"""Command-line entry point: generate-data, train, calibrate, evaluate,
ablate, infer, serve.

All randomness funnels through --seed; subcommands derive child seeds from it
by fixed labels. Every run prints its resolved config digest. Output
directories are guarded by a lock file against concurrent writers.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

from . import taxonomy as tx
from .configio import config_digest, read_kv, write_kv
from .errors import HotError

log = logging.getLogger("hot")


def child_seed(seed: int, label: str) -> int:
    h = hashlib.blake2s(f"{seed}:{label}".encode(), digest_size=4).digest()
    return int.from_bytes(h, "little")


@contextmanager
def output_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".hot.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise HotError(f"output directory {directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _print_digest(name: str, items: dict) -> None:
    print(f"config_digest\t{name}\t{config_digest(items)}")


def _load_dataset(manifest: str, taxonomy_path: str | None):
    mpath = Path(manifest)
    tpath = Path(taxonomy_path) if taxonomy_path else mpath.parent / "taxonomy.tsv"
    taxonomy = tx.load_taxonomy_file(tpath)
    meta_path = mpath.parent / "dataset.meta"
    meta = read_kv(meta_path) if meta_path.exists() else {}
    if taxonomy.counts is not None and meta:
        taxonomy, partition = tx.build_partition(
            taxonomy,
            cutoff=int(meta.get("id_cutoff", "100")),
            percentile=float(meta.get("id_percentile", "0.25")),
            thresholds=(
                int(meta.get("head_min", "10000")),
                int(meta.get("middle_min", "500")),
                int(meta.get("tail_min", "100")),
            ),
        )
    else:
        partition = None
    records = tx.read_manifest(mpath, taxonomy)
    return taxonomy, partition, records, mpath.parent


# -- subcommands -----------------------------------------------------------------


def cmd_generate_data(args) -> int:
    from .synthgen import generate_dataset, load_genspec, mini_genspec

    if args.spec == "mini":
        spec = mini_genspec(seed=args.seed)
    else:
        spec = load_genspec(args.spec, seed=args.seed)
    _print_digest("generate-data", {"spec": args.spec, "seed": spec.seed, "out": args.out})
    with output_lock(Path(args.out)):
        manifest, records = generate_dataset(spec, args.out)
    print(f"wrote\t{manifest}\t{len(records)} lesions")
    return 0


def cmd_train(args) -> int:
    from .model import LabelMaps, ModelConfig
    from .training import TrainConfig, train
    from .losses import LossConfig

    taxonomy, partition, records, root = _load_dataset(args.manifest, args.taxonomy)
    if partition is None:
        raise HotError("dataset lacks counts/meta needed to build the subset partition")
    mc_items = read_kv(args.model_config) if args.model_config else {}
    model_cfg = ModelConfig.from_items(mc_items)
    maps = LabelMaps.from_taxonomy(taxonomy)
    model_cfg = replace(model_cfg, level_sizes=maps.level_sizes(taxonomy))
    tc_items = read_kv(args.train_config) if args.train_config else {}
    loss = LossConfig(
        lambda_mse=float(tc_items.get("lambda_mse", "0.1")),
        gamma=float(tc_items.get("gamma", "1.0")),
        mixup_alpha=float(tc_items.get("mixup_alpha", "1.0")),
        p_mix=float(tc_items.get("p_mix", "0.5")),
    )
    train_cfg = TrainConfig(
        batch_size=int(tc_items.get("batch_size", "32")),
        initial_lr=float(tc_items.get("initial_lr", "1e-4")),
        lr_decay=float(tc_items.get("lr_decay", "0.95")),
        epochs=args.epochs if args.epochs is not None else int(tc_items.get("epochs", "15")),
        strategy=tc_items.get("strategy", "MX5"),
        loss=loss,
        seed=child_seed(args.seed, "train"),
        val_metric=tc_items.get("val_metric", "macro_f1"),
    )
    items = model_cfg.to_items()
    items.update(train_cfg.to_items())
    _print_digest("train", items)
    with output_lock(Path(args.out)):
        result = train(records, taxonomy, partition, model_cfg, train_cfg, root, out_dir=args.out)
    print(f"trained\t{args.out}\tbest_epoch={result.best_epoch}\tval={result.best_metric:.4f}")
    return 0


def cmd_calibrate(args) -> int:
    from .calibration import calibrate_checkpoint

    taxonomy, _, records, root = _load_dataset(args.manifest, args.taxonomy)
    thresholds = calibrate_checkpoint(
        args.ckpt, records, root, policy=args.policy,
        paper_faithful_sweep=args.paper_faithful_sweep,
    )
    _print_digest("calibrate", {"ckpt": args.ckpt, "policy": args.policy})
    print(f"calibrated\t{args.ckpt}\tt_ood={thresholds.t_ood}\tt_triage={thresholds.t_triage}")
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from .evaluation import (
        confidence_histograms,
        eval_levels,
        eval_ood,
        inter_class,
        intra_class,
        triage_effectiveness,
    )
    from .inference import Engine
    from .training import ImageStore

    taxonomy, _, records, root = _load_dataset(args.manifest, args.taxonomy)
    engine = Engine.load(args.ckpt)
    store = ImageStore(root)
    maps = engine.maps
    out_dir = Path(args.report_dir)
    role = "clinical" if "clinical" in engine.models else next(iter(engine.models))
    model = engine.models[role]
    gamma = engine.configs[role].gamma

    id_test = [r for r in records if r.split == "test"]
    ood17 = [r for r in records if r.split == "ood_test" and not r.is_unknown]
    unk = [r for r in records if r.split == "ood_test" and r.is_unknown]

    with output_lock(out_dir):
        metrics = eval_levels(model, id_test, store, role, engine.taxonomy, maps, gamma)
        lines = ["level\tprecision\trecall\tf1"]
        for level, row in metrics.levels.items():
            lines.append(f"{level}\t{row['precision']:.6f}\t{row['recall']:.6f}\t{row['f1']:.6f}")
        (out_dir / "levels.tsv").write_text("\n".join(lines) + "\n")

        ood_rep = eval_ood(model, id_test, ood17, unk, store, role, maps, gamma)
        (out_dir / "ood.tsv").write_text(
            "set\tauroc\nood17\t%.6f\nunknown\t%.6f\n"
            % (ood_rep["auroc_ood17"], ood_rep["auroc_unk"])
        )

        labels = [r.label.l3 for r in id_test]
        intra = intra_class(model, id_test, store, role, 3, labels)
        inter = inter_class(model, id_test, store, role, 3, labels)
        (out_dir / "distances.tsv").write_text(
            "stat\tvalue\nintra_min\t%.6f\nintra_max\t%.6f\nintra_mean\t%.6f\ninter_mean\t%.6f\n"
            % (intra.intra_min, intra.intra_max, intra.intra_mean, inter.inter_mean)
        )
        np.savetxt(out_dir / "inter_matrix.tsv", inter.matrix, delimiter="\t", fmt="%.6f")

        sets = {"id": id_test}
        if ood17:
            sets["ood17"] = ood17
        if unk:
            sets["unknown"] = unk
        hists = confidence_histograms(model, sets, store, role, maps, gamma)
        for name, data in hists.items():
            for level, h in data["histograms"].items():
                np.savetxt(out_dir / f"hist_{name}_{level}.tsv", h, fmt="%.8f")

        if "multimodal" in engine.models and engine.thresholds is not None:
            report = triage_effectiveness(engine, id_test, store)
            lines = [
                f"fraction_triaged\t{report.fraction_triaged:.6f}",
                f"n_triaged\t{report.n_triaged}",
                f"n_total\t{report.n_total}",
            ]
            for side, block in (("triaged", report.triaged), ("non_triaged", report.non_triaged)):
                for mod, row in block.items():
                    lines.append(
                        f"{side}\t{mod}\t{row['precision']:.6f}\t{row['recall']:.6f}\t{row['f1']:.6f}"
                    )
            (out_dir / "triage.tsv").write_text("\n".join(lines) + "\n")

    _print_digest("evaluate", {"ckpt": args.ckpt, "manifest": args.manifest})
    print(f"evaluated\t{out_dir}")
    return 0


def cmd_ablate(args) -> int:
    from .losses import LossConfig
    from .model import LabelMaps, ModelConfig
    from .training import TrainConfig, ablation_grid

    taxonomy, partition, records, root = _load_dataset(args.manifest, args.taxonomy)
    maps = LabelMaps.from_taxonomy(taxonomy)
    model_cfg = ModelConfig(level_sizes=maps.level_sizes(taxonomy))
    train_cfg = TrainConfig(epochs=args.epochs, seed=child_seed(args.seed, "ablate"))
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    seeds = [child_seed(args.seed, f"ablate:{k}") for k in range(args.seeds)]
    _print_digest("ablate", {"strategies": strategies, "seeds": seeds, "epochs": args.epochs})
    rows = ablation_grid(
        records, taxonomy, partition, model_cfg, train_cfg, root, strategies, seeds
    )
    print("strategy\tvariant\tauroc_ood17")
    for row in rows:
        print(f"{row['strategy']}\t{row['variant']}\t{row['auroc_ood17']:.4f}")
    return 0


def cmd_infer(args) -> int:
    from .inference import Engine, load_image_array

    engine = Engine.load(args.ckpt)
    clinical = load_image_array(args.clinical, engine.image_size())
    if args.dermoscopic:
        dermo = load_image_array(args.dermoscopic, engine.image_size("multimodal"))
        decision = engine.diagnose_combined(clinical, dermo)
    else:
        decision = engine.diagnose_clinical(clinical)
    _print_digest("infer", {"ckpt": args.ckpt, "clinical": args.clinical})
    items = {}
    for key, value in decision.to_dict().items():
        if isinstance(value, dict):
            for k2, v2 in value.items():
                items[f"{key}.{k2}"] = repr(v2)
        else:
            items[key] = repr(value) if isinstance(value, float) else str(value)
    text = "\n".join(f"{k} = {v}" for k, v in items.items()) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_serve(args) -> int:
    from .service import ApiConfig, serve

    config = ApiConfig(checkpoint=args.ckpt, bind=args.bind)
    _print_digest("serve", {"ckpt": args.ckpt, "bind": args.bind})
    serve(config)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hot", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    parser.add_argument("--log-level", default="info")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic paired-image dataset")
    p.add_argument("--spec", required=True, help="genspec file, or 'mini' for the shipped spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute and store decision thresholds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--policy", default="youden", help="youden or target_tpr:<q>")
    p.add_argument("--paper-faithful-sweep", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="write the evaluation report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="OOD AUROC per mixup strategy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--strategies", required=True, help="comma-separated subset of none,standard,MX1..MX6")
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="diagnose one lesion image (pair)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clinical", required=True)
    p.add_argument("--dermoscopic", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("serve", help="run the HTTP triage service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bind", default="127.0.0.1:8000")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper())
    try:
        return args.func(args)
    except HotError as exc:
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
