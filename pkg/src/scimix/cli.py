"""Experiment orchestration CLI.

Exit codes: 0 success, 2 invalid configuration, 3 missing artifact,
4 numerical abort. Every command writes a run_manifest.json with the config
hash, seed and input-artifact lineage into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
import torch

from . import clf_training, gen_training, hybrids as H, metrics, synth
from .config import ConfigError, ExperimentConfig
from .data import load_manifest, make_splits, save_manifest
from .gen_training import NumericalError, manifest_hash
from .networks import load_checkpoint

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _write_run_manifest(out_dir, command, config, inputs, seed):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config.hash(),
        "protocol_hash": config.protocol_hash(),
        "seed": seed,
        "inputs": {name: {"path": os.path.abspath(p), "hash": _file_hash(p)}
                   for name, p in inputs.items() if p and os.path.isfile(p)},
    }
    config.dump(os.path.join(out_dir, "config.txt"))
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _load_config(args):
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        dotted, _, val = item.partition("=")
        if "." not in dotted or not _:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        section, _, key = dotted.partition(".")
        cfg.set(section.strip(), key.strip(), val.strip())
    return cfg.validate()


def _load_data(path, split="train"):
    sub = os.path.join(path, split)
    if os.path.isdir(sub) and os.path.exists(os.path.join(sub, "images.npz")):
        return synth.load_dataset(sub)
    if os.path.exists(os.path.join(path, "images.npz")):
        return synth.load_dataset(path)
    if os.path.isdir(path):
        return synth.load_image_folder(path)
    raise FileNotFoundError(f"no dataset at {path}")


def _require(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def cmd_synth_data(args):
    cfg = _load_config(args)
    d = cfg["data"]
    spec = synth.FactorSpec(n_classes=d["n_classes"], image_size=d["image_size"],
                            n_train=d["n_train"], n_test=d["n_test"],
                            glyph_scale=d["glyph_scale"], jitter=d["jitter"],
                            seed=d["seed"])
    for split in ("train", "test"):
        ds = synth.generate_synthetic_dataset(spec, split=split)
        synth.save_dataset(ds, os.path.join(args.out, split),
                           write_pngs=args.pngs)
    _write_run_manifest(args.out, "synth-data", cfg, {}, d["seed"])
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def cmd_make_splits(args):
    cfg = _load_config(args)
    ds = _load_data(_require(args.data, "dataset"))
    manifest = make_splits(len(ds), ds.labels, cfg["split"]["n_labeled"],
                           cfg["split"]["seed"])
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_manifest(manifest, args.out)
    print(f"wrote split manifest to {args.out} "
          f"(hash {manifest_hash(manifest)})")
    return 0


def cmd_train_generator(args):
    cfg = _load_config(args)
    ds = _load_data(_require(args.data, "dataset"))
    manifest = load_manifest(_require(args.split, "split manifest"))
    _write_run_manifest(args.out, "train-generator", cfg,
                        {"split": args.split}, cfg["gen_train"]["seed"])
    _, ckpt = gen_training.train_generator(ds, manifest, cfg,
                                           out_dir=args.out,
                                           progress=args.progress)
    print(f"wrote generator checkpoint {ckpt}")
    return 0


def cmd_generate_hybrids(args):
    cfg = _load_config(args)
    ds = _load_data(_require(args.data, "dataset"))
    manifest = load_manifest(_require(args.split, "split manifest"))
    bundle, meta, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    hcfg = cfg["hybrids"]
    torch.manual_seed(hcfg["pairing_seed"])
    n = args.n or hcfg["n_hybrids"]
    pool = np.array(sorted(manifest.labeled_idx + manifest.unlabeled_idx))
    rng = np.random.default_rng(hcfg["pairing_seed"])
    idx = rng.choice(pool, size=min(n, len(pool)), replace=False)
    images = torch.as_tensor(ds.images[idx])
    with torch.no_grad():
        pseudo = bundle.head(bundle.e_c(images)).argmax(dim=1).numpy()
    labels = np.where(np.isin(idx, manifest.labeled_idx), ds.labels[idx], pseudo)
    records = H.mix_batch_filtered(images, labels, bundle,
                                   hcfg["pairing_seed"], indices=idx)
    H.save_hybrid_records(records, args.out)
    pos = {int(i): k for k, i in enumerate(idx)}
    triplets = [(images[pos[r.sem_parent]], images[pos[r.nonsem_parent]],
                 r.image) for r in records[:8]]
    H.contact_sheet(triplets, os.path.join(args.out, "contact_sheet.png"))
    _write_run_manifest(args.out, "generate-hybrids", cfg,
                        {"checkpoint": args.checkpoint, "split": args.split},
                        hcfg["pairing_seed"])
    n_acc = sum(r.accepted for r in records)
    print(f"wrote {len(records)} hybrids ({n_acc} accepted) to {args.out}")
    return 0


def cmd_train_classifier(args):
    cfg = _load_config(args)
    ds = _load_data(_require(args.data, "dataset"), "train")
    test_ds = _load_data(args.data, "test")
    manifest = load_manifest(_require(args.split, "split manifest"))
    bundle = meta = None
    if args.checkpoint:
        bundle, meta, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    _write_run_manifest(args.out, "train-classifier", cfg,
                        {"split": args.split, "checkpoint": args.checkpoint},
                        cfg["clf_train"]["seed"])
    _, report = clf_training.train_classifier(
        ds, manifest, cfg, generator_bundle=bundle, checkpoint_meta=meta,
        test_dataset=test_ds, out_dir=args.out, progress=args.progress)
    print(f"test accuracy {report['accuracy']:.2f}%")
    return 0


def cmd_evaluate(args):
    cfg = ExperimentConfig.load(
        _require(os.path.join(args.model, "config.txt"), "model config"))
    ds = _load_data(_require(args.data, "dataset"), "test")
    model = clf_training.ImageClassifier(
        cfg["data"]["n_classes"], cfg["data"]["channels"],
        cfg["model"]["width"], cfg["model"]["d_c"])
    state = torch.load(_require(os.path.join(args.model, "model.pt"),
                                "model weights"), weights_only=True)
    model.load_state_dict(state)
    acc = clf_training.accuracy(model, ds.images, ds.labels)
    report = {"accuracy": acc, "seed": cfg["clf_train"]["seed"],
              "config_hash": cfg.hash()}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    print(f"test accuracy {acc:.2f}%")
    return 0


def _get_oracle(oracle_dir, train_ds, test_ds, cfg):
    """Load the oracle classifier from oracle_dir, training and caching it
    there on first use.
    """
    ocfg = cfg["oracle"]
    path = os.path.join(oracle_dir, "oracle.pt")
    n_classes = int(train_ds.labels.max()) + 1
    if os.path.exists(path):
        model = metrics.OracleClassifier(n_classes, train_ds.images.shape[1],
                                         cfg["model"]["width"])
        model.load_state_dict(torch.load(path, weights_only=True))
        model.eval()
    else:
        model = metrics.train_oracle(train_ds.images, train_ds.labels,
                                     n_classes, epochs=ocfg["epochs"],
                                     batch_size=ocfg["batch_size"],
                                     lr=ocfg["lr"], seed=ocfg["seed"],
                                     width=cfg["model"]["width"])
        os.makedirs(oracle_dir, exist_ok=True)
        torch.save(model.state_dict(), path)
    acc = metrics.evaluate_accuracy(model, test_ds.images, test_ds.labels)
    return model, acc


def cmd_score_hybrids(args):
    cfg = _load_config(args)
    train_ds = _load_data(_require(args.data, "dataset"), "train")
    test_ds = _load_data(args.data, "test")
    records = H.load_hybrid_records(_require(args.hybrids, "hybrids directory"))
    oracle, oracle_acc = _get_oracle(args.oracle, train_ds, test_ds, cfg)
    s_c = metrics.semantic_transfer_rate(records, oracle,
                                         oracle_accuracy=oracle_acc)
    s_r = metrics.nonsemantic_preservation_rate(records, train_ds.images)
    report = metrics.TransferReport(s_c=s_c, s_r=s_r, n_hybrids=len(records),
                                    oracle_accuracy=oracle_acc)
    with open(args.out, "w") as f:
        json.dump(report.__dict__, f, indent=2, sort_keys=True)
    print(f"s_c={s_c:.1f} s_r={s_r:.1f} oracle={oracle_acc:.1f} "
          f"n={len(records)}")
    return 0


def _baseline_records(mixer, images, labels, indices, cfg, seed):
    """Hybrid records from one of the comparison mixers, using the
    dominant-parent label convention for scoring.
    """
    from .data import HybridRecord, pair_permutation

    hcfg = cfg["hybrids"]
    rng = np.random.default_rng(seed)
    perm = pair_permutation(len(indices), seed)
    records = []
    for i in range(len(indices)):
        x1, x2 = images[i], images[perm[i]]
        if mixer == "mixup":
            lam = float(rng.beta(hcfg["mixup_alpha"], hcfg["mixup_alpha"]))
            lam = max(lam, 1.0 - lam)  # dominant parent is the semantic one
            img, _ = H.mixup(x1, x2, 1.0, 0.0, lam)
        elif mixer == "cutmix":
            lam = float(rng.beta(hcfg["mixup_alpha"], hcfg["mixup_alpha"]))
            lam = max(lam, 1.0 - lam)
            img, _ = H.cutmix(x1, x2, 1.0, 0.0, lam, seed=int(rng.integers(2**31)))
        elif mixer == "fda":
            img = H.fda_mix(x1, x2, hcfg["fda_beta"])
        elif mixer == "adain":
            img = H.adain_mix(x1, x2)
        else:
            raise ConfigError(f"unknown mixer {mixer!r}")
        records.append(HybridRecord(
            image=img, sem_parent=int(indices[i]),
            nonsem_parent=int(indices[perm[i]]),
            imputed_label=int(labels[i]), accepted=True))
    return records


def cmd_compare_augmentations(args):
    cfg = _load_config(args)
    train_ds = _load_data(_require(args.data, "dataset"), "train")
    test_ds = _load_data(args.data, "test")
    manifest = load_manifest(_require(args.split, "split manifest"))
    mixers = args.mixers.split(",")
    hcfg = cfg["hybrids"]
    seed = hcfg["pairing_seed"]
    pool = np.array(sorted(manifest.labeled_idx + manifest.unlabeled_idx))
    rng = np.random.default_rng(seed)
    idx = rng.choice(pool, size=min(hcfg["n_hybrids"], len(pool)),
                     replace=False)
    images = torch.as_tensor(train_ds.images[idx])
    labels = train_ds.labels[idx]

    oracle, oracle_acc = _get_oracle(
        args.oracle or os.path.join(args.out, "oracle"),
        train_ds, test_ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    table = {}
    for mixer in mixers:
        if mixer == "scimix":
            if not args.checkpoint:
                raise FileNotFoundError("scimix mixer needs --checkpoint")
            bundle, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
            records = H.mix_batch_filtered(images, labels, bundle, seed,
                                           indices=idx)
            records = [r for r in records if r.accepted] or records
        else:
            records = _baseline_records(mixer, images, labels, idx, cfg, seed)
        s_c = metrics.semantic_transfer_rate(records, oracle,
                                             oracle_accuracy=oracle_acc)
        s_r = metrics.nonsemantic_preservation_rate(records, train_ds.images)
        table[mixer] = {"s_c": s_c, "s_r": s_r, "n": len(records)}
    report = {"oracle_accuracy": oracle_acc, "mixers": table}
    with open(os.path.join(args.out, "comparison.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    _write_run_manifest(args.out, "compare-augmentations", cfg,
                        {"checkpoint": args.checkpoint, "split": args.split},
                        seed)
    for mixer, row in table.items():
        print(f"{mixer:<8} s_c={row['s_c']:5.1f} s_r={row['s_r']:5.1f}")
    return 0


def cmd_report(args):
    reports = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "report.json")
        _require(path, "run report")
        with open(path) as f:
            reports.append(json.load(f))
    table = metrics.aggregate_runs(reports)
    text = metrics.format_table(table)
    if args.out:
        payload = {setting: {"mean": m, "std": s, "n_runs": n}
                   for setting, (m, s, n) in table.items()}
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scimix",
        description="Semantic-content swapping autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="config file (key = value sections)")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a config value")

    p = sub.add_parser("synth-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--pngs", action="store_true", help="also write PNGs")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("make-splits", help="write a labeled/unlabeled split manifest")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("train-generator", help="train the hybridizing autoencoder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("generate-hybrids", help="generate filtered hybrids")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_hybrids)

    p = sub.add_parser("train-classifier", help="train a classifier, optionally with hybrids")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("evaluate", help="evaluate a trained classifier")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score-hybrids", help="score hybrids with the oracle")
    common(p)
    p.add_argument("--hybrids", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score_hybrids)

    p = sub.add_parser("compare-augmentations",
                       help="mixer quality comparison (s_c / s_r)")
    common(p)
    p.add_argument("--mixers", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--oracle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_augmentations)

    p = sub.add_parser("report", help="aggregate run reports (mean +/- std)")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing-artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"error: numerical-abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: invalid-input: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
