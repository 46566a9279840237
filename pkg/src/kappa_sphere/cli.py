"""Command-line surface.

Subcommands:

* ``gen``        generate a synthetic scene -> bank + manifest + config
* ``fit``        post-train the kappa head on a generated scene
* ``train``      joint training (margin loss + weighted vMF term)
* ``eval``       query-level Recall@K + ECE@K reports for every method
* ``match-eval`` match-level calibration reports
* ``report``     render a report JSON as text tables (optionally SVG)
* ``bench``      latency benchmark of the kappa path

Heavy imports happen inside ``main`` so that KAPPA_SPHERE_THREADS can
cap the BLAS thread pool before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_cap() -> None:
    cap = os.environ.get("KAPPA_SPHERE_THREADS")
    if not cap:
        return
    if "numpy" in sys.modules:
        return  # too late to cap; numpy already configured its pools
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kappa-sphere",
        description="Hyperspherical uncertainty for place recognition: "
                    "vMF concentration training, resultant uncertainty "
                    "scores, and rank-based calibration.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="run-config JSON path")
        p.add_argument("--seed", type=int, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="artifact directory")

    p = sub.add_parser("gen", help="generate a synthetic scene")
    common(p)

    p = sub.add_parser("fit", help="post-train the kappa head")
    common(p)

    p = sub.add_parser("train", help="joint training of encoder + head")
    common(p)

    for name, help_text in (("eval", "query-level evaluation"),
                            ("match-eval", "match-level evaluation")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--k", default=None,
                       help="comma-separated K values, e.g. 1,5,10")
        p.add_argument("--bins", type=int, default=None, help="bin count M")
        p.add_argument("--binning", choices=["equal-width", "quantile"],
                       default=None)
        p.add_argument("--method", default=None,
                       help="comma-separated method subset")
        p.add_argument("--svg", action="store_true",
                       help="write reliability diagrams")

    p = sub.add_parser("report", help="render a report JSON")
    p.add_argument("path", help="report JSON file")
    p.add_argument("--svg", action="store_true",
                   help="write reliability diagrams next to the report")

    p = sub.add_parser("bench", help="latency benchmark")
    common(p, needs_out=False)
    p.add_argument("--out", default=None, help="optional output directory")

    return parser


# ---------------------------------------------------------------------------


def _resolve(args):
    from . import fileio

    overrides = {}
    if args.seed is not None:
        overrides = {"scene": {"seed": args.seed}, "train": {"seed": args.seed}}
    return fileio.load_run_config(args.config, overrides)


def _load_scene(resolved):
    from . import fileio
    from .synth import generate_scene

    return generate_scene(fileio.scene_config_from(resolved))


def _paths(out):
    return {
        "bank": os.path.join(out, "bank.kpb"),
        "manifest": os.path.join(out, "manifest.json"),
        "config": os.path.join(out, "config.json"),
        "model": os.path.join(out, "model.json"),
        "history": os.path.join(out, "history.csv"),
    }


def cmd_gen(args) -> int:
    from . import fileio

    resolved = _resolve(args)
    dataset = _load_scene(resolved)
    os.makedirs(args.out, exist_ok=True)
    paths = _paths(args.out)
    fileio.write_bank(paths["bank"], dataset.bank.descriptors)
    fileio.write_manifest(paths["manifest"], dataset.bank, dataset.splits)
    fileio.atomic_write_text(paths["config"],
                             json.dumps(resolved, sort_keys=True, indent=2))
    print(f"wrote {paths['bank']}, {paths['manifest']}, {paths['config']}")
    return 0


def _config_for_out(args):
    """Prefer the config.json recorded by gen unless --config was given."""
    if args.config is None:
        candidate = os.path.join(args.out, "config.json")
        if os.path.exists(candidate):
            args.config = candidate
    return _resolve(args)


def cmd_fit(args) -> int:
    from . import fileio
    from .pipeline import fit_head, predict_kappas
    from .training import TrainMode

    resolved = _config_for_out(args)
    train_cfg = fileio.train_config_from(resolved)
    if train_cfg.mode not in (TrainMode.POST_TRAINING, TrainMode.GNLL_VARIANT):
        raise ValueError("fit expects train.mode post_training or gnll_variant")
    dataset = _load_scene(resolved)
    head, history = fit_head(dataset, cfg=train_cfg)
    os.makedirs(args.out, exist_ok=True)
    paths = _paths(args.out)
    fileio.write_model_state(paths["model"], head=head,
                             extra={"mode": train_cfg.mode.value,
                                    "epochs": len(history)})
    fileio.atomic_write_text(paths["history"], fileio.history_csv(history))
    dataset.bank.kappas = predict_kappas(dataset.features, head)
    fileio.write_bank(paths["bank"], dataset.bank.descriptors)
    fileio.write_manifest(paths["manifest"], dataset.bank, dataset.splits)
    fileio.atomic_write_text(paths["config"],
                             json.dumps(resolved, sort_keys=True, indent=2))
    print(f"fitted head in {len(history)} epochs; wrote {paths['model']}")
    return 0


def cmd_train(args) -> int:
    from . import fileio
    from .pipeline import fit_joint, predict_kappas
    from .training import TrainConfig, TrainMode

    resolved = _config_for_out(args)
    train_cfg = fileio.train_config_from(resolved)
    if train_cfg.mode is not TrainMode.JOINT_TRAINING:
        train_cfg = TrainConfig(
            **{**resolved["train"], "mode": TrainMode.JOINT_TRAINING,
               "anchor_mode": train_cfg.anchor_mode})
    lmcl = fileio.lmcl_config_from(resolved)
    dataset = _load_scene(resolved)
    encoder, prototypes, head, history = fit_joint(dataset, cfg=train_cfg,
                                                   lmcl=lmcl)
    os.makedirs(args.out, exist_ok=True)
    paths = _paths(args.out)
    fileio.write_model_state(paths["model"], head=head, encoder=encoder,
                             prototypes=prototypes,
                             extra={"mode": train_cfg.mode.value,
                                    "lam": train_cfg.lam,
                                    "epochs": len(history)})
    fileio.atomic_write_text(paths["history"], fileio.history_csv(history))
    dataset.bank.descriptors = encoder.encode(dataset.raw)
    if head is not None:
        dataset.bank.kappas = predict_kappas(dataset.features, head)
    fileio.write_bank(paths["bank"], dataset.bank.descriptors)
    fileio.write_manifest(paths["manifest"], dataset.bank, dataset.splits)
    fileio.atomic_write_text(paths["config"],
                             json.dumps(resolved, sort_keys=True, indent=2))
    print(f"joint training finished in {len(history)} epochs; "
          f"wrote {paths['model']}")
    return 0


def _load_eval_inputs(args):
    import numpy as np

    from . import fileio
    from .retrieval import DescriptorBank

    paths = _paths(args.out)
    desc = fileio.read_bank(paths["bank"])
    bank, splits = fileio.read_manifest(paths["manifest"], desc)
    if not splits:
        raise ValueError("manifest has no split assignment; run gen first")
    resolved = _config_for_out(args)

    def subset(idx):
        return DescriptorBank(
            descriptors=bank.descriptors[idx], ids=bank.ids[idx],
            labels=bank.labels[idx],
            poses=None if bank.poses is None else bank.poses[idx],
            true_kappa=None if bank.true_kappa is None else bank.true_kappa[idx],
            kappas=None if bank.kappas is None else bank.kappas[idx])

    db = subset(np.asarray(splits["db"]))
    queries = subset(np.asarray(splits["query"]))
    return resolved, db, queries


def _eval_options(args, resolved):
    from .calibration import BinStrategy

    ks = resolved["ks"]
    if args.k:
        ks = [int(v) for v in str(args.k).split(",")]
    bins = args.bins if args.bins else resolved["binning"]["num_bins"]
    strategy = BinStrategy(resolved["binning"]["strategy"])
    if args.binning:
        strategy = (BinStrategy.QUANTILE if args.binning == "quantile"
                    else BinStrategy.EQUAL_WIDTH)
    return ks, bins, strategy


def cmd_eval(args) -> int:
    from . import fileio, scores as sc
    from .calibration import reliability_svg
    from .pipeline import evaluate_queries

    resolved, db, queries = _load_eval_inputs(args)
    ks, bins, strategy = _eval_options(args, resolved)
    methods = sc.ALL_METHODS
    if args.method:
        methods = tuple(str(args.method).split(","))
        unknown = sorted(set(methods) - set(sc.ALL_METHODS))
        if unknown:
            raise ValueError(f"unknown methods {unknown}")
    ev = evaluate_queries(db, queries, ks=ks, methods=methods,
                          num_bins=bins, strategy=strategy,
                          tau=resolved["tau"])
    body = {
        "level": "query",
        "recalls": {str(k): v for k, v in ev.recalls.items()},
        "spearman_kappa": ev.spearman_kappa,
        "unsupported": ev.unsupported,
        "reports": {f"{m}@{k}": rep.to_dict()
                    for (m, k), rep in sorted(ev.reports.items())},
    }
    out_path = os.path.join(args.out, "report.json")
    fileio.atomic_write_text(out_path, fileio.report_document(
        body, resolved, resolved["scene"]["seed"]))
    if args.svg:
        for (m, k), rep in ev.reports.items():
            svg_path = os.path.join(args.out, f"reliability_{m}_k{k}.svg")
            fileio.atomic_write_text(svg_path, reliability_svg(rep))
    _print_query_table(ev, ks)
    print(f"wrote {out_path}")
    return 0


def cmd_match_eval(args) -> int:
    from . import fileio
    from .calibration import reliability_svg
    from .pipeline import evaluate_matches

    resolved, db, queries = _load_eval_inputs(args)
    ks, bins, strategy = _eval_options(args, resolved)
    k = ks[0] if ks else 1
    ev = evaluate_matches(db, queries, k=k, num_bins=bins, strategy=strategy,
                          tau=resolved["tau"])
    body = {
        "level": "match",
        "k": k,
        "reports": {m: rep.to_dict() for m, rep in sorted(ev.reports.items())},
    }
    out_path = os.path.join(args.out, "match_report.json")
    fileio.atomic_write_text(out_path, fileio.report_document(
        body, resolved, resolved["scene"]["seed"]))
    if args.svg:
        for m, rep in ev.reports.items():
            svg_path = os.path.join(args.out, f"reliability_match_{m}_k{k}.svg")
            fileio.atomic_write_text(svg_path, reliability_svg(rep))
    for m, rep in sorted(ev.reports.items()):
        print(f"match {m:12s} ECE@{k} = {rep.ece:.4f}  (T={rep.total})")
    print(f"wrote {out_path}")
    return 0


def _print_query_table(ev, ks) -> None:
    methods = sorted({m for (m, _) in ev.reports})
    header = "method      " + "".join(f"  ECE@{k:<4d}" for k in ks)
    print("recall: " + "  ".join(f"R@{k}={ev.recalls[k]:.3f}" for k in ks))
    if ev.spearman_kappa is not None:
        print(f"spearman(kappa_hat, kappa*): {ev.spearman_kappa:.4f}")
    print(header)
    for m in methods:
        cells = "".join(f"  {ev.reports[(m, k)].ece:8.4f}" for k in ks)
        print(f"{m:12s}{cells}")
    for m, reason in ev.unsupported.items():
        print(f"{m:12s}  unsupported: {reason}")


def cmd_report(args) -> int:
    from . import fileio
    from .calibration import (BinningConfig, BinStrategy, CalibrationReport,
                              ClampMode, reliability_svg)

    with open(args.path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != fileio.REPORT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported report schema {doc.get('schema_version')!r}")
    print(f"seed {doc['seed']}  level {doc.get('level')}")
    if doc.get("recalls"):
        print("recall: " + "  ".join(f"R@{k}={v:.3f}"
                                     for k, v in sorted(doc["recalls"].items(),
                                                        key=lambda kv: int(kv[0]))))
    if doc.get("spearman_kappa") is not None:
        print(f"spearman(kappa_hat, kappa*): {doc['spearman_kappa']:.4f}")
    print(f"{'report':20s}  {'ECE':>8s}  {'N':>6s}")
    for name, rep in sorted(doc["reports"].items()):
        print(f"{name:20s}  {rep['ece']:8.4f}  {rep['total']:6d}")
        print("  bin  count  observed  expected")
        for i, (cnt, obs, exp) in enumerate(zip(rep["bin_counts"],
                                                rep["bin_observed"],
                                                rep["bin_expected"]), start=1):
            obs_s = "   --" if obs is None else f"{obs:.3f}"
            print(f"  {i:3d}  {cnt:5d}  {obs_s:>8s}  {exp:8.3f}")
    for m, reason in (doc.get("unsupported") or {}).items():
        print(f"{m:20s}  unsupported: {reason}")
    if args.svg:
        base = os.path.dirname(os.path.abspath(args.path))
        for name, rep in doc["reports"].items():
            cal = CalibrationReport(
                method=rep["method"], k=rep["k"], num_bins=rep["num_bins"],
                strategy=BinStrategy(rep["strategy"]),
                clamp=ClampMode(rep["clamp"]),
                clamp_bounds=tuple(rep["clamp_bounds"]),
                bin_counts=rep["bin_counts"], bin_observed=rep["bin_observed"],
                bin_expected=rep["bin_expected"], ece=rep["ece"],
                total=rep["total"], level=rep["level"])
            path = os.path.join(base, f"reliability_{name.replace('@', '_k')}.svg")
            fileio.atomic_write_text(path, reliability_svg(cal))
            print(f"wrote {path}")
    return 0


def cmd_bench(args) -> int:
    from . import fileio
    from .bench import run_bench

    seed = args.seed if args.seed is not None else 0
    result = run_bench(seed=seed)
    print(f"descriptor path : {result.descriptor_ms:8.4f} ms")
    print(f"with kappa head : {result.combined_ms:8.4f} ms")
    print(f"overhead        : {result.overhead * 100:7.2f} %")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "bench.json")
        fileio.atomic_write_text(path, json.dumps(
            {"schema_version": fileio.REPORT_SCHEMA_VERSION,
             **result.to_dict()}, sort_keys=True, indent=2))
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "train": cmd_train,
    "eval": cmd_eval,
    "match-eval": cmd_match_eval,
    "report": cmd_report,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
