"""Command-line surface: pretrain, probe, attack, sweep, selftest, gen-data.

Heavy modules are imported inside ``main`` so the PCON_THREADS cap can be
applied to the BLAS thread pools before numpy loads.  Every run writes its
artifacts under ``<out-dir>/<run_id>/`` together with an append-only
manifest; rerunning an identical run id refuses to overwrite unless
``--force`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
EXIT_SELFTEST = 4
EXIT_COLLISION = 5


def _cap_threads():
    cap = os.environ.get("PCON_THREADS")
    if not cap:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, cap)


def _config_key_table() -> str:
    from .train import CONFIG_KEYS

    lines = ["config keys (override any of them with --set key=value):"]
    for key, (default, help_text) in CONFIG_KEYS.items():
        lines.append(f"  {key:<22} default={default!r:<22} {help_text}")
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcon",
        description="Contrastive representation learning in the Poincare ball.",
        epilog=_config_key_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="config file (TOML-style key = value)")
            p.add_argument(
                "--set",
                action="append",
                default=[],
                metavar="KEY=VALUE",
                help="override a config key",
            )
            p.add_argument("--seed", type=int, help="override the seed key")
        p.add_argument("--out-dir", default="runs", help="artifact root directory")
        p.add_argument("--force", action="store_true", help="overwrite an existing run id")

    p = sub.add_parser(
        "pretrain",
        help="train an encoder with the configured contrastive loss",
        epilog=_config_key_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(p)

    p = sub.add_parser("probe", help="linear-probe a checkpoint on its dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    common(p)

    p = sub.add_parser("attack", help="PGD-attack a checkpoint's linear probe")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--eps", type=float, help="override attack_epsilon")
    p.add_argument("--alpha", type=float, help="override attack_alpha")
    p.add_argument("--steps", type=int, help="override eval_attack_steps")
    p.add_argument(
        "--adv-probe",
        action="store_true",
        help="adversarial-training pass on the probe head before evaluating",
    )
    common(p)

    p = sub.add_parser("sweep", help="curvature sweep: pretrain+probe per c value")
    p.add_argument("--c", required=True, help="comma-separated curvature values")
    common(p)

    p = sub.add_parser("selftest", help="run the geometry and gradient property suites")
    p.add_argument("--fast", action="store_true", help="reduced case counts")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="export a generated dataset to an htree file")
    p.add_argument("--out", required=True, help="output path")
    common(p)
    return parser


# ---------------------------------------------------------------------------
# run directories and manifests
# ---------------------------------------------------------------------------


def _run_id(kind: str, payload: str, seed: int) -> str:
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()[:10]
    return f"{kind}-{digest}-s{seed}"


class _Run:
    """One run directory plus its append-only artifact manifest."""

    def __init__(self, out_dir: str, run_id: str, force: bool):
        self.run_id = run_id
        self.dir = os.path.join(out_dir, run_id)
        self.manifest = os.path.join(self.dir, "manifest.jsonl")
        if os.path.exists(self.manifest) and not force:
            raise FileExistsError(
                f"run {run_id} already exists at {self.dir} (use --force to overwrite)"
            )
        os.makedirs(self.dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def record(self, name: str, kind: str) -> str:
        entry = {
            "run_id": self.run_id,
            "path": name,
            "kind": kind,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        with open(self.manifest, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")
        return self.path(name)


def _resolve_config(args):
    from .config import apply_overrides, load_config
    from .train import TrainConfig, default_config_dict

    values = default_config_dict()
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    values = apply_overrides(values, args.set)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict(values)


def _load_datasets(cfg):
    """(train, test) split for the configured data source."""
    import numpy as np

    from . import data

    if cfg.data_kind == "cifar":
        if not cfg.data_path:
            raise FileNotFoundError(
                "data_kind=cifar requires data_path pointing at the binary batches"
            )
        return data.load_cifar_desk(cfg.data_path)
    if cfg.data_path:
        kind = "image" if cfg.data_kind == "synth-image" else "vector"
        ds = data.read_htree(cfg.data_path, kind)
        split = int(0.8 * len(ds))
        train = data.Dataset(ds.x[:split], None if ds.y is None else ds.y[:split], kind)
        test = data.Dataset(ds.x[split:], None if ds.y is None else ds.y[split:], kind)
        return train, test
    if cfg.data_kind == "tree":
        spec = data.TreeDatasetSpec(
            cfg.tree_branching,
            cfg.tree_depth,
            cfg.tree_class_level,
            cfg.tree_feature_dim,
            cfg.tree_edge_noise,
            cfg.tree_obs_noise,
        )
        test_per_leaf = max(2, cfg.tree_samples_per_leaf // 4)
        full = data.gen_tree_dataset(spec, cfg.tree_samples_per_leaf + test_per_leaf, cfg.seed)
        per = cfg.tree_samples_per_leaf + test_per_leaf
        train_rows = np.concatenate(
            [np.arange(i * per, i * per + cfg.tree_samples_per_leaf) for i in range(spec.n_leaves)]
        )
        test_rows = np.setdiff1d(np.arange(len(full)), train_rows)
        train = data.Dataset(full.x[train_rows], full.y[train_rows], "vector")
        test = data.Dataset(full.x[test_rows], full.y[test_rows], "vector")
        return train, test
    if cfg.data_kind == "synth-image":
        train = data.gen_synthetic_images(cfg.synth_per_class, cfg.synth_classes, cfg.seed)
        test = data.gen_synthetic_images(
            cfg.synth_test_per_class, cfg.synth_classes, cfg.seed, start_index=cfg.synth_per_class
        )
        return train, test
    raise FileNotFoundError(f"unknown data_kind {cfg.data_kind!r}")


def _strip_labels(train, test, cfg):
    from .data import Dataset

    if cfg.use_labels:
        return train, test
    return (
        Dataset(train.x, None, train.kind),
        Dataset(test.x, None, test.kind),
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_pretrain(args) -> int:
    from . import report, train

    cfg = _resolve_config(args)
    train_set, test_set = _strip_labels(*_load_datasets(cfg), cfg)
    run = _Run(args.out_dir, _run_id("pretrain", cfg.to_text(), cfg.seed), args.force)
    with open(run.record("config.toml", "config"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    model, metrics = train.pretrain(cfg, train_set, run_id=run.run_id)
    train.save_checkpoint(run.record("checkpoint.pcon", "checkpoint"), model, cfg, cfg.epochs)
    report.write_metrics(run.record("metrics.jsonl", "metrics"), metrics)
    report.plot_loss_curves(run.record("loss_curve.svg", "figure"), metrics)
    final = [m for m in metrics if m["metric"] == "loss_mean"]
    last = final[-1]["value"] if final else float("nan")
    print(f"pretrain {run.run_id}: {cfg.loss} epochs={cfg.epochs} final_loss={last:.4f}")
    print(f"artifacts in {run.dir}")
    return EXIT_OK


def _load_ckpt_and_data(args):
    from . import train

    ckpt = train.load_checkpoint(args.ckpt)
    cfg = ckpt.to_config()
    train_set, test_set = _load_datasets(cfg)
    model, _ = train.model_from_checkpoint(ckpt, train_set.x.shape[1:])
    return cfg, model, train_set, test_set


def _cmd_probe(args) -> int:
    from . import report, train

    cfg, model, train_set, test_set = _load_ckpt_and_data(args)
    run = _Run(args.out_dir, _run_id("probe", args.ckpt + cfg.to_text(), cfg.seed), args.force)
    _probe, acc = train.linear_probe(model, train_set, test_set, cfg)
    rows = [{"checkpoint": args.ckpt, "split": "test", "top1_accuracy": acc}]
    report.write_table(run.record("probe.csv", "table"), rows)
    report.write_metrics(
        run.record("metrics.jsonl", "metrics"),
        [{"run_id": run.run_id, "epoch": cfg.probe_epochs, "split": "test",
          "metric": "probe_top1", "value": acc}],
    )
    print(f"probe {run.run_id}: top1={acc:.4f}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    from . import report, train

    cfg, model, train_set, test_set = _load_ckpt_and_data(args)
    if test_set.kind != "image":
        raise _ConfigProblem("attack operates on pixel boxes and needs an image dataset")
    if args.eps is not None:
        cfg.attack_epsilon = args.eps
    if args.alpha is not None:
        cfg.attack_alpha = args.alpha
    if args.steps is not None:
        cfg.eval_attack_steps = args.steps
    payload = (
        f"{args.ckpt}|{cfg.attack_epsilon}|{cfg.attack_alpha}|"
        f"{cfg.eval_attack_steps}|adv={args.adv_probe}"
    )
    run = _Run(args.out_dir, _run_id("attack", payload, cfg.seed), args.force)
    if args.adv_probe:
        n_classes = int(max(train_set.y.max(), test_set.y.max())) + 1
        probe = train.train_probe_adversarial(model, train_set, n_classes, cfg)
    else:
        probe, _probe_acc = train.linear_probe(model, train_set, test_set, cfg)
    clean, robust = train.robust_eval(
        model, probe, test_set, cfg.attack_config(training=False), cfg
    )
    rows = [{
        "checkpoint": args.ckpt,
        "probe": "adversarial" if args.adv_probe else "clean",
        "epsilon": cfg.attack_epsilon,
        "alpha": cfg.attack_alpha,
        "steps": cfg.eval_attack_steps,
        "clean_accuracy": clean,
        "robust_accuracy": robust,
    }]
    report.write_table(run.record("attack.csv", "table"), rows)
    report.write_metrics(
        run.record("metrics.jsonl", "metrics"),
        [
            {"run_id": run.run_id, "epoch": 0, "split": "test",
             "metric": "clean_accuracy", "value": clean},
            {"run_id": run.run_id, "epoch": 0, "split": "test",
             "metric": "robust_accuracy", "value": robust},
        ],
    )
    print(
        f"attack {run.run_id}: eps={cfg.attack_epsilon:.5f} clean={clean:.4f} robust={robust:.4f}"
    )
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from . import report, train

    cfg = _resolve_config(args)
    try:
        values = [float(tok) for tok in args.c.split(",") if tok.strip()]
    except ValueError as e:
        raise _ConfigProblem(f"--c expects comma-separated floats, got {args.c!r}") from e
    if not values:
        raise _ConfigProblem("--c lists no curvature values")
    train_set, test_set = _load_datasets(cfg)
    run = _Run(args.out_dir, _run_id("sweep", cfg.to_text() + args.c, cfg.seed), args.force)
    rows = train.curvature_sweep(cfg, values, train_set, test_set)
    report.write_table(run.record("sweep.csv", "table"), rows)
    report.plot_sweep(run.record("sweep.svg", "figure"), rows)
    for row in rows:
        print(f"c={row['c']:g}: top1={row['accuracy']:.4f}")
    print(f"sweep table in {run.dir}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    results, ok = run_all(fast=args.fast, seed=args.seed)
    groups: dict[str, bool] = {}
    for r in results:
        print(r.line())
        groups[r.group] = groups.get(r.group, True) and r.passed
    print("---")
    for group, passed in groups.items():
        print(f"group {group}: {'PASS' if passed else 'FAIL'}")
    if not ok:
        return EXIT_SELFTEST
    print("all property groups passed")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    import numpy as np

    from . import data

    cfg = _resolve_config(args)
    train_set, test_set = _load_datasets(
        cfg if not cfg.data_path else _strip_path(cfg)
    )
    merged = data.Dataset(
        np.concatenate([train_set.x, test_set.x]),
        None if train_set.y is None else np.concatenate([train_set.y, test_set.y]),
        train_set.kind,
    )
    data.write_htree(args.out, merged)
    print(f"wrote {len(merged)} samples ({merged.kind}) to {args.out}")
    return EXIT_OK


def _strip_path(cfg):
    from dataclasses import replace

    return replace(cfg, data_path="")


class _ConfigProblem(ValueError):
    pass


def main(argv=None) -> int:
    _cap_threads()
    from .config import ConfigError
    from .train import DivergenceError

    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "pretrain": _cmd_pretrain,
        "probe": _cmd_probe,
        "attack": _cmd_attack,
        "sweep": _cmd_sweep,
        "selftest": _cmd_selftest,
        "gen-data": _cmd_gen_data,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, _ConfigProblem) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as e:
        print(f"refusing to overwrite: {e}", file=sys.stderr)
        return EXIT_COLLISION
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # malformed dataset files and other input validation problems
        from .data import DataFormatError

        if isinstance(e, DataFormatError):
            print(f"data error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
