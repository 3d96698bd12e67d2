"""Command-line surface tying ingestion, training, evaluation, and analysis
into reproducible runs.

Exit codes: 0 on success, 1 when a run fails, 2 on usage/config errors.
``MSDA_OUTPUT_ROOT`` sets the default root for outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .adapters import AdapterError, adapt_amazon, adapt_pheme
from .analysis import (
    AnalysisError,
    expert_agreement,
    pca_project,
    write_agreement,
    write_projection,
)
from .config import ConfigError, load_run_config
from .data import DataError, atomic_write_text, holdout, load_canonical, write_canonical
from .encoders import EncoderError
from .evaluation import loo_run, write_report
from .mixing import MixingError
from .synth import synthetic_bundle
from .training import load_run, save_run, train

USAGE_ERRORS = (ConfigError, DataError, AdapterError, EncoderError, MixingError, AnalysisError)


def _output_dir(explicit: str | None, config_dir: str | None, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    if config_dir:
        return Path(config_dir)
    root = os.environ.get("MSDA_OUTPUT_ROOT", "runs")
    return Path(root) / default_name


def _load_bundle(dataset: str | None, hold: str | None):
    if not dataset:
        raise ConfigError("config has no 'dataset' path")
    bundle = load_canonical(dataset)
    if hold:
        bundle = holdout(bundle, hold)
    return bundle


def cmd_ingest(args) -> int:
    out = Path(args.out)
    if args.kind == "amazon":
        summary = adapt_amazon(args.path, out)
    elif args.kind == "pheme":
        summary = adapt_pheme(args.path, out)
    else:
        bundle = load_canonical(args.path)
        write_canonical(bundle, out)
        counts = bundle.counts()
        print(f"validated {args.path} -> {out}")
        for name, count in counts.items():
            print(f"{name}: {count}")
        return 0
    print(summary.describe())
    print(f"canonical files written to {out}")
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    rc.validate_layers()
    bundle = _load_bundle(rc.dataset, rc.holdout)
    trained, history = train(rc.variant, bundle.training_view(), rc)
    run_dir = _output_dir(args.output, rc.output_dir, rc.variant)
    save_run(run_dir, rc, trained, history)
    print(f"run written to {run_dir}")
    return 0


def cmd_eval_loo(args) -> int:
    rc = load_run_config(args.config)
    rc.validate_layers()
    bundle = _load_bundle(rc.dataset, None)
    result = loo_run(
        rc.variant,
        bundle,
        rc,
        seeds=rc.seeds,
        jobs=args.jobs,
        table_metric=rc.train.selection_metric,
    )
    out_dir = _output_dir(args.output, rc.output_dir, f"{rc.variant}-loo")
    write_report(result, out_dir, rc.to_dict())
    print(result.table, end="")
    print(f"report written to {out_dir}")
    if result.any_failed:
        for report in result.reports:
            if report.failed:
                print(f"cell {report.held_out} failed: {report.error}", file=sys.stderr)
        return 1
    return 0


def _analysis_inputs(args):
    trained, rc = load_run(args.run)
    bundle = load_canonical(args.data)
    hold = args.holdout or rc.holdout
    return trained, rc, bundle, hold


def cmd_analyze_agreement(args) -> int:
    trained, rc, bundle, hold = _analysis_inputs(args)
    if hold:
        view = holdout(bundle, hold)
        texts = [ex.text for ex in view.target_test]
        scope = hold
    else:
        texts = [ex.text for d in bundle.domains for ex in bundle.sources[d]]
        scope = "all-domains"
    matrix, domains = expert_agreement(trained, texts)
    out_dir = _output_dir(args.output, None, f"{rc.variant}-agreement")
    artifacts = write_agreement(out_dir, matrix, domains, f"Expert agreement on {scope}")
    payload = {"domains": list(domains), "matrix": matrix.tolist(), "scope": scope}
    atomic_write_text(Path(out_dir) / "agreement.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload["matrix"]))
    print(f"agreement artifacts written to {out_dir}: {sorted(artifacts)}")
    return 0


def cmd_analyze_project(args) -> int:
    trained, rc, bundle, hold = _analysis_inputs(args)
    if not hold:
        raise ConfigError("projection needs a held-out domain (--holdout or config holdout)")
    view = holdout(bundle, hold)
    in_texts = [ex.text for d in view.domains for ex in view.sources[d]]
    out_texts = [ex.text for ex in view.target_test]
    reps = trained.representations(in_texts + out_texts)
    labels = ["in-domain"] * len(in_texts) + ["out-of-domain"] * len(out_texts)
    result = pca_project(reps, sample_size=args.sample, seed=rc.train.seed, split_labels=labels)
    out_dir = _output_dir(args.output, None, f"{rc.variant}-projection")
    artifacts = write_projection(out_dir, result, f"{rc.variant}: final-layer representations")
    payload = {
        "explained_variance": list(result.explained_variance),
        "points": {
            label: sum(1 for s in result.split_labels if s == label)
            for label in sorted(set(result.split_labels))
        },
    }
    atomic_write_text(Path(out_dir) / "projection.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload))
    print(f"projection artifacts written to {out_dir}: {sorted(artifacts)}")
    return 0


def cmd_synth(args) -> int:
    bundle = synthetic_bundle(
        domains=tuple(args.domains.split(",")),
        examples_per_domain=args.examples,
        seed=args.seed,
    )
    write_canonical(bundle, args.out)
    print(f"synthetic dataset with domains {bundle.domains} written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a raw dataset into canonical JSONL files")
    p.add_argument("kind", choices=("amazon", "pheme", "canonical"))
    p.add_argument("path", help="raw dataset root (or canonical dir to validate/copy)")
    p.add_argument("out", help="output directory for canonical files")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one variant from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None, help="run directory (overrides config output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-loo", help="leave-one-out cross-validation over all domains")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel cells (default 1)")
    p.set_defaults(func=cmd_eval_loo)

    p = sub.add_parser("analyze", help="post-hoc analyses of a trained run")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("agreement", help="inter-expert agreement heatmap")
    a.add_argument("--run", required=True, help="run directory from `msda train`")
    a.add_argument("--data", required=True, help="canonical dataset directory")
    a.add_argument("--holdout", default=None)
    a.add_argument("--output", default=None)
    a.set_defaults(func=cmd_analyze_agreement)
    a = asub.add_parser("project", help="2-D projection of learned representations")
    a.add_argument("--run", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--holdout", default=None)
    a.add_argument("--sample", type=int, default=500)
    a.add_argument("--output", default=None)
    a.set_defaults(func=cmd_analyze_project)

    p = sub.add_parser("synth", help="generate a synthetic separable dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", default="alpha,beta,gamma")
    p.add_argument("--examples", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    import torch

    torch.set_num_threads(1)  # results must not depend on host core count
    try:
        return args.func(args)
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - run failures map to exit 1
        print(f"run failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
