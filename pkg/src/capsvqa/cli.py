"""Command-line interface: gen / train / eval / gradcheck / ablate / viz / diagnose."""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .train import TrainConfig


def _cmd_gen(args) -> int:
    from .world import gen_dataset, write_dataset

    ds = gen_dataset(args.scenes, args.qa_per_scene, args.seed)
    write_dataset(ds, Path(args.out), mode=args.mode)
    print(f"wrote {len(ds.scenes)} scenes / {len(ds.questions)} questions to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .train import train

    config = TrainConfig.from_file(args.config)
    out_dir = Path(args.out) if args.out else Path(args.config).with_suffix("")
    summary = train(config, out_dir)
    print(json.dumps({k: v for k, v in summary.items() if k != "history"}, indent=2))
    return 0


def _cmd_eval(args) -> int:
    from .evalrun import evaluate_checkpoint, write_report

    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else [args.alpha]
    report = evaluate_checkpoint(args.checkpoint, alphas=alphas, data_dir=args.data)
    out = args.out or "report.json"
    write_report(report, out)
    criteria = ("overlap", "iou") if args.criterion == "both" else (args.criterion,)
    policies = args.policy.split(",")
    print(f"answer accuracy: {report['answer_accuracy']:.4f}")
    for key, block in report["alphas"].items():
        for criterion in criteria:
            for policy in policies:
                m = block["metrics"][criterion][policy]
                print(
                    f"alpha={key} {criterion}/{policy}: "
                    f"P={m['precision']:.4f} R={m['recall']:.4f} F1={m['f1']:.4f}"
                )
    print(f"report written to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import COMPONENTS, gradcheck_component

    names = COMPONENTS if args.component == "all" else (args.component,)
    worst = 0.0
    for name in names:
        result = gradcheck_component(name, seed=args.seed)
        if math.isnan(result.max_rel_error):
            print(f"{name}: non-differentiable ({result.note})")
            continue
        print(f"{name}: max relative error {result.max_rel_error:.3e} over {result.n_entries} entries")
        worst = max(worst, result.max_rel_error)
    print(f"worst differentiable component error: {worst:.3e}")
    return 0


def _cmd_ablate(args) -> int:
    from .ablation import run_ablation_suite

    base = TrainConfig.from_file(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_ablation_suite(base, Path(args.out), seeds=seeds)
    print((Path(args.out) / "ablation.md").read_text())
    return 0


def _cmd_viz(args) -> int:
    from .viz import visualize_checkpoint

    ids = [int(s) for s in args.samples.split(",")]
    written = visualize_checkpoint(
        args.checkpoint, ids, Path(args.out), alpha=args.alpha, data_dir=args.data
    )
    print(f"wrote {len(written)} images to {args.out}")
    return 0


def _cmd_diagnose(args) -> int:
    from .diagnostics import diagnose_samples, records_to_dicts
    from .evalrun import collect_traces
    from .train import load_checkpoint, load_splits, prepare_data

    model, config, vocab, _ = load_checkpoint(args.checkpoint)
    if args.data:
        config.data_dir = args.data
    _, val_ds = load_splits(config)
    data = prepare_data(val_ds, vocab, config.feature_mode, config.mode, config.steps)
    samples = collect_traces(model, data)
    result = diagnose_samples(samples, alpha=args.alpha or config.alpha)
    out = {"summary": result["summary"], "records": records_to_dicts(result["records"])}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2))
    print(json.dumps(result["summary"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsvqa")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset directory")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--qa-per-scene", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("raster", "oracle"), default="oracle")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate grounding for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--alpha", type=float, default=7.0)
    p.add_argument("--alphas", default=None, help="comma-separated sweep, e.g. 1,3,5,7")
    p.add_argument("--criterion", choices=("overlap", "iou", "both"), default="both")
    p.add_argument("--policy", default="best,last")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--component", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the design-choice ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("viz", help="render attention visualizations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True, help="comma-separated validation indices")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--data", default=None)
    p.set_defaults(func=_cmd_viz)

    p = sub.add_parser("diagnose", help="background-capsule diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
