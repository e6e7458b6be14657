"""Command-line entry point.

Every subcommand shares the reproducibility flags --config, --set, --seed
and --out. Flags override config-file keys which override built-in defaults,
and before any work starts the fully resolved configuration is echoed to
<out>/config.txt, so the echo plus the seed reproduces the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .checkpoint import CheckpointError
from .config import Config, parse_config_file, resolve_config
from .data import (ConfigError, Dataset, DatasetError, SyntheticSpec,
                   build_sequences, gen_synthetic)
from .diffusion import make_schedule
from .gradcheck import CASES, run_grad_check
from .model import attention_legend, dump_attention_map, sequences_to_tensors
from .pipeline import (Bundle, SplitData, inference_prefix, infer_next_item,
                       load_bundle, save_bundle, stage1_pretrain, stage2_train,
                       stage3_finetune)
from .stats import entropy_report, joint_counts

log = logging.getLogger(__name__)


def _conf_from_args(args) -> Config:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return resolve_config(file_values, overrides)


def _apply_to_bundle(bundle: Bundle, args) -> None:
    """Apply config file / flag overrides on top of a loaded checkpoint's
    configuration. Keys that would desynchronize the stored weights from the
    configuration are rejected.
    """
    merged: dict[str, str] = {}
    if args.config:
        merged.update(parse_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    if args.seed is not None:
        merged["train.seed"] = str(args.seed)

    protected = ["model.", "data.L"]
    if bundle.denoiser is not None:
        protected.append("denoiser.")
    candidate = bundle.conf.with_overrides(merged)
    for key in merged:
        if any(key.startswith(p) for p in protected) \
                and candidate[key] != bundle.conf[key]:
            raise ConfigError(f"cannot change {key} on a trained checkpoint; "
                              "retrain from scratch")
    bundle.conf = candidate


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(args, conf: Config) -> tuple[Dataset, SplitData]:
    dataset = Dataset.load(Path(args.data),
                           min_interactions=conf["data.min_interactions"])
    return dataset, SplitData.from_dataset(dataset, conf["data.L"])


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") \
            from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") \
            from None


def cmd_gen_data(args) -> int:
    conf = _conf_from_args(args)
    out = _out_dir(args)
    conf.write_echo(out / "config.txt")
    freqs = tuple(_floats(args.freqs))
    lo, hi = _ints(args.len_range)
    spec = SyntheticSpec(
        num_users=args.users, num_items=args.items,
        num_behaviors=args.behaviors, archetypes=args.archetypes,
        cluster_size=args.cluster_size, behavior_frequencies=freqs,
        seq_len_range=(lo, hi),
        seed=args.seed if args.seed is not None else conf.seed)
    data_path = Path(args.data) if args.data else out / "synthetic.tsv"
    data_path, manifest_path = gen_synthetic(spec, data_path)
    print(f"wrote {data_path}")
    print(f"wrote {data_path}.header")
    print(f"wrote {manifest_path}")
    return 0


def cmd_entropy(args) -> int:
    conf = _conf_from_args(args)
    out = _out_dir(args)
    conf.write_echo(out / "config.txt")
    dataset = Dataset.load(Path(args.data), min_interactions=1)
    report = entropy_report(joint_counts(dataset.interactions()))
    text = report.format()
    print(text, end="")
    (out / "entropy.txt").write_text(text)
    return 0


def cmd_pretrain(args) -> int:
    conf = _conf_from_args(args)
    out = _out_dir(args)
    conf.write_echo(out / "config.txt")
    dataset, split = _load_split(args, conf)
    model = stage1_pretrain(split.train_sequences, dataset.vocab, conf)
    schedule = make_schedule(conf["diffusion.T"], conf["diffusion.beta_start"],
                             conf["diffusion.beta_end"])
    bundle = Bundle(dataset.vocab, conf, model, None, schedule,
                    dataset.behavior_names, stage=1)
    save_bundle(out / "stage1", bundle)
    print(f"wrote {out / 'stage1'}.manifest and .bin")
    return 0


def cmd_train_diffusion(args) -> int:
    bundle = load_bundle(args.ckpt)
    _apply_to_bundle(bundle, args)
    out = _out_dir(args)
    bundle.conf.write_echo(out / "config.txt")
    dataset, split = _load_split(args, bundle.conf)
    denoiser, schedule = stage2_train(split.train_sequences, bundle.vocab,
                                      bundle.model, bundle.conf)
    bundle.denoiser, bundle.schedule, bundle.stage = denoiser, schedule, 2
    save_bundle(out / "stage2", bundle)
    print(f"wrote {out / 'stage2'}.manifest and .bin")
    return 0


def cmd_finetune(args) -> int:
    bundle = load_bundle(args.ckpt)
    if bundle.denoiser is None:
        raise CheckpointError("finetune needs a stage-2 checkpoint with a "
                              "trained denoiser")
    _apply_to_bundle(bundle, args)
    out = _out_dir(args)
    bundle.conf.write_echo(out / "config.txt")
    dataset, split = _load_split(args, bundle.conf)
    stage3_finetune(split.stage3_splits(), bundle.vocab, bundle.model,
                    bundle.denoiser, bundle.schedule, bundle.conf)
    bundle.stage = 3
    save_bundle(out / "final", bundle)
    print(f"wrote {out / 'final'}.manifest and .bin")
    return 0


def cmd_infer(args) -> int:
    bundle = load_bundle(args.ckpt)
    if bundle.denoiser is None:
        raise CheckpointError("infer needs a checkpoint with a trained "
                              "denoiser")
    _apply_to_bundle(bundle, args)
    out = _out_dir(args)
    bundle.conf.write_echo(out / "config.txt")
    dataset = Dataset.load(Path(args.data), min_interactions=1)
    if args.user not in dataset.users:
        raise DatasetError(f"unknown user id {args.user}")
    inters = dataset.users[args.user]
    prefix = inference_prefix(
        np.array([i.item_id for i in inters]),
        np.array([i.behavior_id for i in inters]),
        bundle.L, bundle.vocab, user_id=args.user)
    ranked = infer_next_item(bundle, prefix, args.behavior, args.k,
                             bundle.conf.seed)
    print(" ".join(str(i) for i in ranked))
    path = out / f"ranked_user{args.user}_b{args.behavior}.txt"
    path.write_text("".join(f"{i}\n" for i in ranked))
    print(f"wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.ckpt)
    _apply_to_bundle(bundle, args)
    out = _out_dir(args)
    bundle.conf.write_echo(out / "config.txt")
    if args.mode == "diffusion" and bundle.stage < 3:
        raise CheckpointError(
            f"checkpoint is at stage {bundle.stage}; evaluate needs all "
            "three stages (or pass --mode encoder / encoder-agnostic)")
    dataset, split = _load_split(args, bundle.conf)
    report = evaluation.evaluate(bundle, split.test_splits,
                                 bundle.conf.ks(), bundle.conf.seed,
                                 mode=args.mode)
    print(report.format())
    (out / "report.txt").write_text(
        report.format() + "\n\n" + "\n".join(report.record_lines()) + "\n")
    print(f"wrote {out / 'report.txt'}")
    return 0


def cmd_few_shot(args) -> int:
    conf = _conf_from_args(args)
    out = _out_dir(args)
    conf.write_echo(out / "config.txt")
    _, split = _load_split(args, conf)
    ratios = _floats(args.ratios)
    rows = evaluation.few_shot_curve(split, conf, args.behavior, ratios,
                                     eval_seed=conf.seed)
    k = conf.ks()[0]
    lines = [f"target_behavior={args.behavior}",
             "  ".join(["ratio".ljust(8), f"R@{k}".rjust(8),
                        f"N@{k}".rjust(8)])]
    for ratio, report in rows:
        lines.append("  ".join([f"{ratio:g}".ljust(8),
                                f"{report.recall[k]:.4f}".rjust(8),
                                f"{report.ndcg[k]:.4f}".rjust(8)]))
    text = "\n".join(lines)
    print(text)
    (out / "few_shot.txt").write_text(text + "\n")
    print(f"wrote {out / 'few_shot.txt'}")
    return 0


def cmd_sweep(args) -> int:
    conf = _conf_from_args(args)
    out = _out_dir(args)
    conf.write_echo(out / "config.txt")
    _, split = _load_split(args, conf)
    values = (_ints(args.values) if args.axis in ("T", "dt")
              else _floats(args.values))
    rows = evaluation.sweep(split, conf, args.axis, values, conf.seed)
    table = evaluation.sweep_table(args.axis, rows)
    print(table)
    (out / f"sweep_{args.axis}.txt").write_text(table + "\n")
    plot_path = out / f"sweep_{args.axis}.png"
    if rows:
        evaluation.sweep_plot(args.axis, rows, plot_path)
        print(f"wrote {plot_path}")
    return 0


def cmd_attn_dump(args) -> int:
    bundle = load_bundle(args.ckpt)
    _apply_to_bundle(bundle, args)
    out = _out_dir(args)
    bundle.conf.write_echo(out / "config.txt")
    dataset = Dataset.load(Path(args.data), min_interactions=1)
    if args.user not in dataset.users:
        raise DatasetError(f"unknown user id {args.user}")
    seq = build_sequences({args.user: dataset.users[args.user]},
                          bundle.L, bundle.vocab)[0]
    bundle.model.eval()
    items, behaviors, lengths = sequences_to_tensors([seq])
    grid = bundle.model.attention_map(items, behaviors, lengths)[0]
    grid_path = out / f"attn_user{args.user}.txt"
    dump_attention_map(grid, grid_path)
    legend_path = out / f"attn_user{args.user}.item_behavior"
    legend = attention_legend(seq, bundle.vocab, dataset.behavior_names)
    legend_path.write_text("".join(line + "\n" for line in legend))
    print(f"wrote {grid_path}")
    print(f"wrote {legend_path}")
    return 0


def cmd_grad_check(args) -> int:
    conf = _conf_from_args(args)
    out = _out_dir(args)
    conf.write_echo(out / "config.txt")
    results = run_grad_check(args.case)
    worst = 0.0
    for case in sorted(results):
        for pname, err in results[case].items():
            print(f"{case} {pname} {err:.3e}")
            worst = max(worst, err)
    print(f"max_rel_err {worst:.3e} tolerance {args.tolerance:.1e}")
    return 0 if worst <= args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--out", default="out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="mbrec",
        description="Multi-behavior sequential recommendation: masked "
                    "sequence autoencoder plus guided latent diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write a planted synthetic dataset")
    p.add_argument("--data", help="output data path (default <out>/synthetic.tsv)")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--behaviors", type=int, default=4)
    p.add_argument("--archetypes", type=int, default=5)
    p.add_argument("--cluster-size", type=int, default=10)
    p.add_argument("--freqs", default="0.7,0.1,0.1,0.1",
                   help="behavior frequencies, comma separated")
    p.add_argument("--len-range", default="8,20",
                   help="min,max interactions per user")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("entropy", parents=[common],
                       help="item/behavior entropy diagnostics")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("pretrain", parents=[common],
                       help="stage 1: Cloze-pretrain the autoencoder")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-diffusion", parents=[common],
                       help="stage 2: train the latent denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint base")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("finetune", parents=[common],
                       help="stage 3: decoder-only next-item fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint base")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", parents=[common],
                       help="ranked next-item prediction for one user")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--behavior", type=int, required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common],
                       help="leave-one-out ranking evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", default="diffusion",
                   choices=list(evaluation.EVAL_MODES))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("few-shot", parents=[common],
                       help="train/evaluate under target-behavior omission")
    p.add_argument("--data", required=True)
    p.add_argument("--behavior", type=int, required=True)
    p.add_argument("--ratios", default="0,0.2,0.5,1")
    p.set_defaults(func=cmd_few_shot)

    p = sub.add_parser("sweep", parents=[common],
                       help="hyperparameter sweep with full retrains")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True,
                   choices=sorted(evaluation.SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attn-dump", parents=[common],
                       help="write a user's averaged attention map")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--user", type=int, required=True)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference gradient verification")
    p.add_argument("--case", default="all",
                   choices=["all"] + sorted(CASES))
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s",
                        stream=sys.stdout)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
