"""``mmil`` command line: gen-data, train, eval, bench, inspect-groups, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.  ``MMIL_SEED`` supplies the default ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path


from .complexity import bench_attention, bench_csv
from .data import SPLITS, GeneratorParams, gen_synthetic_dataset, load_bag, load_manifest
from .errors import ConfigurationError, DataError, MMILError
from .grouping import GROUPING_OPERATORS, apply_mask, group, size_histogram
from .model import BLOCK_STYLES, REATTACH_MODES, MmilModel, ModelConfig, load_checkpoint
from .training import TrainConfig, evaluate, train, with_params

PRESETS = {
    # configuration shapes only; the real datasets are out of scope
    "camelyon16-style": {"grouping": "random", "sub_bags": "10", "mask_ratio": "0.6"},
    "tcga-style": {"grouping": "random", "sub_bags": "4", "mask_ratio": "0"},
}

ABLATION_SUB_BAGS = (2, 4, 6, 10, 16, 32, 64)
ABLATION_MASKS = (0.0, 0.25, 0.3, 0.6, 0.75)


@dataclass
class RunConfig:
    model: dict
    train: dict
    data: str
    out: str
    preset: str | None = None
    split_sizes: dict = field(default_factory=dict)

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def _default_seed() -> int:
    raw = os.environ.get("MMIL_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"MMIL_SEED must be an integer, got {raw!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    params = GeneratorParams(
        n_bags=args.bags, n_range=(args.min_n, args.max_n), dim=args.dim, pos_instance_rate=args.rate,
        separation=args.separation, components=args.components, seed=args.seed,
    )
    manifest = gen_synthetic_dataset(args.out, params, _floats(args.split))
    counts = {s: len(manifest.split(s)) for s in SPLITS}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "bags": len(manifest.entries), **counts}))
    return 0


def model_config_from_args(args, input_dim: int) -> ModelConfig:
    dim = args.dim or input_dim
    return ModelConfig(
        dim=dim, heads=args.heads, layers=args.layers, levels=args.levels, sub_bags=_ints(args.sub_bags),
        msg_per_subbag=args.msg_per_subbag, mask_ratios=_floats(args.mask_ratio), grouping=args.grouping,
        block_style=args.block_style, input_dim=input_dim, reattach=args.reattach,
        remask_per_layer=args.remask_per_layer,
    )


def _apply_preset(args) -> None:
    if args.preset:
        for k, v in PRESETS[args.preset].items():
            setattr(args, k, v)


def cmd_train(args) -> int:
    _apply_preset(args)
    manifest = load_manifest(args.data)
    tr, va = manifest.load_split("train"), manifest.load_split("val")
    if not tr:
        raise DataError("manifest has no training bags")
    cfg = model_config_from_args(args, tr[0].dim)
    tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.wd, seed=args.seed,
                       eval_seed=args.eval_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = RunConfig(cfg.to_json(), asdict(tcfg), str(args.data), str(out), args.preset,
                    {"train": len(tr), "val": len(va)})
    (out / "run_config.json").write_text(run.dumps())
    model = MmilModel(cfg, seed=args.seed)
    result = train(model, tr, va, tcfg, out)
    last = result.rows[-1]
    print(json.dumps({"best_epoch": result.best_epoch, "checkpoint": str(out / "best.ckpt"),
                      "last": {"split": last[1], "loss": last[2], "accuracy": last[3], "auc": last[4]}}))
    return 0


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    model, meta = load_checkpoint(path)
    bags = load_manifest(args.data).load_split(args.split)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 0))
    report = evaluate(model, bags, repeats=args.repeats, seed=seed, eval_seed=args.eval_seed,
                      masking=not args.no_mask)
    print(report.dumps())
    return 0


def cmd_bench(args) -> int:
    rows = bench_attention(_ints(args.p_list), _ints(args.g_list), args.dim, args.repetitions,
                           heads=args.heads, m=args.msg, seed=args.seed)
    sys.stdout.write(bench_csv(rows))
    return 0


def cmd_inspect_groups(args) -> int:
    bag = load_bag(args.bag)
    p = group(args.grouping, args.sub_bags, n=bag.n, embeddings=bag.embeddings, coords=bag.coords,
              seed=args.seed)
    if args.mask_ratio:
        p = apply_mask(p, args.mask_ratio, args.seed)
    print(json.dumps({"bag": bag.id, "n": bag.n, "partition": p.to_json(),
                      "histogram": size_histogram(p)}))
    return 0


def ablation_cells(grid: str) -> list[dict]:
    """Configuration cells of the grouping / sub-bag / masking ablations."""
    if grid == "full":
        return [{"table": "full", "grouping": op, "sub_bags": g, "mask_ratio": r}
                for op in GROUPING_OPERATORS for g in ABLATION_SUB_BAGS for r in ABLATION_MASKS]
    cells = [{"table": "sub_bags", "grouping": "random", "sub_bags": g, "mask_ratio": 0.0}
             for g in ABLATION_SUB_BAGS]
    cells += [{"table": "grouping", "grouping": op, "sub_bags": 10, "mask_ratio": 0.0} for op in GROUPING_OPERATORS]
    cells += [{"table": "masking", "grouping": "random", "sub_bags": 10, "mask_ratio": r} for r in (0.6, 0.3, 0.0)]
    cells += [{"table": "masking", "grouping": "random", "sub_bags": 4, "mask_ratio": r} for r in (0.25, 0.75, 0.0)]
    return cells


ABLATION_HEADER = ("table", "grouping", "sub_bags", "mask_ratio", "epochs", "best_epoch", "accuracy", "auc")


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.data)
    tr, va, te = (manifest.load_split(s) for s in SPLITS)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_HEADER)
    sys.stdout.write(buf.getvalue())
    for cell in ablation_cells(args.grid):
        cfg = ModelConfig(dim=args.dim or tr[0].dim, heads=args.heads, layers=args.layers,
                          sub_bags=(cell["sub_bags"],), mask_ratios=(cell["mask_ratio"],),
                          grouping=cell["grouping"], input_dim=tr[0].dim)
        tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.wd, seed=args.seed)
        model = MmilModel(cfg, seed=args.seed)
        result = train(model, tr, va, tcfg)
        best = with_params(model, result.best_params)
        report = evaluate(best, te, repeats=args.repeats, seed=args.seed)
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [cell["table"], cell["grouping"], cell["sub_bags"], cell["mask_ratio"], args.epochs,
             result.best_epoch, repr(report.accuracy), repr(report.auc)])
        sys.stdout.write(buf.getvalue())
        sys.stdout.flush()
    return 0


# ---------------------------------------------------------------------------
# parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grouping", choices=GROUPING_OPERATORS, default="random")
    p.add_argument("--sub-bags", default="4", help="sub-bag count per level, comma-separated")
    p.add_argument("--mask-ratio", default="0", help="mask ratio per level, comma-separated")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--msg-per-subbag", type=int, default=1)
    p.add_argument("--dim", type=int, default=None, help="model width (default: embedding width)")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--block-style", choices=BLOCK_STYLES, default="prenorm_ffn")
    p.add_argument("--reattach", choices=REATTACH_MODES, default="replace")
    p.add_argument("--remask-per-layer", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    parser = argparse.ArgumentParser(prog="mmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic bag dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--bags", type=int, default=300)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--min-n", type=int, default=64)
    p.add_argument("--max-n", type=int, default=256)
    p.add_argument("--rate", type=float, default=0.05, help="positive-instance rate in positive bags")
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--split", default="0.6,0.15,0.25")
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", required=True, help="run directory")
    _model_flags(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--eval-seed", type=int, default=12345)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="repeated evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--no-mask", action="store_true", help="disable masking at evaluation")
    p.add_argument("--seed", type=int, default=None, help="training seed (default: from checkpoint)")
    p.add_argument("--eval-seed", type=int, default=12345)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time grouped vs ungrouped attention")
    p.add_argument("--p-list", default="1024,2048,4096")
    p.add_argument("--g-list", default="1,2,4,8")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--msg", type=int, default=0, help="MSG tokens per sub-bag")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect-groups", help="print one bag's partition as JSON")
    p.add_argument("--bag", required=True)
    p.add_argument("--grouping", choices=GROUPING_OPERATORS, default="random")
    p.add_argument("--sub-bags", type=int, default=4)
    p.add_argument("--mask-ratio", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_inspect_groups)

    p = sub.add_parser("ablate", help="train and evaluate every ablation cell, one CSV row each")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", choices=("tables", "full"), default="tables")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except MMILError as exc:
        print(f"mmil: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
