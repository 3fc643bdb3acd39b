"""Command-line front end: count, solve, sweep, train, eval, compare.

Every subcommand is a pure function of its config files, flags, corpus bytes
and seed; reruns produce byte-identical CSV output. Exit codes: 0 success,
1 validation error, 2 infeasible budget or budget mismatch, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from . import data, planner, training
from .model import ConfigError, ModelConfig, init_weights
from .planner import BudgetMismatchError, InfeasibleBudgetError, SweepSpec
from .training import TrainConfig

MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
SOLVE_KEYS = ("budget", "d_model", "n_layers", "ffn_blocks", "tolerance")
SWEEP_KEYS = (
    "budget", "axis", "k_values", "d_model", "n_layers", "dh_grid",
    "dh_ratio", "layer_grid", "n_heads", "vocab_size", "max_seq", "tolerance",
)


def _merge_settings(config_paths, set_args) -> dict[str, str]:
    merged: dict[str, str] = {}
    for path in config_paths or ():
        for key, value in data.read_config_file(path).items():
            if key in merged and merged[key] != value:
                raise ConfigError(f"key {key!r} set to both {merged[key]!r} and {value!r}")
            merged[key] = value
    for item in set_args or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def _split_known(mapping: dict[str, str], *key_groups) -> list[dict[str, str]]:
    allowed = set().union(*key_groups)
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    return [{k: v for k, v in mapping.items() if k in group} for group in key_groups]


def _int_list(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated integers, got {raw!r}") from None


def _float_list(raw: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated numbers, got {raw!r}") from None


def _sweep_spec(mapping: dict[str, str]) -> SweepSpec:
    kwargs = {}
    for key, raw in mapping.items():
        if key in ("k_values", "layer_grid"):
            kwargs[key] = _int_list(raw, key)
        elif key == "dh_grid":
            kwargs[key] = _float_list(raw, key)
        elif key in ("budget", "d_model", "n_layers", "n_heads", "vocab_size", "max_seq"):
            kwargs[key] = int(raw)
        elif key in ("dh_ratio", "tolerance"):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    try:
        return SweepSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _load_corpus(path: str, pretokenized: bool) -> data.Corpus:
    if pretokenized:
        return data.Corpus.from_token_file(path)
    return data.Corpus.from_file(path)


def _emit(lines, out_path) -> None:
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _human(n: float) -> str:
    return f"{round(n / 1e6)}M"


# -- subcommands -------------------------------------------------------------------


def cmd_count(args) -> int:
    mapping = _merge_settings(args.config, args.set)
    (model_map,) = _split_known(mapping, MODEL_KEYS)
    cfg = data.model_config_from_mapping(model_map)
    bd = planner.total_params(cfg)
    print(f"attention_params    {bd.attention_params:>14}  ({_human(bd.attention_params)})")
    print(f"ffn_params          {bd.ffn_params:>14}  ({_human(bd.ffn_params)})")
    print(f"norm_params         {bd.norm_params:>14}  ({_human(bd.norm_params)})")
    print(f"total_nonembedding  {bd.total_nonembedding:>14}  ({_human(bd.total_nonembedding)})")
    fwd = planner.flops_per_token(cfg, "forward")
    trn = planner.flops_per_token(cfg, "train")
    print(f"flops_per_token_forward  {int(fwd):>14}  ({fwd:.3e})")
    print(f"flops_per_token_train    {int(trn):>14}  ({trn:.3e})")
    return 0


def cmd_solve(args) -> int:
    mapping = _merge_settings(args.config, args.set)
    (solve_map,) = _split_known(mapping, SOLVE_KEYS)
    for key in ("budget", "d_model", "n_layers", "ffn_blocks"):
        if key not in solve_map:
            raise ConfigError(f"solve needs key {key!r}")
    budget = int(solve_map["budget"])
    d_model = int(solve_map["d_model"])
    n_layers = int(solve_map["n_layers"])
    blocks = int(solve_map["ffn_blocks"])
    tolerance = float(solve_map.get("tolerance", planner.BUDGET_RTOL))
    dh = planner.solve_dh(budget, d_model, n_layers, blocks)
    bd = planner.breakdown_for(d_model, dh, n_layers, blocks)
    within = planner.budgets_match(bd.total_nonembedding, budget, tolerance)
    _emit(
        [
            planner.SWEEP_CSV_HEADER,
            f"{d_model},{dh},{n_layers},{blocks},{bd.attention_params},{bd.ffn_params},"
            f"{bd.total_nonembedding},{6 * bd.total_nonembedding},{1 if within else 0}",
        ],
        args.out,
    )
    return 0


def cmd_sweep(args) -> int:
    mapping = _merge_settings(args.config, args.set)
    (sweep_map,) = _split_known(mapping, SWEEP_KEYS)
    spec = _sweep_spec(sweep_map)
    rows = planner.enumerate_sweep(spec)
    _emit(planner.sweep_csv_lines(rows), args.out)
    return 0


def _configs_from(args):
    mapping = _merge_settings(args.config, args.set)
    model_map, train_map = _split_known(mapping, MODEL_KEYS, TRAIN_KEYS)
    if args.seed is not None:
        train_map["seed"] = str(args.seed)
    cfg = data.model_config_from_mapping(model_map)
    try:
        tcfg = data.config_from_mapping(TrainConfig, train_map, what="train config")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, tcfg


def cmd_train(args) -> int:
    cfg, tcfg = _configs_from(args)
    corpus = _load_corpus(args.corpus, args.pretokenized).check_vocab(cfg.vocab_size)
    val_corpus = None
    if args.val_corpus:
        val_corpus = _load_corpus(args.val_corpus, args.pretokenized).check_vocab(cfg.vocab_size)
    model = init_weights(cfg, seed=tcfg.seed)
    records, state = training.train(
        model, corpus, tcfg,
        log_every=args.log_every,
        val_corpus=val_corpus,
        eval_every=args.eval_every or args.log_every,
        allow_wrap=args.allow_wrap,
    )
    _emit(training.metrics_csv_lines(records), args.out)
    if args.checkpoint:
        data.save_checkpoint(model, args.checkpoint, state=state, tokens_seen=tcfg.total_tokens)
    return 0


def cmd_eval(args) -> int:
    model, _, _ = data.load_checkpoint(args.checkpoint)
    losses, ppls = [], []
    for path in args.corpus:
        corpus = _load_corpus(path, args.pretokenized).check_vocab(model.config.vocab_size)
        val_loss, val_ppl = training.evaluate(model, corpus, args.seq_len)
        losses.append(val_loss)
        ppls.append(val_ppl)
        print(f"{path}: val_loss={val_loss!r} val_ppl={val_ppl!r}")
    if len(losses) > 1:
        # Macro averages: each validation file carries equal weight.
        mean_loss = sum(losses) / len(losses)
        mean_ppl = sum(ppls) / len(ppls)
        print(f"macro_average: val_loss={mean_loss!r} val_ppl={mean_ppl!r}")
    return 0


def cmd_compare(args) -> int:
    if len(args.config) != 2:
        raise ConfigError("compare needs exactly two --config files")
    shared = _merge_settings(None, args.set)
    maps = []
    train_map: dict[str, str] = {}
    for path in args.config:
        mapping = dict(data.read_config_file(path))
        model_map, file_train = _split_known(mapping, MODEL_KEYS, TRAIN_KEYS)
        for key, value in file_train.items():
            if train_map.get(key, value) != value:
                raise ConfigError(
                    f"train key {key!r} disagrees between config files: "
                    f"{train_map[key]!r} vs {value!r}"
                )
            train_map[key] = value
        maps.append(model_map)
    shared_model, shared_train = _split_known(shared, MODEL_KEYS, TRAIN_KEYS)
    for m in maps:
        m.update(shared_model)
    train_map.update(shared_train)
    if args.seed is not None:
        train_map["seed"] = str(args.seed)

    cfg_a = data.model_config_from_mapping(maps[0])
    cfg_b = data.model_config_from_mapping(maps[1])
    try:
        tcfg = data.config_from_mapping(TrainConfig, train_map, what="train config")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    total_a = planner.total_params(cfg_a).total_nonembedding
    total_b = planner.total_params(cfg_b).total_nonembedding
    if not planner.budgets_match(total_a, total_b) and not args.allow_budget_mismatch:
        raise BudgetMismatchError(
            f"budgets differ: {total_a} vs {total_b} "
            f"(relative gap {abs(total_a - total_b) / max(total_a, total_b):.3%}); "
            "pass --allow-budget-mismatch to proceed"
        )

    corpus = _load_corpus(args.corpus, args.pretokenized)
    corpus.check_vocab(min(cfg_a.vocab_size, cfg_b.vocab_size))
    val_corpus = None
    if args.val_corpus:
        val_corpus = _load_corpus(args.val_corpus, args.pretokenized)
    records_a, records_b, _, _ = training.compare_models(
        cfg_a, cfg_b, tcfg, corpus,
        val_corpus=val_corpus,
        log_every=args.log_every,
        eval_every=args.eval_every or args.log_every,
    )
    _emit(training.paired_csv_lines(records_a, records_b), args.out)

    def final(records):
        if records and records[-1].val_loss is not None:
            return "val_loss", records[-1].val_loss
        return "train_loss", (records[-1].train_loss if records else float("nan"))

    kind_a, score_a = final(records_a)
    kind_b, score_b = final(records_b)
    print(
        f"verdict: {args.config[0]} final {kind_a}={score_a!r} | "
        f"{args.config[1]} final {kind_b}={score_b!r}"
    )
    return 0


# -- argument parsing -----------------------------------------------------------------


def _keys_epilog(label: str, keys) -> str:
    return f"accepted {label} keys (via --config files or --set): {', '.join(keys)}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hglm",
        description="Plan, train and compare conventional and hourglass FFN transformers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, configs="*"):
        if configs:
            p.add_argument("--config", action="append", metavar="FILE",
                           help="flat key=value config file (repeatable)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", metavar="FILE", help="write output here instead of stdout")

    p = sub.add_parser("count", help="print the parameter/FLOP breakdown of one config",
                       epilog=_keys_epilog("model", MODEL_KEYS))
    add_common(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("solve", help="solve the bottleneck width for a parameter budget",
                       epilog=_keys_epilog("solve", SOLVE_KEYS))
    add_common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="enumerate a design-space sweep as CSV",
                       epilog=_keys_epilog("sweep", SWEEP_KEYS))
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="train one model and emit metrics CSV",
                       epilog=_keys_epilog("model+train", MODEL_KEYS + TRAIN_KEYS))
    add_common(p)
    p.add_argument("--corpus", required=True, metavar="FILE")
    p.add_argument("--val-corpus", metavar="FILE")
    p.add_argument("--pretokenized", action="store_true",
                   help="corpus files hold little-endian uint32 token ids")
    p.add_argument("--checkpoint", metavar="FILE", help="write final weights here")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--allow-wrap", action="store_true",
                   help="cycle the corpus instead of failing on exhaustion")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on validation streams")
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--corpus", action="append", required=True, metavar="FILE",
                   help="validation stream (repeatable; macro-averaged)")
    p.add_argument("--pretokenized", action="store_true")
    p.add_argument("--seq-len", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train two budget-matched configs on one stream",
                       epilog=_keys_epilog("model+train", MODEL_KEYS + TRAIN_KEYS))
    add_common(p)
    p.add_argument("--corpus", required=True, metavar="FILE")
    p.add_argument("--val-corpus", metavar="FILE")
    p.add_argument("--pretokenized", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--allow-budget-mismatch", action="store_true",
                   help="skip the matched-total gate")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleBudgetError, BudgetMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (data.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, data.CorpusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
