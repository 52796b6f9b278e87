"""Command line: ingest, train, generate, eval, sweep and synthetic-data generators.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Settings resolve as flags > ``--config`` file (``key = value`` lines, ``#``
comments) > defaults, and the resolved settings are written to every run
directory so a run can be replayed with ``--config <run>/config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path


from . import catalog as cat_mod
from .catalog import ConfigurationError, ParseError
from .decode import generate_topk, sample_list, write_recommendations
from .evaluation import evaluate, write_group_histogram, write_metrics
from .flownet import build_prefix_tree, frequency_rewards
from .policy import CONTEXTUAL, TABULAR, encode_context, load_params, save_params
from .prefs import fit as fit_prefs, load_overrides
from .training import WHOLE, TrainConfig, train, write_log

logger = logging.getLogger("flowtune")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "lambda": 0.005,
    "reward_variant": "div",
    "granularity": "1",
    "lr": 0.1,
    "momentum": 0.0,
    "batch_size": 16,
    "epochs": 7,
    "patience": 2,
    "samples": 1,
    "seed": 0,
    "max_steps": None,
    "policy": CONTEXTUAL,
    "dim": 8,
    "history_free": False,
    "sft_only": False,
    "subtb_only": False,
    "subtb_normalize": False,
    "alpha": 1.0,
    "reward_floor": 0.0,
    "prefs_override": None,
}

EVAL_DEFAULTS = {
    "k": 5,
    "k_fair": 10,
    "temperature": 1.0,
    "strategy": "topk",
    "split": "test",
    "groups": 8,
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def write_config(settings: dict, path) -> None:
    lines = [f"{k} = {'' if v is None else v}" for k, v in settings.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _coerce(key, value, default):
    if value is None or value == "":
        return None if default is None or value == "" else default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() not in _BOOL:
            raise UsageError(f"{key}: expected a boolean, got {value!r}")
        return _BOOL[str(value).lower()]
    try:
        if isinstance(default, int) or (default is None and key == "max_steps"):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: bad value {value!r}") from None
    return str(value)


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults, restricted to the keys in ``defaults``."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for k, d in defaults.items():
        v = getattr(args, k, None)
        if v is None:
            v = cfg.get(k, d)
        out[k] = _coerce(k, v, d)
    return out


def train_config(s: dict) -> TrainConfig:
    if s["granularity"] not in (WHOLE,) and not str(s["granularity"]).isdigit():
        raise UsageError(f"granularity must be a positive integer or 'whole', got {s['granularity']!r}")
    if s["policy"] not in (TABULAR, CONTEXTUAL):
        raise UsageError(f"unknown policy {s['policy']!r}")
    try:
        return TrainConfig(
            lam=s["lambda"], reward_variant=s["reward_variant"], granularity=s["granularity"],
            learning_rate=s["lr"], momentum=s["momentum"], batch_size=s["batch_size"],
            max_epochs=s["epochs"], patience=s["patience"], on_policy_samples=s["samples"],
            seed=s["seed"], max_steps=s["max_steps"], policy_mode=s["policy"], dim=s["dim"],
            history_free=s["history_free"], sft_only=s["sft_only"], subtb_only=s["subtb_only"],
            subtb_normalize=s["subtb_normalize"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# data directory helpers
# ---------------------------------------------------------------------------


def _load_data(data_dir):
    data_dir = Path(data_dir)
    meta_path = data_dir / "ingest.txt"
    if not meta_path.exists():
        raise UsageError(f"{data_dir} has no ingest manifests (run 'ingest' first)")
    meta = read_config(meta_path)
    catalog, group_col = cat_mod.read_catalog_manifest(data_dir / "catalog.jsonl", meta.get("tokenizer", "word"))
    titles = {i: it.title for i, it in catalog.items.items()}
    dataset = cat_mod.read_dataset_manifest(data_dir / "dataset.jsonl", titles)
    return dataset, catalog, meta


def _build_tree(catalog, floor):
    return build_prefix_tree(catalog, frequency_rewards(catalog, floor))


def _prefs(dataset, catalog, s):
    pm = fit_prefs(dataset.train_sequences(), catalog.item_ids, alpha=s["alpha"])
    if s.get("prefs_override"):
        pm = load_overrides(pm, s["prefs_override"])
    return pm


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    if not Path(args.input).exists():
        raise UsageError(f"input file {args.input} does not exist")
    window = None
    if args.time_window:
        try:
            t0, t1 = (int(x) for x in args.time_window.split(","))
        except ValueError:
            raise UsageError("--time-window expects 't0,t1'") from None
        window = (t0, t1)
    records = cat_mod.ingest_interactions(args.input, args.format)
    dataset = cat_mod.preprocess(records, k_core=args.k_core, max_len=args.max_len, time_window=window)
    catalog = cat_mod.build_catalog(dataset, args.tokenizer)
    groups = cat_mod.assign_popularity_groups(catalog, min(args.groups, len(catalog)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cat_mod.write_dataset_manifest(dataset, out / "dataset.jsonl")
    cat_mod.write_catalog_manifest(catalog, groups, out / "catalog.jsonl")
    write_config({"input": args.input, "format": args.format, "k_core": args.k_core,
                  "max_len": args.max_len, "time_window": args.time_window or "",
                  "tokenizer": args.tokenizer, "groups": args.groups}, out / "ingest.txt")
    print(f"{len(records)} records -> train {len(dataset.train)} / valid {len(dataset.valid)} / "
          f"test {len(dataset.test)}, {len(catalog)} items")
    return 0


def _run_training(data_dir, run_dir, s) -> tuple:
    config = train_config(s)
    dataset, catalog, _ = _load_data(data_dir)
    if config.history_free:
        dataset = cat_mod.Dataset(
            train=[cat_mod.Example(e.user_id, (), e.target) for e in dataset.train],
            valid=[], test=dataset.test, max_history_len=0, titles=dataset.titles)
    tree = _build_tree(catalog, s["reward_floor"])
    prefs = _prefs(dataset, catalog, s)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config({"data": data_dir, **s}, run_dir / "config.txt")

    def save_epoch(epoch, params):
        save_params(params, tree, run_dir / f"checkpoint_epoch{epoch:03d}.json")

    params, log = train(dataset, catalog, tree, config, prefs=prefs, epoch_callback=save_epoch)
    save_params(params, tree, run_dir / "checkpoint.json")
    write_log(log, run_dir / "log.csv")
    return params, log, dataset, catalog, tree


def cmd_train(args) -> int:
    s = resolve(args, TRAIN_DEFAULTS)
    if s["sft_only"] and s["subtb_only"]:
        raise UsageError("--sft-only and --subtb-only cannot be combined")
    _, log, *_ = _run_training(args.data, args.out, s)
    last = log[-1]
    print(f"trained {last.epoch} epochs / {last.step} steps; final loss {last.total:.6f}")
    return 0


def _recommend(params, tree, dataset, split, k, s, history_free=False):
    examples = getattr(dataset, split)
    rows = []
    for n, ex in enumerate(examples):
        ctx = encode_context(() if history_free else ex.history, params)
        if s["strategy"] == "topk":
            rl = generate_topk(tree, ctx, params, k, s["temperature"])
        else:
            rl = sample_list(tree, ctx, params, k, s["temperature"], seed=s.get("seed", 0) + n)
        rows.append((ex.user_id, rl))
    return examples, rows


def _checkpoint(run_dir):
    ck = Path(run_dir) / "checkpoint.json"
    if not ck.exists():
        raise UsageError(f"no checkpoint in {run_dir}")
    return ck


def _run_settings(run_dir) -> dict:
    path = Path(run_dir) / "config.txt"
    return read_config(path) if path.exists() else {}


def cmd_generate(args) -> int:
    ck = _checkpoint(args.run)
    s = resolve(args, {**EVAL_DEFAULTS, "seed": 0})
    if s["strategy"] not in ("topk", "sample"):
        raise UsageError("--strategy must be 'topk' or 'sample'")
    run_s = _run_settings(args.run)
    dataset, catalog, _ = _load_data(args.data)
    tree = _build_tree(catalog, float(run_s.get("reward_floor", 0.0) or 0.0))
    params = load_params(ck, tree)
    hf = _BOOL.get(str(run_s.get("history_free", "false")).lower(), False)
    _, rows = _recommend(params, tree, dataset, s["split"], s["k"], s, hf)
    out = Path(args.out) if args.out else Path(args.run) / "recommendations.jsonl"
    write_recommendations(rows, out)
    print(f"wrote {len(rows)} lists to {out}")
    return 0


def _evaluate_run(data_dir, run_dir, s, write=True):
    ck = _checkpoint(run_dir)
    run_s = _run_settings(run_dir)
    dataset, catalog, meta = _load_data(data_dir)
    tree = _build_tree(catalog, float(run_s.get("reward_floor", 0.0) or 0.0))
    params = load_params(ck, tree)
    hf = _BOOL.get(str(run_s.get("history_free", "false")).lower(), False)
    G = min(s["groups"], len(catalog))
    groups = cat_mod.assign_popularity_groups(catalog, G)
    examples, acc = _recommend(params, tree, dataset, s["split"], s["k"], s, hf)
    _, fair = _recommend(params, tree, dataset, s["split"], s["k_fair"], s, hf)
    if not examples:
        raise UsageError(f"split {s['split']!r} is empty")
    report = evaluate([r for _, r in acc], [e.target for e in examples], [r for _, r in fair], catalog, groups)
    if write:
        write_metrics(report, Path(run_dir) / "metrics.csv")
        write_group_histogram(report.group_hist, report.history_share, Path(run_dir) / "groups.csv")
        write_recommendations(fair, Path(run_dir) / "recommendations.jsonl")
    return report


def cmd_eval(args) -> int:
    s = resolve(args, {**EVAL_DEFAULTS, "seed": 0})
    report = _evaluate_run(args.data, args.run, s)
    print(report.table())
    return 0


SWEEP_PARAMS = {
    "lambda": "lambda",
    "granularity": "granularity",
    "reward-variant": "reward_variant",
    "reward_variant": "reward_variant",
    "lr": "lr",
    "seed": "seed",
}


def cmd_sweep(args) -> int:
    key = SWEEP_PARAMS.get(args.param)
    if key is None:
        raise UsageError(f"cannot sweep {args.param!r}; choose from {sorted(set(SWEEP_PARAMS))}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    base = resolve(args, TRAIN_DEFAULTS)
    ev = resolve(args, {**EVAL_DEFAULTS, "seed": 0})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        s = dict(base)
        s[key] = _coerce(key, v, TRAIN_DEFAULTS[key])
        run_dir = out / f"{key}={v}"
        _run_training(args.data, run_dir, s)
        rep = _evaluate_run(args.data, run_dir, {**ev, "seed": s["seed"]})
        rows.append({"param": key, "value": v, **rep.row()})
        print(f"{key}={v}: NDCG@{rep.k_accuracy} {rep.ndcg_k:.4f} DGU@{rep.k_fairness} {rep.dgu_k:.4f}")
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(x) if isinstance(x, float) else x for k, x in r.items()})
    return 0


def cmd_make_zipf(args) -> int:
    recs = cat_mod.make_zipf_log(args.items, args.exponent, args.interactions, args.seed)
    cat_mod.write_interactions(recs, args.out, args.format)
    print(f"wrote {len(recs)} interactions over {args.items} items to {args.out}")
    return 0


def cmd_make_clusters(args) -> int:
    recs = cat_mod.make_cluster_log(args.users, args.items_per_cluster, args.seq_len, args.seed)
    cat_mod.write_interactions(recs, args.out, args.format)
    print(f"wrote {len(recs)} interactions to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--reward-variant", choices=["plain", "div", "mul"])
    p.add_argument("--granularity", help="1, 5, 10, ... or 'whole'")
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--samples", type=int, help="on-policy titles per example")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--policy", choices=[TABULAR, CONTEXTUAL])
    p.add_argument("--dim", type=int)
    p.add_argument("--alpha", type=float, help="preference smoothing")
    p.add_argument("--reward-floor", type=float, help="reward for zero-frequency items")
    p.add_argument("--prefs-override", help="JSONL of (user_id, item_id, p)")
    p.add_argument("--history-free", action="store_const", const=True)
    p.add_argument("--sft-only", action="store_const", const=True)
    p.add_argument("--subtb-only", action="store_const", const=True)
    p.add_argument("--subtb-normalize", action="store_const", const=True)


def _add_eval_flags(p):
    p.add_argument("--k", type=int)
    p.add_argument("--k-fair", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--strategy", choices=["topk", "sample"])
    p.add_argument("--split", choices=["train", "valid", "test"])
    p.add_argument("--groups", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowtune", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="preprocess an interaction log into manifests")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")
    p.add_argument("--k-core", type=int, default=5)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--time-window", help="t0,t1 (inclusive)")
    p.add_argument("--tokenizer", choices=list(cat_mod.TOKENIZERS), default="word")
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fine-tune a policy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write ranked lists for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="compute the metric report for a run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train+eval over a grid of one setting")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    _add_train_flags(p)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-zipf", help="synthetic Zipf-distributed interaction log")
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--exponent", type=float, default=1.0)
    p.add_argument("--interactions", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_zipf)

    p = sub.add_parser("make-clusters", help="synthetic two-cluster interaction log")
    p.add_argument("--users", type=int, default=60)
    p.add_argument("--items-per-cluster", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_clusters)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ParseError, FileNotFoundError) as e:
        print(f"flowtune {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"flowtune {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
