"""``dmlkit`` command line: every capability as a subcommand with JSON output.

stdout carries only the JSON payload; the reproducibility header and any
diagnostics go to stderr. Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .embed_store import EmbeddingSet, l2_normalize, load_any, load_csv, save_binary, save_csv
from .errors import DMLError
from .fid import fid_between
from .losses import MarginConfig, MultisimConfig, S2SDConfig
from .metrics import cluster_nmi, density, map_at, recall_at_k, spectral_decay
from .splits import SplitSequence, ags, build_split_sequence, first_half, random_half

log = logging.getLogger("dmlkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# -- subcommands -----------------------------------------------------------------------

def cmd_ingest(args) -> dict:
    src = Path(args.input)
    es = load_csv(src, has_header=args.has_header) if src.suffix.lower() == ".csv" else load_any(src)
    if args.normalize:
        es = l2_normalize(es)
    if not args.out:
        raise UsageError("ingest needs --out for the converted file")
    out = Path(args.out)
    if out.suffix.lower() == ".csv":
        save_csv(es, out)
    else:
        save_binary(es, out)
    return {"n": es.n, "dim": es.dim, "classes": int(len(es.classes)), "out": str(out)}


def cmd_eval(args) -> dict:
    es = load_any(args.data)
    if args.normalize:
        es = l2_normalize(es)
    want_any = args.recall or args.map or args.nmi or args.density or args.spectral
    recall = args.recall or ([] if want_any else [1, 2, 4, 8])
    maps = args.map or ([] if want_any else [1000])
    out: dict = {}
    if recall:
        out.update(recall_at_k(es, recall, args.metric).to_dict())
    for c in maps:
        out[f"map@{c}"] = map_at(es, c, args.metric)
    if args.nmi:
        out["nmi"] = cluster_nmi(es, seed=args.seed).nmi
    if args.density:
        intra, inter, ratio = density(es)
        out.update({"pi_intra": intra, "pi_inter": inter, "pi_ratio": ratio})
    if args.spectral:
        out["spectral_decay"] = spectral_decay(es, args.skip_first)
    return out


def cmd_fid(args) -> dict:
    return {"fid": fid_between(load_any(args.a), load_any(args.b))}


def cmd_build_splits(args) -> dict:
    data = load_any(args.data)
    if args.train_classes == "auto-half":
        initial = random_half(data, args.seed)
    elif args.train_classes == "first-half":
        initial = first_half(data)
    else:
        initial = _int_list(args.train_classes)
    seq = build_split_sequence(data, initial, swap_size=args.swap_size, seed=args.seed,
                               retained_fraction_floor=args.floor, direction=args.direction)
    return seq.to_manifest()


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def cmd_ags(args) -> dict:
    seq = SplitSequence.from_manifest(_load_json(args.manifest))
    scores = _load_json(args.scores)
    if isinstance(scores, dict):
        scores = scores["scores"]
    scores = [float(s) / args.score_scale for s in scores]
    if len(scores) != len(seq.states):
        raise ValueError(f"{len(scores)} scores for {len(seq.states)} split states")
    return {"ags": ags((seq.fids, scores)), "points": len(scores)}


def _train_config(args, objective: str):
    from .trainer import TrainConfig
    return TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, objective=objective,
        base_objective=args.base_objective, embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
        lr=args.lr, weight_decay=args.weight_decay, eval_every=args.eval_every, head_warmup=args.head_warmup,
        margin=MarginConfig(), multisim=MultisimConfig(),
        s2sd=S2SDConfig(gamma=args.gamma, temperature=args.temperature, target_dims=tuple(args.targets),
                        warmup_iters=args.feature_warmup, use_feature_distill=not args.no_feature_distill),
    )


def _task(args) -> tuple[EmbeddingSet, EmbeddingSet]:
    from .embed_store import split_by_classes
    from .trainer import make_ood_task
    if args.data:
        data = load_any(args.data)
        train_ids = random_half(data, args.seed) if args.train_classes == "auto-half" else _int_list(args.train_classes)
        return split_by_classes(data, train_ids)
    return make_ood_task(args.seed, novel_scale=args.novel_scale)


def cmd_train_toy(args) -> dict:
    from .trainer import train
    tr, te = _task(args)
    res = train(tr, _train_config(args, args.objective), eval_data=te)
    if args.history:
        with open(args.history, "w") as fh:
            for rec in res.history:
                fh.write(json.dumps(rec) + "\n")
    return {"objective": args.objective, "initial": res.history[0], "final": res.history[-1],
            "epochs": args.epochs}


def cmd_fewshot(args) -> dict:
    from .trainer import EpisodeSpec, few_shot_adapt, train
    tr, te = _task(args)
    res = train(tr, _train_config(args, args.objective), eval_data=te)
    spec = EpisodeSpec(shots=args.shots, episodes=args.episodes, adapt_epochs=args.adapt_epochs,
                       seed=args.seed, lr=args.adapt_lr)
    return few_shot_adapt(res.reference, te, spec).to_dict()


def cmd_gradcheck(args) -> dict:
    from .trainer import REGISTRY, grad_check
    names = sorted(REGISTRY) if args.objective == "all" else [args.objective]
    for n in names:
        if n not in REGISTRY:
            raise UsageError(f"unknown objective {n!r}; choose from {sorted(REGISTRY)} or 'all'")
    reports = [grad_check(n, args.trials, args.seed) for n in names]
    return {"tolerance": args.tol, "passed": all(r.passed(args.tol) for r in reports),
            "reports": [r.to_dict() for r in reports]}


def knn_bruteforce(base: np.ndarray, queries: np.ndarray, k: int, chunk: int = 256, group: int = 64) -> np.ndarray:
    """Exact top-k inner-product neighbours (for unit vectors, the Euclidean order).

    Columns are split into disjoint groups. Each of the k best groups holds
    an element at least as large as its group maximum, so the k-th largest
    group maximum lower-bounds the k-th largest similarity, and every entry
    reaching the bound sits in a group whose maximum reaches it. Only those
    groups are gathered and sorted (ties by lower index).
    """
    n = base.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    width = n // group                      # group j holds columns j, j + width, ...
    body = group * width
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        sims = queries[s:s + chunk] @ base.T
        m = sims.shape[0]
        if width >= k:
            gmax = sims[:, :body].reshape(m, group, width).max(axis=1)
            cand = np.concatenate([gmax, sims[:, body:]], axis=1)
            bound = np.partition(cand, cand.shape[1] - k, axis=1)[:, cand.shape[1] - k]
            r, g = np.nonzero(gmax >= bound[:, None])
            rows = np.repeat(r, group)
            cols = (g[:, None] + width * np.arange(group)).ravel()
            rt, ct = np.nonzero(sims[:, body:] >= bound[:, None])
            rows = np.concatenate([rows, rt])
            cols = np.concatenate([cols, ct + body])
        else:
            rows, cols = np.divmod(np.arange(m * n), n)
        vals = sims[rows, cols]
        order = np.lexsort((cols, -vals, rows))
        rows, cols = rows[order], cols[order]
        starts = np.searchsorted(rows, np.arange(m))
        out[s:s + m] = cols[starts[:, None] + np.arange(k)]
    return out


def cmd_retrieval_bench(args) -> dict:
    rng = np.random.default_rng(args.seed)
    rows = []
    for d in args.dims:
        base = rng.standard_normal((args.n, d)).astype(np.float32)
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        q = base[rng.choice(args.n, size=min(args.queries, args.n), replace=False)]
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            knn_bruteforce(base, q, args.k)
            times.append(time.perf_counter() - t0)
        rows.append({"dim": d, "median_seconds": float(np.median(times)), "seconds": times})
    meds = [r["median_seconds"] for r in rows]
    return {"n": args.n, "queries": min(args.queries, args.n), "k": args.k, "results": rows,
            "monotone": bool(all(a <= b for a, b in zip(meds, meds[1:])))}


# -- parser ------------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--data", help="EMB1/CSV features; default is the synthetic OOD task")
    p.add_argument("--train-classes", default="auto-half")
    p.add_argument("--novel-scale", type=float, default=1.0)
    p.add_argument("--objective", choices=["margin", "multisim", "s2sd"], default="margin")
    p.add_argument("--base-objective", choices=["margin", "multisim"], default="margin")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--weight-decay", type=float, default=3e-4)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--gamma", type=float, default=5.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--targets", type=_int_list, default=[32, 64])
    p.add_argument("--feature-warmup", type=int, default=0, help="iterations before feature distillation")
    p.add_argument("--no-feature-distill", action="store_true")
    p.add_argument("--head-warmup", action="store_true")


def build_parser() -> _Parser:
    p = _Parser(prog="dmlkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dmlkit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="JSON file of flag values (flags on the command line win)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="write the JSON payload here instead of stdout")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = add("ingest", cmd_ingest, "convert CSV/EMB1 into EMB1 (or CSV, by --out suffix)")
    sp.add_argument("--input", required=True)
    sp.add_argument("--has-header", action="store_true")
    sp.add_argument("--normalize", action="store_true")
    # for ingest --out is the converted file and the summary goes to stdout
    sp.set_defaults(out_is_data=True)

    sp = add("eval", cmd_eval, "retrieval, clustering and structure metrics")
    sp.add_argument("--data", required=True)
    sp.add_argument("--recall", type=_int_list)
    sp.add_argument("--map", type=_int_list)
    sp.add_argument("--nmi", action="store_true")
    sp.add_argument("--density", action="store_true")
    sp.add_argument("--spectral", action="store_true")
    sp.add_argument("--skip-first", type=int, default=10)
    sp.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    sp.add_argument("--normalize", action="store_true")

    sp = add("fid", cmd_fid, "Frechet distance between two embedding sets")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)

    sp = add("build-splits", cmd_build_splits, "FID-increasing train/test split sequence")
    sp.add_argument("--data", required=True)
    sp.add_argument("--train-classes", default="auto-half", help="comma list, auto-half or first-half")
    sp.add_argument("--swap-size", type=int, default=1)
    sp.add_argument("--floor", type=float, default=0.5, help="retained sample fraction floor")
    sp.add_argument("--direction", type=int, choices=[1, -1], default=1)

    sp = add("ags", cmd_ags, "aggregated generalization score of a split manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scores", required=True, help="JSON list (or {'scores': [...]}) aligned with states")
    sp.add_argument("--score-scale", type=float, default=1.0, help="divide scores by this (100 for percents)")

    sp = add("train-toy", cmd_train_toy, "train an embedding head; history as JSON lines")
    _add_train_flags(sp)
    sp.add_argument("--history", help="JSON-lines file for the per-epoch history")

    sp = add("fewshot", cmd_fewshot, "train, then adapt the last layer on k shots per test class")
    _add_train_flags(sp)
    sp.add_argument("--shots", type=int, default=5)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--adapt-epochs", type=int, default=50)
    sp.add_argument("--adapt-lr", type=float, default=1e-3)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient validation")
    sp.add_argument("--objective", default="all")
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-5)

    sp = add("retrieval-bench", cmd_retrieval_bench, "exact k-NN wall time against dimension")
    sp.add_argument("--n", type=int, default=50_000)
    sp.add_argument("--dims", type=_int_list, default=[32, 64, 128, 256])
    sp.add_argument("--queries", type=int, default=2000)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--repeats", type=int, default=3)
    return p


def _apply_config(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = _load_json(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    known = {a.dest for a in sub._actions}                            # noqa: SLF001
    unknown = sorted(set(k.replace("-", "_") for k in cfg) - known - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items() if k != "command"})
    args = parser.parse_args(argv)   # flags given on the command line override the file
    for a in sub._actions:           # noqa: SLF001
        val = getattr(args, a.dest, None)
        if a.type is _int_list and isinstance(val, (str, int)):
            setattr(args, a.dest, _int_list(str(val)))
    return args


def _header(args) -> dict:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]
    return {"dmlkit": __version__, "command": args.command, "seed": args.seed, "config_hash": digest}


def _error(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": {"code": code, "message": message}}), file=sys.stderr)
    return status


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        return _error("usage", str(exc), 1)
    except argparse.ArgumentTypeError as exc:
        return _error("usage", str(exc), 1)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    print(json.dumps(_header(args)), file=sys.stderr)
    try:
        result = args.func(args)
    except UsageError as exc:
        return _error("usage", str(exc), 1)
    except DMLError as exc:
        return _error(exc.code, str(exc), 2)
    except json.JSONDecodeError as exc:
        return _error("invalid_json", str(exc), 2)
    except OSError as exc:
        return _error("io_error", str(exc), 2)
    except (ValueError, KeyError) as exc:
        return _error("invalid_input", str(exc), 2)
    text = json.dumps(result, default=_json_default)
    if args.out and not getattr(args, "out_is_data", False):
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
