"""Command-line entry point: prepare, synth, train, eval, sweep, analyze.

Every command writes ``manifest.json`` into its output directory with the
fully resolved config, sha256 hashes of its inputs, the toolkit version and
the seed. Manifests hold no timestamps, so equal manifests mean equal runs.

Config files are JSON objects with optional sections ``data``, ``synth``,
``model``, ``train``, ``maml``, ``forec``, ``eval`` and ``sweep``. Any key left
out takes its default, and the default is written to the manifest.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import rating_distribution, similarity_matrix, write_rating_tsv, write_similarity_tsv
from .data import (MarketDataset, SplitDataset, build_market, kcore_filter, leave_one_out_split,
                   load_ratings, make_users_disjoint, align_items, read_split, write_ratings, write_split)
from .eval import (MetricReport, evaluate, eval_negatives, format_table, user_group_report, write_per_user_tsv,
                   write_report_tsv)
from .models import ModelConfig, load_model, save_checkpoint
from .synthgen import SynthConfig, generate_pair, generate_records
from .train import (CROSS_MARKET, METHODS, ForecConfig, MamlConfig, TrainConfig, config_dict, run_method,
                    stage_hashes)

log = logging.getLogger("forec")

MODEL_KEYS = ("gmf_dim", "mlp_tower", "fusion_alpha", "init", "init_std")


class VocabularyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    target: str | None = None
    source: str | None = None
    method: str = "forec"
    seed: int = 0
    min_count: int = 5
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    forec: ForecConfig = field(default_factory=ForecConfig)
    k: int = 10
    n_groups: int = 5
    workers: int = 1
    sources: list[str] | None = None
    methods: list[str] = field(default_factory=lambda: ["nmf", "nmf++", "forec"])
    fix_source: str | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r} in sweep")
        bad = set(self.model) - set(MODEL_KEYS)
        if bad:
            raise ValueError(f"unknown model keys: {sorted(bad)}")

    def model_config(self, n_users: int, n_items: int) -> ModelConfig:
        kw = dict(self.model)
        if "mlp_tower" in kw:
            kw["mlp_tower"] = tuple(kw["mlp_tower"])
        return ModelConfig(n_users=n_users, n_items=n_items, k_freeze=self.forec.k_freeze,
                           head_widths=self.forec.head_widths, seed=self.seed, **kw)

    def resolved(self) -> dict:
        defaults = ModelConfig(n_users=1, n_items=1).to_dict()
        model = {k: defaults[k] for k in MODEL_KEYS}
        model.update({k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()})
        forec = config_dict(self.forec)
        return {
            "target": self.target, "source": self.source, "method": self.method, "seed": self.seed,
            "data": {"min_count": self.min_count},
            "synth": self.synth.to_dict(),
            "model": model,
            "train": config_dict(self.train),
            "maml": forec.pop("maml"),
            "forec": forec,
            "eval": {"k": self.k, "n_groups": self.n_groups},
            "sweep": {"workers": self.workers, "sources": self.sources, "methods": list(self.methods),
                      "fix_source": self.fix_source},
        }


def load_config(path: str | None, args: argparse.Namespace | None = None) -> ExperimentConfig:
    """Config file values, then command-line flags on top."""
    raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    known = {"target", "source", "method", "seed", "data", "synth", "model", "train", "maml", "forec", "eval", "sweep"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig(
        target=raw.get("target"), source=raw.get("source"), method=raw.get("method", "forec"),
        seed=int(raw.get("seed", 0)), min_count=int(raw.get("data", {}).get("min_count", 5)),
        synth=SynthConfig.from_dict(raw.get("synth", {})),
        model=dict(raw.get("model", {})),
        train=TrainConfig(**raw.get("train", {})),
        forec=ForecConfig(maml=MamlConfig(**raw.get("maml", {})), **raw.get("forec", {})),
        k=int(raw.get("eval", {}).get("k", 10)), n_groups=int(raw.get("eval", {}).get("n_groups", 5)),
    )
    sweep = raw.get("sweep", {})
    cfg.workers = int(sweep.get("workers", 1))
    cfg.sources = sweep.get("sources")
    cfg.methods = list(sweep.get("methods", cfg.methods))
    cfg.fix_source = sweep.get("fix_source")
    if args is not None:
        for name in ("target", "source", "method"):
            if getattr(args, name, None) is not None:
                setattr(cfg, name, getattr(args, name))
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "workers", None) is not None:
            cfg.workers = args.workers
        if getattr(args, "sources", None):
            cfg.sources = args.sources.split(",")
        if getattr(args, "methods", None):
            cfg.methods = args.methods.split(",")
        if getattr(args, "fix_source", None):
            cfg.fix_source = args.fix_source
        if getattr(args, "rho", None) is not None:
            cfg.synth = replace(cfg.synth, correlation=args.rho)
    # one seed drives everything
    cfg.train = replace(cfg.train, seed=cfg.seed)
    cfg.synth = replace(cfg.synth, seed=cfg.seed)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# manifests and prepared-data layout


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(directory) -> str:
    """Hash of every file under ``directory`` except manifests, by relative path."""
    d = Path(directory)
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(d)).encode())
            h.update(file_hash(p).encode())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, inputs: dict, extra: dict | None = None) -> dict:
    manifest = {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.resolved(),
                "inputs": inputs, **(extra or {})}
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def write_prepared(out: Path, markets: Sequence[MarketDataset]) -> dict[str, dict]:
    """Write items.tsv, users.tsv and one split directory per market."""
    out.mkdir(parents=True, exist_ok=True)
    n_users = sum(m.n_users for m in markets)
    (out / "items.tsv").write_text("".join(f"{i}\n" for i in markets[0].item_ids()), encoding="utf-8")
    with open(out / "users.tsv", "w", encoding="utf-8") as fh:
        for m in markets:
            for uid, idx in sorted(m.user_index.items(), key=lambda kv: kv[1]):
                fh.write(f"{idx}\t{m.market_code}\t{uid}\n")
    stats = {}
    for m in markets:
        split = leave_one_out_split(m, n_users)
        write_split(split, out / m.market_code)
        stats[m.market_code] = {"users": m.n_users, "items": int(len(m.catalog)),
                                "interactions": m.n_interactions, "train": split.n_train}
    return stats


def data_markets(data_dir: Path) -> list[str]:
    return sorted(p.name for p in data_dir.iterdir() if (p / "meta.tsv").is_file())


def load_split(data_dir: Path, code: str) -> SplitDataset:
    if not (data_dir / code / "meta.tsv").is_file():
        raise FileNotFoundError(f"no prepared market {code!r} under {data_dir}; have {data_markets(data_dir)}")
    return read_split(data_dir / code)


def data_inputs(data_dir: Path, codes: Sequence[str]) -> dict[str, str]:
    out = {"items.tsv": file_hash(data_dir / "items.tsv")}
    for c in codes:
        out[c] = tree_hash(data_dir / c)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(files: Sequence[str], out: Path, cfg: ExperimentConfig) -> dict:
    """load -> 5-core -> align -> split. Files are ``path`` or ``code=path``; code defaults to the file stem."""
    entries = []
    for spec in files:
        code, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).stem, "", spec)
        entries.append((code, Path(path)))
    codes = [c for c, _ in entries]
    if len(set(codes)) != len(codes):
        raise ValueError(f"duplicate market codes: {codes}")
    survivors, markets = {}, []
    for code, path in sorted(entries):
        recs = load_ratings(path, code)
        kept = kcore_filter(recs, cfg.min_count)
        if not kept:
            raise ValueError(f"market {code!r} is empty after {cfg.min_count}-core filtering")
        survivors[code] = {"raw_interactions": len(recs), "kept_interactions": len(kept),
                           "raw_users": len({r.user_id for r in recs}), "raw_items": len({r.item_id for r in recs})}
        markets.append(build_market(kept, code))
    _, markets = align_items(markets)
    markets = make_users_disjoint(markets)
    stats = write_prepared(out, markets)
    for code in stats:
        stats[code].update(survivors[code])
    inputs = {str(p): file_hash(p) for _, p in sorted(entries)}
    return write_manifest(out, "prepare", cfg, inputs,
                          {"survivors": stats, "outputs": data_inputs(out, sorted(stats))})


def cmd_synth(out: Path, cfg: ExperimentConfig) -> dict:
    """Generate a market pair: raw ratings under ratings/, prepared splits alongside."""
    sc = cfg.synth
    src_recs, tgt_recs = generate_records(sc)
    (out / "ratings").mkdir(parents=True, exist_ok=True)
    write_ratings(out / "ratings" / f"{sc.source_code}.tsv", src_recs)
    write_ratings(out / "ratings" / f"{sc.target_code}.tsv", tgt_recs)
    src, tgt = generate_pair(sc, cfg.min_count)
    stats = write_prepared(out, [src, tgt])
    return write_manifest(out, "synth", cfg, {}, {"survivors": stats,
                                                  "outputs": data_inputs(out, [sc.source_code, sc.target_code])})


def _write_history(path: Path, histories: dict[str, list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stage\tstep\tloss\n")
        for stage, rows in histories.items():
            for k, row in enumerate(rows):
                loss = row.get("loss", row.get("meta_loss"))
                fh.write(f"{stage}\t{k}\t{loss:.10g}\n")


def _train_run(data_dir: Path, out: Path, cfg: ExperimentConfig) -> dict:
    if cfg.target is None:
        raise ValueError("--target is required")
    if cfg.method in CROSS_MARKET and cfg.source is None:
        raise ValueError(f"method {cfg.method!r} needs --source")
    tgt = load_split(data_dir, cfg.target)
    src = load_split(data_dir, cfg.source) if cfg.method in CROSS_MARKET else None
    codes = [cfg.target] + ([cfg.source] if src is not None else [])
    inputs = data_inputs(data_dir, codes)
    model_cfg = cfg.model_config(tgt.n_users_total, tgt.n_items)
    try:
        result = run_method(cfg.method, src, tgt, model_cfg, cfg.train, cfg.forec)
    except Exception as exc:
        raise RuntimeError(f"{cfg.method} training failed: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, model in result.stages.items():
        hashes[name] = save_checkpoint(model.params, out / "stages" / name, model)
    for name, model in result.extra_models.items():
        hashes[f"extra/{name}"] = save_checkpoint(model.params, out / "extra" / name, model)
    final = save_checkpoint(result.model.params, out / "model", result.model)
    (out / "items.tsv").write_bytes((data_dir / "items.tsv").read_bytes())
    _write_history(out / "history.tsv", result.histories)
    return write_manifest(out, "train", cfg, inputs, {"checkpoints": hashes, "final": final,
                                                      "stage_hashes": stage_hashes(result)})


def cmd_train(data_dir: Path, out: Path, cfg: ExperimentConfig) -> dict:
    return _train_run(data_dir, out, cfg)


def _find_vocab(checkpoint: Path) -> Path | None:
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "items.tsv").is_file():
            return d / "items.tsv"
    return None


def check_vocabulary(model, split: SplitDataset, checkpoint: Path, data_dir: Path) -> None:
    """Refuse to score a split against a model trained on another vocabulary."""
    vocab = _find_vocab(checkpoint)
    if vocab is not None and (data_dir / "items.tsv").is_file():
        ours = vocab.read_text(encoding="utf-8").split()
        theirs = (data_dir / "items.tsv").read_text(encoding="utf-8").split()
        if ours != theirs:
            diff = [f"{k}:{a}!={b}" for k, (a, b) in enumerate(zip(ours, theirs)) if a != b][:5]
            extra = sorted(set(ours) ^ set(theirs))[:5]
            raise VocabularyError(f"item vocabulary mismatch ({len(ours)} vs {len(theirs)} items); "
                                  f"first differing ids {diff or extra}")
    cfg = model.config
    bad_items = sorted({i for u in split.users for i in (split.test[u], split.valid[u]) if i >= cfg.n_items})
    bad_users = sorted(u for u in split.users if u >= cfg.n_users)
    if bad_items or bad_users:
        raise VocabularyError(f"split indices outside the model: items {bad_items[:5]}, users {bad_users[:5]}")


def cmd_eval(checkpoint: Path, data_dir: Path, out: Path, cfg: ExperimentConfig, groups: bool = True,
             target_part: str = "test") -> MetricReport:
    if cfg.target is None:
        raise ValueError("--target is required")
    model = load_model(checkpoint)
    split = load_split(data_dir, cfg.target)
    check_vocabulary(model, split, checkpoint, data_dir)
    negs, skipped = eval_negatives(split, cfg.seed)
    report = evaluate(model, split, negs, cfg.k, target=target_part)
    report.excluded = sorted(set(report.excluded) | set(skipped))
    inputs = {**data_inputs(data_dir, [cfg.target]), "checkpoint.bin": file_hash(f"{checkpoint}.bin")}
    data_hash = hashlib.sha256("".join(f"{k}{v}" for k, v in sorted(inputs.items())).encode()).hexdigest()
    meta = {"seed": cfg.seed, "data_hash": data_hash, "target": cfg.target, "part": target_part}
    out.mkdir(parents=True, exist_ok=True)
    write_report_tsv(out / "metrics.tsv", [(cfg.target, report)], meta)
    write_per_user_tsv(out / "per_user.tsv", report)
    extra = {"metrics": {"hr": report.hr, "ndcg": report.ndcg, "n_users": report.n_users}}
    if groups:
        reps = user_group_report(model, split, negs, cfg.n_groups, cfg.k)
        write_report_tsv(out / "groups.tsv", [(f"group{r.meta['group']}", r) for r in reps], meta)
        extra["groups"] = [r.ndcg for r in reps]
    write_manifest(out, "eval", cfg, inputs, extra)
    return report


def _sweep_cell(args) -> dict:
    data_dir, out, cfg, method, source = args
    cell = replace(cfg, method=method, source=source)
    run_dir = out / "runs" / f"{method}__{source or 'none'}"
    row = {"method": method, "source": source, "status": "ok"}
    try:
        _train_run(data_dir, run_dir, cell)
        for part in ("valid", "test"):
            rep = cmd_eval(run_dir / "model", data_dir, run_dir / f"eval_{part}", cell, groups=False,
                           target_part=part)
            row[f"{part}_hr"], row[f"{part}_ndcg"] = rep.hr, rep.ndcg
    except Exception as exc:  # recorded, the sweep carries on
        row["status"] = f"failed: {exc}"
    return row


def summarize_sweep(rows: Sequence[dict], methods: Sequence[str], fix_source: str | None) -> list[dict]:
    """Best-Src (picked on validation nDCG, reported on test), Ave-Src and Fix-Src per method."""
    table = []
    for m in methods:
        ok = [r for r in rows if r["method"] == m and r["status"] == "ok"]
        entry = {"method": m, "best_source": None}
        if ok:
            best = max(ok, key=lambda r: (r["valid_ndcg"], -ok.index(r)))
            entry["best_source"] = best["source"]
            entry["best_hr"], entry["best_ndcg"] = best["test_hr"], best["test_ndcg"]
            entry["ave_hr"] = float(np.mean([r["test_hr"] for r in ok]))
            entry["ave_ndcg"] = float(np.mean([r["test_ndcg"] for r in ok]))
            fixed = [r for r in ok if r["source"] == fix_source or r["source"] is None]
            if fixed:
                entry["fix_hr"], entry["fix_ndcg"] = fixed[0]["test_hr"], fixed[0]["test_ndcg"]
        table.append(entry)
    return table


def write_sweep(out: Path, rows: Sequence[dict], table: Sequence[dict]) -> str:
    with open(out / "cells.tsv", "w", encoding="utf-8") as fh:
        fh.write("method\tsource\tvalid_hr\tvalid_ndcg\ttest_hr\ttest_ndcg\tstatus\n")
        for r in rows:
            vals = [f"{r[k]:.6f}" if k in r else "nan" for k in ("valid_hr", "valid_ndcg", "test_hr", "test_ndcg")]
            fh.write("\t".join([r["method"], str(r["source"] or "-"), *vals, r["status"]]) + "\n")
    cols = ["best_hr", "best_ndcg", "ave_hr", "ave_ndcg", "fix_hr", "fix_ndcg"]
    best = {c: max((e[c] for e in table if c in e), default=None) for c in cols}
    lines = ["method\tbest_source\t" + "\t".join(cols)]
    for e in table:
        cells = []
        for c in cols:
            if c not in e:
                cells.append("nan")
            else:
                # max marker, the plain-text stand-in for bold
                cells.append(f"{e[c]:.6f}" + ("*" if e[c] == best[c] else ""))
        lines.append("\t".join([e["method"], str(e["best_source"] or "-"), *cells]))
    text = "\n".join(lines) + "\n"
    (out / "table.tsv").write_text(text, encoding="utf-8")
    return text


def cmd_sweep(data_dir: Path, out: Path, cfg: ExperimentConfig) -> str:
    if cfg.target is None:
        raise ValueError("--target is required")
    sources = cfg.sources or [c for c in data_markets(data_dir) if c != cfg.target]
    if not sources:
        raise ValueError("sweep needs at least one source market")
    fix = cfg.fix_source or sources[0]
    grid = []
    for m in cfg.methods:
        for s in (sources if m in CROSS_MARKET else [None]):
            grid.append((data_dir, out, cfg, m, s))
    out.mkdir(parents=True, exist_ok=True)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_sweep_cell, grid))
    else:
        rows = [_sweep_cell(g) for g in grid]
    table = summarize_sweep(rows, cfg.methods, fix)
    text = write_sweep(out, rows, table)
    write_manifest(out, "sweep", cfg, data_inputs(data_dir, [cfg.target, *sources]),
                   {"sources": sources, "fix_source": fix, "table": table, "cells": rows})
    return text


def cmd_analyze(files: Sequence[str], out: Path, cfg: ExperimentConfig) -> dict:
    """Pairwise cosine similarity of item-count vectors and per-market rating histograms."""
    record_sets, inputs = {}, {}
    for spec in files:
        code, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).stem, "", spec)
        record_sets[code] = load_ratings(path, code)
        inputs[str(path)] = file_hash(path)
    summaries = {c: rating_distribution(r) for c, r in sorted(record_sets.items())}
    markets = [build_market(kcore_filter(r, cfg.min_count), c) for c, r in sorted(record_sets.items())]
    _, markets = align_items(markets)
    codes, mat = similarity_matrix(markets)
    out.mkdir(parents=True, exist_ok=True)
    write_similarity_tsv(out / "similarity.tsv", codes, mat)
    write_rating_tsv(out / "ratings.tsv", summaries)
    return write_manifest(out, "analyze", cfg, inputs, {"similarity": mat.tolist(), "markets": codes})


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forec", description="Cross-market recommendation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, type=Path)
        return sp

    sp = common(sub.add_parser("prepare", help="filter, align and split rating files"))
    sp.add_argument("ratings", nargs="+", help="rating files, as path or code=path")

    sp = common(sub.add_parser("synth", help="generate a synthetic market pair"))
    sp.add_argument("--rho", type=float, help="preference correlation between markets")

    for verb in ("train", "sweep"):
        sp = common(sub.add_parser(verb, help=f"{verb} on prepared data"))
        sp.add_argument("--data", required=True, type=Path)
        sp.add_argument("--target")
        sp.add_argument("--source")
        sp.add_argument("--method")
        if verb == "sweep":
            sp.add_argument("--methods", help="comma separated")
            sp.add_argument("--sources", help="comma separated; default every other market")
            sp.add_argument("--fix-source")
            sp.add_argument("--workers", type=int)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True, type=Path, help="checkpoint prefix, e.g. run/model")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--target")
    sp.add_argument("--source")
    sp.add_argument("--method")
    sp.add_argument("--part", choices=("test", "valid"), default="test")
    sp.add_argument("--no-groups", action="store_true")

    sp = common(sub.add_parser("analyze", help="market similarity and rating distributions"))
    sp.add_argument("ratings", nargs="+", help="rating files, as path or code=path")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args)
        if args.verb == "prepare":
            m = cmd_prepare(args.ratings, args.out, cfg)
            for code, s in m["survivors"].items():
                print(f"{code}\tusers={s['users']}\titems={s['items']}\tinteractions={s['interactions']}")
        elif args.verb == "synth":
            m = cmd_synth(args.out, cfg)
            for code, s in m["survivors"].items():
                print(f"{code}\tusers={s['users']}\titems={s['items']}\tinteractions={s['interactions']}")
        elif args.verb == "train":
            m = cmd_train(args.data, args.out, cfg)
            print(f"final checkpoint {args.out / 'model'} sha256={m['final'][:16]}")
        elif args.verb == "eval":
            rep = cmd_eval(args.checkpoint, args.data, args.out, cfg, groups=not args.no_groups,
                           target_part=args.part)
            print(format_table([(cfg.target, rep)]))
        elif args.verb == "sweep":
            print(cmd_sweep(args.data, args.out, cfg), end="")
        elif args.verb == "analyze":
            m = cmd_analyze(args.ratings, args.out, cfg)
            print("\t" + "\t".join(m["markets"]))
            for code, row in zip(m["markets"], m["similarity"]):
                print(code + "\t" + "\t".join(f"{x:.4f}" for x in row))
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"forec {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
