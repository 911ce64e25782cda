"""Command line: data generation, the three training stages, evaluation, ablations and reports.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import autograd as ag
from . import recipes as R
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import SPLIT_FILES, feats_file, generate_corpus, write_corpus
from .metrics import PerturbKind, json_table, markdown_table, report_row
from .nn import lora_param_count

log = logging.getLogger("ctxasr")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

EVAL_COLUMNS = ("model", "context-train", "context-eval", "perturb", "mask", "WER", "SUB", "INS", "DEL", "RareWER")
ABLATE_COLUMNS = ("model", "trainable", "WER", "SUB", "INS", "DEL", "RareWER", "data")
MASK_FLAGS = {"causal": "causal", "prefix": "prefix_full"}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CTXASR_THREADS", "1")))
    except ValueError:
        raise ConfigError("CTXASR_THREADS must be an integer") from None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _path(flag, cfg: ExperimentConfig, key: str, what: str, hint: str) -> Path:
    p = flag or cfg.paths.get(key)
    if not p:
        raise ConfigError(f"no {what} given: pass --{key} or set paths.{key} in the config")
    return R.require(p, what, hint)


def _data_hash(data_dir: Path) -> str:
    h = hashlib.sha256()
    for name in ["lexicon.json", *sorted(SPLIT_FILES.values()), *sorted(map(feats_file, SPLIT_FILES))]:
        f = data_dir / name
        if f.exists():
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _load_data(cfg: ExperimentConfig, data_dir: Path, audio=None):
    """Read a corpus and make sure it was generated with this config's corpus section and seed."""
    R.require(data_dir / "lexicon.json", "corpus", "ctxasr gen-data")
    meta_file = data_dir / "corpus_meta.json"
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        want = json.loads(json.dumps(asdict(cfg.corpus)))
        if meta.get("corpus") != want or meta.get("seed") != cfg.seed:
            raise ConfigError(f"corpus in {data_dir} was generated with a different seed or corpus config")
    return R.load_data(data_dir, audio=audio)


def _record(out: Path, cfg: ExperimentConfig, command: str, **extra):
    out.mkdir(parents=True, exist_ok=True)
    R.write_json(out / f"{command}.config.json", {"command": command, "config": cfg.to_json(), **extra})


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out)
    lex, splits = generate_corpus(cfg.corpus, cfg.seed, workers=_threads())
    write_corpus(out, lex, splits, cfg.corpus, cfg.seed)
    n_ctx = sum(s.context is not None for s in splits["train"])
    print(f"wrote {out}: train={len(splits['train'])} (context {n_ctx}) eval={len(splits['eval'])} "
          f"lm={len(splits['lm'])} data={_data_hash(out)}")


def cmd_pretrain_ctc(args):
    cfg = _config(args)
    data = _path(args.data, cfg, "data", "corpus", "ctxasr gen-data")
    _, splits = _load_data(cfg, data, audio=("train",))
    out = Path(args.out)
    _record(out, cfg, "pretrain-ctc", data=_data_hash(data))
    R.pretrain_ctc(cfg, splits, out, stop_at=args.stop_at)
    print(f"ctc encoder -> {out}")


def cmd_pretrain_lm(args):
    cfg = _config(args)
    data = _path(args.data, cfg, "data", "corpus", "ctxasr gen-data")
    _, splits = _load_data(cfg, data, audio=())
    out = Path(args.out)
    _record(out, cfg, "pretrain-lm", data=_data_hash(data))
    b = R.base_pretrain(cfg, splits, out, stop_at=args.stop_at)
    print(f"base LM -> {out} (held-out loss {b.meta['heldout_loss']:.4f})")


def _train_cfg(args, cfg: ExperimentConfig) -> ExperimentConfig:
    kw = {}
    if getattr(args, "context_train", None):
        kw["context_in_training"] = args.context_train == "on"
    if getattr(args, "mask", None):
        kw["mask_scheme"] = MASK_FLAGS[args.mask]
    if getattr(args, "variant", None) and isinstance(args.variant, str):
        kw["variant"] = args.variant.replace("-", "_")
    return cfg.with_(**kw) if kw else cfg


def _pretrained(args, cfg):
    ctc_dir = _path(args.ctc, cfg, "ctc", "CTC encoder checkpoint", "ctxasr pretrain-ctc")
    lm_dir = _path(args.lm, cfg, "lm", "frozen LM checkpoint", "ctxasr pretrain-lm")
    return R.load_bundle(ctc_dir), R.load_bundle(lm_dir)


def cmd_train(args):
    cfg = _train_cfg(args, _config(args))
    data = _path(args.data, cfg, "data", "corpus", "ctxasr gen-data")
    ctc, lm = _pretrained(args, cfg)
    _, splits = _load_data(cfg, data)
    out = Path(args.out)
    _record(out, cfg, "train", data=_data_hash(data))
    R.finetune(cfg, splits, ctc, lm, out, stop_at=args.stop_at)
    print(f"fine-tuned model -> {out}")


def _param_counts(bundle) -> dict:
    d = bundle.dec_cfg
    adapters = sum(bundle.params[n].data.size for n in bundle.params.names if ".lora_" in n)
    return {"trainable": bundle.params.count(trainable=True), "adapters": adapters,
            "adapter_formula": lora_param_count(d.num_layers, d.model_dim, d.lora.rank,
                                                len(d.lora.target_projections)),
            "layers": d.num_layers, "model_dim": d.model_dim, "rank": d.lora.rank}


def _eval_rows(bundle, data, ckpt: Path, kinds, context: bool, mask: str, seed: int, limit, batch: int):
    rows = []
    for kind in kinds:
        rep, _, _ = R.evaluate(bundle, data, context=context, perturb=kind, mask=mask, seed=seed,
                               batch_size=batch, limit=limit)
        row = report_row(rep, **{
            "model": bundle.variant.replace("_", "-"),
            "context-train": "yes" if bundle.meta.get("context_in_training", True) else "no",
            "context-eval": "yes" if context and kind is not PerturbKind.REMOVE_ALL else "no",
            "perturb": rep.label, "mask": mask,
        })
        rec = {"row": row, "report": rep.as_dict(), "seed": seed, "checkpoint": str(ckpt), "limit": limit,
               "params": _param_counts(bundle)}
        name = f"{row['context-eval']}-{rep.label}-{mask}.json"
        (ckpt / "eval").mkdir(exist_ok=True)
        R.write_json(ckpt / "eval" / name, rec)
        rows.append(row)
    return rows


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    bundle = R.load_bundle(ckpt, args.name)
    cfg = _config(args)
    data_dir = _path(args.data, cfg, "data", "corpus", "ctxasr gen-data")
    # training transcripts define the rare set; their audio is not needed here
    lex, splits = R.load_data(data_dir, audio=("eval",))
    data = R.eval_data(lex, splits)
    kinds = list(PerturbKind) if "all" in args.perturb else [PerturbKind.parse(k) for k in args.perturb]
    seed = cfg.seed if args.seed is None else args.seed
    rows = _eval_rows(bundle, data, ckpt, kinds, args.context == "on", MASK_FLAGS[args.mask], seed,
                      args.limit, cfg.eval_batch_size)
    sys.stdout.write(markdown_table(rows, EVAL_COLUMNS))
    if args.out:
        R.write_json(args.out, rows)


def cmd_ablate_decoder(args):
    base = _config(args)
    data_dir = _path(args.data, base, "data", "corpus", "ctxasr gen-data")
    ctc, lm = _pretrained(args, base)
    lex, splits = _load_data(base, data_dir)
    data = R.eval_data(lex, splits)
    digest = _data_hash(data_dir)
    rows = []
    for v in args.variant:
        cfg = base.with_(variant=v.replace("-", "_"))
        out = Path(args.out) / v
        _record(out, cfg, "ablate-decoder", data=digest)
        b = R.finetune(cfg, splits, ctc, lm, out)
        rep, _, _ = R.evaluate(b, data, context=cfg.context_in_eval, mask=cfg.mask_scheme, seed=cfg.seed,
                               batch_size=cfg.eval_batch_size, limit=args.limit)
        trainable = b.params.count(trainable=True)
        rows.append(report_row(rep, model=v, trainable=trainable, data=digest))
        log.info("%s: %d trainable parameters", v, trainable)
    md = markdown_table(rows, ABLATE_COLUMNS)
    out = Path(args.out)
    (out / "ablate-decoder.md").write_text(md)
    (out / "ablate-decoder.json").write_text(json_table(rows) + "\n")
    sys.stdout.write(md)


def _param_section(records) -> str:
    runs = {}
    for rec in records:
        if "params" in rec:
            runs.setdefault(Path(rec["checkpoint"]).name, rec["params"])
    lines = ["", "Adapter parameters (4 projections x L layers x 2 matrices x d x r):", ""]
    for name, p in sorted(runs.items()):
        lines.append(f"- {name}: L={p['layers']}, d={p['model_dim']}, r={p['rank']} gives "
                     f"{p['adapter_formula']:,}; counted {p['adapters']:,}; all trainable {p['trainable']:,}")
    lines.append(f"- at L=32, d=4096, r=32 the formula gives {lora_param_count(32, 4096, 32):,}")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    records = []
    for r in args.runs:
        d = R.require(r, "run directory", "ctxasr eval")
        records.extend(json.loads(f.read_text()) | {"_file": str(f)} for f in sorted(Path(d).glob("**/eval/*.json")))
    if not records:
        raise R.MissingArtifact("no evaluation results under the given runs (run `ctxasr eval` first)")
    rows, seen, conflicts = [], {}, []
    for rec in records:
        row = rec["row"]
        key = tuple(row.get(c) for c in EVAL_COLUMNS[:5]) + (rec.get("checkpoint"),)
        if key in seen and seen[key] != row:
            conflicts.append(rec["_file"])
        seen[key] = row
        rows.append(dict(row, run=Path(rec["checkpoint"]).name, seed=rec.get("seed")))
    seeds = {r["seed"] for r in rows}
    if len(seeds) > 1:
        conflicts.append(f"runs mix seeds {sorted(seeds)}")
    cols = ("run",) + EVAL_COLUMNS
    md = "# Results\n\n" + markdown_table(rows, cols) + _param_section(records)
    if conflicts:
        md += "\nConflicts:\n" + "".join(f"- {c}\n" for c in conflicts)
        for c in conflicts:
            log.warning("conflict: %s", c)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(md)
    out.with_suffix(".json").write_text(json.dumps({"rows": rows, "conflicts": conflicts}, indent=1,
                                                   sort_keys=True) + "\n")
    sys.stdout.write(md)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxasr", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True, data=True):
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if data:
            p.add_argument("--data", help="corpus directory written by gen-data")
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic corpus")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    for name, fn in (("pretrain-ctc", cmd_pretrain_ctc), ("pretrain-lm", cmd_pretrain_lm)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--stop-at", type=int, help="stop after this step, leaving a resumable state")
        p.set_defaults(func=fn)

    p = sub.add_parser("train", help="joint fine-tuning of encoder and adapters")
    common(p)
    p.add_argument("--ctc")
    p.add_argument("--lm")
    p.add_argument("--context-train", choices=("on", "off"))
    p.add_argument("--mask", choices=tuple(MASK_FLAGS))
    p.add_argument("--variant", choices=("decoder-only", "encoder-decoder"))
    p.add_argument("--stop-at", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="transcribe the eval split under one or more context conditions")
    common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--name", default="bundle", help="checkpoint name inside the directory")
    p.add_argument("--context", choices=("on", "off"), default="on")
    p.add_argument("--perturb", nargs="+", default=["none"],
                   choices=[k.value for k in PerturbKind] + ["all"])
    p.add_argument("--mask", choices=tuple(MASK_FLAGS), default="causal")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="also write the rows as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-decoder", help="fine-tune and evaluate both decoder variants")
    common(p)
    p.add_argument("--ctc")
    p.add_argument("--lm")
    p.add_argument("--variant", nargs="+", choices=("decoder-only", "encoder-decoder"),
                   default=["decoder-only", "encoder-decoder"])
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_ablate_decoder)

    p = sub.add_parser("report", help="merge eval results into one table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except R.MissingArtifact as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ag.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
