"""Command-line entry point: gen-data, train, eval, score, dump-attention.

Output is one JSON object per line unless ``--human`` is given. Failures print
a single ``{"error": ...}`` line to stderr and exit nonzero.
"""
from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
if os.environ.get("DLCT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DLCT_THREADS"])

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import COLORS, DatasetError, generate_corpus, read_dataset, region_colors, tokenize, write_dataset
from .geometry import GridLayout
from .metrics import bleu, build_corpus_stats, corpus_bleu, corpus_cider_d
from .model import ConfigError, ModelConfig
from .numerics import FormatError, save_tensor
from .training import Trainer, TrainConfig, TrainingError, beam_search, evaluate

FEATURE_ABLATIONS = {"no-lcca": "no_lcca", "cbg": "cbg", "grid-only": "grid_only",
                     "region-only": "region_only", "concat-baseline": "concat"}
CRA_ABLATIONS = {"no-cra": "none", "pe-only": "pe_only"}
ABLATIONS = tuple(FEATURE_ABLATIONS) + tuple(CRA_ABLATIONS)


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    data: str | None = None
    out: str | None = None
    seed: int = 0
    preset: str = "desk"
    phase: str = "both"
    ablate: list = field(default_factory=list)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        unknown = [a for a in self.ablate if a not in ABLATIONS]
        if unknown:
            raise UsageError(f"unknown ablation {unknown[0]!r}; choose from {', '.join(ABLATIONS)}")
        feats = sorted({a for a in self.ablate if a in FEATURE_ABLATIONS})
        cras = sorted({a for a in self.ablate if a in CRA_ABLATIONS})
        if len(feats) > 1:
            raise UsageError(f"ablations {' and '.join(feats)} are mutually exclusive")
        if len(cras) > 1:
            raise UsageError(f"ablations {' and '.join(cras)} are mutually exclusive")
        if self.preset not in ("desk", "reference"):
            raise UsageError(f"unknown preset {self.preset!r}")
        if self.phase not in ("xe", "scst", "both"):
            raise UsageError(f"unknown phase {self.phase!r}")
        return self

    def model_config(self, **data_dims) -> ModelConfig:
        kw = dict(data_dims)
        for a in self.ablate:
            if a in FEATURE_ABLATIONS:
                kw["variant"] = FEATURE_ABLATIONS[a]
            else:
                kw["cra"] = CRA_ABLATIONS[a]
        kw.update(self.model)
        factory = ModelConfig.desk if self.preset == "desk" else ModelConfig.reference
        return factory(**kw)

    def train_config(self) -> TrainConfig:
        factory = TrainConfig.desk if self.preset == "desk" else TrainConfig.reference
        return factory(**{"seed": self.seed, **self.train})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - names
        if extra:
            raise UsageError(f"config file {path}: unknown field {sorted(extra)[0]!r}")
        return cls(**raw)


# -- output ----------------------------------------------------------------

def _emit(args, record: dict) -> None:
    if args.human:
        print("  ".join(f"{k}={_fmt(v)}" for k, v in record.items()))
    else:
        print(json.dumps(record, sort_keys=True))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.out is None:
        raise UsageError("gen-data needs --out")
    ds = generate_corpus(args.n, args.seed, GridLayout.parse(args.grid), args.d_region, args.d_grid)
    write_dataset(ds, args.out)
    m = ds.manifest()
    _emit(args, {"command": "gen-data", "out": str(args.out), "counts": m["counts"], "grid": m["grid"],
                 "vocab_size": len(m["vocab"]), "d_region": m["d_region"], "d_grid": m["d_grid"]})
    return 0


def _run_config(args) -> RunConfig:
    if args.config and Path(args.config).suffix == ".json":
        rc = RunConfig.from_file(args.config)
    else:
        rc = RunConfig(preset=args.config or "desk")
    rc.command = "train"
    # explicit flags override the file
    if args.data is not None:
        rc.data = args.data
    if args.out is not None:
        rc.out = args.out
    if args.seed is not None:
        rc.seed = args.seed
    if args.phase is not None:
        rc.phase = args.phase
    if args.ablate:
        rc.ablate = list(args.ablate)
    if args.xe_epochs is not None:
        rc.train["xe_epochs"] = args.xe_epochs
    if args.scst_epochs is not None:
        rc.train["scst_epochs"] = args.scst_epochs
    return rc.validate()


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        rc = RunConfig.from_file(run_dir / "run.json").validate()
        ds = read_dataset(rc.data)
        trainer = Trainer.resume(ds, run_dir, rc.phase)
    else:
        rc = _run_config(args)
        if rc.data is None or rc.out is None:
            raise UsageError("train needs --data and --out (or a config file providing them)")
        ds = read_dataset(rc.data)
        mcfg = rc.model_config(vocab_size=len(ds.vocab), d_region=ds.d_region, d_grid=ds.d_grid,
                               grid_rows=ds.layout.rows, grid_cols=ds.layout.cols)
        out = Path(rc.out)
        if (out / "metrics.jsonl").exists():
            raise UsageError(f"{out} already holds a run; use --resume {out} or a fresh --out")
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True) + "\n")
        trainer = Trainer(ds, mcfg, rc.train_config(), out, rc.phase)
    before = len(trainer.history)
    trainer.run()
    for rec in trainer.history[before:]:
        _emit(args, rec)
    return 0


def _checkpoint_dir(path) -> Path:
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    latest = path / "checkpoints" / "LATEST"
    if latest.exists():
        return path / "checkpoints" / latest.read_text().strip()
    raise UsageError(f"{path} is neither a checkpoint nor a run directory")


def _load(args):
    cdir = _checkpoint_dir(args.ckpt)
    manifest = ckpt.read_manifest(cdir)
    ds = read_dataset(args.data)
    if manifest.get("data_hash") not in (None, ds.fingerprint()):
        raise UsageError(f"checkpoint {cdir} was trained on a different dataset "
                         f"(hash {manifest['data_hash']} != {ds.fingerprint()})")
    if args.split not in ds.splits:
        raise UsageError(f"dataset has no split {args.split!r}")
    return ckpt.load_model(cdir), ds


def cmd_eval(args) -> int:
    model, ds = _load(args)
    examples = ds.splits[args.split]
    if args.limit:
        examples = examples[: args.limit]
    if not examples:
        raise UsageError(f"split {args.split!r} is empty")
    res = evaluate(model, examples, args.beam, build_corpus_stats([ex.captions for ex in examples]))
    record = {"command": "eval", "split": args.split, "beam": args.beam, "n": len(examples),
              "bleu1": res["bleu1"], "bleu4": res["bleu4"], "cider_d": res["cider_d"], "log_prob": res["log_prob"]}
    _emit(args, record)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.jsonl", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(out / f"captions-{args.split}.txt", "w") as fh:
            for cap in res["captions"]:
                fh.write(" ".join(ds.vocab.decode(cap)) + "\n")
    return 0


def _read_lines(path) -> list[str]:
    with open(path) as fh:
        return [line.rstrip("\n") for line in fh]


def cmd_score(args) -> int:
    """Line-aligned candidates and references (tab-separated alternatives per line)."""
    cand_lines, ref_lines = _read_lines(args.candidates), _read_lines(args.references)
    if len(cand_lines) != len(ref_lines):
        raise UsageError(f"{args.candidates} has {len(cand_lines)} lines but {args.references} "
                         f"has {len(ref_lines)}")
    if not cand_lines:
        raise UsageError(f"{args.candidates}: no candidates")
    cands = [tokenize(c) for c in cand_lines]
    refs = []
    for lineno, line in enumerate(ref_lines, 1):
        alts = [tokenize(r) for r in line.split("\t") if r.strip()]
        if not alts:
            raise UsageError(f"{args.references}:{lineno}: no references")
        refs.append(alts)
    cider, per_item = corpus_cider_d(cands, refs)
    for i, (c, r, score) in enumerate(zip(cands, refs, per_item)):
        _emit(args, {"line": i + 1, "cider_d": score, "bleu4": bleu(c, r, 4)})
    bleus = corpus_bleu(cands, refs, 4)
    _emit(args, {"command": "score", "n": len(cands), "bleu1": bleus[0], "bleu4": bleus[3], "cider_d": cider})
    return 0


def attention_dump(model, bundle, vocab, beam: int = 5) -> dict:
    """Decode one image and collect its attention maps.

    Returns a dict of arrays plus ``words`` and ``top3``. Decoder rows are
    indexed by generated word; ``dec_regions`` and ``dec_grids`` are the
    head-averaged last-layer cross-attention split at the region/grid boundary.
    """
    model.eval()
    seq = beam_search(model, bundle, beam).sequences[0]
    tokens = np.array([[1] + list(seq[:-1] if seq and seq[-1] == 2 else seq)])
    tokens = tokens[:, : model.cfg.max_len]
    model.record, model.records = True, []
    try:
        mem, mask = model.encode_batch(model.batch([bundle]))
        model.decode(mem, mask, tokens)
    finally:
        model.record = False
    recs, model.records = model.records, []
    n_r = bundle.n_regions if model.cfg.uses_regions else 0
    dec = [w for (l, name, w) in recs if name == "dec_cross"]
    last = dec[-1][0].mean(axis=0)                      # [T, M]
    arrays = {"dec_cross": last, "dec_regions": last[:, :n_r], "dec_grids": last[:, n_r:]}
    for l, name, w in recs:
        if name.startswith("lcca"):
            arrays[f"{name.replace('->', '2')}.l{l}"] = w[0]   # [heads, N_src, N_tgt]
    words = vocab.decode(seq) + (["<eos>"] if seq and seq[-1] == 2 else [])
    top3 = []
    for t, word in enumerate(words):
        order = np.argsort(-arrays["dec_regions"][t], kind="stable")[:3] if n_r else []
        top3.append({"word": word, "regions": [int(i) for i in order],
                     "weights": [float(arrays["dec_regions"][t, i]) for i in order]})
    return {"arrays": arrays, "words": words, "top3": top3}


def cmd_dump_attention(args) -> int:
    model, ds = _load(args)
    examples = ds.splits[args.split]
    if not 0 <= args.example < len(examples):
        raise UsageError(f"example id {args.example} out of range for split {args.split!r} "
                         f"(0..{len(examples) - 1})")
    if args.out is None:
        raise UsageError("dump-attention needs --out")
    dump = attention_dump(model, examples[args.example].bundle, ds.vocab, args.beam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = {"example": args.example, "split": args.split, "words": dump["words"], "tensors": {}}
    for name, arr in dump["arrays"].items():
        save_tensor(out / f"{name}.dlt", arr)
        index["tensors"][name] = {"file": f"{name}.dlt", "shape": list(arr.shape)}
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    lines = []
    for item in dump["top3"]:
        regs = ", ".join(f"r{r}:{w:.3f}" for r, w in zip(item["regions"], item["weights"]))
        lines.append(f"{item['word']}\t{regs}")
    (out / "top3.txt").write_text("\n".join(lines) + "\n")
    _emit(args, {"command": "dump-attention", "out": str(out), "caption": " ".join(dump["words"]),
                 "tensors": len(index["tensors"])})
    return 0


def color_alignment(model, examples, vocab, beam: int = 5) -> tuple[int, int]:
    """(hits, trials): colour words whose top region is an object of that colour."""
    hits = trials = 0
    for ex in examples:
        colors = region_colors(ex.bundle)
        dump = attention_dump(model, ex.bundle, vocab, beam)
        for item in dump["top3"]:
            if item["word"] in COLORS and item["regions"]:
                trials += 1
                hits += colors[item["regions"][0]] == item["word"]
    return hits, trials


# -- parser ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # argparse prints usage plus a message and exits; keep failures to one structured line
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="preset name (desk, reference) or a run-config JSON file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--human", action="store_true", help="pretty output instead of JSON lines")

    # shared flags live on each subcommand so subparser defaults cannot mask them
    p = _Parser(prog="dlct", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--grid", default="4x4")
    g.add_argument("--d-region", type=int, default=32)
    g.add_argument("--d-grid", type=int, default=16)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a captioner")
    t.add_argument("--data")
    t.add_argument("--phase", choices=("xe", "scst", "both"), default=None)
    t.add_argument("--ablate", action="append", choices=ABLATIONS, default=[],
                   help="repeatable; at most one feature and one CRA ablation")
    t.add_argument("--xe-epochs", type=int, default=None)
    t.add_argument("--scst-epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="continue the run in this directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="beam-search decode and score a split")
    e.add_argument("--ckpt", required=True, help="checkpoint or run directory")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--limit", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", parents=[common], help="BLEU/CIDEr-D of candidate captions")
    s.add_argument("candidates", help="one candidate caption per line")
    s.add_argument("references", help="line-aligned references, alternatives separated by tabs")
    s.set_defaults(func=cmd_score)

    d = sub.add_parser("dump-attention", parents=[common], help="write attention maps for one example")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--example", type=int, required=True)
    d.add_argument("--beam", type=int, default=5)
    d.set_defaults(func=cmd_dump_attention)
    return p


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data" and args.seed is None:
            args.seed = 0
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _error("usage", str(exc), 2)
    except (DatasetError, FormatError, ckpt.CheckpointError) as exc:
        return _error("data", str(exc), 3)
    except TrainingError as exc:
        return _error("training", str(exc), 4)
    except OSError as exc:
        return _error("io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc), 5)
    except Exception as exc:  # last resort: still one line, never a traceback
        return _error("internal", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
