"""Command-line entry point.

Every command works against one run directory (``--out``): data lives in
``<out>/data``, checkpoints, candidate and ranked files and reports sit at
the top level, and each command leaves a JSON manifest in
``<out>/manifests``.  Exit status is 0 on success, 1 for usage errors and
2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from . import pipeline
from .checkpoint import CheckpointError
from .data import CorpusFormatError
from .models import GENERATOR_KINDS, ModelConfig, TrainingDiverged, preset

log = logging.getLogger("ctvae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    desc = out.stdout.strip()
    if out.returncode != 0 or not desc:
        return f"v{__version__}"
    return desc if desc.startswith("v") else f"v{__version__}-g{desc}"


def resolve_config(args, kind: str | None = None) -> ModelConfig:
    overrides = {}
    if getattr(args, "config", None):
        try:
            overrides.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{args.config}: not valid JSON ({exc})") from exc
    overrides["seed"] = args.seed
    if kind is not None:
        overrides["kind"] = kind
    if getattr(args, "epochs", None):
        overrides["epochs"] = args.epochs
    unknown = set(overrides) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return preset(args.preset, **overrides)


def write_manifest(out: Path, name: str, args, config: ModelConfig | None, artifacts, started: float) -> Path:
    path = out / "manifests" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "config_hash": config.digest() if config is not None else None,
        "config": config.to_dict() if config is not None else None,
        "version": version_string(),
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": sorted(str(a) for a in artifacts),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args, out: Path):
    corpora = pipeline.write_dataset(out / "data", args.seed, args.n_posts, args.mean_responses)
    for name, corpus in corpora.items():
        print(f"{name}\t{len(corpus.posts)} posts\t{len(corpus.pairs)} pairs")
    return "gen-data", None, [out / "data" / f"{n}.tsv" for n in corpora]


def cmd_train(args, out: Path):
    corpora = pipeline.read_dataset(args.data or out / "data", args.min_freq)
    train = corpora["train"]
    if args.target == "generator":
        config = resolve_config(args, args.model_kind)
        vocab = pipeline.vocab_for(train, config)
        model, trainer = pipeline.train_generator(config, train, vocab)
        path = Path(args.checkpoint or out / f"{config.kind}.ckpt")
        pipeline.save_model(model, path, vocab, trainer)
        last = trainer.history[-1]
        print(f"{config.kind}\tnll/token {last.nll_per_token:.4f}\tkl {last.kl:.4f}\t-> {path}")
        name = f"train-{config.kind}"
    else:
        config = resolve_config(args, args.target)
        vocab = pipeline.vocab_for(train, config)
        if args.target == "tcd":
            model, history = pipeline.train_discriminator(config, train, vocab)
        else:
            model, history = pipeline.train_language_model(config, train, vocab)
        path = Path(args.checkpoint or out / f"{args.target}.ckpt")
        pipeline.save_model(model, path, vocab)
        print(f"{args.target}\tfinal loss {history[-1]:.4f}\t-> {path}")
        name = f"train-{args.target}"
    return name, config, [path]


def cmd_generate(args, out: Path):
    kind = args.model_kind
    model, vocab, _ = pipeline.load_model(args.checkpoint or out / f"{kind}.ckpt", expected_kind=kind)
    corpora = pipeline.read_dataset(args.data or out / "data")
    posts = pipeline.eval_posts(corpora[args.split], args.max_posts)
    records = pipeline.generate(model, vocab, posts, args.seed, args.n_z, args.beam_size)
    path = out / f"{kind}.candidates.jsonl"
    pipeline.write_jsonl(records, path)
    print(f"{kind}\t{len(records)} posts\t{sum(len(r['candidates']) for r in records)} candidates\t-> {path}")
    return f"generate-{kind}", model.config, [path]


def cmd_rerank(args, out: Path):
    kind = args.model_kind
    tcd, vocab, _ = pipeline.load_model(args.checkpoint or out / "tcd.ckpt", expected_kind="tcd")
    records = pipeline.read_jsonl(out / f"{kind}.candidates.jsonl")
    ranked = pipeline.rerank(records, tcd, vocab, args.lam, args.top_k)
    path = out / f"{kind}.ranked.jsonl"
    pipeline.write_jsonl(ranked, path)
    print(f"{kind}\t{len(ranked)} posts reranked\t-> {path}")
    return f"rerank-{kind}", tcd.config, [path]


def cmd_eval(args, out: Path):
    lm, vocab, _ = pipeline.load_model(args.checkpoint or out / "lm.ckpt", expected_kind="lm")
    train = pipeline.read_dataset(args.data or out / "data")["train"]
    kinds = args.models or [k for k in GENERATOR_KINDS if (out / f"{k}.ranked.jsonl").exists()]
    if not kinds:
        raise FileNotFoundError(f"no ranked outputs under {out}; run rerank first")
    ranked = {k: pipeline.read_jsonl(out / f"{k}.ranked.jsonl") for k in kinds}
    report = pipeline.evaluate(ranked, lm, vocab, train, args.top_k)
    (out / "report.tsv").write_text(report.to_table())
    (out / "report.jsonl").write_text(report.to_jsonl())
    print(report.to_table(), end="")
    return "eval", lm.config, [out / "report.tsv", out / "report.jsonl"]


def cmd_gradcheck(args, out: Path):
    errors = pipeline.toy_grad_checks(args.seed)
    failed = []
    for kind, err in errors.items():
        ok = err < args.threshold
        print(f"{kind}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(kind)
    path = out / "gradcheck.json"
    path.write_text(json.dumps({k: float(v) for k, v in errors.items()}, indent=2, sort_keys=True) + "\n")
    if failed:
        raise RuntimeError(f"gradient check above {args.threshold:g} for {', '.join(failed)}")
    return "gradcheck", None, [path]


def cmd_pipeline(args, out: Path):
    config = resolve_config(args)
    report = pipeline.run_all(out, config, args.seed, args.n_posts, args.kinds, args.max_posts)
    print(report.to_table(), end="")
    artifacts = [out / "report.tsv", out / "report.jsonl", out / "tcd.ckpt", out / "lm.ckpt"]
    artifacts += [out / f"{k}.ckpt" for k in args.kinds]
    return "pipeline", config, artifacts


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of ModelConfig overrides")
    common.add_argument("--preset", choices=("desk", "full"), default="desk",
                        help="base hyperparameters: CPU-sized 'desk' or full-size 'full'")
    common.add_argument("--data", help="corpus directory (default: <out>/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ctvae",
                     description="Train, decode, rerank and score conditional variational response generators.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic 1-to-n corpus")
    p.add_argument("--n-posts", type=int, default=500)
    p.add_argument("--mean-responses", type=float, default=19.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a generator, the TCD or the LM")
    p.add_argument("target", choices=("generator", "tcd", "lm"))
    p.add_argument("--model-kind", choices=GENERATOR_KINDS, default="ctvae")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--min-freq", type=int, default=0, help="drop pairs containing rarer tokens")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="decode candidate responses for test posts")
    p.add_argument("--model-kind", choices=GENERATOR_KINDS, default="ctvae")
    p.add_argument("--checkpoint", help="generator checkpoint (default: <out>/<kind>.ckpt)")
    p.add_argument("--split", choices=pipeline.SPLITS, default="test")
    p.add_argument("--max-posts", type=int)
    p.add_argument("--n-z", type=int)
    p.add_argument("--beam-size", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("rerank", parents=[common], help="rerank candidates with the TCD")
    p.add_argument("--model-kind", choices=GENERATOR_KINDS, default="ctvae")
    p.add_argument("--checkpoint", help="TCD checkpoint (default: <out>/tcd.ckpt)")
    p.add_argument("--lam", type=float, default=5.0)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", parents=[common], help="score ranked outputs")
    p.add_argument("--checkpoint", help="LM checkpoint (default: <out>/lm.ckpt)")
    p.add_argument("--models", nargs="+", choices=GENERATOR_KINDS)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pipeline", parents=[common], help="gen-data, train, generate, rerank and eval in one go")
    p.add_argument("--n-posts", type=int, default=500)
    p.add_argument("--max-posts", type=int, help="limit the number of test posts decoded")
    p.add_argument("--kinds", nargs="+", choices=GENERATOR_KINDS, default=list(GENERATOR_KINDS))
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:       # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        name, config, artifacts = args.func(args, out)
    except (CheckpointError, CorpusFormatError, TrainingDiverged, FileNotFoundError, ValueError, RuntimeError,
            KeyError) as exc:
        print(f"ctvae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    write_manifest(out, name, args, config, artifacts, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
