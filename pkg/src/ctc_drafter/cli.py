"""Command-line entry points: train-base, distill, train-draft, generate, bench, selfcheck."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import corpus as corpus_mod
from .bench import run_benchmark
from .config import ConfigError, RunConfig, load_config
from .decoding import generate, generate_autoregressive
from .distill import make_distilled_dataset, read_dataset, write_dataset
from .models import (CheckpointError, DraftModule, Vocab, load_base, load_draft, params_hash,
                     save_checkpoint)
from .selfcheck import run_selfcheck
from .training import train_base, train_draft

log = logging.getLogger("ctc_drafter")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["greedy", "sample"])
    p.add_argument("--k", type=int, help="top-k tokens kept per draft slot")
    p.add_argument("--beam", type=int, help="raw candidate paths kept per step")
    p.add_argument("--slots", type=int, help="draft slots L")
    p.add_argument("--loss", choices=["ctc", "ce"])
    p.add_argument("--collapse", choices=["on", "off"])
    p.add_argument("--out", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--parallel", type=int)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctc-drafter", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-corpus", help="write the memorizable toy corpus and a prompt file")
    _common(p)
    p.add_argument("--bytes", type=int, default=50_000)
    p.add_argument("--prompts-out", type=Path)

    p = sub.add_parser("train-base", help="train the base transformer on a UTF-8 text file")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)

    p = sub.add_parser("distill", help="teacher-argmax labels from a trained base model")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)

    p = sub.add_parser("train-draft", help="train the draft module on a distilled dataset")
    _common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--base", type=Path, required=True)

    p = sub.add_parser("generate", help="speculative (or vanilla) generation for one prompt")
    _common(p)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--draft", type=Path)
    p.add_argument("--prompt", required=True)

    p = sub.add_parser("bench", help="vanilla vs speculative benchmark over a prompt file")
    _common(p)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--draft", type=Path, required=True)
    p.add_argument("--prompts", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("selfcheck", help="run the oracle suites")
    _common(p)
    return parser


def _run_config(args) -> RunConfig:
    over = {k: getattr(args, k, None) for k in ("seed", "mode", "k", "beam", "slots", "loss", "collapse",
                                                 "epochs", "lr", "parallel", "max_new_tokens")}
    return load_config(args.config, over)


def _metrics_stream(out: Path | None):
    if out is None:
        return contextlib.nullcontext(None)
    return open(out.with_suffix(".log.jsonl"), "w", encoding="utf-8")


def _cmd(args) -> int:
    rc = _run_config(args)
    vocab = Vocab()
    if args.command == "make-corpus":
        text = corpus_mod.memorizable_corpus(args.bytes, seed=rc.seed)
        out = args.out or Path("corpus.txt")
        out.write_text(text, encoding="utf-8")
        if args.prompts_out:
            args.prompts_out.write_text("\n".join(corpus_mod.bench_prompts(seed=rc.seed)) + "\n", encoding="utf-8")
        return 0

    if args.command == "train-base":
        tokens = vocab.encode(args.corpus.read_text(encoding="utf-8"))
        tcfg = rc.train_config()
        tcfg.epochs = rc.base_epochs if args.epochs is None else args.epochs
        out = args.out or Path("base.ckpt")
        with _metrics_stream(out) as stream:
            model, hist = train_base(tokens, rc.model_config(), tcfg, metrics=stream)
        save_checkpoint(model.params, out, {"model": model.cfg.to_dict()})
        print(f"saved {out} (final epoch loss {hist[-1]:.4f})" if hist else f"saved {out} (untrained)")
        return 0

    if args.command == "distill":
        base = load_base(args.base)
        tokens = vocab.encode(args.corpus.read_text(encoding="utf-8"))
        ds = make_distilled_dataset([tokens], base)
        out = args.out or Path("distilled.bin")
        write_dataset(out, ds, base)
        print(f"wrote {len(ds)} examples to {out}")
        return 0

    if args.command == "train-draft":
        base = load_base(args.base)
        header, ds = read_dataset(args.dataset)
        if header.get("checkpoint") not in (None, params_hash(base.params)):
            log.warning("dataset was distilled from a different base checkpoint")
        # draft-specific knobs come from the run config; architecture from the base
        cfg = base.cfg.to_dict()
        cfg.update(draft_slots=rc.slots, label_horizon=rc.label_horizon, draft_head=rc.draft_head)
        base.cfg = type(base.cfg).from_dict(cfg)
        out = args.out or Path("draft.ckpt")
        with _metrics_stream(out) as stream:
            draft, hist = train_draft(ds, base, rc.train_config(), metrics=stream)
        save_checkpoint(draft.params, out, {"model": draft.cfg.to_dict(), "loss": rc.loss})
        print(f"saved {out} (final epoch loss {hist[-1]:.4f})" if hist else f"saved {out} (untrained)")
        return 0

    if args.command == "generate":
        base = load_base(args.base)
        prompt = vocab.encode(args.prompt)
        if args.draft is None:
            out, m = generate_autoregressive(base, prompt, rc.max_new_tokens, rc.decode_config())
        else:
            out, m = generate(base, load_draft(args.draft, base), prompt, rc.max_new_tokens, rc.decode_config())
        print(vocab.decode(out))
        print(f"N={m.N} M={m.M} beta={m.N / max(m.M, 1):.3f} T={m.T:.3f}s", file=sys.stderr)
        return 0

    if args.command == "bench":
        base = load_base(args.base)
        draft = load_draft(args.draft, base)
        prompts = [ln for ln in args.prompts.read_text(encoding="utf-8").splitlines() if ln.strip()]
        report = run_benchmark(prompts, base, draft, rc.decode_config(), rc.max_new_tokens,
                               repeats=args.repeats, parallel=rc.parallel)
        out = args.out or Path("bench")
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        print(f"beta={report.beta:.3f} gamma={report.gamma:.3f}x truncated={report.truncated} "
              f"mismatches={report.mismatches} -> {out}")
        return 0

    if args.command == "selfcheck":
        return 0 if run_selfcheck() else 2
    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _cmd(args)
    except (ConfigError, UsageError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
