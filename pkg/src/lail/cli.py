"""``lail`` command line: gen-data, train-lm, train-asr, decode, eval, ablate, report, config.

Stages talk through files: dataset -> LM checkpoint -> ASR run directory ->
eval records -> report tables.  Exit codes: 0 ok, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import checkpoint
from . import config as config_mod
from .data import SPLITS, generate_dataset, load_dataset, save_dataset
from .lm import CausalLM, Tokenizer, lm_pretrain, perplexity
from .nn import RngState
from .report import emit_report
from .train import (EVAL_SPLITS, ASRModel, TrainingDiverged, default_grid, evaluate_wer, metrics_jsonl,
                    run_ablation, train_asr, transcribe)

log = logging.getLogger("lail")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- artifacts -----------------------------------------------------------------

def _out(args) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def lm_checkpoint_name(tier: str) -> str:
    return f"lm_{tier}.ckpt"


def save_lm(path: Path, lm: CausalLM, cfg: config_mod.ExperimentConfig) -> None:
    checkpoint.save(path, lm.state_dict())
    _write(path.with_suffix(".cfg"), config_mod.dumps(cfg))


def load_lm(path, vocab_size: int) -> CausalLM:
    path = Path(path)
    cfg = config_mod.load(path.with_suffix(".cfg"))
    lm = CausalLM(cfg.lm.model_config(), vocab_size, RngState(0).child("lm"))
    lm.load_state_dict(checkpoint.load(path))
    lm.freeze()
    return lm


def load_run(run_dir, tok: Tokenizer) -> tuple[ASRModel, config_mod.ExperimentConfig]:
    run_dir = Path(run_dir)
    cfg = config_mod.load(run_dir / "config.cfg")
    state = checkpoint.load(run_dir / "asr.ckpt")
    proj = [v for k, v in state.items() if k.startswith("connectors.") and k.endswith("proj.weight")]
    d_llm = proj[0].shape[1] if proj else 1
    model = ASRModel(cfg.encoder, tok.num_chars, d_llm, cfg.lail, RngState(cfg.train.seed).child("model"))
    model.load_state_dict(state)
    return model, cfg


def pretrain_lm(data, tok: Tokenizer, cfg: config_mod.ExperimentConfig, curve: list | None = None) -> CausalLM:
    sentences = [tok.tokenize(s) for s in data.lm_text]
    return lm_pretrain(sentences, cfg.lm.model_config(), tok.vocab_size, RngState(cfg.train.seed),
                       cfg.lm.pretrain_config(), curve)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    seed = cfg.train.seed
    ds = generate_dataset(seed, cfg.data)
    out = _out(args) / "dataset.bin"
    save_dataset(out, ds)
    counts = {s: len(ds.split(s)) for s in SPLITS if s != "lm"}
    print(f"wrote {out} ({counts}, lm sentences={len(ds.lm_text)}, sha256={ds.digest()[:16]})")
    return 0


def cmd_train_lm(args) -> int:
    cfg = _config(args)
    if args.tier:
        cfg = replace(cfg, lm=replace(cfg.lm, tier=args.tier))
    data = load_dataset(args.data)
    tok = Tokenizer(data.alphabet())
    curve: list = []
    lm = pretrain_lm(data, tok, cfg, curve)
    dev = [tok.tokenize(u.text) for u in data.split("dev")]
    ppl = perplexity(lm, dev)
    out = _out(args) / lm_checkpoint_name(cfg.lm.tier)
    save_lm(out, lm, cfg)
    recs = [{"kind": "lm_step", "step": s, "nll": v} for s, v in curve]
    recs.append({"kind": "lm_eval", "split": "dev", "perplexity": ppl, "params": lm.num_parameters()})
    _write(out.with_suffix(".metrics.jsonl"), metrics_jsonl(recs))
    print(f"wrote {out} (tier={cfg.lm.tier}, params={lm.num_parameters()}, dev perplexity={ppl:.3f})")
    return 0


def cmd_train_asr(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    tok = Tokenizer(data.alphabet())
    lm = None
    if cfg.lail.alpha > 0 and cfg.lail.tap_layers:
        if not args.lm:
            raise UsageError("train-asr: lail.alpha > 0 needs --lm CHECKPOINT")
        lm = load_lm(args.lm, tok.vocab_size)
    out = _out(args)
    _write(out / "config.cfg", config_mod.dumps(cfg))
    metrics: list = []
    try:
        model = train_asr(cfg.train, data, tok, lm, cfg.encoder, metrics)
    except TrainingDiverged as e:
        checkpoint.save(out / "asr.last_good.ckpt", e.last_good)
        _write(out / "metrics.jsonl", metrics_jsonl(metrics))
        raise
    checkpoint.save(out / "asr.ckpt", model.state_dict())
    _write(out / "metrics.jsonl", metrics_jsonl(metrics))
    last = [m for m in metrics if m["kind"] == "epoch"][-1]
    print(f"wrote {out / 'asr.ckpt'} (epochs={cfg.train.epochs}, final mean ctc={last['mean_ctc']:.4f}, "
          f"skipped={last['skipped']})")
    return 0


def _decode_kw(args, tok):
    if args.lm_weight > 0:
        if not args.lm:
            raise UsageError("--lm-weight > 0 needs --lm CHECKPOINT")
        if args.mode != "beam":
            raise UsageError("--lm-weight needs --mode beam")
        return {"beam": args.beam, "lm": load_lm(args.lm, tok.vocab_size), "lm_weight": args.lm_weight}
    return {"beam": args.beam} if args.mode == "beam" else {}


def cmd_decode(args) -> int:
    data = load_dataset(args.data)
    tok = Tokenizer(data.alphabet())
    model, _ = load_run(args.run, tok)
    utts = data.split(args.split)
    hyps = transcribe(model, utts, tok, args.mode, **_decode_kw(args, tok))
    text = "".join(h + "\n" for h in hyps)
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    tok = Tokenizer(data.alphabet())
    model, _ = load_run(args.run, tok)
    kw = _decode_kw(args, tok)
    recs = []
    for split in args.splits.split(","):
        rep = evaluate_wer(model, data, split, tok, args.mode, **kw)
        recs.append({"kind": "eval", **asdict(rep)})
        print(f"{split:12s} WER {rep.wer:6.2f}%  S={rep.substitutions} I={rep.insertions} D={rep.deletions} "
              f"N={rep.ref_words} ({rep.decode_mode})")
    out = Path(args.out_dir) if args.out_dir else Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "eval.jsonl", metrics_jsonl(recs))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = load_dataset(args.data)
    tok = Tokenizer(data.alphabet())
    seeds = tuple(int(s) for s in args.seeds.split(","))
    grid = default_grid(cfg.train, seeds, cfg.encoder.num_layers)
    groups = set(args.groups.split(","))
    grid.cells = [c for c in grid.cells if c.group in groups]
    out = _out(args)
    lm_dir = Path(args.lm_dir) if args.lm_dir else out
    lms = {}
    for tier in sorted({c.lm_tier for c in grid.cells if c.lm_tier and c.train.alpha > 0}):
        path = lm_dir / lm_checkpoint_name(tier)
        if path.exists():
            lms[tier] = load_lm(path, tok.vocab_size)
        else:
            tier_cfg = replace(cfg, lm=replace(cfg.lm, tier=tier))
            lms[tier] = pretrain_lm(data, tok, tier_cfg)
            save_lm(out / lm_checkpoint_name(tier), lms[tier], tier_cfg)
    results = run_ablation(grid, data, tok, lms, cfg.encoder, jobs=args.jobs)
    by_name = {c.name: c for c in grid.cells}
    recs = []
    for r in results:
        c = by_name[r.cell]
        recs.append({"kind": "cell", "cell": r.cell, "group": r.group, "seed": r.seed, "wer": r.wer,
                     "error": r.error, "taps": list(c.train.lail.tap_layers), "alpha": c.train.alpha,
                     "lm_tier": c.lm_tier, "desk_depth": cfg.encoder.num_layers})
    _write(out / "ablation.jsonl", metrics_jsonl(recs))
    failed = sum(r.error is not None for r in results)
    print(f"wrote {out / 'ablation.jsonl'} ({len(results)} runs, {failed} failed)")
    return 0


def cmd_report(args) -> int:
    emit_report(args.runs, args.out_dir)
    out = Path(args.out_dir) if args.out_dir else Path(args.runs)
    sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    return 0


def cmd_config(args) -> int:
    if args.dump_defaults:
        sys.stdout.write(config_mod.dump_defaults())
    else:
        sys.stdout.write(config_mod.dumps(_config(args)))
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides train.seed)")
    common.add_argument("--config", default=None, help="experiment config file")
    common.add_argument("--out-dir", default=None, help="directory for output artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="lail", description="CTC speech recognition with a language-aware intermediate loss.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def decoding(sp):
        sp.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
        sp.add_argument("--beam", type=int, default=8)
        sp.add_argument("--lm", default=None, help="LM checkpoint for shallow fusion")
        sp.add_argument("--lm-weight", type=float, default=0.0)

    add("gen-data", cmd_gen_data, "render the synthetic dataset")
    sp = add("train-lm", cmd_train_lm, "pretrain and freeze the character LM")
    sp.add_argument("--data", required=True)
    sp.add_argument("--tier", choices=("small", "medium", "large"), default=None)
    sp = add("train-asr", cmd_train_asr, "train encoder + CTC (+ LAIL when alpha > 0)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lm", default=None, help="frozen LM checkpoint")
    sp = add("decode", cmd_decode, "print one hypothesis per utterance")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True, help="train-asr output directory")
    sp.add_argument("--split", default="test_clean")
    sp.add_argument("--output", default=None)
    decoding(sp)
    sp = add("eval", cmd_eval, "word error rate on one or more splits")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--splits", default=",".join(EVAL_SPLITS))
    decoding(sp)
    sp = add("ablate", cmd_ablate, "placement / alpha / LM-size grid")
    sp.add_argument("--data", required=True)
    sp.add_argument("--lm-dir", default=None, help="directory with lm_<tier>.ckpt files")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--groups", default="placement,alpha,lm_size")
    sp.add_argument("--jobs", type=int, default=1)
    sp = add("report", cmd_report, "tables from run directories")
    sp.add_argument("--runs", required=True)
    sp = add("config", cmd_config, "print the resolved or default config")
    sp.add_argument("--dump-defaults", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command not in ("eval", "report", "config", "decode") and args.out_dir is None:
            args.out_dir = "."
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        return args.fn(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:
        print(f"{_origin(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def _origin(e: BaseException) -> str:
    """Innermost package module on the traceback, for module-qualified messages."""
    mod, tb = "lail", e.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("lail"):
            mod = name
        tb = tb.tb_next
    return mod


if __name__ == "__main__":
    sys.exit(main())
