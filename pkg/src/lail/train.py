"""Joint CTC + LAIL training, WER evaluation and the ablation runner."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .connector import LAILConfig, build_connectors, lail_loss, total_loss
from .ctc import ctc_loss_batch, greedy_decode, prefix_beam_search
from .data import Dataset, Utterance
from .encoder import Encoder, EncoderConfig
from .lm import CausalLM, LMScorer, Tokenizer
from .nn import Linear, Module, RngState, assign_names
from .optim import AdamW, clip_grad_norm, warmup_lr
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 12
    warmup_steps: int = 30
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    freeze_frontend_fraction: float = 0.2
    seed: int = 0
    lail: LAILConfig = field(default_factory=LAILConfig)

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0.0 <= self.freeze_frontend_fraction <= 1.0:
            raise ValueError("freeze_frontend_fraction must lie in [0, 1]")

    @property
    def alpha(self) -> float:
        return self.lail.alpha

    def frozen_epochs(self) -> int:
        return math.ceil(self.freeze_frontend_fraction * self.epochs)


class ASRModel(Module):
    """Encoder + CTC head, plus connector stacks for the LAIL taps."""

    def __init__(self, enc_cfg: EncoderConfig, num_chars: int, d_llm: int, lail: LAILConfig, rng: RngState):
        self.encoder = Encoder(enc_cfg, rng.child("encoder"))
        self.ctc_head = Linear(enc_cfg.d_model, num_chars + 1, rng.child("ctc_head"))
        self.connectors = build_connectors(enc_cfg.d_model, d_llm, lail, rng) if lail.tap_layers else {}
        assign_names(self)

    def log_probs(self, feats, lengths, taps=()):
        out = self.encoder(feats, lengths, taps)
        return T.log_softmax(self.ctc_head(out.final)), out


def pad_batch(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([u.features.shape[0] for u in utts])
    d = utts[0].features.shape[1]
    out = np.zeros((len(utts), int(lengths.max()), d))
    for i, u in enumerate(utts):
        out[i, :lengths[i]] = u.features
    return out, lengths


def ctc_feasible(n_frames: int, target: Sequence[int]) -> bool:
    y = np.asarray(target)
    return n_frames >= len(y) + int(np.sum(y[1:] == y[:-1]))


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict):
        super().__init__(msg)
        self.last_good = last_good


def _fmt(x: float) -> float:
    return float(x)


def train_asr(cfg: TrainConfig, data: Dataset, tok: Tokenizer, lm: CausalLM | None,
              enc_cfg: EncoderConfig | None = None, metrics: list | None = None,
              hook: Callable[[int, "ASRModel"], None] | None = None) -> ASRModel:
    """Optimise ``ctc + alpha * lail`` with AdamW.

    ``metrics`` (if given) receives one dict per step and one per epoch.
    With ``alpha == 0`` neither connectors nor the LM are evaluated.
    """
    enc_cfg = enc_cfg or EncoderConfig(d_feat=data.d_feat)
    use_lail = cfg.alpha > 0 and len(cfg.lail.tap_layers) > 0
    if use_lail and lm is None:
        raise ValueError("alpha > 0 needs a language model")
    if lm is not None and not lm.frozen:
        raise ValueError("the language model must be frozen before ASR training")
    d_llm = lm.cfg.d_llm if lm is not None else 1
    root = RngState(cfg.seed)
    model = ASRModel(enc_cfg, tok.num_chars, d_llm, cfg.lail, root.child("model"))
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    train = data.split("train")
    targets = [tok.tokenize(u.text) for u in train]
    frames = model.encoder.frontend.output_lengths([u.features.shape[0] for u in train])
    keep = [i for i in range(len(train)) if ctc_feasible(int(frames[i]), targets[i])]
    skipped = len(train) - len(keep)
    taps = cfg.lail.tap_layers if use_lail else ()
    frozen_epochs = cfg.frozen_epochs()
    step = 0
    last_good = {k: v.copy() for k, v in model.state_dict().items()}
    for epoch in range(cfg.epochs):
        model.encoder.frontend.freeze(epoch < frozen_epochs)
        order = root.child(f"order/{epoch}").generator().permutation(len(keep))
        sums = {"ctc": 0.0, "lail": 0.0, "total": 0.0}
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = [keep[i] for i in order[start:start + cfg.batch_size]]
            utts = [train[i] for i in idx]
            ys = [targets[i] for i in idx]
            feats, lengths = pad_batch(utts)
            opt.zero_grad()
            rec = {"kind": "step", "step": step, "epoch": epoch}
            try:
                loss = _step_loss(model, cfg, lm, use_lail, taps, feats, lengths, ys, rec)
                if not math.isfinite(rec["total"]):
                    raise NumericError(f"non-finite loss {rec['total']}")
                # parameters that produced a finite loss
                last_good = {k: v.copy() for k, v in model.state_dict().items()}
                loss.backward()
                rec["grad_norm"] = clip_grad_norm(opt.params, cfg.clip_norm)
                lr = warmup_lr(step, cfg.lr, cfg.warmup_steps)
                rec["lr"] = lr
                opt.step(lr)
            except NumericError as e:
                raise TrainingDiverged(f"training diverged at step {step}: {e}", last_good) from e
            if metrics is not None:
                metrics.append(rec)
            for k in sums:
                sums[k] += rec.get(k, 0.0)
            nb += 1
            step += 1
        if metrics is not None:
            metrics.append({"kind": "epoch", "epoch": epoch, "skipped": skipped,
                            "frontend_frozen": epoch < frozen_epochs,
                            **{f"mean_{k}": v / max(nb, 1) for k, v in sums.items()}})
        if hook is not None:
            hook(epoch, model)
    model.encoder.frontend.freeze(False)
    return model


def _step_loss(model, cfg, lm, use_lail, taps, feats, lengths, ys, rec):
    logp, enc = model.log_probs(Tensor(feats), lengths, taps)
    ctc_vec, _ = ctc_loss_batch(logp, enc.lengths, ys)
    ctc = ctc_vec.mean()
    if use_lail:
        lail, per_layer = lail_loss(cfg.lail, enc.hidden, model.connectors, lm, ys, enc.lengths)
        loss = total_loss(ctc, lail, cfg.alpha)
        ntok = sum(len(y) for y in ys)
        rec["lail"] = lail.item()
        for l, v in per_layer.items():
            rec[f"clm_loss.layer{l}"] = v.item() * len(ys) / ntok
    else:
        loss = total_loss(ctc, None, 0.0)
    rec["ctc"] = ctc.item()
    rec["total"] = loss.item()
    return loss


# -- evaluation ----------------------------------------------------------------


def levenshtein(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Minimum-edit ``(substitutions, insertions, deletions)``.

    Among equal-cost alignments the backtrace prefers a substitution over an
    insertion+deletion pair, then deletions over insertions.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = I = D = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return S, I, D


@dataclass
class WERReport:
    split: str
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int
    utterances: int
    decode_mode: str

    def __post_init__(self):
        if min(self.substitutions, self.insertions, self.deletions) < 0:
            raise ValueError("negative edit counts")


def word_error_rate(refs: Sequence[str], hyps: Sequence[str], split: str = "", mode: str = "greedy") -> WERReport:
    S = I = D = N = 0
    for r, h in zip(refs, hyps, strict=True):
        rw, hw = r.split(), h.split()
        s, i, d = levenshtein(rw, hw)
        S, I, D, N = S + s, I + i, D + d, N + len(rw)
    wer = 100.0 * (S + I + D) / N if N else 0.0
    return WERReport(split, wer, S, I, D, N, len(refs), mode)


def transcribe(model: ASRModel, utts: Sequence[Utterance], tok: Tokenizer, decode_mode: str = "greedy",
               beam: int = 8, lm: CausalLM | None = None, lm_weight: float = 0.0, batch_size: int = 32) -> list[str]:
    hyps = []
    scorer = LMScorer(lm) if (lm is not None and lm_weight > 0) else None
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        feats, lengths = pad_batch(chunk)
        logp, enc = model.log_probs(Tensor(feats), lengths)
        for b in range(len(chunk)):
            lat = logp.data[b, :enc.lengths[b]]
            if decode_mode == "greedy":
                ids = greedy_decode(lat)
            elif decode_mode == "beam":
                ids = prefix_beam_search(lat, beam, scorer, lm_weight)
            else:
                raise ValueError(f"unknown decode mode {decode_mode!r}")
            hyps.append(tok.detokenize(ids))
    return hyps


def evaluate_wer(model: ASRModel, data: Dataset, split: str, tok: Tokenizer, decode_mode: str = "greedy",
                 **decode_kw) -> WERReport:
    utts = data.split(split)
    if not utts:
        raise ValueError(f"split {split!r} is empty")
    hyps = transcribe(model, utts, tok, decode_mode, **decode_kw)
    return word_error_rate([u.text for u in utts], hyps, split, decode_mode)


# -- ablation ------------------------------------------------------------------

# reference placements on a 24-block encoder, mapped onto an 8-layer desk encoder
REFERENCE_PLACEMENTS = {
    "5 heads": (4, 8, 16, 20, 24),
    "4 heads": (6, 12, 18, 24),
    "3 heads": (8, 16, 24),
    "2 heads (bottom+top)": (6, 24),
    "2 heads (middle+top)": (12, 24),
    "2 heads (upper)": (18, 24),
    "1 head": (24,),
}


def scale_placement(layers: Iterable[int], ref_depth: int = 24, desk_depth: int = 8) -> tuple[int, ...]:
    """Proportional mapping ``round(l * desk / ref)``, clipped to ``1..desk_depth``."""
    out = sorted({min(max(int(math.floor(l * desk_depth / ref_depth + 0.5)), 1), desk_depth) for l in layers})
    return tuple(out)


@dataclass
class AblationCell:
    name: str
    train: TrainConfig
    lm_tier: str | None = "large"
    group: str = "placement"


@dataclass
class AblationGrid:
    cells: list[AblationCell]
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")


def default_grid(base: TrainConfig, seeds=(0, 1, 2), desk_depth: int = 8,
                 alphas=(0.0, 0.1, 0.3, 0.5, 1.0), lail_alpha: float = 0.3) -> AblationGrid:
    """Placement rows, an alpha sweep and the LM-size rows.

    Placement and LM-size rows train at ``base.alpha`` when it is positive and
    at ``lail_alpha`` otherwise, so a baseline config still yields LAIL rows.
    """
    cells = []
    full = scale_placement(REFERENCE_PLACEMENTS["4 heads"], desk_depth=desk_depth)
    a_lail = base.alpha if base.alpha > 0 else lail_alpha
    for name, layers in REFERENCE_PLACEMENTS.items():
        taps = scale_placement(layers, desk_depth=desk_depth)
        cells.append(AblationCell(name, replace(base, lail=replace(base.lail, tap_layers=taps, alpha=a_lail)),
                                  "large", "placement"))
    for a in alphas:
        cells.append(AblationCell(f"alpha={a}", replace(base, lail=replace(base.lail, tap_layers=full, alpha=a)),
                                  "large", "alpha"))
    for tier in ("small", "medium", "large"):
        cells.append(AblationCell(f"lm={tier}", replace(base, lail=replace(base.lail, tap_layers=full, alpha=a_lail)),
                                  tier, "lm_size"))
    return AblationGrid(cells, tuple(seeds))


@dataclass
class CellResult:
    cell: str
    group: str
    seed: int
    wer: dict[str, float] = field(default_factory=dict)
    error: str | None = None


EVAL_SPLITS = ("test_clean", "test_other")


def run_cell(cell: AblationCell, seed: int, data: Dataset, tok: Tokenizer, lms: dict[str, CausalLM],
             enc_cfg: EncoderConfig | None = None, splits=EVAL_SPLITS) -> CellResult:
    cfg = replace(cell.train, seed=seed)
    lm = lms.get(cell.lm_tier) if cell.lm_tier else None
    try:
        model = train_asr(cfg, data, tok, lm, enc_cfg)
        wers = {s: evaluate_wer(model, data, s, tok).wer for s in splits}
        return CellResult(cell.name, cell.group, seed, wers)
    except Exception as e:  # a failing cell must not stop the grid
        log.exception("cell %s seed %d failed", cell.name, seed)
        return CellResult(cell.name, cell.group, seed, error=f"{type(e).__name__}: {e}")


def run_ablation(grid: AblationGrid, data: Dataset, tok: Tokenizer, lms: dict[str, CausalLM],
                 enc_cfg: EncoderConfig | None = None, jobs: int = 1) -> list[CellResult]:
    """Train and evaluate every cell for every seed.

    Results come back in grid order regardless of ``jobs``.
    """
    tasks = [(c, s) for c in grid.cells for s in grid.seeds]
    if jobs <= 1:
        return [run_cell(c, s, data, tok, lms, enc_cfg) for c, s in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(run_cell, c, s, data, tok, lms, enc_cfg) for c, s in tasks]
        return [f.result() for f in futs]


def aggregate(results: Sequence[CellResult], splits=EVAL_SPLITS) -> dict[str, dict]:
    """Per cell: mean and std (ddof=0) of WER for each split, and seed count."""
    out: dict[str, dict] = {}
    for r in results:
        row = out.setdefault(r.cell, {"group": r.group, "runs": {s: [] for s in splits}, "errors": []})
        if r.error:
            row["errors"].append(r.error)
            continue
        for s in splits:
            row["runs"][s].append(r.wer[s])
    for row in out.values():
        row["mean"] = {s: float(np.mean(v)) if v else float("nan") for s, v in row["runs"].items()}
        row["std"] = {s: float(np.std(v)) if v else float("nan") for s, v in row["runs"].items()}
        row["seeds"] = min(len(v) for v in row["runs"].values())
    return out


def metrics_jsonl(records: Sequence[dict]) -> str:
    """Line-delimited JSON with sorted keys and repr-exact floats."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
