"""Verifiable rewards for generation and understanding outputs.

Normalized ranges: cycle and TIM in [0, 1], accuracy and format in {0, 1}.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .world import MCQ, OE, TextSequence, TokenGrid, World, WorldError

T2I = "T2I"
STAGE2_TASKS = (T2I, MCQ, OE)


class RewardError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.8
    patch_size: int = 2
    # "patch" (feature-space patch cosine) or "hamming" (pixel-level ablation)
    visual_measure: str = "patch"
    # "tim" or "clip" for the text-image alignment term
    alignment: str = "tim"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise RewardError("bad-config", "lambda must lie in [0, 1]")
        if self.patch_size < 1:
            raise RewardError("bad-config", "patch_size must be positive")
        if self.visual_measure not in ("patch", "hamming"):
            raise RewardError("bad-config", f"unknown visual measure {self.visual_measure!r}")
        if self.alignment not in ("tim", "clip"):
            raise RewardError("bad-config", f"unknown alignment reward {self.alignment!r}")


@dataclass
class RewardBreakdown:
    cycle: Optional[float] = None
    tim: Optional[float] = None
    acc: Optional[int] = None
    format: Optional[int] = None
    joint: Optional[float] = None
    raw_cycle: Optional[float] = None
    raw_tim: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 and nv < 1e-12:
        return 1.0
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _patch_means(tokens: np.ndarray, table: np.ndarray, p: int) -> np.ndarray:
    H, W = tokens.shape
    emb = table[tokens]  # H, W, d
    return emb.reshape(H // p, p, W // p, p, -1).mean(axis=(1, 3)).reshape(-1, emb.shape[-1])


def perceptual_distance(real: TokenGrid, gen: TokenGrid, table: np.ndarray,
                        patch_size: int = 2, measure: str = "patch") -> float:
    """Mean over non-overlapping patches of (1 - cos)/2 between mean patch embeddings."""
    if real.shape != gen.shape:
        raise RewardError("dim-mismatch", f"{real.shape} vs {gen.shape}")
    if measure == "hamming":
        return float(np.mean(real.tokens != gen.tokens))
    H, W = real.shape
    if H % patch_size or W % patch_size:
        raise RewardError("bad-patch", f"patch size {patch_size} does not divide {real.shape}")
    a = _patch_means(real.tokens, table, patch_size)
    b = _patch_means(gen.tokens, table, patch_size)
    # identical patches are exactly 0 (the cosine of equal vectors can round below 1)
    d = [0.0 if np.array_equal(x, y) else (1.0 - _cos(x, y)) / 2.0 for x, y in zip(a, b)]
    return float(min(1.0, max(0.0, np.mean(d))))


def caption_tuple_multiset(world: World, text) -> Counter:
    parsed = world.parse_caption(text)
    out: Counter = Counter()
    if not parsed:
        return out
    for (color, shape, region), n in parsed.items():
        out[(color, shape)] += n
        out[(color, shape, region)] += n
    return out


def multiset_f1(a: Counter, b: Counter) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    overlap = sum((a & b).values())
    if overlap == 0:
        return 0.0
    p = overlap / sum(b.values())
    r = overlap / sum(a.values())
    return 2 * p * r / (p + r)


def textual_consistency(world: World, prompt, recap) -> float:
    """Tuple F1 between the entity-attribute multisets of two captions."""
    return multiset_f1(caption_tuple_multiset(world, prompt), caption_tuple_multiset(world, recap))


def cycle_reward(world: World, real: TokenGrid, gen: TokenGrid, prompt: TextSequence,
                 patch_size: int = 2, measure: str = "patch") -> tuple[float, float]:
    pd = perceptual_distance(real, gen, world.visual_table, patch_size, measure)
    raw = 1.0 - pd + textual_consistency(world, prompt, world.recaption(gen))
    return raw, raw / 2.0


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise RewardError("bad-shape", "embedding matrix must be 2-D with at least one row")
    n = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(n < 1e-12):
        raise RewardError("zero-norm", "embedding row with zero norm")
    return m / n


def tim_reward(T: np.ndarray, I: np.ndarray) -> tuple[float, float]:
    """Token-level text-image matching: mean-of-max cosine averaged over both directions."""
    Tn, In = _unit_rows(T), _unit_rows(I)
    if Tn.shape[1] != In.shape[1]:
        raise RewardError("dim-mismatch", f"embedding dims {Tn.shape[1]} vs {In.shape[1]}")
    sim = np.clip(In @ Tn.T, -1.0, 1.0)  # L_i x L_t
    raw = 0.5 * (sim.max(axis=1).mean() + sim.max(axis=0).mean())
    raw = float(min(1.0, max(-1.0, raw)))
    return raw, (raw + 1.0) / 2.0


def clip_style_reward(T: np.ndarray, I: np.ndarray) -> float:
    """Cosine of mean-pooled embeddings mapped to [0, 1]; 0.5 if either pool vanishes."""
    t = np.asarray(T, dtype=np.float64).mean(axis=0)
    i = np.asarray(I, dtype=np.float64).mean(axis=0)
    if np.linalg.norm(t) < 1e-12 or np.linalg.norm(i) < 1e-12:
        return 0.5
    return (_cos(t, i) + 1.0) / 2.0


# Answer grammar. A block body may not contain any of the four tag strings.
_TAG = r"</?(?:think|answer)>"
_BODY = rf"(?:(?!{_TAG}).)*"
_ANSWER_SPAN = re.compile(rf"<answer>({_BODY})</answer>", re.DOTALL)
_FORMAT = re.compile(rf"\s*<think>{_BODY}</think>\s*<answer>{_BODY}</answer>\s*", re.DOTALL)


def parse_answer(text: str) -> Optional[str]:
    """Trimmed body of the last well-formed <answer> span, or None."""
    spans = _ANSWER_SPAN.findall(text)
    if not spans:
        return None
    return spans[-1].strip()


def format_reward(text: str) -> int:
    return int(_FORMAT.fullmatch(text) is not None)


def _as_number(s: str) -> Optional[float]:
    try:
        x = float(s)
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def canonical_equal(pred: str, gold: str) -> bool:
    p, g = pred.strip().casefold(), gold.strip().casefold()
    np_, ng = _as_number(p), _as_number(g)
    if np_ is not None and ng is not None:
        return math.isclose(np_, ng, rel_tol=1e-6, abs_tol=0.0)
    return p == g


def accuracy_reward(text: str, gold: str, qtype: str) -> int:
    ans = parse_answer(text)
    if ans is None:
        return 0
    if qtype == MCQ:
        return int(bool(ans) and ans[0].upper() == gold.strip().upper())
    if qtype == OE:
        return int(canonical_equal(ans, gold))
    raise RewardError("bad-qtype", f"unknown question type {qtype!r}")


def joint_reward(cycle: float, tim: float, acc: float, fmt: float, lam: float) -> float:
    return cycle + tim + lam * (acc + fmt)


def stage2_reward(task: str, cycle: Optional[float] = None, tim: Optional[float] = None,
                  acc: Optional[float] = None, fmt: Optional[float] = None) -> float:
    if task == T2I:
        if cycle is None or tim is None or acc is not None or fmt is not None:
            raise RewardError("task-mismatch", "T2I takes exactly cycle and tim")
        return cycle + tim
    if task in (MCQ, OE):
        if acc is None or fmt is None or cycle is not None or tim is not None:
            raise RewardError("task-mismatch", f"{task} takes exactly acc and format")
        return acc + fmt
    raise RewardError("task-mismatch", f"unknown task {task!r}")


def generation_breakdown(world: World, cfg: RewardConfig, real: TokenGrid, gen: TokenGrid,
                         prompt: TextSequence) -> RewardBreakdown:
    raw_c, cyc = cycle_reward(world, real, gen, prompt, cfg.patch_size, cfg.visual_measure)
    T, I = world.embed(prompt), world.embed(gen)
    if cfg.alignment == "clip":
        tim = clip_style_reward(T, I)
        raw_t = 2.0 * tim - 1.0
    else:
        raw_t, tim = tim_reward(T, I)
    return RewardBreakdown(cycle=cyc, tim=tim, raw_cycle=raw_c, raw_tim=raw_t)


def understanding_breakdown(text: str, gold: str, qtype: str) -> RewardBreakdown:
    return RewardBreakdown(acc=accuracy_reward(text, gold, qtype), format=format_reward(text))


def full_breakdown(world: World, cfg: RewardConfig, real: TokenGrid, gen: TokenGrid,
                   prompt: TextSequence, answer: str, gold: str, qtype: str) -> RewardBreakdown:
    b = generation_breakdown(world, cfg, real, gen, prompt)
    u = understanding_breakdown(answer, gold, qtype)
    b.acc, b.format = u.acc, u.format
    b.joint = joint_reward(b.cycle, b.tim, b.acc, b.format, cfg.lam)
    return b
