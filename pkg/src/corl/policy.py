"""Toy unified policy: summed feature embeddings -> one shared tanh layer -> image/text heads.

Parameters live in a single flat float64 vector; named blocks are views into it.
All gradients are analytic (softmax backprop through the trunk).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .world import TextSequence, TokenGrid, World

IMAGE, TEXT = "image", "text"
# id 0 is the background visual token and the end-of-sequence text token
BACKGROUND = 0
MAX_LOGRATIO = 20.0


class PolicyError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class CheckpointError(PolicyError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 64
    embed: int = 64
    max_text_len: int = 32
    max_cond_len: int = 48
    # per-step multiplicative gate on the condition vector
    gated: bool = True
    embed_init: float = 0.15
    head_init: float = 0.01
    gate_init: float = 0.0
    bigram_init: float = 1.0
    image_token_init: float = 0.5
    cell_init: float = 0.5
    # running sum of embeddings of already-emitted tokens (a linear recurrent state)
    history: bool = True
    # multiplicative text x image term in the condition vector
    fusion: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PolicyError("bad-config", f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Architecture:
    """Everything needed to lay out the flat parameter vector."""
    config: PolicyConfig
    text_vocab: int
    visual_vocab: int
    rows: int
    cols: int
    world_hash: str

    @classmethod
    def for_world(cls, world: World, config: PolicyConfig | None = None) -> "Architecture":
        return cls(config or PolicyConfig(), world.text_vocab, world.visual_vocab,
                   world.rows, world.cols, world.hash)

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def blocks(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.config
        e, h = c.embed, c.hidden
        Vt, Vv, L = self.text_vocab, self.visual_vocab, c.max_text_len
        return [
            ("cond_text", (c.max_cond_len * Vt, e)),
            ("cond_image", (self.cells * Vv, e)),
            ("cond_text_tok", (Vt, e)),
            ("cond_image_tok", (Vv, e)),
            ("cond_image_cell", (self.cells, e)),
            ("cond_bigram_l", (Vt, e)),
            ("cond_bigram_r", (Vt, e)),
            ("img_pos", (self.cells, e)),
            ("img_prev", (Vv + 1, e)),
            ("img_gate", (self.cells, e)),
            ("img_hist", (Vv, e)),
            ("txt_pos", (L, e)),
            ("txt_prev", (Vt + 1, e)),
            ("txt_gate", (L, e)),
            ("txt_hist", (Vt, e)),
            ("trunk_w", (e, h)),
            ("trunk_b", (h,)),
            ("img_head_w", (h, Vv)),
            ("img_head_b", (Vv,)),
            ("txt_head_w", (h, Vt)),
            ("txt_head_b", (Vt,)),
        ]

    def index(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out, off = {}, 0
        for name, shape in self.blocks():
            out[name] = (off, shape)
            off += int(np.prod(shape))
        return out

    def n_params(self) -> int:
        """(L_c*V_t + HW*V_v + 3HW + 3V_v + 5V_t + 2L + 2)*e + (e+1)*h + (h+1)*(V_v+V_t)."""
        return sum(int(np.prod(s)) for _, s in self.blocks())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = asdict(self.config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["config"] = PolicyConfig(**d["config"])
        return cls(**d)


class PolicyParams:
    """Flat parameter vector plus a name -> (offset, shape) index."""

    def __init__(self, arch: Architecture, vector: np.ndarray):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (arch.n_params(),):
            raise PolicyError("bad-shape", f"expected {arch.n_params()} params, got {vector.shape}")
        self.arch = arch
        self.vector = vector
        self._index = arch.index()

    def block(self, name: str) -> np.ndarray:
        off, shape = self._index[name]
        return self.vector[off:off + int(np.prod(shape))].reshape(shape)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.vector.copy())

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.vector)

    def block_of(self, flat_index: int) -> str:
        for name, (off, shape) in self._index.items():
            if off <= flat_index < off + int(np.prod(shape)):
                return name
        raise IndexError(flat_index)

    def __eq__(self, other):
        return (isinstance(other, PolicyParams) and self.arch == other.arch
                and np.array_equal(self.vector, other.vector))


def grad_view(params: PolicyParams, grad: np.ndarray, name: str) -> np.ndarray:
    off, shape = params._index[name]
    return grad[off:off + int(np.prod(shape))].reshape(shape)


def init_params(world: World, config: PolicyConfig | None = None, seed: int = 0) -> PolicyParams:
    arch = Architecture.for_world(world, config)
    cfg = arch.config
    rng = np.random.default_rng([int(seed), 0x9011C7])
    p = PolicyParams(arch, np.zeros(arch.n_params()))
    for name, shape in arch.blocks():
        b = p.block(name)
        if name.endswith("_b") or name.endswith("_hist") or name.endswith("_tok"):
            continue
        if name.endswith("_gate"):
            b[...] = rng.standard_normal(shape) * cfg.gate_init
            continue
        if name.startswith("cond_bigram"):
            b[...] = rng.standard_normal(shape) * cfg.bigram_init
            continue
        if name == "cond_image_tok":
            b[...] = rng.standard_normal(shape) * cfg.image_token_init
            continue
        if name == "cond_image_cell":
            b[...] = rng.standard_normal(shape) * cfg.cell_init
            continue
        if name == "trunk_w":
            b[...] = rng.standard_normal(shape) / np.sqrt(cfg.embed)
        elif name.endswith("_head_w"):
            b[...] = rng.standard_normal(shape) * cfg.head_init
        else:
            b[...] = rng.standard_normal(shape) * cfg.embed_init
    return p


@dataclass(frozen=True)
class Condition:
    text: TextSequence
    image: Optional[TokenGrid] = None


@dataclass
class PolicyOutput:
    kind: str
    tokens: object  # TokenGrid or TextSequence
    logprob: float
    per_token_logprobs: np.ndarray
    temperature: float = 1.0

    def ids(self) -> np.ndarray:
        if self.kind == IMAGE:
            return self.tokens.flat()
        return np.asarray(self.tokens.tokens, dtype=np.int64)


# ---------------------------------------------------------------------------
# forward / backward

def _head_names(kind: str) -> tuple[str, str, str, str, str]:
    if kind == IMAGE:
        return "img_pos", "img_prev", "img_gate", "img_head_w", "img_head_b"
    if kind == TEXT:
        return "txt_pos", "txt_prev", "txt_gate", "txt_head_w", "txt_head_b"
    raise PolicyError("bad-kind", f"unknown output kind {kind!r}")


def _hist_rows(params: "PolicyParams", kind: str, toks: np.ndarray) -> np.ndarray:
    """History embedding of emitted tokens; id 0 (background / end-of-sequence) adds nothing."""
    rows = params.block(_hist_name(kind))[toks]
    return rows * (toks != BACKGROUND)[..., None]


def _hist_name(kind: str) -> str:
    if kind == IMAGE:
        return "img_hist"
    if kind == TEXT:
        return "txt_hist"
    raise PolicyError("bad-kind", f"unknown output kind {kind!r}")


def _vocab(arch: Architecture, kind: str) -> int:
    return arch.visual_vocab if kind == IMAGE else arch.text_vocab


def _cond_rows(arch: Architecture, cond: Condition) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(cond.text.tokens, dtype=np.int64)
    L = arch.config.max_cond_len
    if len(ids) > L:
        raise PolicyError("cond-too-long", f"condition has {len(ids)} tokens, max {L}")
    if ids.size and (ids.min() < 0 or ids.max() >= arch.text_vocab):
        raise PolicyError("vocab", "condition token outside text vocabulary")
    text_rows = np.arange(len(ids)) * arch.text_vocab + ids
    if cond.image is None:
        img_rows = np.zeros(0, dtype=np.int64)
    else:
        g = cond.image.flat()
        if g.size != arch.cells:
            raise PolicyError("dim-mismatch", "condition image does not match grid dims")
        if g.min() < 0 or g.max() >= arch.visual_vocab:
            raise PolicyError("vocab", "condition image token outside visual vocabulary")
        cells = np.flatnonzero(g != BACKGROUND)
        img_rows = cells * arch.visual_vocab + g[cells]
    return text_rows, img_rows


def _condition_parts(params: PolicyParams, conds: Sequence[Condition]) -> tuple[np.ndarray, np.ndarray]:
    ct, ci = params.block("cond_text"), params.block("cond_image")
    ctt, cit = params.block("cond_text_tok"), params.block("cond_image_tok")
    bl, br = params.block("cond_bigram_l"), params.block("cond_bigram_r")
    cc = params.block("cond_image_cell")
    Vt, Vv = params.arch.text_vocab, params.arch.visual_vocab
    u = np.zeros((len(conds), params.arch.config.embed))
    v = np.zeros_like(u)
    for n, c in enumerate(conds):
        tr, ir = _cond_rows(params.arch, c)
        # position-specific rows plus a position-shared row per token
        # text: mean over tokens and adjacent-token products; image: sum over non-background cells
        if tr.size:
            ids = tr % Vt
            u[n] = (ct[tr].sum(axis=0) + ctt[ids].sum(axis=0)
                    + (bl[ids[:-1]] * br[ids[1:]]).sum(axis=0)) / tr.size
        tok, cell = ir % Vv, ir // Vv
        v[n] = ci[ir].sum(axis=0) + (cit[tok] * (1.0 + cc[cell])).sum(axis=0)
    return u, v


def condition_vectors(params: PolicyParams, conds: Sequence[Condition]) -> np.ndarray:
    """c = u + v (+ u*v with fusion), u from the text condition, v from the image condition."""
    u, v = _condition_parts(params, conds)
    c = u + v
    if params.arch.config.fusion:
        c = c + u * v
    return c


def _step_input(cfg: PolicyConfig, c, pos, prev_emb, gate, hist):
    """x = c + pos + prev + hist + c*(gate + hist); shapes broadcast over (N, [T,] e)."""
    x = c + pos + prev_emb
    mod = 0.0
    if cfg.gated:
        mod = mod + gate
    if cfg.history:
        x = x + hist
        mod = mod + hist
    if cfg.gated or cfg.history:
        x = x + c * mod
    return x


def _pack(arch: Architecture, kind: str, outputs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    V = _vocab(arch, kind)
    T = max(len(o) for o in outputs)
    if kind == IMAGE and any(len(o) != arch.cells for o in outputs):
        raise PolicyError("bad-length", "image outputs must have exactly H*W tokens")
    if kind == TEXT and T > arch.config.max_text_len:
        raise PolicyError("bad-length", "text output longer than max_text_len")
    toks = np.zeros((len(outputs), T), dtype=np.int64)
    mask = np.zeros((len(outputs), T))
    for n, o in enumerate(outputs):
        o = np.asarray(o, dtype=np.int64)
        if o.size and (o.min() < 0 or o.max() >= V):
            raise PolicyError("vocab", f"{kind} token outside vocabulary of size {V}")
        toks[n, :len(o)] = o
        mask[n, :len(o)] = 1.0
    return toks, mask


class _Cache:
    __slots__ = ("kind", "conds", "u", "v", "c", "hist", "toks", "prev", "mask", "x", "hid", "logp", "p")


def _forward(params: PolicyParams, conds: Sequence[Condition], outputs: Sequence[np.ndarray],
             kind: str) -> _Cache:
    arch = params.arch
    pos_n, prev_n, gate_n, hw_n, hb_n = _head_names(kind)
    V = _vocab(arch, kind)
    toks, mask = _pack(arch, kind, outputs)
    N, T = toks.shape
    prev = np.empty_like(toks)
    prev[:, 0] = V  # begin-of-output row
    prev[:, 1:] = toks[:, :-1]
    u, v = _condition_parts(params, conds)
    c = u + v + (u * v if arch.config.fusion else 0.0)
    hist = np.zeros((N, T, arch.config.embed))
    if arch.config.history:
        hist[:, 1:] = np.cumsum(_hist_rows(params, kind, toks[:, :-1]), axis=1)
    x = _step_input(arch.config, c[:, None, :], params.block(pos_n)[None, :T],
                    params.block(prev_n)[prev], params.block(gate_n)[None, :T], hist)
    hid = np.tanh(x @ params.block("trunk_w") + params.block("trunk_b"))
    logits = hid @ params.block(hw_n) + params.block(hb_n)
    logits -= logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    cache = _Cache()
    cache.kind, cache.conds, cache.c, cache.toks, cache.prev, cache.mask = kind, conds, c, toks, prev, mask
    cache.u, cache.v, cache.hist = u, v, hist
    cache.x, cache.hid, cache.logp, cache.p = x, hid, logp, np.exp(logp)
    return cache


def _backward(params: PolicyParams, cache: _Cache, dlogits: np.ndarray, grad: np.ndarray) -> None:
    """Accumulate d(objective)/d(params) into ``grad`` given d(objective)/d(logits)."""
    arch = params.arch
    pos_n, prev_n, gate_n, hw_n, hb_n = _head_names(cache.kind)
    e = arch.config.embed
    T = cache.toks.shape[1]
    W = params.block("trunk_w")
    grad_view(params, grad, hw_n)[...] += np.einsum("nth,ntv->hv", cache.hid, dlogits)
    grad_view(params, grad, hb_n)[...] += dlogits.sum(axis=(0, 1))
    da = (dlogits @ params.block(hw_n).T) * (1.0 - cache.hid ** 2)
    grad_view(params, grad, "trunk_w")[...] += np.einsum("nte,nth->eh", cache.x, da)
    grad_view(params, grad, "trunk_b")[...] += da.sum(axis=(0, 1))
    dx = da @ W.T
    grad_view(params, grad, pos_n)[:T] += dx.sum(axis=0)
    np.add.at(grad_view(params, grad, prev_n), cache.prev.reshape(-1), dx.reshape(-1, e))
    cfg = arch.config
    c = cache.c[:, None, :]
    mod = np.zeros_like(dx)
    if cfg.gated:
        gate = params.block(gate_n)[:T]
        grad_view(params, grad, gate_n)[:T] += np.einsum("nte,ne->te", dx, cache.c)
        mod = mod + gate
    if cfg.history:
        mod = mod + cache.hist
        dhist = dx * (1.0 + c)
        # token s feeds every later step t > s
        later = np.cumsum(dhist[:, ::-1], axis=1)[:, ::-1]
        later = np.concatenate([later[:, 1:], np.zeros_like(later[:, :1])], axis=1)
        later = later * (cache.toks != BACKGROUND)[..., None]
        np.add.at(grad_view(params, grad, _hist_name(cache.kind)), cache.toks.reshape(-1),
                  later.reshape(-1, e))
    dc = (dx * (1.0 + mod)).sum(axis=1) if (cfg.gated or cfg.history) else dx.sum(axis=1)
    if cfg.fusion:
        du, dv = dc * (1.0 + cache.v), dc * (1.0 + cache.u)
    else:
        du = dv = dc
    gct, gci = grad_view(params, grad, "cond_text"), grad_view(params, grad, "cond_image")
    gctt, gcit = grad_view(params, grad, "cond_text_tok"), grad_view(params, grad, "cond_image_tok")
    gbl, gbr = grad_view(params, grad, "cond_bigram_l"), grad_view(params, grad, "cond_bigram_r")
    bl, br = params.block("cond_bigram_l"), params.block("cond_bigram_r")
    gcc = grad_view(params, grad, "cond_image_cell")
    cc, cit = params.block("cond_image_cell"), params.block("cond_image_tok")
    Vt, Vv = arch.text_vocab, arch.visual_vocab
    for n, cond in enumerate(cache.conds):
        tr, ir = _cond_rows(arch, cond)
        if tr.size:
            d = du[n] / tr.size
            ids = tr % Vt
            gct[tr] += d
            np.add.at(gctt, ids, d)
            np.add.at(gbl, ids[:-1], d * br[ids[1:]])
            np.add.at(gbr, ids[1:], d * bl[ids[:-1]])
        gci[ir] += dv[n]
        tok, cell = ir % Vv, ir // Vv
        np.add.at(gcit, tok, dv[n] * (1.0 + cc[cell]))
        np.add.at(gcc, cell, dv[n] * cit[tok])


def _token_logprobs(cache: _Cache) -> np.ndarray:
    lp = np.take_along_axis(cache.logp, cache.toks[..., None], axis=-1)[..., 0]
    return lp * cache.mask


def _onehot_minus_p(cache: _Cache, weights: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_{n,t} weights[n,t] * logp[n,t,y_nt]."""
    d = -cache.p * weights[..., None]
    np.put_along_axis(d, cache.toks[..., None],
                      np.take_along_axis(d, cache.toks[..., None], axis=-1) + weights[..., None], axis=-1)
    return d


def _kl_terms(cache_p: _Cache, cache_q: _Cache) -> tuple[np.ndarray, np.ndarray]:
    """Per-step KL(p||q) (N,T) and its gradient w.r.t. p's logits (N,T,V), both masked."""
    kl = categorical_kl(cache_p.logp, cache_q.logp)
    dkl = cache_p.p * (cache_p.logp - cache_q.logp - kl[..., None])
    return kl * cache_p.mask, dkl * cache_p.mask[..., None]


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """KL(p||q) over the last axis from log-probabilities."""
    return (np.exp(logp) * (logp - logq)).sum(axis=-1)


# ---------------------------------------------------------------------------
# public API

def _as_ids(output) -> np.ndarray:
    if isinstance(output, PolicyOutput):
        return output.ids()
    if isinstance(output, TokenGrid):
        return output.flat()
    if isinstance(output, TextSequence):
        return np.asarray(output.tokens, dtype=np.int64)
    return np.asarray(output, dtype=np.int64)


def logprob_batch(params: PolicyParams, conds: Sequence[Condition], outputs: Sequence,
                  kind: str) -> tuple[np.ndarray, list[np.ndarray]]:
    ids = [_as_ids(o) for o in outputs]
    cache = _forward(params, conds, ids, kind)
    lp = _token_logprobs(cache)
    per = [lp[n, :len(o)].copy() for n, o in enumerate(ids)]
    return np.array([p.sum() for p in per]), per


def logprob(params: PolicyParams, condition: Condition, output, kind: str) -> tuple[float, np.ndarray]:
    total, per = logprob_batch(params, [condition], [output], kind)
    return float(total[0]), per[0]


def grad_logprob(params: PolicyParams, condition: Condition, output, kind: str) -> np.ndarray:
    cache = _forward(params, [condition], [_as_ids(output)], kind)
    g = params.zeros_like()
    _backward(params, cache, _onehot_minus_p(cache, cache.mask), g)
    return g


def weighted_logprob_grad(params: PolicyParams, conds, outputs, kind: str,
                          weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-output log-probs and the gradient of sum_n weights[n] * logprob_n."""
    ids = [_as_ids(o) for o in outputs]
    cache = _forward(params, conds, ids, kind)
    lp = _token_logprobs(cache).sum(axis=1)
    g = params.zeros_like()
    _backward(params, cache, _onehot_minus_p(cache, cache.mask * np.asarray(weights)[:, None]), g)
    return lp, g


def kl_to(params_p: PolicyParams, params_q: PolicyParams, condition: Condition,
          output_prefixes: Sequence, kind: str) -> float:
    """Exact per-step KL(p||q) summed over each prefix trajectory, averaged over prefixes."""
    if params_p.arch != params_q.arch:
        raise PolicyError("arch-mismatch", "KL requires identical architectures")
    ids = [_as_ids(o) for o in output_prefixes]
    conds = [condition] * len(ids)
    cp, cq = _forward(params_p, conds, ids, kind), _forward(params_q, conds, ids, kind)
    kl, _ = _kl_terms(cp, cq)
    return float(kl.sum(axis=1).mean())


def step_distributions(params: PolicyParams, condition: Condition, output, kind: str) -> np.ndarray:
    """Per-step categorical distributions along a trajectory (T, V)."""
    cache = _forward(params, [condition], [_as_ids(output)], kind)
    return cache.p[0]


def sample_batch(params: PolicyParams, conds: Sequence[Condition], kind: str, rngs: Sequence,
                 temperature: float = 1.0, greedy: bool = False, world: World | None = None
                 ) -> list[PolicyOutput]:
    """Ancestral sampling, one output per (condition, rng) pair.

    Each output draws only from its own generator, so results do not depend on batching.
    The stored log-prob is always the temperature-1 training probability.
    """
    if not greedy and not temperature > 0:
        raise PolicyError("bad-temperature", "temperature must be > 0")
    arch = params.arch
    pos_n, prev_n, gate_n, hw_n, hb_n = _head_names(kind)
    V = _vocab(arch, kind)
    T = arch.cells if kind == IMAGE else arch.config.max_text_len
    N = len(conds)
    c = condition_vectors(params, conds)
    W, b = params.block("trunk_w"), params.block("trunk_b")
    HW, Hb = params.block(hw_n), params.block(hb_n)
    pos, prevt, gate = params.block(pos_n), params.block(prev_n), params.block(gate_n)
    hist_tab = params.block(_hist_name(kind))
    hist = np.zeros_like(c)
    toks = np.zeros((N, T), dtype=np.int64)
    lps = np.zeros((N, T))
    lengths = np.full(N, T)
    alive = np.ones(N, dtype=bool)
    prev = np.full(N, V)
    eos = world.eos if world is not None else 0
    if not greedy:
        # one uniform per step, drawn up front from each output's own generator
        U = np.stack([r.random(T) for r in rngs])
    for t in range(T):
        x = _step_input(arch.config, c, pos[t], prevt[prev], gate[t], hist)
        logits = np.tanh(x @ W + b) @ HW + Hb
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        if greedy:
            tok = logp.argmax(axis=1)
        else:
            z = logits / temperature
            q = np.exp(z - z.max(axis=1, keepdims=True))
            cdf = np.cumsum(q, axis=1)
            u = U[:, t] * cdf[:, -1]
            tok = np.minimum((cdf < u[:, None]).sum(axis=1), V - 1)
        tok = np.where(alive, tok, 0)
        toks[:, t] = tok
        lps[:, t] = np.where(alive, logp[np.arange(N), tok], 0.0)
        if kind == TEXT:
            ended = alive & (tok == eos)
            lengths[ended] = t + 1
            alive &= ~ended
            if not alive.any():
                break
        prev = tok
        if arch.config.history:
            hist = hist + _hist_rows(params, kind, tok)
    outs = []
    for n in range(N):
        L = int(lengths[n])
        per = lps[n, :L].copy()
        if kind == IMAGE:
            tokens = TokenGrid(toks[n].reshape(arch.rows, arch.cols), V)
        else:
            ids = toks[n, :L]
            tokens = world.detokenize(ids) if world is not None else TextSequence(tuple(int(i) for i in ids), "")
        outs.append(PolicyOutput(kind, tokens, float(per.sum()), per, 0.0 if greedy else float(temperature)))
    return outs


def sample(params: PolicyParams, condition: Condition, kind: str, temperature: float, rng,
           greedy: bool = False, world: World | None = None) -> PolicyOutput:
    return sample_batch(params, [condition], kind, [rng], temperature, greedy, world)[0]


def text_of(world: World, out: PolicyOutput) -> str:
    """Rendered text without the trailing end-of-sequence token."""
    ids = [i for i in out.tokens.tokens if i != world.eos]
    return world.detokenize(ids).rendered


def entropy_per_token(params: PolicyParams, condition: Condition, output, kind: str) -> np.ndarray:
    p = step_distributions(params, condition, output, kind)
    return -(p * np.log(p)).sum(axis=-1)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CORLCKPT"
FORMAT_VERSION = 1


def save_checkpoint(params: PolicyParams, metadata: dict, path) -> None:
    header = json.dumps({"arch": params.arch.to_dict(), "index": {k: [o, list(s)] for k, (o, s) in
                        params.arch.index().items()}, "metadata": metadata}, sort_keys=True).encode()
    wh = params.arch.world_hash.encode().ljust(16, b"\0")[:16]
    body = (MAGIC + struct.pack("<H", FORMAT_VERSION) + wh + struct.pack("<I", len(header)) + header
            + struct.pack("<Q", params.vector.size) + params.vector.astype("<f8").tobytes())
    digest = hashlib.sha256(body).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(body + digest)
    os.replace(tmp, path)


def read_checkpoint(path, expected_world_hash: str | None = None) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 2 + 16 + 4 + 8 + 32 or data[:len(MAGIC)] != MAGIC:
        if data[:len(MAGIC)] == MAGIC or len(data) < len(MAGIC):
            raise CheckpointError("checksum", f"{path}: truncated checkpoint")
        raise CheckpointError("magic", f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum", f"{path}: checksum mismatch")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != FORMAT_VERSION:
        raise CheckpointError("version", f"{path}: format version {version}, expected {FORMAT_VERSION}")
    wh = body[off:off + 16].rstrip(b"\0").decode()
    off += 16
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off:off + hlen])
    off += hlen
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    vec = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64)
    arch = Architecture.from_dict(header["arch"])
    if expected_world_hash is not None and wh != expected_world_hash:
        raise CheckpointError("world-hash", f"{path}: world hash {wh} != {expected_world_hash}")
    if arch.world_hash != wh:
        raise CheckpointError("world-hash", f"{path}: header world hash disagrees with architecture")
    return PolicyParams(arch, vec), header.get("metadata", {})


def load_checkpoint(path, expected_world_hash: str | None = None) -> PolicyParams:
    return read_checkpoint(path, expected_world_hash)[0]


def describe(params: PolicyParams) -> dict:
    return {
        "world_hash": params.arch.world_hash,
        "n_params": params.arch.n_params(),
        "blocks": {name: list(shape) for name, shape in params.arch.blocks()},
        "config": asdict(params.arch.config),
    }
