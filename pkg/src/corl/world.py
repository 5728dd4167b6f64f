"""Synthetic scene world: scenes, token-grid images, captions, QA items, embeddings.

Everything here is a pure function of a :class:`WorldConfig` and explicit seeds.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

SHAPE_NAMES = ("square", "circle", "triangle", "star", "hexagon", "cross")
COLOR_NAMES = ("red", "green", "blue", "yellow", "purple", "orange")
REGION_NAMES = (
    "top-left", "top", "top-right",
    "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
)
COUNT_WORDS = ("a", "two", "three", "four", "five", "six", "seven", "eight", "nine")
LETTERS = ("A", "B", "C", "D", "E", "F")
DIGITS = tuple(str(i) for i in range(10))

EOS = "<eos>"
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"

_QUESTION_WORDS = ("how", "many", "are", "there", "what", "color", "is", "the",
                   "where", "?", "yes", "no")
_CAPTION_WORDS = ("at", "and", "nothing")

MCQ, OE = "MCQ", "OE"
QA_KINDS = ("count", "color", "position", "exists")

# entities added per difficulty level beyond the first; documented generator table
ENTITIES_PER_LEVEL = (1, 2)


class WorldError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class WorldConfig:
    rows: int = 6
    cols: int = 6
    n_shapes: int = 4
    n_colors: int = 4
    embed_dim: int = 32
    seed: int = 0
    # weight of the shared concept vector when tying visual rows to text rows
    concept_tying: float = 1.0

    def __post_init__(self):
        if not (4 <= self.n_shapes <= len(SHAPE_NAMES)):
            raise WorldError("bad-config", f"n_shapes must be in [4, {len(SHAPE_NAMES)}]")
        if not (4 <= self.n_colors <= len(COLOR_NAMES)):
            raise WorldError("bad-config", f"n_colors must be in [4, {len(COLOR_NAMES)}]")
        if self.rows < 3 or self.cols < 3:
            raise WorldError("bad-config", "grid must be at least 3x3")
        if self.embed_dim < 2:
            raise WorldError("bad-config", "embed_dim must be >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise WorldError("bad-config", f"unknown world keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, order=True)
class Entity:
    color: int
    shape: int
    cell: tuple[int, int]


@dataclass(frozen=True)
class Scene:
    entities: tuple[Entity, ...]
    grid_dims: tuple[int, int]
    seed: int = 0

    def classes(self) -> Counter:
        return Counter((e.color, e.shape) for e in self.entities)


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray
    vocab_size: int

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    def flat(self) -> np.ndarray:
        return self.tokens.reshape(-1)

    def __eq__(self, other):
        return (isinstance(other, TokenGrid) and self.vocab_size == other.vocab_size
                and self.tokens.shape == other.tokens.shape
                and bool(np.array_equal(self.tokens, other.tokens)))

    def __hash__(self):
        return hash((self.tokens.tobytes(), self.vocab_size))


@dataclass(frozen=True)
class TextSequence:
    tokens: tuple[int, ...]
    rendered: str

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class QAItem:
    question: TextSequence
    qtype: str
    gold: str
    kind: str
    choices: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class Sample:
    """One unified training example: real image, generation prompt and a QA pair."""
    scene: Scene
    image: TokenGrid
    prompt: TextSequence
    qa: QAItem


class World:
    """Vocabularies, tokenizer and frozen embedding tables for one :class:`WorldConfig`."""

    def __init__(self, config: WorldConfig | None = None):
        self.config = config or WorldConfig()
        c = self.config
        self.rows, self.cols = c.rows, c.cols
        self.shapes = SHAPE_NAMES[:c.n_shapes]
        self.colors = COLOR_NAMES[:c.n_colors]
        self.plural = tuple(s + "s" for s in self.shapes)
        # visual vocab: 0 is background, 1 + color*n_shapes + shape otherwise
        self.background = 0
        self.visual_vocab = 1 + c.n_shapes * c.n_colors

        words = [EOS, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
        words += list(COUNT_WORDS) + list(_CAPTION_WORDS)
        words += list(self.colors) + list(self.shapes) + list(self.plural)
        words += list(REGION_NAMES) + list(_QUESTION_WORDS) + list(LETTERS) + list(DIGITS)
        seen = set()
        self.words = tuple(w for w in words if not (w in seen or seen.add(w)))
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.text_vocab = len(self.words)
        self.eos = self.word_to_id[EOS]
        self.hash = c.hash()

    # -- tokens -------------------------------------------------------------
    def encode_entity(self, color: int, shape: int) -> int:
        return 1 + color * self.config.n_shapes + shape

    def decode_token(self, tok: int) -> Optional[tuple[int, int]]:
        """(color, shape) for an entity token; None for background or out-of-vocab ids."""
        if tok <= 0 or tok >= self.visual_vocab:
            return None
        color, shape = divmod(tok - 1, self.config.n_shapes)
        return color, shape

    def region_of(self, cell: tuple[int, int]) -> int:
        r, c = cell
        return (r * 3 // self.rows) * 3 + (c * 3 // self.cols)

    def tokenize(self, text: str) -> TextSequence:
        ids = []
        for w in text.split():
            if w not in self.word_to_id:
                raise WorldError("unknown-token", f"word {w!r} not in text vocabulary")
            ids.append(self.word_to_id[w])
        return TextSequence(tuple(ids), " ".join(text.split()))

    def detokenize(self, ids: Sequence[int]) -> TextSequence:
        words = []
        for i in ids:
            if not 0 <= i < self.text_vocab:
                raise WorldError("unknown-token", f"text token id {i} out of range")
            words.append(self.words[i])
        return TextSequence(tuple(int(i) for i in ids), " ".join(words))

    # -- scenes -------------------------------------------------------------
    def generate_scene(self, seed: int, difficulty: int) -> Scene:
        if not 0 <= difficulty <= 3:
            raise WorldError("bad-difficulty", f"difficulty must be in [0, 3], got {difficulty}")
        rng = np.random.default_rng([int(seed), int(difficulty), 0x5CE2E])
        n = 1 + sum(int(rng.choice(ENTITIES_PER_LEVEL)) for _ in range(difficulty))
        n = min(n, self.rows * self.cols)
        cells = rng.choice(self.rows * self.cols, size=n, replace=False)
        ents = []
        for flat in cells:
            ents.append(Entity(int(rng.integers(self.config.n_colors)),
                               int(rng.integers(self.config.n_shapes)),
                               divmod(int(flat), self.cols)))
        return Scene(tuple(sorted(ents)), (self.rows, self.cols), int(seed))

    def validate_scene(self, scene: Scene) -> None:
        if scene.grid_dims != (self.rows, self.cols):
            raise WorldError("dim-mismatch", f"scene dims {scene.grid_dims} != world dims")
        if not 1 <= len(scene.entities) <= self.rows * self.cols:
            raise WorldError("bad-scene", "entity count out of range")
        cells = [e.cell for e in scene.entities]
        if len(set(cells)) != len(cells):
            raise WorldError("bad-scene", "two entities share a cell")
        for e in scene.entities:
            if not (0 <= e.cell[0] < self.rows and 0 <= e.cell[1] < self.cols):
                raise WorldError("bad-scene", f"cell {e.cell} outside grid")
            if not (0 <= e.color < self.config.n_colors and 0 <= e.shape < self.config.n_shapes):
                raise WorldError("bad-scene", "attribute outside alphabet")

    def render_scene(self, scene: Scene) -> TokenGrid:
        grid = np.full((self.rows, self.cols), self.background, dtype=np.int64)
        for e in scene.entities:
            grid[e.cell] = self.encode_entity(e.color, e.shape)
        return TokenGrid(grid, self.visual_vocab)

    def decode_grid(self, grid: TokenGrid) -> list[Entity]:
        """Entities present in a grid; background and invalid ids are dropped."""
        if grid.shape != (self.rows, self.cols):
            raise WorldError("dim-mismatch", f"grid dims {grid.shape} != world dims")
        out = []
        for (r, c), tok in np.ndenumerate(grid.tokens):
            cs = self.decode_token(int(tok))
            if cs is not None:
                out.append(Entity(cs[0], cs[1], (r, c)))
        return sorted(out)

    def decode_scene(self, grid: TokenGrid, seed: int = 0) -> Scene:
        return Scene(tuple(self.decode_grid(grid)), (self.rows, self.cols), seed)

    # -- captions -----------------------------------------------------------
    def _caption_words(self, entities: Sequence[Entity]) -> list[str]:
        if not entities:
            return ["nothing"]
        groups = Counter((e.color, e.shape, self.region_of(e.cell)) for e in sorted(entities))
        # canonical order: color, shape, then the region of the group's first cell
        phrases = []
        for (color, shape, region), n in sorted(groups.items()):
            noun = self.shapes[shape] if n == 1 else self.plural[shape]
            phrases.append([COUNT_WORDS[n - 1], self.colors[color], noun, "at", REGION_NAMES[region]])
        words = []
        for i, p in enumerate(phrases):
            if i:
                words.append("and")
            words.extend(p)
        return words

    def describe_scene(self, scene: Scene) -> TextSequence:
        return self.tokenize(" ".join(self._caption_words(scene.entities)))

    def recaption(self, grid: TokenGrid) -> TextSequence:
        return self.tokenize(" ".join(self._caption_words(self.decode_grid(grid))))

    def parse_caption(self, text: Union[str, TextSequence]) -> Optional[Counter]:
        """Multiset of (color, shape, region) tuples, or None when the text is not a caption."""
        if isinstance(text, TextSequence):
            text = text.rendered
        words = text.split()
        if words == ["nothing"]:
            return Counter()
        out: Counter = Counter()
        i = 0
        while i < len(words):
            if i:
                if words[i] != "and":
                    return None
                i += 1
            chunk = words[i:i + 5]
            if len(chunk) != 5 or chunk[3] != "at":
                return None
            count_w, color_w, noun, _, region_w = chunk
            if count_w not in COUNT_WORDS or color_w not in self.colors or region_w not in REGION_NAMES:
                return None
            n = COUNT_WORDS.index(count_w) + 1
            if n == 1 and noun in self.shapes:
                shape = self.shapes.index(noun)
            elif n > 1 and noun in self.plural:
                shape = self.plural.index(noun)
            else:
                return None
            out[(self.colors.index(color_w), shape, REGION_NAMES.index(region_w))] += n
            i += 5
        return out if out else None

    def caption_tuples(self, scene: Scene) -> Counter:
        return Counter((e.color, e.shape, self.region_of(e.cell)) for e in scene.entities)

    # -- QA -----------------------------------------------------------------
    def make_qa(self, scene: Scene, qtype: str, seed: int, n_choices: int = 4,
                kinds: Sequence[str] = QA_KINDS) -> QAItem:
        if qtype not in (MCQ, OE):
            raise WorldError("bad-qtype", f"qtype must be MCQ or OE, got {qtype!r}")
        if not 2 <= n_choices <= len(LETTERS):
            raise WorldError("bad-config", "n_choices must be in [2, 6]")
        rng = np.random.default_rng([int(seed), 0x0A11])
        kind = str(rng.choice(list(kinds)))
        words, gold, domain = self._question(scene, kind, rng)
        if qtype == OE:
            return QAItem(self.tokenize(" ".join(words)), OE, gold, kind)
        wrong = [v for v in domain if v != gold]
        k = min(n_choices, len(wrong) + 1)
        picks = [wrong[i] for i in rng.choice(len(wrong), size=k - 1, replace=False)]
        slot = int(rng.integers(k))
        choices = picks[:slot] + [gold] + picks[slot:]
        for letter, val in zip(LETTERS, choices):
            words += [letter, val]
        return QAItem(self.tokenize(" ".join(words)), MCQ, LETTERS[slot], kind, tuple(choices))

    def _question(self, scene: Scene, kind: str, rng) -> tuple[list[str], str, list[str]]:
        ents = scene.entities
        classes = scene.classes()
        if kind == "count":
            shape = int(rng.choice(sorted({e.shape for e in ents}))) if rng.random() < 0.75 \
                else int(rng.integers(self.config.n_shapes))
            n = sum(1 for e in ents if e.shape == shape)
            return (["how", "many", self.plural[shape], "are", "there", "?"], str(n),
                    [str(i) for i in range(min(10, max(6, len(ents) + 3)))])
        if kind == "color":
            # a shape whose entities all share one color
            shapes = sorted(s for s in {e.shape for e in ents}
                            if len({e.color for e in ents if e.shape == s}) == 1)
            if shapes:
                shape = int(rng.choice(shapes))
                color = next(e.color for e in ents if e.shape == shape)
                return (["what", "color", "is", "the", self.shapes[shape], "?"],
                        self.colors[color], list(self.colors))
            kind = "exists"
        if kind == "position":
            singles = sorted(k for k, v in classes.items() if v == 1)
            if singles:
                color, shape = singles[int(rng.integers(len(singles)))]
                e = next(e for e in ents if (e.color, e.shape) == (color, shape))
                return (["where", "is", "the", self.colors[color], self.shapes[shape], "?"],
                        REGION_NAMES[self.region_of(e.cell)], list(REGION_NAMES))
            kind = "exists"
        if kind == "exists":
            if rng.random() < 0.5:
                color, shape = sorted(classes)[int(rng.integers(len(classes)))]
            else:
                color = int(rng.integers(self.config.n_colors))
                shape = int(rng.integers(self.config.n_shapes))
            ans = "yes" if (color, shape) in classes else "no"
            return (["is", "there", "a", self.colors[color], self.shapes[shape], "?"], ans, ["yes", "no"])
        raise WorldError("bad-qa-kind", f"unknown question kind {kind!r}")

    def make_sample(self, seed: int, difficulty: int, qtype: str, n_choices: int = 4,
                    kinds: Sequence[str] = QA_KINDS) -> Sample:
        scene = self.generate_scene(seed, difficulty)
        return Sample(scene, self.render_scene(scene), self.describe_scene(scene),
                      self.make_qa(scene, qtype, seed, n_choices, kinds))

    # -- embeddings ---------------------------------------------------------
    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.config.seed, 0xE3BED])
        d = self.config.embed_dim
        text = rng.standard_normal((self.text_vocab, d))
        concept = {w: text[self.word_to_id[w]] for w in self.colors + self.shapes + ("nothing",)}
        raw = rng.standard_normal((self.visual_vocab, d))
        a = self.config.concept_tying
        raw[0] += a * concept["nothing"]
        for color in range(self.config.n_colors):
            for shape in range(self.config.n_shapes):
                tok = self.encode_entity(color, shape)
                raw[tok] += a * (concept[self.colors[color]] + concept[self.shapes[shape]])
        text = text / np.linalg.norm(text, axis=1, keepdims=True)
        vis = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        text.setflags(write=False)
        vis.setflags(write=False)
        return text, vis

    @property
    def text_table(self) -> np.ndarray:
        return self._tables[0]

    @property
    def visual_table(self) -> np.ndarray:
        return self._tables[1]

    def tables_hash(self) -> str:
        h = hashlib.sha256()
        for t in self._tables:
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def embed(self, seq: Union[TextSequence, TokenGrid]) -> np.ndarray:
        if isinstance(seq, TokenGrid):
            ids, table = seq.flat(), self.visual_table
        else:
            ids, table = np.asarray(seq.tokens, dtype=np.int64), self.text_table
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise WorldError("unknown-token", "token id outside embedding table")
        return table[ids]


def load_world_config(path) -> WorldConfig:
    with open(path) as f:
        return WorldConfig.from_dict(json.load(f))
