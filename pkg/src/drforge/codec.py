"""Unified discrete token vocabulary and the bidirectional serialization of
every task target (text, labels, boxes, polygons) into token sequences, plus
instruction template rendering.

Token id layout is dense and collision-free: specials first, then text
tokens, then coordinate bin tokens, with ids equal to positions.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

from .geometry import BBox, Polygon

TASK_CLASSIFICATION = "classification"
TASK_ATTRIBUTE = "attribute"
TASK_LOCALIZATION = "localization"
TASK_SEGMENTATION = "segmentation"
TASK_REPORT = "report"
TASKS = (TASK_CLASSIFICATION, TASK_ATTRIBUTE, TASK_LOCALIZATION,
         TASK_SEGMENTATION, TASK_REPORT)

PAD, BOS, EOS, SEP, UNK, YES, NO = range(7)
_BASE_SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>", "<yes>", "<no>")
SPECIALS = _BASE_SPECIALS + tuple(f"<task:{t}>" for t in TASKS)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class CodecError(ValueError):
    pass


class OutOfRange(CodecError):
    pass


class MalformedSequence(CodecError):
    pass


class ArityMismatch(CodecError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation split; the artifact's only text tokenizer."""
    return _TOKEN_RE.findall(text.lower())


def quantize(x: float, n_bins: int) -> int:
    if not (0.0 <= x <= 1.0):
        raise OutOfRange(f"coordinate {x} outside [0,1]")
    # epsilon so exact decimal boundaries (0.3 * 1000) floor as in real arithmetic
    return min(int(math.floor(x * n_bins + 1e-11)), n_bins - 1)


def dequantize(b: int, n_bins: int) -> float:
    if not (0 <= b < n_bins):
        raise OutOfRange(f"bin {b} outside [0,{n_bins})")
    return (b + 0.5) / n_bins


class Vocab:
    """Immutable token table over specials, text tokens and coordinate bins."""

    def __init__(self, text_tokens, n_bins: int = 1000):
        if n_bins < 2:
            raise CodecError(f"n_bins {n_bins} < 2")
        self.text_tokens = tuple(text_tokens)
        self.n_bins = n_bins
        self.n_specials = len(SPECIALS)
        self._text_base = self.n_specials
        self._coord_base = self.n_specials + len(self.text_tokens)
        self._text_id = {tok: self._text_base + i for i, tok in enumerate(self.text_tokens)}
        if len(self._text_id) != len(self.text_tokens):
            raise CodecError("duplicate text tokens")

    @classmethod
    def build(cls, corpus, n_bins: int = 1000) -> "Vocab":
        words = set()
        for text in corpus:
            words.update(tokenize(text))
        return cls(sorted(words), n_bins=n_bins)

    def __len__(self) -> int:
        return self._coord_base + self.n_bins

    def task_marker(self, task: str) -> int:
        if task not in TASKS:
            raise CodecError(f"unknown task {task!r}")
        return len(_BASE_SPECIALS) + TASKS.index(task)

    def text_id(self, token: str) -> int:
        return self._text_id.get(token, UNK)

    def coord_id(self, b: int) -> int:
        if not (0 <= b < self.n_bins):
            raise OutOfRange(f"bin {b} outside [0,{self.n_bins})")
        return self._coord_base + b

    def is_special(self, i: int) -> bool:
        return 0 <= i < self.n_specials

    def is_text(self, i: int) -> bool:
        return self._text_base <= i < self._coord_base

    def is_coord(self, i: int) -> bool:
        return self._coord_base <= i < len(self)

    def bin_of(self, i: int) -> int:
        if not self.is_coord(i):
            raise MalformedSequence(f"id {i} is not a coordinate token")
        return i - self._coord_base

    def token_string(self, i: int) -> str:
        if self.is_special(i):
            return SPECIALS[i]
        if self.is_text(i):
            return self.text_tokens[i - self._text_base]
        if self.is_coord(i):
            return f"<bin_{i - self._coord_base}>"
        raise CodecError(f"id {i} outside vocab of size {len(self)}")

    def to_manifest(self) -> str:
        return json.dumps({"text_tokens": list(self.text_tokens),
                           "n_bins": self.n_bins,
                           "specials": list(SPECIALS)})

    @classmethod
    def from_manifest(cls, payload: str) -> "Vocab":
        obj = json.loads(payload)
        if tuple(obj["specials"]) != SPECIALS:
            raise CodecError("manifest specials do not match this build")
        return cls(obj["text_tokens"], n_bins=obj["n_bins"])


def _check_framing(ids, what: str):
    if len(ids) < 2 or ids[0] != BOS or ids[-1] != EOS:
        raise MalformedSequence(f"{what}: sequence lacks BOS...EOS framing")
    return list(ids[1:-1])


def encode_box(b: BBox, vocab: Vocab) -> list[int]:
    coords = (b.x1, b.y1, b.x2, b.y2)
    return [BOS] + [vocab.coord_id(quantize(c, vocab.n_bins)) for c in coords] + [EOS]


def decode_box(ids, vocab: Vocab) -> BBox:
    payload = _check_framing(ids, "box")
    if len(payload) != 4:
        raise MalformedSequence(f"box payload length {len(payload)} != 4")
    vals = [dequantize(vocab.bin_of(i), vocab.n_bins) for i in payload]
    x1, x2 = sorted((vals[0], vals[2]))  # quantization may invert near-equal corners
    y1, y2 = sorted((vals[1], vals[3]))
    return BBox(x1, y1, x2, y2)


def encode_polygon(p: Polygon, vocab: Vocab, n_points: int = 30) -> list[int]:
    if len(p.vertices) != n_points:
        raise CodecError(f"polygon has {len(p.vertices)} vertices, expected {n_points}")
    ids = [BOS]
    for x, y in p.vertices:
        ids.append(vocab.coord_id(quantize(x, vocab.n_bins)))
        ids.append(vocab.coord_id(quantize(y, vocab.n_bins)))
    ids.append(EOS)
    return ids


def decode_polygon(ids, vocab: Vocab, n_points: int = 30) -> Polygon:
    payload = _check_framing(ids, "polygon")
    if len(payload) != 2 * n_points:
        raise MalformedSequence(
            f"polygon payload length {len(payload)} != {2 * n_points}")
    vals = [dequantize(vocab.bin_of(i), vocab.n_bins) for i in payload]
    return Polygon.from_flat(vals)


def encode_text(text: str, vocab: Vocab) -> list[int]:
    return [BOS] + [vocab.text_id(t) for t in tokenize(text)] + [EOS]


def decode_text(ids, vocab: Vocab) -> str:
    payload = _check_framing(ids, "text")
    words = []
    for i in payload:
        if i in (YES, NO):
            words.append("yes" if i == YES else "no")
        elif vocab.is_text(i) or i == UNK:
            words.append(vocab.token_string(i))
        else:
            raise MalformedSequence(f"id {i} is not a text token")
    return " ".join(words)


def encode_yes_no(answer: bool) -> list[int]:
    return [BOS, YES if answer else NO, EOS]


@dataclass(frozen=True)
class InstructionTemplate:
    task: str
    pattern: str

    @property
    def arity(self) -> int:
        return self.pattern.count("{}")


TEMPLATES = {
    "classification": InstructionTemplate(TASK_CLASSIFICATION,
                                          "What disease does this image have?"),
    "yes_no": InstructionTemplate(TASK_CLASSIFICATION, "Is {} in this image?"),
    "localization": InstructionTemplate(TASK_LOCALIZATION, "Where is {}?"),
    "segmentation": InstructionTemplate(TASK_SEGMENTATION,
                                        "Please segment the {} from the given image"),
    "report": InstructionTemplate(TASK_REPORT, "Please describe this image"),
    "severity": InstructionTemplate(TASK_ATTRIBUTE, "What is the level of the {}?"),
    "location": InstructionTemplate(TASK_ATTRIBUTE, "Where is the {}?"),
}


def render_instruction(template: InstructionTemplate, slots=()) -> str:
    slots = tuple(slots)
    if len(slots) != template.arity:
        raise ArityMismatch(
            f"template {template.pattern!r} takes {template.arity} slots, got {len(slots)}")
    return template.pattern.format(*slots)


def encode_instruction(task: str, text: str, vocab: Vocab) -> list[int]:
    """Instruction token sequence: BOS, task marker, words, EOS."""
    return [BOS, vocab.task_marker(task)] + [vocab.text_id(t) for t in tokenize(text)] + [EOS]
