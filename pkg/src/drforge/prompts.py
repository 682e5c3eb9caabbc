"""Fuse multi-task predictions into the phrase prompt appended to the
report-generation instruction, with the baseline / phrase / phrase-GT
ablation modes.

Geometry-derived severities win: the CTR band owns cardiomegaly (and may
assert it on its own), the PCR band owns pneumothorax severity for an
already-asserted pneumothorax. Box-derived locations refine every lung
lesion; cardiomegaly is never assigned a lung zone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import BBox, CTRReport, PCRReport, Polygon
from .reports import ENTITIES, LEFT, LOWER, MID, POSITIVE, RIGHT, UPPER
from .reports import BILATERAL, FindingPhrase, phrase_to_text

PROMPT_BASELINE = "Baseline"
PROMPT_PHRASE = "Phrase"
PROMPT_PHRASE_GT = "PhraseGT"
PROMPT_MODES = (PROMPT_BASELINE, PROMPT_PHRASE, PROMPT_PHRASE_GT)


class PromptError(ValueError):
    pass


class MissingGroundTruth(PromptError):
    pass


@dataclass(frozen=True)
class LocationResult:
    locations: frozenset
    outside_lungs: bool = False


@dataclass
class TaskOutputs:
    entities: list = field(default_factory=list)   # positive FindingPhrases
    boxes: dict = field(default_factory=dict)      # entity -> BBox
    ctr: CTRReport | None = None
    pcr: PCRReport | None = None

    def __post_init__(self):
        for p in self.entities:
            if p.presence != POSITIVE:
                raise PromptError(f"non-positive phrase for {p.entity} in TaskOutputs")


def pcr_band(ratio: float) -> str:
    """Pneumothorax severity from the compression ratio (config convention:
    Mild < 0.1 <= Moderate < 0.35 <= Severe)."""
    if ratio < 0.1:
        return "Mild"
    if ratio < 0.35:
        return "Moderate"
    return "Severe"


def box_to_location(b: BBox, lung_left: Polygon, lung_right: Polygon) -> LocationResult:
    """Laterality from lung containment of the box centroid (a box whose x
    span covers both lung centroids is Bilateral); vertical zone from the
    centroid row inside the chosen lung extent, split into thirds. A
    centroid outside both lungs falls back to the nearer lung centroid
    (ties to Left) and is flagged."""
    cx, cy = b.centroid
    lb, rb = lung_left.bbox(), lung_right.bbox()
    lcx, lcy = lung_left.centroid
    rcx, rcy = lung_right.centroid
    outside = False
    if b.x1 <= lcx <= b.x2 and b.x1 <= rcx <= b.x2:
        lat = BILATERAL
        extent = BBox(min(lb.x1, rb.x1), min(lb.y1, rb.y1),
                      max(lb.x2, rb.x2), max(lb.y2, rb.y2))
    elif lb.x1 <= cx <= lb.x2 and lb.y1 <= cy <= lb.y2:
        lat, extent = LEFT, lb
    elif rb.x1 <= cx <= rb.x2 and rb.y1 <= cy <= rb.y2:
        lat, extent = RIGHT, rb
    else:
        outside = True
        dl = (cx - lcx) ** 2 + (cy - lcy) ** 2
        dr = (cx - rcx) ** 2 + (cy - rcy) ** 2
        lat, extent = (LEFT, lb) if dl <= dr else (RIGHT, rb)
    third = (extent.y2 - extent.y1) / 3.0
    if cy < extent.y1 + third:
        zone = UPPER
    elif cy < extent.y1 + 2 * third:
        zone = MID
    else:
        zone = LOWER
    return LocationResult(locations=frozenset({lat, zone}), outside_lungs=outside)


_ORDER = {e: i for i, e in enumerate(ENTITIES)}


def _canonical(phrases) -> list[FindingPhrase]:
    """First phrase per entity after a permutation-stable sort."""
    ranked = sorted(phrases, key=lambda p: (
        _ORDER[p.entity], p.severity or "", tuple(sorted(p.location))))
    seen = {}
    for p in ranked:
        seen.setdefault(p.entity, p)
    return [seen[e] for e in ENTITIES if e in seen]


def build_prompt(outputs: TaskOutputs, mode: str,
                 gt: list | None = None, lungs: tuple | None = None) -> str:
    """Semicolon-joined phrase list for the report instruction.

    Baseline is empty; PhraseGT renders the ground-truth phrases and ignores
    the model outputs; Phrase renders classifier entities refined by the
    localization boxes and the CTR/PCR post-processing.
    """
    if mode == PROMPT_BASELINE:
        return ""
    if mode == PROMPT_PHRASE_GT:
        if gt is None:
            raise MissingGroundTruth("PhraseGT mode needs ground-truth phrases")
        return " ; ".join(phrase_to_text(p) for p in _canonical(gt))
    if mode != PROMPT_PHRASE:
        raise PromptError(f"unknown prompt mode {mode!r}")

    merged = {p.entity: p for p in _canonical(outputs.entities)}
    if lungs is not None:
        for entity, box in outputs.boxes.items():
            if entity == "Cardiomegaly" or entity not in merged:
                continue
            loc = box_to_location(box, lungs[0], lungs[1])
            old = merged[entity]
            merged[entity] = FindingPhrase(entity, POSITIVE, old.severity, loc.locations)
    if outputs.pcr is not None and "Pneumothorax" in merged:
        old = merged["Pneumothorax"]
        merged["Pneumothorax"] = FindingPhrase(
            "Pneumothorax", POSITIVE, pcr_band(outputs.pcr.ratio), old.location)
    if outputs.ctr is not None:
        band = outputs.ctr.band
        if band == "Normal":
            merged.pop("Cardiomegaly", None)
        else:
            old = merged.get("Cardiomegaly")
            merged["Cardiomegaly"] = FindingPhrase(
                "Cardiomegaly", POSITIVE, band,
                old.location if old else frozenset())
    ordered = [merged[e] for e in ENTITIES if e in merged]
    return " ; ".join(phrase_to_text(p) for p in ordered)
