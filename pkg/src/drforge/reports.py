"""Report normalization and rule-based finding extraction.

Turns raw radiology text into a cleaned body (findings/impression located,
comparison and lateral-view sentences dropped), then extracts disease
entities with presence, severity and location attributes using fixed
keyword tables. Extraction is deterministic and pure; the same tables back
the canonical phrase renderer used for prompts and synthetic reports.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .codec import tokenize

POSITIVE = "Positive"
NEGATIVE = "Negative"
UNCERTAIN = "Uncertain"

MILD = "Mild"
MODERATE = "Moderate"
SEVERE = "Severe"
SEVERITIES = (MILD, MODERATE, SEVERE)

LEFT = "Left"
RIGHT = "Right"
BILATERAL = "Bilateral"
UPPER = "Upper/Apical"
MID = "Mid"
LOWER = "Lower/Base"
LATERALITIES = (LEFT, RIGHT, BILATERAL)
ZONES = (UPPER, MID, LOWER)

ENTITIES = (
    "Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Effusion",
    "Emphysema", "Fibrosis", "Hernia", "Infiltration", "Mass", "Nodule",
    "PleuralThickening", "Pneumonia", "Pneumothorax", "Opacity", "Fracture",
    "SupportDevices",
)

# canonical surface used when rendering a phrase back to text
CANONICAL_SURFACE = {
    "Atelectasis": "atelectasis",
    "Cardiomegaly": "cardiomegaly",
    "Consolidation": "consolidation",
    "Edema": "edema",
    "Effusion": "pleural effusion",
    "Emphysema": "emphysema",
    "Fibrosis": "fibrosis",
    "Hernia": "hernia",
    "Infiltration": "infiltration",
    "Mass": "mass",
    "Nodule": "nodule",
    "PleuralThickening": "pleural thickening",
    "Pneumonia": "pneumonia",
    "Pneumothorax": "pneumothorax",
    "Opacity": "opacity",
    "Fracture": "fracture",
    "SupportDevices": "support devices",
}

# surface token tuples -> entity; gated surfaces only fire next to a
# negation cue or a positivity marker (enlarged / severity word)
_SURFACES: dict[tuple[str, ...], tuple[str, bool]] = {}


def _add_surface(entity, *forms, gated=False):
    for form in forms:
        _SURFACES[tuple(form.split())] = (entity, gated)


_add_surface("Atelectasis", "atelectasis")
_add_surface("Cardiomegaly", "cardiomegaly", "enlarged heart")
_add_surface("Cardiomegaly", "cardiac silhouette", "heart size", gated=True)
_add_surface("Consolidation", "consolidation", "consolidations")
_add_surface("Edema", "edema", "pulmonary edema")
_add_surface("Effusion", "pleural effusion", "pleural effusions", "effusion", "effusions")
_add_surface("Emphysema", "emphysema")
_add_surface("Fibrosis", "fibrosis")
_add_surface("Hernia", "hernia", "hiatal hernia")
_add_surface("Infiltration", "infiltration", "infiltrate", "infiltrates")
_add_surface("Mass", "mass", "masses")
_add_surface("Nodule", "nodule", "nodules")
_add_surface("PleuralThickening", "pleural thickening")
_add_surface("Pneumonia", "pneumonia")
_add_surface("Pneumothorax", "pneumothorax", "pneumothoraces")
_add_surface("Opacity", "opacity", "opacities", "opacification")
_add_surface("Fracture", "fracture", "fractures", "rib fracture", "rib fractures")
_add_surface("SupportDevices", "support devices", "support device",
             "endotracheal tube", "central venous catheter", "pacemaker")

_MAX_SURFACE_LEN = max(len(k) for k in _SURFACES)

NEGATION_CUES = (("no",), ("without",), ("free", "of"), ("normal",))
UNCERTAINTY_CUES = (("cannot", "exclude"), ("cannot", "be", "excluded"),
                    ("possible",), ("possibly",), ("may",), ("might",),
                    ("questionable",), ("suspected",))
POSITIVITY_MARKERS = {"enlarged", "mild", "moderate", "severe"}

SEVERITY_WORDS = {
    "mild": MILD, "small": MILD, "trace": MILD, "tiny": MILD,
    "moderate": MODERATE,
    "severe": SEVERE, "large": SEVERE, "marked": SEVERE,
}

LOCATION_WORDS = {
    "left": (LEFT,), "right": (RIGHT,), "bilateral": (BILATERAL,), "both": (BILATERAL,),
    "upper": (UPPER,), "apical": (UPPER,),
    "mid": (MID,), "middle": (MID,),
    "lower": (LOWER,), "base": (LOWER,), "basal": (LOWER,), "basilar": (LOWER,),
    "bibasilar": (BILATERAL, LOWER),
}

# clause boundaries; negation carries forward across list-building boundaries
_CLAUSE_BREAKS = {",", ";", "and", "or", "but", "nor"}
_NEGATION_CARRIERS = {",", "or", "nor"}

# sentences mentioning prior studies or lateral views are dropped wholesale
DEFAULT_FILTER_CUES = (("compared",), ("comparison",), ("prior",), ("previous",),
                       ("discussed", "with"), ("lateral", "view"),
                       ("lateral", "image"), ("frontal", "and", "lateral"))

FINDINGS_HEADER = re.compile(r"findings\s*:", re.IGNORECASE)
IMPRESSION_HEADER = re.compile(r"impression\s*:", re.IGNORECASE)


class ReportError(ValueError):
    pass


class NotPositive(ReportError):
    pass


@dataclass(frozen=True)
class RawReport:
    study_id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ReportError(f"empty report text for {self.study_id!r}")


@dataclass(frozen=True)
class CleanReport:
    study_id: str
    findings: str
    impression: str
    normalized: str
    token_count: int
    missing_sections: bool = False


@dataclass(frozen=True)
class FindingPhrase:
    entity: str
    presence: str
    severity: str | None = None
    location: frozenset = frozenset()
    source_span: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.entity not in ENTITIES:
            raise ReportError(f"unknown entity {self.entity!r}")
        if self.presence not in (POSITIVE, NEGATIVE, UNCERTAIN):
            raise ReportError(f"bad presence {self.presence!r}")
        if self.presence == NEGATIVE and (self.severity or self.location):
            raise ReportError("negative phrases carry no attributes")
        if self.entity == "SupportDevices" and self.severity is not None:
            raise ReportError("support devices carry location only")
        object.__setattr__(self, "location", frozenset(self.location))


def _tokens_with_spans(text: str):
    return [(m.group(0), m.start(), m.end())
            for m in re.finditer(r"[a-z0-9]+|[^\sa-z0-9]", text)]


def _split_sentences(text: str) -> list[str]:
    parts = re.findall(r"[^.!?]+[.!?]?", text)
    return [p.strip() for p in parts if p.strip()]


def _contains_cue(tokens: list[str], cues) -> bool:
    for cue in cues:
        n = len(cue)
        for i in range(len(tokens) - n + 1):
            if tuple(tokens[i:i + n]) == cue:
                return True
    return False


def preprocess_report(raw: RawReport, max_len: int = 128,
                      filter_cues=DEFAULT_FILTER_CUES) -> CleanReport:
    """Locate findings/impression, drop prior-study and lateral-view
    sentences, lowercase, collapse whitespace and truncate to max_len tokens
    at a sentence boundary when possible.
    """
    text = raw.text
    f_match = FINDINGS_HEADER.search(text)
    i_match = IMPRESSION_HEADER.search(text)
    findings = impression = ""
    if f_match:
        end = i_match.start() if (i_match and i_match.start() > f_match.end()) else len(text)
        findings = text[f_match.end():end].strip()
    if i_match:
        end = f_match.start() if (f_match and f_match.start() > i_match.end()) else len(text)
        impression = text[i_match.end():end].strip()
    missing = not (f_match or i_match)
    body = " ".join(s for s in (findings, impression) if s) if not missing else text

    kept = []
    for sentence in _split_sentences(body):
        low = re.sub(r"\s+", " ", sentence.lower()).strip()
        toks = [t for t, _, _ in _tokens_with_spans(low)]
        if _contains_cue(toks, filter_cues):
            continue
        kept.append(low)

    out, count = [], 0
    for sentence in kept:
        n = len(tokenize(sentence))
        if out and count + n > max_len:
            break
        if not out and n > max_len:
            # single over-long sentence: hard token cut
            words = tokenize(sentence)[:max_len]
            out.append(" ".join(words))
            count = max_len
            break
        out.append(sentence)
        count += n
    normalized = " ".join(out)
    return CleanReport(study_id=raw.study_id, findings=findings,
                       impression=impression, normalized=normalized,
                       token_count=count, missing_sections=missing)


def _match_entities(tokens: list[tuple[str, int, int]]):
    """Greedy longest-match entity scan; yields (entity, gated, char_span, tok_index)."""
    hits = []
    i = 0
    while i < len(tokens):
        matched = None
        for n in range(min(_MAX_SURFACE_LEN, len(tokens) - i), 0, -1):
            key = tuple(t for t, _, _ in tokens[i:i + n])
            if key in _SURFACES:
                entity, gated = _SURFACES[key]
                matched = (entity, gated, (tokens[i][1], tokens[i + n - 1][2]), i, n)
                break
        if matched:
            hits.append(matched[:4])
            i += matched[4]
        else:
            i += 1
    return hits


def _cue_positions(words: list[str], cues) -> list[int]:
    """Token index of the last word of every cue occurrence."""
    out = []
    for cue in cues:
        n = len(cue)
        for i in range(len(words) - n + 1):
            if tuple(words[i:i + n]) == cue:
                out.append(i + n - 1)
    return out


def extract_phrases(clean, uncertain_as_positive: bool = True) -> list[FindingPhrase]:
    """One FindingPhrase per entity mention; negation and uncertainty cues in
    the same clause flip presence, severity/location keywords attach.

    Accepts a CleanReport or a plain normalized string. The
    uncertain_as_positive flag only affects downstream consumers (kept here
    for signature stability); presence is always reported faithfully.
    """
    text = getattr(clean, "normalized", clean)
    phrases: list[FindingPhrase] = []
    offset = 0
    for sentence in _split_sentences(text):
        start = text.find(sentence, offset)
        offset = start + len(sentence)
        toks = _tokens_with_spans(sentence)
        # carve into clauses, keeping the boundary token that precedes each
        clauses: list[tuple[str | None, list]] = [(None, [])]
        for tok in toks:
            if tok[0] in _CLAUSE_BREAKS:
                clauses.append((tok[0], []))
            else:
                clauses[-1][1].append(tok)
        carried_negation = False
        for boundary, ctoks in clauses:
            words = [t for t, _, _ in ctoks]
            neg_at = _cue_positions(words, NEGATION_CUES)
            uncertain = _contains_cue(words, UNCERTAINTY_CUES)
            inherited = boundary in _NEGATION_CARRIERS and carried_negation and not uncertain
            carried_negation = inherited or bool(neg_at)
            severity = next((SEVERITY_WORDS[w] for w in words if w in SEVERITY_WORDS), None)
            location = frozenset(
                zone for w in words for zone in LOCATION_WORDS.get(w, ()))
            for entity, gated, span, tok_i in _match_entities(ctoks):
                # negation scope: cue earlier in the clause, or carried in
                negated = inherited or any(pos < tok_i for pos in neg_at)
                if gated and not (negated or any(w in POSITIVITY_MARKERS for w in words)):
                    continue
                if uncertain:
                    presence = UNCERTAIN
                elif negated:
                    presence = NEGATIVE
                else:
                    presence = POSITIVE
                sev = severity if presence != NEGATIVE else None
                if entity == "SupportDevices":
                    sev = None
                loc = location if presence != NEGATIVE else frozenset()
                phrases.append(FindingPhrase(
                    entity=entity, presence=presence, severity=sev, location=loc,
                    source_span=(start + span[0], start + span[1])))
    return phrases


def positive_entities(phrases, uncertain_as_positive: bool = True) -> set[str]:
    """Entity set asserted present; Uncertain counts as positive by default."""
    keep = {POSITIVE, UNCERTAIN} if uncertain_as_positive else {POSITIVE}
    return {p.entity for p in phrases if p.presence in keep}


_ZONE_SURFACE = {UPPER: "apical", MID: "mid", LOWER: "base"}
_LAT_ORDER = {LEFT: 0, RIGHT: 1, BILATERAL: 2}
_ZONE_ORDER = {UPPER: 0, MID: 1, LOWER: 2}


def phrase_to_text(p: FindingPhrase) -> str:
    """Canonical surface form: severity, laterality, zone, entity."""
    if p.presence != POSITIVE:
        raise NotPositive(f"cannot render {p.presence} phrase")
    parts = []
    if p.severity:
        parts.append(p.severity.lower())
    lats = sorted((l for l in p.location if l in _LAT_ORDER), key=_LAT_ORDER.get)
    zones = sorted((z for z in p.location if z in _ZONE_ORDER), key=_ZONE_ORDER.get)
    parts.extend(l.lower() for l in lats)
    parts.extend(_ZONE_SURFACE[z] for z in zones)
    parts.append(CANONICAL_SURFACE[p.entity])
    return " ".join(parts)


def read_reports_jsonl(path) -> list[RawReport]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(RawReport(study_id=obj["study_id"], text=obj["text"]))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ReportError(f"{path}:{line_no}: {exc}") from exc
    return out


def write_phrase_subset(path, items) -> None:
    """items: iterable of (study_id, list[FindingPhrase])."""
    with open(path, "w", encoding="utf-8") as fh:
        for study_id, phrases in items:
            fh.write(json.dumps({
                "study_id": study_id,
                "phrases": [{
                    "entity": p.entity,
                    "presence": p.presence,
                    "severity": p.severity,
                    "location": sorted(p.location),
                } for p in phrases],
            }) + "\n")
