"""Dataset construction: instruction triplets for all four tasks, mixed-task
batch sampling, patient-level splits, the CSV/JSON record formats, and a
synthetic desk-scale corpus whose labels, boxes, contours and reports are
mutually consistent by construction.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import (
    TASK_ATTRIBUTE,
    TASK_CLASSIFICATION,
    TASK_LOCALIZATION,
    TASK_REPORT,
    TASK_SEGMENTATION,
    TEMPLATES,
    Vocab,
    render_instruction,
)
from .geometry import BBox, Polygon, format_flat, parse_flat, rasterize, resample_contour
from .prompts import PROMPT_BASELINE, PROMPT_PHRASE, PROMPT_PHRASE_GT, box_to_location
from .reports import (
    CANONICAL_SURFACE,
    ENTITIES,
    POSITIVE,
    CleanReport,
    FindingPhrase,
    RawReport,
    extract_phrases,
    phrase_to_text,
    preprocess_report,
)

STRUCTURES = ("Heart", "LungLeft", "LungRight", "Pneumothorax")
STRUCTURE_SURFACE = {"Heart": "heart", "LungLeft": "left lung",
                     "LungRight": "right lung", "Pneumothorax": "pneumothorax"}

# entities the synthetic generator can draw; negative questions sample from these
CORPUS_ENTITIES = ("Cardiomegaly", "Pneumonia", "Effusion", "Pneumothorax")


class DatasetError(ValueError):
    pass


class EmptyTaskPool(DatasetError):
    pass


class MissingAnnotation(DatasetError):
    pass


class ParseError(DatasetError):
    pass


@dataclass
class Study:
    image_id: str
    patient_id: str
    image: np.ndarray  # (H, W) grayscale in [0, 1]
    report: CleanReport
    labels: frozenset
    boxes: dict  # entity -> list[BBox]
    contours: dict  # structure name -> Polygon

    def __post_init__(self):
        for entity in self.boxes:
            if entity not in self.labels:
                raise DatasetError(f"boxed entity {entity} missing from labels")

    def gt_phrases(self) -> list[FindingPhrase]:
        return [p for p in extract_phrases(self.report) if p.presence == POSITIVE]


@dataclass(frozen=True)
class InstructionTriplet:
    image_id: str
    task: str
    instruction: str
    instr_ids: tuple
    target: tuple

    @classmethod
    def make(cls, image_id, task, instruction, vocab, target):
        ids = codec.encode_instruction(task, instruction, vocab)
        return cls(image_id=image_id, task=task, instruction=instruction,
                   instr_ids=tuple(ids), target=tuple(target))


@dataclass(frozen=True)
class TaskMix:
    ratios: dict

    DEFAULT = None  # filled below

    def __post_init__(self):
        total = sum(self.ratios.values())
        if abs(total - 1.0) > 1e-9:
            raise DatasetError(f"task mix sums to {total}, not 1")
        for task in self.ratios:
            if task not in codec.TASKS:
                raise DatasetError(f"unknown task {task!r} in mix")


TaskMix.DEFAULT = TaskMix({TASK_LOCALIZATION: 0.2, TASK_CLASSIFICATION: 0.15,
                           TASK_REPORT: 0.35, TASK_SEGMENTATION: 0.3})


def _study_rng(image_id: str, salt: int = 0) -> np.random.Generator:
    # deterministic across processes, unlike hash()
    return np.random.default_rng(zlib.crc32(image_id.encode()) + salt)


def corpus_vocab(studies, n_bins: int = 1000) -> Vocab:
    """Vocabulary covering every string the triplet builder can emit for
    these studies: reports, instruction templates, entity and structure
    surfaces, attribute words and list punctuation."""
    from .reports import SEVERITIES
    texts = [s.report.normalized for s in studies]
    texts.extend(t.pattern for t in TEMPLATES.values())
    texts.extend(CANONICAL_SURFACE.values())
    texts.extend(STRUCTURE_SURFACE.values())
    texts.extend(w.lower() for w in SEVERITIES)
    texts.append("left right bilateral apical mid base upper lower")
    texts.append("no finding ; , .")
    return Vocab.build(texts, n_bins=n_bins)


def render_location(location) -> str:
    """Location set as words, laterality before zone (parser-invertible)."""
    probe = FindingPhrase("Pneumonia", POSITIVE, None, frozenset(location))
    words = phrase_to_text(probe).rsplit(" pneumonia", 1)[0]
    return "" if words == "pneumonia" else words.strip()


def report_instruction(prompt: str) -> str:
    base = render_instruction(TEMPLATES["report"])
    return f"{base} ; {prompt}" if prompt else base


def build_triplets(study: Study, vocab: Vocab, modes=None,
                   prompt_mode: str = PROMPT_BASELINE,
                   negative_pool=CORPUS_ENTITIES, skipped=None) -> list[InstructionTriplet]:
    """All task triplets for one study. `skipped` (optional dict) counts
    tasks requested without ground truth instead of raising."""
    modes = set(modes) if modes else set(codec.TASKS)
    skipped = skipped if skipped is not None else {}
    out = []
    phrases = study.gt_phrases()
    positives = [e for e in ENTITIES if e in study.labels]

    if TASK_CLASSIFICATION in modes:
        if positives:
            answer = " , ".join(CANONICAL_SURFACE[e] for e in positives)
        else:
            answer = "no finding"
        out.append(InstructionTriplet.make(
            study.image_id, TASK_CLASSIFICATION,
            render_instruction(TEMPLATES["classification"]), vocab,
            codec.encode_text(answer, vocab)))
        rng = _study_rng(study.image_id)
        for e in positives:
            out.append(InstructionTriplet.make(
                study.image_id, TASK_CLASSIFICATION,
                render_instruction(TEMPLATES["yes_no"], [CANONICAL_SURFACE[e]]),
                vocab, codec.encode_yes_no(True)))
        absent = [e for e in negative_pool if e not in study.labels]
        n_neg = max(1, len(positives)) if absent else 0
        picks = rng.choice(len(absent), size=min(n_neg, len(absent)), replace=False) if absent else []
        for idx in sorted(picks):
            out.append(InstructionTriplet.make(
                study.image_id, TASK_CLASSIFICATION,
                render_instruction(TEMPLATES["yes_no"], [CANONICAL_SURFACE[absent[idx]]]),
                vocab, codec.encode_yes_no(False)))

    if TASK_ATTRIBUTE in modes:
        for p in phrases:
            surface = CANONICAL_SURFACE[p.entity]
            if p.severity:
                out.append(InstructionTriplet.make(
                    study.image_id, TASK_ATTRIBUTE,
                    render_instruction(TEMPLATES["severity"], [surface]), vocab,
                    codec.encode_text(p.severity.lower(), vocab)))
            if p.location:
                out.append(InstructionTriplet.make(
                    study.image_id, TASK_ATTRIBUTE,
                    render_instruction(TEMPLATES["location"], [surface]), vocab,
                    codec.encode_text(render_location(p.location), vocab)))

    if TASK_LOCALIZATION in modes:
        if not study.boxes:
            skipped[TASK_LOCALIZATION] = skipped.get(TASK_LOCALIZATION, 0) + 1
        for entity in ENTITIES:
            for box in study.boxes.get(entity, []):
                out.append(InstructionTriplet.make(
                    study.image_id, TASK_LOCALIZATION,
                    render_instruction(TEMPLATES["localization"], [CANONICAL_SURFACE[entity]]),
                    vocab, codec.encode_box(box, vocab)))

    if TASK_SEGMENTATION in modes:
        if not study.contours:
            skipped[TASK_SEGMENTATION] = skipped.get(TASK_SEGMENTATION, 0) + 1
        for structure in STRUCTURES:
            poly = study.contours.get(structure)
            if poly is None:
                continue
            out.append(InstructionTriplet.make(
                study.image_id, TASK_SEGMENTATION,
                render_instruction(TEMPLATES["segmentation"], [STRUCTURE_SURFACE[structure]]),
                vocab, codec.encode_polygon(resample_contour(poly, 30), vocab)))

    if TASK_REPORT in modes:
        if prompt_mode == PROMPT_BASELINE:
            prompt = ""
        elif prompt_mode in (PROMPT_PHRASE, PROMPT_PHRASE_GT):
            # training-time prompts come from the ground-truth report
            prompt = " ; ".join(phrase_to_text(p) for p in phrases)
        else:
            raise DatasetError(f"unknown prompt mode {prompt_mode!r}")
        out.append(InstructionTriplet.make(
            study.image_id, TASK_REPORT, report_instruction(prompt), vocab,
            codec.encode_text(study.report.normalized, vocab)))
    return out


def build_corpus_triplets(studies, vocab, modes=None, prompt_mode=PROMPT_BASELINE,
                          negative_pool=CORPUS_ENTITIES):
    skipped: dict = {}
    triplets = []
    for study in studies:
        triplets.extend(build_triplets(study, vocab, modes, prompt_mode,
                                       negative_pool, skipped))
    return triplets, skipped


def sample_batch(pool, mix: TaskMix, batch_size: int, rng) -> list:
    """Per-slot task drawn categorically by the mix ratios, then a uniform
    triplet of that task. Attribute triplets ride in the classification
    bucket unless the mix itemizes them."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    tasks = [t for t in codec.TASKS if t in mix.ratios]
    buckets = {t: [] for t in tasks}
    fold_attribute = TASK_ATTRIBUTE not in mix.ratios and TASK_CLASSIFICATION in mix.ratios
    for trip in pool:
        task = trip.task
        if task == TASK_ATTRIBUTE and fold_attribute:
            task = TASK_CLASSIFICATION
        if task in buckets:
            buckets[task].append(trip)
    for t in tasks:
        if not buckets[t]:
            raise EmptyTaskPool(f"no triplets for task {t!r}")
    probs = np.array([mix.ratios[t] for t in tasks])
    draws = rng.choice(len(tasks), size=batch_size, p=probs)
    batch = []
    for d in draws:
        bucket = buckets[tasks[d]]
        batch.append(bucket[rng.integers(len(bucket))])
    return batch


def split_by_patient(items, ratios=(7, 1, 2), seed: int = 0, key=None):
    """Partition items by patient so no patient spans splits; patient counts
    match the target ratios to within one patient."""
    key = key or (lambda s: s.patient_id)
    patients = sorted({key(s) for s in items})
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)
    total = sum(ratios)
    n = len(patients)
    c1 = round(n * ratios[0] / total)
    c2 = round(n * (ratios[0] + ratios[1]) / total)
    assign = {}
    for i, p in enumerate(patients):
        assign[p] = 0 if i < c1 else (1 if i < c2 else 2)
    splits: tuple[list, list, list] = ([], [], [])
    for s in items:
        splits[assign[key(s)]].append(s)
    return splits


# ---------------------------------------------------------------------------
# record formats: three CSVs plus a question/answer JSON-lines file
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QARecord:
    image_id: str
    question: str
    answer: str

    def parsed(self):
        """(task, payload): bracket lists decode to boxes/polygons, yes/no to
        classification booleans, anything else stays text."""
        text = self.answer.strip()
        if text.startswith("["):
            vals = parse_flat(text)
            if len(vals) == 4:
                return TASK_LOCALIZATION, BBox(*vals)
            if len(vals) == 60:
                return TASK_SEGMENTATION, Polygon.from_flat(vals)
            raise ParseError(f"bracket answer with {len(vals)} numbers")
        if text in ("yes", "no"):
            return TASK_CLASSIFICATION, text == "yes"
        q = self.question.lower()
        if q.startswith("what is the level") or q.startswith("where is the"):
            return TASK_ATTRIBUTE, text
        if q.startswith("please describe"):
            return TASK_REPORT, text
        return TASK_CLASSIFICATION, text


@dataclass
class RecordSet:
    pneumothorax: list = field(default_factory=list)  # (image_id, Polygon)
    cardiac_lung: list = field(default_factory=list)  # (image_id, structure, Polygon)
    detection: list = field(default_factory=list)     # (image_id, entity, BBox)
    finetune: list = field(default_factory=list)      # QARecord


def records_from_studies(studies, triplets=None, vocab: Vocab | None = None) -> RecordSet:
    rs = RecordSet()
    for s in studies:
        for structure in ("Heart", "LungLeft", "LungRight"):
            poly = s.contours.get(structure)
            if poly is not None:
                rs.cardiac_lung.append((s.image_id, STRUCTURE_SURFACE[structure], poly))
        if "Pneumothorax" in s.contours:
            rs.pneumothorax.append((s.image_id, s.contours["Pneumothorax"]))
        for entity in ENTITIES:
            for box in s.boxes.get(entity, []):
                rs.detection.append((s.image_id, CANONICAL_SURFACE[entity], box))
    if triplets:
        if vocab is None:
            raise DatasetError("need a vocab to serialize triplet answers")
        for t in triplets:
            rs.finetune.append(QARecord(t.image_id, t.instruction,
                                        _answer_string(t, vocab)))
    return rs


def _answer_string(triplet: InstructionTriplet, vocab: Vocab) -> str:
    ids = list(triplet.target)
    if triplet.task == TASK_LOCALIZATION:
        return format_flat(codec.decode_box(ids, vocab).as_list())
    if triplet.task == TASK_SEGMENTATION:
        return format_flat(codec.decode_polygon(ids, vocab).as_flat())
    return codec.decode_text(ids, vocab)


def write_records(rs: RecordSet, out_dir) -> dict:
    import os
    paths = {
        "pneumothorax": os.path.join(out_dir, "pneumothorax.csv"),
        "cardiac_lung": os.path.join(out_dir, "cardiac_lung.csv"),
        "detection": os.path.join(out_dir, "detection.csv"),
        "finetune": os.path.join(out_dir, "finetune.jsonl"),
    }
    with open(paths["pneumothorax"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ImageID", "Contour"])
        for image_id, poly in rs.pneumothorax:
            w.writerow([image_id, format_flat(poly.as_flat())])
    with open(paths["cardiac_lung"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ImageID", "Structure", "Contour"])
        for image_id, structure, poly in rs.cardiac_lung:
            w.writerow([image_id, structure, format_flat(poly.as_flat())])
    with open(paths["detection"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ImageID", "Disease", "BBox"])
        for image_id, disease, box in rs.detection:
            w.writerow([image_id, disease, format_flat(box.as_list())])
    with open(paths["finetune"], "w", encoding="utf-8") as fh:
        for qa in rs.finetune:
            fh.write(json.dumps({"image_id": qa.image_id, "question": qa.question,
                                 "answer": qa.answer}) + "\n")
    return paths


def _read_csv(path, n_cols):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "ImageID":
            raise ParseError(f"{path}:1: expected ImageID header")
        for line_no, row in enumerate(reader, 2):
            if len(row) != n_cols:
                raise ParseError(f"{path}:{line_no}: expected {n_cols} columns")
            rows.append((line_no, row))
    return rows


def read_records(out_dir) -> RecordSet:
    import os
    rs = RecordSet()
    for line_no, row in _read_csv(os.path.join(out_dir, "pneumothorax.csv"), 2):
        try:
            rs.pneumothorax.append((row[0], Polygon.from_flat(parse_flat(row[1]))))
        except ValueError as exc:
            raise ParseError(f"pneumothorax.csv:{line_no}: {exc}") from exc
    for line_no, row in _read_csv(os.path.join(out_dir, "cardiac_lung.csv"), 3):
        try:
            rs.cardiac_lung.append((row[0], row[1], Polygon.from_flat(parse_flat(row[2]))))
        except ValueError as exc:
            raise ParseError(f"cardiac_lung.csv:{line_no}: {exc}") from exc
    for line_no, row in _read_csv(os.path.join(out_dir, "detection.csv"), 3):
        try:
            rs.detection.append((row[0], row[1], BBox(*parse_flat(row[2]))))
        except ValueError as exc:
            raise ParseError(f"detection.csv:{line_no}: {exc}") from exc
    path = os.path.join(out_dir, "finetune.jsonl")
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rs.finetune.append(QARecord(obj["image_id"], obj["question"], obj["answer"]))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ParseError(f"finetune.jsonl:{line_no}: {exc}") from exc
    return rs


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _ellipse(cx, cy, rx, ry, n=48, start=0.0) -> Polygon:
    angles = start + np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    xs = np.clip(cx + rx * np.cos(angles), 0.0, 1.0)
    ys = np.clip(cy + ry * np.sin(angles), 0.0, 1.0)
    return Polygon.from_points(zip(xs, ys))


def _wedge(cx, cy, rx, ry, theta0, theta1, s_out, s_in, n=14) -> Polygon:
    outer = np.linspace(theta0, theta1, n)
    inner = outer[::-1]
    pts = [(cx + s_out * rx * np.cos(a), cy + s_out * ry * np.sin(a)) for a in outer]
    pts += [(cx + s_in * rx * np.cos(a), cy + s_in * ry * np.sin(a)) for a in inner]
    arr = np.clip(np.array(pts), 0.0, 1.0)
    return Polygon.from_points(arr)


def _base_band(cx, cy, rx, ry, frac, n=16) -> Polygon:
    """Slice of the lung ellipse below the horizontal cut at depth `frac`."""
    y_cut = cy + ry * (1.0 - 2.0 * frac)
    s = (y_cut - cy) / ry  # in (-1, 1)
    a1 = np.arcsin(np.clip(s, -1, 1))
    a0 = np.pi - a1
    angles = np.linspace(a1, a0, n)[::-1]  # bottom arc, left to right reversed
    pts = [(cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in angles]
    arr = np.clip(np.array(pts), 0.0, 1.0)
    return Polygon.from_points(arr)


def _pixel_extent_box(mask) -> BBox:
    rows, cols = np.nonzero(mask.bits)
    h, w = mask.bits.shape
    return BBox(cols.min() / w, rows.min() / h, (cols.max() + 1) / w, (rows.max() + 1) / h)


def _paint(canvas, poly, value, size):
    canvas[rasterize(poly, size, size).bits] = value


# geometry is drawn from small snapped grids: band values sit well inside
# the cut points (ratios recomputed from quantized 30-point contours cannot
# flip bands) and the discrete families keep the polygon token sequences
# shared across studies at desk scale
PCR_TARGETS = {"Mild": (0.05, 0.065), "Moderate": (0.18, 0.24), "Severe": (0.40, 0.42)}
CTR_TARGETS = {"Normal": (0.45, 0.47), "Mild": (0.527, 0.533),
               "Moderate": (0.57, 0.58), "Severe": (0.63, 0.66)}
EFFUSION_FRACS = {"Mild": (0.16, 0.19), "Moderate": (0.28, 0.32), "Severe": (0.42, 0.46)}
HIDDEN_EFFUSION_FRACS = (0.16, 0.22, 0.28, 0.34, 0.40, 0.46)
PNEUMONIA_RADII = {"Mild": (0.048, 0.052), "Moderate": (0.062, 0.066), "Severe": (0.074, 0.078)}

LUNG_RY = (0.25, 0.27, 0.29)
LUNG_RX = (0.135, 0.15)
CHEST_CY = (0.51, 0.53)
LUNG_LCX = (0.31, 0.325)
HEART_RY = (0.13, 0.145)
HEART_DROP = (0.09, 0.10)
BLOB_DX = (-0.015, 0.0, 0.015)


def _pick(rng, values):
    return values[rng.integers(len(values))]


def _draw(rng, values, jitter: bool):
    """Snapped grid value, or a uniform draw over the grid's envelope."""
    if jitter:
        return rng.uniform(min(values), max(values))
    return _pick(rng, values)


def gen_synthetic_corpus(seed: int, n_studies: int, image_size: int = 64,
                         p_pneumo: float = 0.4, p_effusion: float = 0.45,
                         p_pneumonia: float = 0.4, p_cardiomegaly: float = 0.5,
                         hidden_effusion_severity: bool = False,
                         fingerprint: bool = True,
                         jitter: bool = False) -> list[Study]:
    """Procedural chest studies: lung/heart ellipses, optional pneumothorax
    wedge, effusion base band and pneumonia blob. Severity bands are drawn
    inside band interiors and every location word equals what
    box_to_location derives from the rendered geometry, so all task labels
    are mutually consistent.

    With hidden_effusion_severity the effusion severity word is drawn
    independently of the rendered band thickness, so report text cannot be
    predicted from pixels alone for that attribute. `fingerprint` stamps a
    unique corner id per study (memorization aid); `jitter` draws geometry
    continuously over the grid envelopes instead of snapping."""
    if n_studies < 1:
        raise DatasetError("n_studies must be >= 1")
    rng = np.random.default_rng(seed)
    studies = []
    for i in range(n_studies):
        studies.append(_gen_study(rng, f"s{i:04d}", f"p{i:04d}", image_size,
                                  p_pneumo, p_effusion, p_pneumonia, p_cardiomegaly,
                                  hidden_effusion_severity, study_index=i,
                                  fingerprint=fingerprint, jitter=jitter))
    return studies


def _gen_study(rng, image_id, patient_id, size, p_pneumo, p_effusion,
               p_pneumonia, p_cardiomegaly, hidden_effusion_severity=False,
               study_index: int = 0, fingerprint: bool = True,
               jitter: bool = False) -> Study:
    lung_ry = _draw(rng, LUNG_RY, jitter)
    lung_rx = _draw(rng, LUNG_RX, jitter)
    cy = _draw(rng, CHEST_CY, jitter)
    lcx = _draw(rng, LUNG_LCX, jitter)
    rcx = round(1.0 - lcx, 6)
    lung_l = _ellipse(lcx, cy, lung_rx, lung_ry)
    lung_r = _ellipse(rcx, cy, lung_rx, lung_ry)
    chest_w = (rcx + lung_rx) - (lcx - lung_rx)

    if rng.random() < p_cardiomegaly:
        heart_band = ["Mild", "Moderate", "Severe"][rng.integers(3)]
    else:
        heart_band = "Normal"
    ratio = _draw(rng, CTR_TARGETS[heart_band], jitter)
    heart_rx = ratio * chest_w / 2.0
    heart_ry = _draw(rng, HEART_RY, jitter)
    heart_cy = cy + _draw(rng, HEART_DROP, jitter)
    heart = _ellipse(0.5 * (lcx + rcx), heart_cy, heart_rx, heart_ry)

    contours = {"Heart": heart, "LungLeft": lung_l, "LungRight": lung_r}
    # lesions are painted last so their rendered extents are never occluded
    canvas = np.full((size, size), 0.12)
    _paint(canvas, lung_l, 0.30, size)
    _paint(canvas, lung_r, 0.30, size)
    _paint(canvas, heart, 0.75, size)
    # per-study fingerprint block in the top-left corner: geometry families
    # repeat across studies at desk scale, so the corner pixels carry a
    # unique id without touching any annotated structure
    if fingerprint:
        bits = np.array([(study_index >> k) & 1 for k in range(9)], dtype=float)
        cell = max(1, size // 32)
        block = np.kron(bits.reshape(3, 3) * 0.7 + 0.15, np.ones((cell, cell)))
        canvas[cell:cell + 3 * cell, cell:cell + 3 * cell] = block

    labels = set()
    boxes: dict = {}
    phrases: list[FindingPhrase] = []

    def lesion_location(poly):
        mask = rasterize(poly, size, size)
        box = _pixel_extent_box(mask)
        return box, frozenset(box_to_location(box, lung_l, lung_r).locations)

    pneumo_side = None
    pneumo_sev = None
    if rng.random() < p_pneumo:
        from .geometry import polygon_area
        from .prompts import pcr_band
        pneumo_side = "Left" if rng.random() < 0.5 else "Right"
        band_draw = ["Mild", "Moderate", "Severe"][rng.integers(3)]
        target = _draw(rng, PCR_TARGETS[band_draw], jitter)
        cx, sgn = (lcx, -1.0) if pneumo_side == "Left" else (rcx, 1.0)
        span = {"Mild": 1.2, "Moderate": 2.0, "Severe": 3.1}[band_draw]
        s_out = 0.96
        s_in = np.sqrt(max(s_out ** 2 - 2 * np.pi * target / span, 0.01))
        mid = -np.pi / 2 + sgn * span / 2  # wedge hugs the upper outer arc
        wedge = _wedge(cx, cy, lung_rx, lung_ry, mid - span / 2, mid + span / 2,
                       s_out, s_in)
        contours["Pneumothorax"] = wedge
        _paint(canvas, wedge, 0.04, size)
        box, loc = lesion_location(wedge)
        labels.add("Pneumothorax")
        boxes["Pneumothorax"] = [box]
        # severity named in the report comes from the realized geometry
        lung_poly = lung_l if pneumo_side == "Left" else lung_r
        pneumo_sev = pcr_band(polygon_area(wedge) / polygon_area(lung_poly))
        phrases.append(FindingPhrase("Pneumothorax", POSITIVE, pneumo_sev, loc))

    effusion_sides: set = set()
    if rng.random() < p_effusion:
        choices = ["Left", "Right", "Bilateral"]
        if pneumo_side is not None and pneumo_sev != "Mild":
            # larger wedges reach the base; keep effusion on the other lung
            choices = ["Right"] if pneumo_side == "Left" else ["Left"]
        side = choices[rng.integers(len(choices))]
        sev = ["Mild", "Moderate", "Severe"][rng.integers(3)]
        if hidden_effusion_severity:
            frac = _draw(rng, HIDDEN_EFFUSION_FRACS, jitter)  # thickness says nothing about the word
        else:
            frac = _draw(rng, EFFUSION_FRACS[sev], jitter)
        effusion_sides = {"Left", "Right"} if side == "Bilateral" else {side}
        merged = np.zeros((size, size), dtype=bool)
        for scx in sorted(effusion_sides):
            band = _base_band(lcx if scx == "Left" else rcx, cy, lung_rx, lung_ry, frac)
            _paint(canvas, band, 0.60, size)
            merged |= rasterize(band, size, size).bits
        from .geometry import Mask
        box = _pixel_extent_box(Mask(size, size, merged))
        loc = frozenset(box_to_location(box, lung_l, lung_r).locations)
        labels.add("Effusion")
        boxes["Effusion"] = [box]
        phrases.append(FindingPhrase("Effusion", POSITIVE, sev, loc))

    if rng.random() < p_pneumonia:
        if pneumo_side is not None:
            side = "Right" if pneumo_side == "Left" else "Left"
        else:
            side = "Left" if rng.random() < 0.5 else "Right"
        cx = lcx if side == "Left" else rcx
        zones = [-0.55] if side in effusion_sides else [-0.55, 0.0, 0.55]
        bcy = cy + zones[rng.integers(len(zones))] * lung_ry
        sev = ["Mild", "Moderate", "Severe"][rng.integers(3)]
        radius = _draw(rng, PNEUMONIA_RADII[sev], jitter)
        blob = _ellipse(cx + _draw(rng, BLOB_DX, jitter), bcy, radius, radius, n=24)
        _paint(canvas, blob, 0.52, size)
        box, loc = lesion_location(blob)
        labels.add("Pneumonia")
        boxes["Pneumonia"] = [box]
        phrases.append(FindingPhrase("Pneumonia", POSITIVE, sev, loc))

    if heart_band != "Normal":
        labels.add("Cardiomegaly")
        heart_mask = rasterize(heart, size, size)
        boxes["Cardiomegaly"] = [_pixel_extent_box(heart_mask)]
        phrases.append(FindingPhrase("Cardiomegaly", POSITIVE, heart_band, frozenset()))

    order = {e: k for k, e in enumerate(ENTITIES)}
    phrases.sort(key=lambda p: order[p.entity])
    sentences = [phrase_to_text(p) + "." for p in phrases]
    if "Pneumothorax" not in labels:
        sentences.append("no pneumothorax.")
    if not phrases:
        sentences.insert(0, "no acute cardiopulmonary process.")
    raw = RawReport(image_id, "FINDINGS: " + " ".join(sentences))
    report = preprocess_report(raw, max_len=128)

    return Study(image_id=image_id, patient_id=patient_id, image=canvas,
                 report=report, labels=frozenset(labels), boxes=boxes,
                 contours=contours)


# ---------------------------------------------------------------------------
# corpus persistence (npz + json manifest)
# ---------------------------------------------------------------------------

def save_corpus(studies, path) -> None:
    arrays = {f"image_{s.image_id}": s.image for s in studies}
    meta = []
    for s in studies:
        meta.append({
            "image_id": s.image_id,
            "patient_id": s.patient_id,
            "report": {"study_id": s.report.study_id, "findings": s.report.findings,
                       "impression": s.report.impression, "normalized": s.report.normalized,
                       "token_count": s.report.token_count,
                       "missing_sections": s.report.missing_sections},
            "labels": sorted(s.labels),
            "boxes": {e: [b.as_list() for b in bs] for e, bs in s.boxes.items()},
            "contours": {k: p.as_flat() for k, p in s.contours.items()},
        })
    np.savez_compressed(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_corpus(path) -> list[Study]:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    studies = []
    for m in meta:
        rep = m["report"]
        studies.append(Study(
            image_id=m["image_id"], patient_id=m["patient_id"],
            image=data[f"image_{m['image_id']}"],
            report=CleanReport(study_id=rep["study_id"], findings=rep["findings"],
                               impression=rep["impression"], normalized=rep["normalized"],
                               token_count=rep["token_count"],
                               missing_sections=rep["missing_sections"]),
            labels=frozenset(m["labels"]),
            boxes={e: [BBox(*b) for b in bs] for e, bs in m["boxes"].items()},
            contours={k: Polygon.from_flat(flat) for k, flat in m["contours"].items()},
        ))
    return studies
