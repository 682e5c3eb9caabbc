"""Evaluation statistics: AUC, F1/ACC with threshold search, localization
ACC@IoU and mIoU, BLEU, ROUGE-L, a simplified METEOR, and the clinical
efficacy (CE) entity and attribute metrics computed through the report
parser.

All scores lie in [0, 1]. Text metrics tokenize with the artifact's own
tokenizer so numbers are consistent with the token-level model output.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter

from .codec import tokenize
from .geometry import box_iou
from .reports import extract_phrases, positive_entities

# canonical entity ordering for deterministic per-entity tables
from .reports import ENTITIES, POSITIVE, UNCERTAIN


class MetricError(ValueError):
    pass


class SingleClass(MetricError):
    pass


class EmptyReference(MetricError):
    pass


def _score_label(case):
    if hasattr(case, "score"):
        return float(case.score), int(case.label)
    s, y = case
    return float(s), int(y)


def auc(cases) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    pairs = [_score_label(c) for c in cases]
    if not pairs:
        raise MetricError("no cases")
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} pos / {n_neg} neg")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0  # 1-based average rank of the tie block
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    rank_sum = sum(r for r, y in zip(ranks, labels) if y == 1)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _f1_acc_at(pairs, thr):
    tp = sum(1 for s, y in pairs if s >= thr and y == 1)
    fp = sum(1 for s, y in pairs if s >= thr and y == 0)
    fn = sum(1 for s, y in pairs if s < thr and y == 1)
    tn = len(pairs) - tp - fp - fn
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    acc = (tp + tn) / len(pairs)
    return f1, acc


def f1_acc(cases, threshold: float | None = None) -> dict:
    """F1/ACC at a threshold; absent threshold is chosen by exhaustive
    midpoint scan maximizing F1 (ties resolved to the lower threshold)."""
    pairs = [_score_label(c) for c in cases]
    if not pairs:
        raise MetricError("no cases")
    labels = {y for _, y in pairs}
    if labels != {0, 1}:
        raise SingleClass(f"need both classes, got labels {sorted(labels)}")
    if threshold is None:
        uniq = sorted({s for s, _ in pairs})
        candidates = [uniq[0] - 1.0]
        candidates += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
        candidates.append(uniq[-1] + 1.0)
        best = None
        for thr in candidates:  # ascending, so ties keep the lower threshold
            f1, acc = _f1_acc_at(pairs, thr)
            if best is None or f1 > best[0] + 1e-15:
                best = (f1, acc, thr)
        f1, acc, threshold = best
    else:
        f1, acc = _f1_acc_at(pairs, threshold)
    return {"f1": f1, "acc": acc, "threshold": threshold}


def localization_scores(cases, iou_thr: float = 0.5) -> dict:
    """cases: iterable of (predicted BBox, truth BBox) or objects with
    .predicted/.truth; returns ACC at the IoU threshold and mean IoU."""
    ious = []
    for case in cases:
        if hasattr(case, "predicted"):
            pred, truth = case.predicted, case.truth
        else:
            pred, truth = case
        ious.append(box_iou(pred, truth))
    if not ious:
        raise MetricError("no cases")
    acc = sum(1 for v in ious if v >= iou_thr) / len(ious)
    return {"acc": acc, "miou": sum(ious) / len(ious)}


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(generated: str, reference: str, max_n: int = 4) -> float:
    """Clipped n-gram precision with geometric mean over 1..max_n and the
    brevity penalty. No smoothing: a zero precision at any order gives 0.
    The order is capped at the shorter sentence length so identical short
    sentences still score 1."""
    ref = tokenize(reference)
    if not ref:
        raise EmptyReference("reference tokenizes to nothing")
    hyp = tokenize(generated)
    if not hyp:
        return 0.0
    top = min(max_n, len(hyp), len(ref))
    log_sum = 0.0
    for n in range(1, top + 1):
        h = _ngram_counts(hyp, n)
        r = _ngram_counts(ref, n)
        clipped = sum(min(c, r[g]) for g, c in h.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / sum(h.values()))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_sum / top)


def rouge_l(generated: str, reference: str, beta: float = 1.2) -> float:
    """LCS-based F-measure with the standard beta weighting."""
    ref = tokenize(reference)
    if not ref:
        raise EmptyReference("reference tokenizes to nothing")
    hyp = tokenize(generated)
    if not hyp:
        return 0.0
    # LCS length by dynamic programming
    prev = [0] * (len(ref) + 1)
    for h in hyp:
        cur = [0] * (len(ref) + 1)
        for j, r in enumerate(ref, 1):
            cur[j] = prev[j - 1] + 1 if h == r else max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


_STEM_SUFFIXES = ("ing", "ies", "es", "ed", "s")


def _light_stem(word: str) -> str:
    for suf in _STEM_SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            return word[:-len(suf)]
    return word


def meteor_simplified(generated: str, reference: str, alpha: float = 0.9,
                      beta: float = 3.0, gamma: float = 0.5) -> float:
    """Unigram alignment (exact, then suffix-stemmed), recall-weighted
    harmonic mean and a fragmentation penalty.

    Fragmentation uses (chunks - 1) / (matches - 1) so identical inputs
    score exactly 1; this is the documented simplification.
    """
    ref = tokenize(reference)
    if not ref:
        raise EmptyReference("reference tokenizes to nothing")
    hyp = tokenize(generated)
    if not hyp:
        return 0.0
    ref_used = [False] * len(ref)
    align = [None] * len(hyp)  # hyp index -> ref index
    for stage in ("exact", "stem"):
        for i, h in enumerate(hyp):
            if align[i] is not None:
                continue
            for j, r in enumerate(ref):
                if ref_used[j]:
                    continue
                hit = h == r if stage == "exact" else _light_stem(h) == _light_stem(r)
                if hit:
                    align[i] = j
                    ref_used[j] = True
                    break
    matched = [(i, j) for i, j in enumerate(align) if j is not None]
    m = len(matched)
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(matched, matched[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    frag = (chunks - 1) / (m - 1) if m > 1 else 0.0
    return f_mean * (1.0 - gamma * frag ** beta)


def _pair(p):
    if hasattr(p, "generated"):
        return p.generated, p.reference
    return p


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "tp": tp, "fp": fp, "fn": fn}


def ce_metrics(pairs, uncertain_as_positive: bool = True) -> dict:
    """Clinical efficacy: study-level positive entity sets extracted from the
    generated and reference reports, scored per entity plus micro/macro.
    Macro averages over entities present in at least one reference."""
    for p in pairs:
        if not tokenize(_pair(p)[1]):
            raise EmptyReference("reference report is empty")
    counts = {e: {"tp": 0, "fp": 0, "fn": 0} for e in ENTITIES}
    for p in pairs:
        gen_text, ref_text = _pair(p)
        gen = positive_entities(extract_phrases(gen_text), uncertain_as_positive)
        ref = positive_entities(extract_phrases(ref_text), uncertain_as_positive)
        for e in gen | ref:
            if e in gen and e in ref:
                counts[e]["tp"] += 1
            elif e in gen:
                counts[e]["fp"] += 1
            else:
                counts[e]["fn"] += 1
    per_entity = {e: _prf(**c) for e, c in counts.items() if sum(c.values()) > 0}
    micro = _prf(sum(c["tp"] for c in counts.values()),
                 sum(c["fp"] for c in counts.values()),
                 sum(c["fn"] for c in counts.values()))
    in_ref = [e for e in ENTITIES
              if counts[e]["tp"] + counts[e]["fn"] > 0]
    if in_ref:
        macro = {k: sum(per_entity[e][k] for e in in_ref) / len(in_ref)
                 for k in ("precision", "recall", "f1")}
    else:
        macro = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    return {"per_entity": per_entity, "micro": micro, "macro": macro}


def _first_positive(phrases, uncertain_as_positive=True):
    keep = {POSITIVE, UNCERTAIN} if uncertain_as_positive else {POSITIVE}
    out = {}
    for p in phrases:
        if p.presence in keep and p.entity not in out:
            out[p.entity] = p
    return out


def attribute_acc(pairs, uncertain_as_positive: bool = True) -> dict:
    """ACC_S / ACC_L over entities asserted positive in both reports: the
    fraction whose severity (resp. location set) matches the reference,
    weighted by reference frequency for the aggregate means."""
    per = {e: {"sev_hit": 0, "sev_n": 0, "loc_hit": 0, "loc_n": 0} for e in ENTITIES}
    for p in pairs:
        gen_text, ref_text = _pair(p)
        gen = _first_positive(extract_phrases(gen_text), uncertain_as_positive)
        ref = _first_positive(extract_phrases(ref_text), uncertain_as_positive)
        for e, ref_phrase in ref.items():
            if e not in gen:
                continue
            per[e]["sev_n"] += 1
            per[e]["sev_hit"] += int(gen[e].severity == ref_phrase.severity)
            per[e]["loc_n"] += 1
            per[e]["loc_hit"] += int(gen[e].location == ref_phrase.location)
    per_entity = {}
    for e, c in per.items():
        if c["sev_n"] == 0:
            continue
        per_entity[e] = {
            "acc_severity": c["sev_hit"] / c["sev_n"],
            "acc_location": c["loc_hit"] / c["loc_n"],
            "n": c["sev_n"],
        }
    total_n = sum(v["n"] for v in per_entity.values())
    if total_n:
        acc_s = sum(v["acc_severity"] * v["n"] for v in per_entity.values()) / total_n
        acc_l = sum(v["acc_location"] * v["n"] for v in per_entity.values()) / total_n
    else:
        acc_s = acc_l = 0.0
    return {"per_entity": per_entity, "acc_severity": acc_s, "acc_location": acc_l}


def write_metrics_json(path, metrics: dict, config: dict | None = None,
                       counts: dict | None = None) -> None:
    """{metric: {value, n, config}}; n comes from the counts map (matched by
    the metric's family prefix when there is no exact entry)."""
    counts = counts or {}

    def n_for(name):
        if name in counts:
            return counts[name]
        return counts.get(name.split("/")[0])

    payload = {name: {"value": value, "n": n_for(name), "config": config or {}}
               for name, value in metrics.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def write_metrics_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name in sorted(metrics):
            writer.writerow([name, metrics[name]])
