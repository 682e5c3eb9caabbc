import json
from collections import Counter

import numpy as np
import pytest

from drforge import codec, dataset
from drforge.codec import (
    BOS,
    EOS,
    NO,
    TASK_CLASSIFICATION,
    TASK_LOCALIZATION,
    TASK_REPORT,
    TASK_SEGMENTATION,
    Vocab,
    YES,
    decode_box,
    decode_polygon,
    decode_text,
)
from drforge.dataset import (
    DatasetError,
    EmptyTaskPool,
    ParseError,
    QARecord,
    RecordSet,
    TaskMix,
    build_corpus_triplets,
    build_triplets,
    gen_synthetic_corpus,
    load_corpus,
    read_records,
    records_from_studies,
    sample_batch,
    save_corpus,
    split_by_patient,
    write_records,
)
from drforge.geometry import BBox, box_iou, compute_ctr, compute_pcr
from drforge.prompts import pcr_band


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic_corpus(seed=11, n_studies=32)


@pytest.fixture(scope="module")
def vocab(corpus):
    texts = [s.report.normalized for s in corpus]
    texts += ["yes no finding , ; mild moderate severe left right bilateral apical mid base"
              " pneumothorax pleural effusion pneumonia cardiomegaly"]
    return Vocab.build(texts, n_bins=200)


@pytest.fixture(scope="module")
def triplets(corpus, vocab):
    trips, skipped = build_corpus_triplets(corpus, vocab)
    return trips


class TestBuildTriplets:
    def test_localization_triplet_shape(self, corpus, vocab):
        study = next(s for s in corpus if "Pneumonia" in s.boxes)
        trips = build_triplets(study, vocab, modes={TASK_LOCALIZATION})
        pneu = [t for t in trips if "pneumonia" in t.instruction.lower()]
        assert pneu and pneu[0].instruction == "Where is pneumonia?"
        assert len(pneu[0].target) == 6  # BOS + 4 coords + EOS
        box = decode_box(list(pneu[0].target), vocab)
        assert box_iou(box, study.boxes["Pneumonia"][0]) > 0.9

    def test_healthy_study_answers_no(self, vocab):
        study = next(s for s in gen_synthetic_corpus(seed=2, n_studies=40,
                                                     p_pneumo=0.1, p_effusion=0.1,
                                                     p_pneumonia=0.1, p_cardiomegaly=0.1)
                     if not s.labels)
        trips = build_triplets(study, vocab, modes={TASK_CLASSIFICATION})
        yn = [t for t in trips if t.target == (BOS, NO, EOS)]
        assert yn, "healthy study must carry a NO question"
        open_q = [t for t in trips if t.instruction.startswith("What disease")]
        assert decode_text(list(open_q[0].target), vocab) == "no finding"

    def test_segmentation_token_counts(self, corpus, vocab):
        study = corpus[0]
        trips = build_triplets(study, vocab, modes={TASK_SEGMENTATION})
        # heart and both lungs always present
        assert len(trips) >= 3
        for t in trips:
            assert len(t.target) == 62  # BOS + 60 coords + EOS
            decode_polygon(list(t.target), vocab)

    def test_every_target_decodes(self, triplets, vocab):
        for t in triplets:
            ids = list(t.target)
            if t.task == TASK_LOCALIZATION:
                decode_box(ids, vocab)
            elif t.task == TASK_SEGMENTATION:
                decode_polygon(ids, vocab)
            else:
                decode_text(ids, vocab)

    def test_yes_no_balance(self, corpus, vocab):
        study = next(s for s in corpus if len(s.labels) >= 2)
        trips = build_triplets(study, vocab, modes={TASK_CLASSIFICATION})
        yes = sum(1 for t in trips if t.target == (BOS, YES, EOS))
        no = sum(1 for t in trips if t.target == (BOS, NO, EOS))
        assert yes == len(study.labels)
        assert no == min(yes, len(dataset.CORPUS_ENTITIES) - yes)

    def test_prompt_modes_change_report_instruction(self, corpus, vocab):
        study = next(s for s in corpus if s.labels)
        base = build_triplets(study, vocab, modes={TASK_REPORT},
                              prompt_mode=dataset.PROMPT_BASELINE)
        gt = build_triplets(study, vocab, modes={TASK_REPORT},
                            prompt_mode=dataset.PROMPT_PHRASE_GT)
        assert base[0].instruction == "Please describe this image"
        assert gt[0].instruction.startswith("Please describe this image ; ")
        assert base[0].target == gt[0].target

    def test_deterministic(self, corpus, vocab):
        a = build_triplets(corpus[0], vocab)
        b = build_triplets(corpus[0], vocab)
        assert a == b


class TestTaskMix:
    def test_default_ratios(self):
        mix = TaskMix.DEFAULT
        assert mix.ratios[TASK_LOCALIZATION] == 0.2
        assert mix.ratios[TASK_CLASSIFICATION] == 0.15
        assert mix.ratios[TASK_REPORT] == 0.35
        assert mix.ratios[TASK_SEGMENTATION] == 0.3

    def test_bad_sum_rejected(self):
        with pytest.raises(DatasetError):
            TaskMix({TASK_REPORT: 0.5, TASK_SEGMENTATION: 0.4})

    def test_homogeneous_mix(self, triplets):
        batch = sample_batch(triplets, TaskMix({TASK_REPORT: 1.0}), 32, 5)
        assert all(t.task == TASK_REPORT for t in batch)

    def test_ratio_convergence(self, triplets):
        rng = np.random.default_rng(17)
        batch = sample_batch(triplets, TaskMix.DEFAULT, 100_000, rng)
        counts = Counter(t.task for t in batch)
        # attribute triplets ride in the classification bucket
        got_cls = (counts[TASK_CLASSIFICATION] + counts[codec.TASK_ATTRIBUTE]) / 100_000
        assert abs(counts[TASK_LOCALIZATION] / 100_000 - 0.2) < 0.01
        assert abs(got_cls - 0.15) < 0.01
        assert abs(counts[TASK_REPORT] / 100_000 - 0.35) < 0.01
        assert abs(counts[TASK_SEGMENTATION] / 100_000 - 0.3) < 0.01

    def test_deterministic_given_seed(self, triplets):
        a = sample_batch(triplets, TaskMix.DEFAULT, 64, 9)
        b = sample_batch(triplets, TaskMix.DEFAULT, 64, 9)
        assert a == b

    def test_empty_pool_raises(self, triplets):
        reports_only = [t for t in triplets if t.task == TASK_REPORT]
        with pytest.raises(EmptyTaskPool):
            sample_batch(reports_only, TaskMix.DEFAULT, 8, 1)


class TestSplit:
    def test_ten_patients(self, corpus):
        train, val, test = split_by_patient(corpus[:10], seed=4)
        assert (len(train), len(val), len(test)) == (7, 1, 2)

    def test_single_patient_all_train(self, corpus):
        items = [corpus[0]]
        train, val, test = split_by_patient(items, seed=4)
        assert train == items and not val and not test

    def test_exact_partition_no_patient_spans(self, corpus):
        train, val, test = split_by_patient(corpus, seed=4)
        ids = [s.image_id for s in train + val + test]
        assert sorted(ids) == sorted(s.image_id for s in corpus)
        sets = [{s.patient_id for s in part} for part in (train, val, test)]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])

    def test_shuffled_input_same_split(self, corpus):
        rng = np.random.default_rng(0)
        shuffled = list(corpus)
        rng.shuffle(shuffled)
        a = split_by_patient(corpus, seed=4)
        b = split_by_patient(shuffled, seed=4)
        assert [{s.image_id for s in part} for part in a] == \
            [{s.image_id for s in part} for part in b]


class TestRecords:
    def test_round_trip_lossless(self, corpus, vocab, triplets, tmp_path):
        rs = records_from_studies(corpus, triplets, vocab)
        first = tmp_path / "first"
        second = tmp_path / "second"
        first.mkdir(), second.mkdir()
        paths1 = write_records(rs, first)
        rs2 = read_records(first)
        paths2 = write_records(rs2, second)
        for name in paths1:
            assert (first / paths1[name].split("/")[-1]).read_bytes() == \
                (second / paths2[name].split("/")[-1]).read_bytes(), name

    def test_detection_row_format(self, tmp_path):
        rs = RecordSet(detection=[("img1", "pneumonia", BBox(0.1, 0.2, 0.3, 0.4))])
        write_records(rs, tmp_path)
        rows = (tmp_path / "detection.csv").read_text().strip().splitlines()
        assert rows[0] == "ImageID,Disease,BBox"
        assert rows[1] == 'img1,pneumonia,"[0.1, 0.2, 0.3, 0.4]"'

    def test_hand_written_jsonl_parses_to_localization(self, tmp_path):
        for name in ("pneumothorax.csv", "cardiac_lung.csv", "detection.csv"):
            header = {"pneumothorax.csv": "ImageID,Contour",
                      "cardiac_lung.csv": "ImageID,Structure,Contour",
                      "detection.csv": "ImageID,Disease,BBox"}[name]
            (tmp_path / name).write_text(header + "\n")
        (tmp_path / "finetune.jsonl").write_text(json.dumps({
            "image_id": "img9", "question": "Where is pneumonia?",
            "answer": "[0.1, 0.2, 0.3, 0.4]"}) + "\n")
        rs = read_records(tmp_path)
        task, payload = rs.finetune[0].parsed()
        assert task == TASK_LOCALIZATION
        assert payload == BBox(0.1, 0.2, 0.3, 0.4)

    def test_parse_error_carries_line(self, tmp_path):
        (tmp_path / "pneumothorax.csv").write_text("ImageID,Contour\nimgX,not-a-list\n")
        (tmp_path / "cardiac_lung.csv").write_text("ImageID,Structure,Contour\n")
        (tmp_path / "detection.csv").write_text("ImageID,Disease,BBox\n")
        (tmp_path / "finetune.jsonl").write_text("")
        with pytest.raises(ParseError, match="pneumothorax.csv:2"):
            read_records(tmp_path)

    def test_qa_answer_kinds(self):
        assert QARecord("i", "Is pneumonia in this image?", "yes").parsed() == \
            (TASK_CLASSIFICATION, True)
        assert QARecord("i", "What is the level of the pneumothorax?", "mild").parsed() == \
            (codec.TASK_ATTRIBUTE, "mild")
        assert QARecord("i", "Please describe this image", "no pneumothorax .").parsed() == \
            (TASK_REPORT, "no pneumothorax .")
        task, poly = QARecord("i", "Please segment the heart from the given image",
                              "[" + ", ".join(["0.5"] * 60) + "]").parsed()
        assert task == TASK_SEGMENTATION


class TestSyntheticCorpus:
    def test_same_seed_byte_identical(self):
        a = gen_synthetic_corpus(seed=5, n_studies=6)
        b = gen_synthetic_corpus(seed=5, n_studies=6)
        for x, y in zip(a, b):
            assert np.array_equal(x.image, y.image)
            assert x.report == y.report and x.labels == y.labels

    def test_boxes_match_pixel_extent_oracle(self, corpus):
        intensity = {"Pneumothorax": 0.04, "Effusion": 0.60, "Pneumonia": 0.52}
        checked = 0
        for s in corpus:
            h, w = s.image.shape
            for entity, value in intensity.items():
                if entity not in s.boxes:
                    continue
                rows, cols = np.nonzero(np.isclose(s.image, value))
                oracle = BBox(cols.min() / w, rows.min() / h,
                              (cols.max() + 1) / w, (rows.max() + 1) / h)
                assert box_iou(s.boxes[entity][0], oracle) == 1.0
                checked += 1
        assert checked > 10

    def test_ctr_band_matches_report(self, corpus):
        for s in corpus:
            rep = compute_ctr(s.contours["Heart"], s.contours["LungLeft"],
                              s.contours["LungRight"])
            named = [p.severity for p in s.gt_phrases() if p.entity == "Cardiomegaly"]
            assert rep.band == (named[0] if named else "Normal"), s.image_id

    def test_pcr_band_matches_report(self, corpus):
        seen = 0
        for s in corpus:
            if "Pneumothorax" not in s.contours:
                continue
            rep = compute_pcr(s.contours["Pneumothorax"], s.contours["LungLeft"],
                              s.contours["LungRight"])
            sev = [p.severity for p in s.gt_phrases() if p.entity == "Pneumothorax"][0]
            assert pcr_band(rep.ratio) == sev, s.image_id
            seen += 1
        assert seen > 3

    def test_boxed_entities_in_labels(self, corpus):
        for s in corpus:
            assert set(s.boxes) <= set(s.labels)

    def test_corpus_save_load_round_trip(self, corpus, tmp_path):
        path = tmp_path / "corpus.npz"
        save_corpus(corpus, path)
        back = load_corpus(path)
        for a, b in zip(corpus, back):
            assert a.image_id == b.image_id
            assert np.array_equal(a.image, b.image)
            assert a.report == b.report
            assert a.labels == b.labels
            assert a.boxes == b.boxes
            assert a.contours == b.contours
