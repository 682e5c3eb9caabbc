import itertools
import math

import numpy as np
import pytest

from drforge import dataset
from drforge.autodiff import no_grad
from drforge.codec import BOS, EOS, NO, PAD, Vocab, YES, encode_yes_no
from drforge.dataset import TaskMix, build_corpus_triplets
from drforge.model import (
    BeamHypothesis,
    ModelConfig,
    ModelError,
    NonFiniteLoss,
    PrefixTooLong,
    ShapeMismatch,
    UnifiedModel,
    UnknownToken,
    beam_search,
    beam_search_steps,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)

VOCAB_TEXT = ("what disease does this image have is in where the level of please segment"
              " heart left right lung from given describe ; yes no finding , mild moderate"
              " severe apical mid base bilateral pneumothorax pleural effusion pneumonia"
              " cardiomegaly no acute cardiopulmonary process .")


@pytest.fixture(scope="module")
def corpus():
    return dataset.gen_synthetic_corpus(seed=19, n_studies=6)


@pytest.fixture(scope="module")
def vocab(corpus):
    return Vocab.build([s.report.normalized for s in corpus] + [VOCAB_TEXT], n_bins=100)


@pytest.fixture(scope="module")
def triplets(corpus, vocab):
    trips, _ = build_corpus_triplets(corpus, vocab)
    return trips


@pytest.fixture(scope="module")
def images(corpus):
    return {s.image_id: s.image for s in corpus}


@pytest.fixture(scope="module")
def net(vocab):
    return UnifiedModel(ModelConfig(d=32, n_layers=2, n_heads=2), vocab, seed=1)


class TestConfig:
    def test_feature_grid(self):
        cfg = ModelConfig(image_size=64, patch_size=16)
        assert (cfg.h_f, cfg.w_f, cfg.n_patches) == (4, 4, 16)

    def test_heads_must_divide(self):
        with pytest.raises(ModelError):
            ModelConfig(d=30, n_heads=4)

    def test_paper_preset(self):
        cfg = ModelConfig.paper()
        assert cfg.lr == 1e-5 and cfg.warmup_lr == 1e-7
        assert cfg.dropout == 0.1 and cfg.image_size == 512
        assert cfg.beam_width == 6 and cfg.max_len == 128


class TestEncoders:
    def test_image_feature_shape(self, net, corpus):
        v = net.encode_image(corpus[0].image)
        assert v.shape == (1, 16, 32)

    def test_zero_image_rows_constant(self, net):
        v = net.encode_image(np.zeros((64, 64)))
        rows = v.data[0]
        assert np.abs(rows - rows[0]).max() < 1e-12

    def test_wrong_size_rejected(self, net):
        with pytest.raises(ShapeMismatch):
            net.encode_image(np.zeros((32, 32)))

    def test_single_token_instruction(self, net):
        out = net.encode_instruction(np.array([BOS]))
        assert out.shape == (1, 1, 32)

    def test_permutation_changes_output(self, net, vocab, triplets):
        ids = list(triplets[0].instr_ids)
        swapped = list(ids)
        swapped[2], swapped[3] = swapped[3], swapped[2]
        a = net.encode_instruction(np.array(ids)).data
        b = net.encode_instruction(np.array(swapped)).data
        assert np.abs(a - b).max() > 1e-9

    def test_unknown_token_rejected(self, net, vocab):
        with pytest.raises(UnknownToken):
            net.encode_instruction(np.array([BOS, len(vocab) + 5, EOS]))


class TestDecodeStep:
    def test_causal_future_does_not_leak(self, net, triplets, images):
        t = next(tr for tr in triplets if len(tr.target) >= 6)
        img = images[t.image_id]
        with no_grad():
            v = net.encode_image(img)
            l = net.encode_instruction(np.array(t.instr_ids))
            memory, valid = net.fuse(v, l, np.array([t.instr_ids]))
            base = list(t.target[:5])
            a = net._decoder_logits(memory, valid, np.array([base + [5, 6]]))
            b = net._decoder_logits(memory, valid, np.array([base + [9, 12]]))
        # logits at positions before the change are identical
        assert np.allclose(a.data[0, :4], b.data[0, :4], atol=1e-12)
        assert not np.allclose(a.data[0, 5], b.data[0, 5], atol=1e-12)

    def test_deterministic(self, net, triplets, images):
        t = triplets[1]
        img = images[t.image_id]
        with no_grad():
            v = net.encode_image(img)
            l = net.encode_instruction(np.array(t.instr_ids))
            x = net.decode_step(v, l, np.array([t.instr_ids]), list(t.target[:3])).data
            y = net.decode_step(v, l, np.array([t.instr_ids]), list(t.target[:3])).data
        assert np.array_equal(x, y)

    def test_prefix_too_long(self, net, triplets, images):
        t = triplets[0]
        with no_grad():
            v = net.encode_image(images[t.image_id])
            l = net.encode_instruction(np.array(t.instr_ids))
            with pytest.raises(PrefixTooLong):
                net.decode_step(v, l, np.array([t.instr_ids]),
                                [BOS] + [5] * net.config.max_len)

    def test_memory_gradient_matches_fd(self, vocab, triplets, images):
        cfg = ModelConfig(d=8, n_layers=1, n_heads=2, dropout=0.0)
        small = UnifiedModel(cfg, vocab, seed=3)
        t = triplets[0]
        img = images[t.image_id]
        v = small.encode_image(img)
        l = small.encode_instruction(np.array(t.instr_ids))
        memory, valid = small.fuse(v, l, np.array([t.instr_ids]))
        mem_leaf = type(memory)(memory.data.copy(), requires_grad=True)
        logits = small._decoder_logits(mem_leaf, valid, np.array([list(t.target[:3])]))
        probe = logits[0, 2, 7]
        probe.backward()
        h = 1e-6
        for idx in [(0, 0, 0), (0, 3, 5), (0, memory.shape[1] - 1, 2)]:
            orig = mem_leaf.data[idx]
            vals = []
            for delta in (h, -h):
                mem2 = type(memory)(mem_leaf.data.copy())
                mem2.data[idx] = orig + delta
                with no_grad():
                    out = small._decoder_logits(mem2, valid, np.array([list(t.target[:3])]))
                vals.append(out.data[0, 2, 7])
            fd = (vals[0] - vals[1]) / (2 * h)
            ad = mem_leaf.grad[idx]
            assert abs(ad - fd) / max(abs(ad), abs(fd), 1e-8) < 1e-4


class TestLoss:
    def test_uniform_logits_gives_log_vocab(self, vocab, triplets, images):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, dropout=0.0)
        net = UnifiedModel(cfg, vocab, seed=0)
        net.params["out.w"].data[:] = 0.0
        net.params["out.b"].data[:] = 0.0
        t = triplets[0]
        loss, n = net.loss(images[t.image_id][None], [t.instr_ids], [t.target])
        assert loss.item() == pytest.approx(math.log(len(vocab)), abs=1e-12)
        assert n == len(t.target) - 1

    def test_pad_positions_excluded(self, vocab, triplets, images):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, dropout=0.0)
        net = UnifiedModel(cfg, vocab, seed=0)
        a, b = triplets[0], triplets[2]
        imgs = np.stack([images[a.image_id], images[b.image_id]])
        _, n = net.loss(imgs, [a.instr_ids, b.instr_ids], [a.target, b.target])
        assert n == (len(a.target) - 1) + (len(b.target) - 1)

    def test_single_triplet_memorization_drives_loss_down(self, vocab, triplets, images):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, dropout=0.0, lr=3e-3)
        net = UnifiedModel(cfg, vocab, seed=0)
        t = next(tr for tr in triplets if tr.task == "classification")
        pool = [t]
        curve = train(net, pool, images, steps=150, batch_size=2, seed=0,
                      mix=TaskMix({"classification": 1.0}), target_loss=0.05)
        assert curve[-1][1] < 0.05

    def test_non_finite_loss_raises(self, vocab, triplets, images):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, dropout=0.0)
        net = UnifiedModel(cfg, vocab, seed=0)
        net.params["out.w"].data[0, 0] = np.nan
        with pytest.raises(NonFiniteLoss):
            train(net, triplets[:4], images, steps=1, batch_size=2, seed=0,
                  mix=TaskMix({"classification": 1.0}))


def fd_gradient(evaluate, p, idx, h=1e-3):
    """Fourth-order central difference; accurate to ~1e-12 on an O(1) loss."""
    orig = p.data[idx]
    vals = {}
    for delta in (h, -h, 2 * h, -2 * h):
        p.data[idx] = orig + delta
        vals[delta] = evaluate()
    p.data[idx] = orig
    return (8 * (vals[h] - vals[-h]) - (vals[2 * h] - vals[-2 * h])) / (12 * h)


class TestFullModelGradient:
    def test_matches_finite_differences(self, vocab, triplets, images):
        cfg = ModelConfig(d=8, n_layers=2, n_heads=2, dropout=0.0)
        net = UnifiedModel(cfg, vocab, seed=5)
        batch = triplets[:2]
        imgs = np.stack([images[t.image_id] for t in batch])
        instr = [t.instr_ids for t in batch]
        tgt = [t.target for t in batch]

        loss, _ = net.loss(imgs, instr, tgt)
        loss.backward()

        def evaluate():
            with no_grad():
                out, _ = net.loss(imgs, instr, tgt)
            return out.item()

        rng = np.random.default_rng(0)
        names = sorted(net.params)
        for _ in range(12):
            name = names[rng.integers(len(names))]
            p = net.params[name]
            idx = np.unravel_index(rng.integers(p.data.size), p.data.shape)
            fd = fd_gradient(evaluate, p, idx)
            ad = p.grad[idx] if p.grad is not None else 0.0
            # 1e-7 floor keeps noise-level gradients from dividing by ~zero
            assert abs(ad - fd) / max(abs(ad), abs(fd), 1e-7) < 1e-4, name


class TestFastPathEquivalence:
    def test_fast_decoder_matches_graph(self, net, triplets, images):
        t = triplets[3]
        img = images[t.image_id]
        prefix = list(t.target[:5])
        with no_grad():
            v = net.encode_image(img)
            l = net.encode_instruction(np.array(t.instr_ids))
            logits = net.decode_step(v, l, np.array([t.instr_ids]), prefix).data
        graph_logp = logits - (np.log(np.exp(logits - logits.max()).sum()) + logits.max())
        memory, valid = net.build_memory(img, list(t.instr_ids))
        caches = [net._Cache() for _ in range(net.config.n_layers)]
        for pos, tok in enumerate(prefix):
            fast = net._fast_step(memory, valid, np.array([tok]), pos, caches)[0]
        assert np.abs(fast - graph_logp).max() < 1e-10


class TestBeamSearch:
    # hand-built 3-step distribution where greedy is suboptimal
    A, B, STOP, START = 0, 1, 2, 3
    TABLE = {
        START: np.log(np.array([0.5, 0.4, 0.1, 1e-300])),
        A: np.log(np.array([0.34, 0.33, 0.33, 1e-300])),
        B: np.log(np.array([0.05, 0.05, 0.9, 1e-300])),
    }

    def step(self, prefixes, parents):
        return np.stack([self.TABLE[p[-1]] for p in prefixes])

    def enumerate_oracle(self, max_emit=3):
        best = None
        for length in range(1, max_emit + 1):
            for seq in itertools.product((self.A, self.B), repeat=length - 1):
                seq = seq + (self.STOP,)
                total, last = 0.0, self.START
                for tok in seq:
                    total += self.TABLE[last][tok]
                    last = tok
                norm = total / len(seq)
                if best is None or norm > best[0]:
                    best = (norm, (self.START,) + seq)
        return best

    def test_beam2_finds_enumeration_optimum(self):
        oracle_norm, oracle_ids = self.enumerate_oracle()
        hyps = beam_search_steps(self.step, width=2, max_len=4,
                                 bos=self.START, eos=self.STOP)
        assert hyps[0].complete
        assert hyps[0].ids == oracle_ids
        assert hyps[0].normalized == pytest.approx(oracle_norm, abs=1e-12)

    def test_greedy_misses_it(self):
        hyps = beam_search_steps(self.step, width=1, max_len=4,
                                 bos=self.START, eos=self.STOP)
        _, oracle_ids = self.enumerate_oracle()
        assert hyps[0].ids != oracle_ids

    def test_width_one_equals_greedy(self, net, triplets, images):
        for t in triplets[:10]:
            img = images[t.image_id]
            greedy = net.greedy_decode(img, list(t.instr_ids), max_len=12)
            beam = beam_search(net, img, list(t.instr_ids), width=1, max_len=12)
            assert tuple(greedy) == beam[0].ids

    def test_beam_dominates_greedy(self, net, triplets, images):
        for t in triplets[:6]:
            img = images[t.image_id]
            greedy = beam_search(net, img, list(t.instr_ids), width=1, max_len=10)[0]
            wide = beam_search(net, img, list(t.instr_ids), width=6, max_len=10)[0]
            assert wide.normalized >= greedy.normalized - 1e-12

    def test_incomplete_flagged(self, net, triplets, images):
        t = triplets[0]
        hyps = beam_search(net, images[t.image_id], list(t.instr_ids),
                           width=2, max_len=3)
        assert all(not h.complete for h in hyps) or any(h.complete for h in hyps)
        if not any(h.complete for h in hyps):
            assert isinstance(hyps[0], BeamHypothesis)

    def test_bad_width(self, net, triplets, images):
        with pytest.raises(ModelError):
            beam_search_steps(self.step, width=0, max_len=4)


class TestYesNoScore:
    def test_symmetric_logits_give_half(self, vocab, triplets, images):
        net = UnifiedModel(ModelConfig(d=16, n_layers=1, n_heads=2), vocab, seed=0)
        net.params["out.w"].data[:] = 0.0
        net.params["out.b"].data[:] = 0.0
        t = triplets[0]
        assert net.yes_no_score(images[t.image_id], list(t.instr_ids)) == 0.5

    def test_score_strictly_inside_unit_interval(self, net, triplets, images):
        for t in triplets[:8]:
            s = net.yes_no_score(images[t.image_id], list(t.instr_ids))
            assert 0.0 < s < 1.0

    def test_memorized_yes_scores_high(self, vocab, corpus, images):
        study = corpus[0]
        q = dataset.build_triplets(study, vocab, modes={"classification"})
        yes_trips = [t for t in q if t.target == (BOS, YES, EOS)]
        if not yes_trips:
            yes_trips = [dataset.InstructionTriplet.make(
                study.image_id, "classification", "Is pneumonia in this image?",
                vocab, encode_yes_no(True))]
        net = UnifiedModel(ModelConfig(d=16, n_layers=1, n_heads=2, dropout=0.0, lr=3e-3),
                           vocab, seed=0)
        train(net, yes_trips, images, steps=120, batch_size=2, seed=0,
              mix=TaskMix({"classification": 1.0}), target_loss=0.01)
        for t in yes_trips:
            assert net.yes_no_score(images[t.image_id], list(t.instr_ids)) > 0.99


class TestTraining:
    def test_same_seed_identical_curves(self, vocab, triplets, images):
        def run():
            net = UnifiedModel(ModelConfig(d=16, n_layers=1, n_heads=2), vocab, seed=2)
            return train(net, triplets, images, steps=6, batch_size=4, seed=7)

        assert run() == run()

    def test_zero_lr_constant_curve(self, vocab, triplets, images):
        net = UnifiedModel(ModelConfig(d=16, n_layers=1, n_heads=2, lr=0.0,
                                       dropout=0.0), vocab, seed=2)
        curve = train(net, triplets, images, steps=4, batch_size=4, seed=7,
                      mix=TaskMix({"report": 1.0}))
        losses = {round(v, 12) for _, v in curve}
        # same batch distribution, frozen params: loss varies only with batch,
        # so repeating the same seed must reproduce the first value
        net2 = UnifiedModel(ModelConfig(d=16, n_layers=1, n_heads=2, lr=0.0,
                                        dropout=0.0), vocab, seed=2)
        curve2 = train(net2, triplets, images, steps=4, batch_size=4, seed=7,
                       mix=TaskMix({"report": 1.0}))
        assert curve == curve2

    def test_loss_curve_csv(self, tmp_path):
        path = tmp_path / "curve.csv"
        write_loss_curve(path, [(1, 2.5), (2, 1.25)])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert lines[1].startswith("1,")


class TestCheckpoint:
    def test_round_trip(self, net, triplets, images, tmp_path):
        path = tmp_path / "model.npz"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        for name, p in net.params.items():
            assert np.array_equal(p.data, back.params[name].data), name
        t = triplets[0]
        a = net.greedy_decode(images[t.image_id], list(t.instr_ids), max_len=10)
        b = back.greedy_decode(images[t.image_id], list(t.instr_ids), max_len=10)
        assert a == b
