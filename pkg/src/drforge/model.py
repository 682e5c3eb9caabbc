"""Desk-scale unified sequence-to-sequence model: a patch image encoder with
a two-linear-layer projection, an instruction encoder, a fusion encoder over
the concatenated visual and text features, and an autoregressive decoder
whose cross-attention reads the fused memory. Trained with masked
cross-entropy over the unified token vocabulary.

Training and the canonical forward run on the autodiff graph; decoding has
an equivalent fast numpy path with per-layer KV caches (asserted equal to
the graph path in the tests).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, attention, concat, dropout, linear, no_grad
from .codec import BOS, EOS, NO, PAD, YES, Vocab
from .dataset import TaskMix, sample_batch


class ModelError(ValueError):
    pass


class ShapeMismatch(ModelError):
    pass


class UnknownToken(ModelError):
    pass


class PrefixTooLong(ModelError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ff_mult: int = 2
    image_size: int = 64
    patch_size: int = 16
    max_len: int = 128
    dropout: float = 0.1
    lr: float = 3e-4
    warmup_lr: float | None = None
    warmup_steps: int = 0
    beam_width: int = 6
    dtype: str = "float64"  # float32 roughly halves CPU step time

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ModelError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size != 0:
            raise ModelError("image_size must be a multiple of patch_size")

    @property
    def h_f(self) -> int:
        return self.image_size // self.patch_size

    @property
    def w_f(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.h_f * self.w_f

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        """Published hyperparameters (lr 1e-5 with 1e-7 warmup, dropout 0.1,
        512x512 input); backbone size stays at desk scale."""
        base = dict(image_size=512, patch_size=32, dropout=0.1,
                    lr=1e-5, warmup_lr=1e-7, warmup_steps=1000, beam_width=6)
        base.update(kw)
        return cls(**base)


NEG_INF = -1e30


def _patchify(images: np.ndarray, ps: int) -> np.ndarray:
    b, h, w = images.shape
    hf, wf = h // ps, w // ps
    x = images.reshape(b, hf, ps, wf, ps).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, hf * wf, ps * ps)


def _pad_batch(seqs, pad=PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


class UnifiedModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.training = False
        self.dtype = np.dtype(config.dtype)
        self._drop_rng = np.random.default_rng(seed + 1)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ---- parameters -------------------------------------------------------

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(np.asarray(data, dtype=self.dtype),
                                   requires_grad=True)

    def _init_params(self, rng):
        c = self.config
        d, v = c.d, len(self.vocab)

        def w(*shape):
            # fan-in scaling keeps attention logits O(1) at this small width
            return rng.normal(0.0, shape[0] ** -0.5, size=shape)

        self._add("img.patch.w", w(c.patch_size ** 2, d))
        self._add("img.patch.b", np.zeros(d))
        self._add("img.pos", np.zeros((c.n_patches, d)))  # zero so a zero image is row-constant
        self._add("img.proj1.w", w(d, d))
        self._add("img.proj1.b", np.zeros(d))
        self._add("img.proj2.w", w(d, d))
        self._add("img.proj2.b", np.zeros(d))
        # final norm puts visual tokens on the same scale as text features
        self._add("img.ln_f.g", np.ones(d))
        self._add("img.ln_f.b", np.zeros(d))
        self._add("tok.emb", w(v, d))
        self._add("txt.pos", w(c.max_len, d))
        self._add("dec.pos", w(c.max_len, d))
        for stack, blocks in (("txt", ("self", "ff")),
                              ("mm", ("self", "ff")),
                              ("dec", ("self", "cross", "ff"))):
            for i in range(c.n_layers):
                pre = f"{stack}.l{i}"
                for blk in blocks:
                    self._add(f"{pre}.{blk}.ln.g", np.ones(d))
                    self._add(f"{pre}.{blk}.ln.b", np.zeros(d))
                    if blk == "ff":
                        self._add(f"{pre}.ff.w1", w(d, c.ff_mult * d))
                        self._add(f"{pre}.ff.b1", np.zeros(c.ff_mult * d))
                        self._add(f"{pre}.ff.w2", w(c.ff_mult * d, d))
                        self._add(f"{pre}.ff.b2", np.zeros(d))
                    else:
                        for m in ("wq", "wk", "wv", "wo"):
                            self._add(f"{pre}.{blk}.{m}", w(d, d))
            self._add(f"{stack}.ln_f.g", np.ones(d))
            self._add(f"{stack}.ln_f.b", np.zeros(d))
        self._add("out.w", w(d, v))
        self._add("out.b", np.zeros(v))

    def train_mode(self, flag: bool = True):
        self.training = flag
        return self

    # ---- building blocks --------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return x.layer_norm(self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _mha(self, q_in: Tensor, kv_in: Tensor, prefix: str, mask) -> Tensor:
        p = self.params
        return attention(q_in, kv_in, p[f"{prefix}.wq"], p[f"{prefix}.wk"],
                         p[f"{prefix}.wv"], p[f"{prefix}.wo"],
                         self.config.n_heads, mask)

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        hidden = linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]).gelu()
        return linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.config.dropout, self._drop_rng, self.training)

    def _encoder_stack(self, x: Tensor, stack: str, pad_mask) -> Tensor:
        for i in range(self.config.n_layers):
            pre = f"{stack}.l{i}"
            normed = self._ln(x, f"{pre}.self.ln")
            x = x + self._drop(self._mha(normed, normed, f"{pre}.self", pad_mask))
            x = x + self._drop(self._ff(self._ln(x, f"{pre}.ff.ln"), f"{pre}.ff"))
        return self._ln(x, f"{stack}.ln_f")

    # ---- public ops ---------------------------------------------------------

    def encode_image(self, images: np.ndarray) -> Tensor:
        """(B, S, S) grayscale in [0,1] -> (B, n_patches, d) visual features."""
        c = self.config
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != (c.image_size, c.image_size):
            raise ShapeMismatch(f"expected {(c.image_size,) * 2} image, got {images.shape[1:]}")
        p = self.params
        e = linear(Tensor(_patchify(images, c.patch_size)), p["img.patch.w"],
                   p["img.patch.b"]) + p["img.pos"]
        hidden = linear(e, p["img.proj1.w"], p["img.proj1.b"]).gelu()
        out = linear(hidden, p["img.proj2.w"], p["img.proj2.b"])
        return self._ln(out, "img.ln_f")

    def encode_instruction(self, instr: np.ndarray) -> Tensor:
        """(B, T) token ids -> (B, T, d); PAD positions masked out of attention."""
        instr = np.asarray(instr, dtype=np.int64)
        if instr.ndim == 1:
            instr = instr[None]
        if instr.min() < 0 or instr.max() >= len(self.vocab):
            raise UnknownToken(f"token id outside vocab of {len(self.vocab)}")
        if instr.shape[1] > self.config.max_len:
            raise PrefixTooLong(f"instruction length {instr.shape[1]} > {self.config.max_len}")
        p = self.params
        x = p["tok.emb"][instr] + p["txt.pos"][:instr.shape[1]]
        pad_mask = np.where(instr == PAD, NEG_INF, 0.0)[:, None, None, :].astype(self.dtype)
        return self._encoder_stack(x, "txt", pad_mask)

    def fuse(self, v: Tensor, l: Tensor, instr: np.ndarray):
        """Multimodal memory: encoder over concat(visual, text) features.
        Returns (memory, column validity) where invalid columns are PAD."""
        instr = np.atleast_2d(np.asarray(instr, dtype=np.int64))
        valid = np.concatenate([np.ones((instr.shape[0], v.shape[1]), dtype=bool),
                                instr != PAD], axis=1)
        mask = np.where(valid, 0.0, NEG_INF)[:, None, None, :].astype(self.dtype)
        mem = self._encoder_stack(concat([v, l], axis=1), "mm", mask)
        return mem, valid

    def _decoder_logits(self, memory: Tensor, mem_valid: np.ndarray,
                        dec_in: np.ndarray) -> Tensor:
        p, c = self.params, self.config
        bsz, t = dec_in.shape
        x = p["tok.emb"][dec_in] + p["dec.pos"][:t]
        causal = np.triu(np.full((t, t), NEG_INF, dtype=self.dtype), k=1)[None, None]
        cross = np.where(mem_valid, 0.0, NEG_INF)[:, None, None, :].astype(self.dtype)
        for i in range(c.n_layers):
            pre = f"dec.l{i}"
            normed = self._ln(x, f"{pre}.self.ln")
            x = x + self._drop(self._mha(normed, normed, f"{pre}.self", causal))
            x = x + self._drop(self._mha(self._ln(x, f"{pre}.cross.ln"), memory,
                                         f"{pre}.cross", cross))
            x = x + self._drop(self._ff(self._ln(x, f"{pre}.ff.ln"), f"{pre}.ff"))
        x = self._ln(x, "dec.ln_f")
        return linear(x, p["out.w"], p["out.b"])

    def decode_step(self, v: Tensor, l: Tensor, instr: np.ndarray, prefix) -> Tensor:
        """Next-token logits after the prefix (graph path, differentiable)."""
        if len(prefix) >= self.config.max_len:
            raise PrefixTooLong(f"prefix length {len(prefix)} >= {self.config.max_len}")
        if prefix[0] != BOS:
            raise ModelError("prefix must start with BOS")
        memory, valid = self.fuse(v, l, instr)
        logits = self._decoder_logits(memory, valid, np.asarray([prefix], dtype=np.int64))
        return logits[0, len(prefix) - 1]

    def loss(self, images: np.ndarray, instr_seqs, target_seqs) -> tuple[Tensor, int]:
        """Per-token masked cross-entropy over a batch; PAD positions excluded.
        Returns (loss tensor, token count)."""
        instr = _pad_batch(instr_seqs)
        targets = _pad_batch(target_seqs)
        if targets.shape[1] > self.config.max_len:
            raise PrefixTooLong(f"target length {targets.shape[1]} > {self.config.max_len}")
        v = self.encode_image(images)
        l = self.encode_instruction(instr)
        memory, valid = self.fuse(v, l, instr)
        dec_in, labels = targets[:, :-1], targets[:, 1:]
        logits = self._decoder_logits(memory, valid, dec_in)
        logp = logits.log_softmax(-1)
        bsz, t = labels.shape
        picked = logp[np.arange(bsz)[:, None], np.arange(t)[None, :], labels]
        mask = (labels != PAD).astype(self.dtype)
        n_tokens = int(mask.sum())
        loss = -(picked * Tensor(mask)).sum() * (1.0 / n_tokens)
        return loss, n_tokens

    # ---- fast inference path (pure numpy, KV cached) -------------------------

    def _np(self, name: str) -> np.ndarray:
        return self.params[name].data

    def _np_ln(self, x, prefix):
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdims=True)
        return xc / np.sqrt(var + 1e-5) * self._np(f"{prefix}.g") + self._np(f"{prefix}.b")

    @staticmethod
    def _np_gelu(x):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))

    def build_memory(self, image: np.ndarray, instr: list[int]):
        """Fused memory for one example, as plain arrays for fast decoding."""
        with no_grad():
            v = self.encode_image(image[None] if image.ndim == 2 else image)
            l = self.encode_instruction(np.asarray([instr]))
            memory, valid = self.fuse(v, l, np.asarray([instr]))
        return memory.data[0], valid[0]

    class _Cache:
        def __init__(self):
            self.k: list = []
            self.v: list = []

    def _fast_step(self, memory, valid, tokens, pos, caches):
        """One decoder step for a batch of hypotheses sharing one memory.
        tokens: (k,) ids entering at position pos; caches mutated in place."""
        c = self.config
        h, dh = c.n_heads, c.d // c.n_heads
        x = self._np("tok.emb")[tokens] + self._np("dec.pos")[pos]  # (k, d)
        cross_mask = np.where(valid, 0.0, NEG_INF).astype(self.dtype)  # (Tm,)
        for i in range(c.n_layers):
            pre = f"dec.l{i}"
            hn = self._np_ln(x, f"{pre}.self.ln")
            q = (hn @ self._np(f"{pre}.self.wq")).reshape(-1, h, dh)
            k_new = (hn @ self._np(f"{pre}.self.wk")).reshape(-1, h, dh)
            v_new = (hn @ self._np(f"{pre}.self.wv")).reshape(-1, h, dh)
            if pos == 0:
                caches[i].k = k_new[:, :, None, :]
                caches[i].v = v_new[:, :, None, :]
            else:
                caches[i].k = np.concatenate([caches[i].k, k_new[:, :, None, :]], axis=2)
                caches[i].v = np.concatenate([caches[i].v, v_new[:, :, None, :]], axis=2)
            ks, vs = caches[i].k, caches[i].v  # (k, h, t, dh)
            scores = np.einsum("khd,khtd->kht", q, ks) / math.sqrt(dh)
            scores -= scores.max(-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(-1, keepdims=True)
            att = np.einsum("kht,khtd->khd", w, vs).reshape(-1, c.d)
            x = x + att @ self._np(f"{pre}.self.wo")

            hn = self._np_ln(x, f"{pre}.cross.ln")
            q = (hn @ self._np(f"{pre}.cross.wq")).reshape(-1, h, dh)
            km = (memory @ self._np(f"{pre}.cross.wk")).reshape(-1, h, dh)
            vm = (memory @ self._np(f"{pre}.cross.wv")).reshape(-1, h, dh)
            scores = np.einsum("khd,mhd->khm", q, km) / math.sqrt(dh) + cross_mask
            scores -= scores.max(-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(-1, keepdims=True)
            att = np.einsum("khm,mhd->khd", w, vm).reshape(-1, c.d)
            x = x + att @ self._np(f"{pre}.cross.wo")

            hn = self._np_ln(x, f"{pre}.ff.ln")
            hidden = self._np_gelu(hn @ self._np(f"{pre}.ff.w1") + self._np(f"{pre}.ff.b1"))
            x = x + hidden @ self._np(f"{pre}.ff.w2") + self._np(f"{pre}.ff.b2")
        x = self._np_ln(x, "dec.ln_f")
        logits = x @ self._np("out.w") + self._np("out.b")
        shifted = logits - logits.max(-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))

    def _greedy_with_score(self, image, instr, max_len=None):
        max_len = max_len or self.config.max_len
        memory, valid = self.build_memory(np.asarray(image), instr)
        caches = [self._Cache() for _ in range(self.config.n_layers)]
        ids = [BOS]
        total = 0.0
        for pos in range(max_len - 1):
            logp = self._fast_step(memory, valid, np.array([ids[-1]]), pos, caches)[0]
            nxt = int(np.argmax(logp))  # argmax takes the lowest id on ties
            ids.append(nxt)
            total += float(logp[nxt])
            if nxt == EOS:
                break
        return ids, total

    def greedy_decode(self, image, instr, max_len=None) -> list[int]:
        return self._greedy_with_score(image, instr, max_len)[0]

    def yes_no_score(self, image, instr) -> float:
        """P(YES) / (P(YES) + P(NO)) at the first answer position."""
        memory, valid = self.build_memory(np.asarray(image), instr)
        caches = [self._Cache() for _ in range(self.config.n_layers)]
        logp = self._fast_step(memory, valid, np.array([BOS]), 0, caches)[0]
        return float(1.0 / (1.0 + np.exp(logp[NO] - logp[YES])))


@dataclass(frozen=True)
class BeamHypothesis:
    ids: tuple
    logprob: float
    normalized: float
    complete: bool


def beam_search_steps(step_fn, width: int, max_len: int,
                      bos: int = BOS, eos: int = EOS) -> list[BeamHypothesis]:
    """Generic length-normalized beam search over a batched step function.

    step_fn(prefixes, parents) -> (k, V) log-probs for the last token of each
    prefix; `parents` gives each prefix's index in the previous live set so
    the step function can reorder its caches. Finished hypotheses retire.
    Returns hypotheses sorted best-first; if none completed, the best
    partials are returned flagged incomplete.
    """
    if width < 1:
        raise ModelError(f"beam width {width} < 1")
    live = [((bos,), 0.0)]
    parents = [0]
    finished: list[BeamHypothesis] = []
    for _ in range(max_len - 1):
        if not live:
            break
        logps = step_fn([ids for ids, _ in live], parents)
        candidates = []
        for i, (ids, total) in enumerate(live):
            lp = logps[i]
            order = np.argsort(-lp, kind="stable")[:width]
            for tok in order:
                candidates.append((total + float(lp[tok]), int(tok), i))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live, next_parents = [], []
        for score, tok, parent in candidates:
            if len(next_live) >= width:
                break
            ids = live[parent][0] + (tok,)
            if tok == eos:
                emitted = len(ids) - 1
                finished.append(BeamHypothesis(ids, score, score / emitted, True))
            else:
                next_live.append((ids, score))
                next_parents.append(parent)
        live = next_live
        parents = next_parents
    if not finished:
        finished = [BeamHypothesis(ids, total, total / max(len(ids) - 1, 1), False)
                    for ids, total in live]
    finished.sort(key=lambda h: (-h.normalized, h.ids))
    return finished[:width]


def beam_search(model: UnifiedModel, image, instr, width=None, max_len=None):
    """Beam decode one (image, instruction) pair on the fast numpy path.

    The greedy trajectory is always merged in as a floor candidate, so the
    best returned hypothesis never scores below greedy decoding."""
    width = width or model.config.beam_width
    max_len = max_len or model.config.max_len
    memory, valid = model.build_memory(np.asarray(image), instr)
    caches = [model._Cache() for _ in range(model.config.n_layers)]

    def step(prefixes, parents):
        nonlocal caches
        pos = len(prefixes[0]) - 1
        if pos > 0:
            idx = np.asarray(parents)
            for cache in caches:
                cache.k = cache.k[idx]
                cache.v = cache.v[idx]
        else:
            caches = [model._Cache() for _ in range(model.config.n_layers)]
            if len(prefixes) > 1:
                raise ModelError("beam must start from a single BOS prefix")
        tokens = np.array([p[-1] for p in prefixes])
        return model._fast_step(memory, valid, tokens, pos, caches)

    hyps = beam_search_steps(step, width, max_len)
    g_ids, g_total = model._greedy_with_score(image, instr, max_len)
    if tuple(g_ids) not in {h.ids for h in hyps}:
        emitted = max(len(g_ids) - 1, 1)
        hyps.append(BeamHypothesis(tuple(g_ids), g_total, g_total / emitted,
                                   g_ids[-1] == EOS))
        hyps.sort(key=lambda h: (-h.normalized, h.ids))
        hyps = hyps[:max(width, 1)]
    return hyps


# ---------------------------------------------------------------------------
# training loop and persistence
# ---------------------------------------------------------------------------

def train(model: UnifiedModel, triplets, images_by_id: dict, steps: int,
          batch_size: int, seed: int = 0, mix: TaskMix | None = None,
          target_loss: float | None = None, length_split: int = 40,
          cosine_to: float | None = None,
          cosine_after: int = 0) -> list[tuple[int, float]]:
    """Adam loop over mixed-task batches; deterministic given (seed, config).
    Returns the (step, per-token loss) curve.

    Each sampled batch is forwarded in short/long target groups with
    token-weighted gradient accumulation, which computes the identical
    per-token loss while skipping most of the padding the long polygon
    targets would force onto short rows. With cosine_to set, the learning
    rate decays cosinely from config.lr down to that floor across `steps`."""
    mix = mix or TaskMix.DEFAULT
    rng = np.random.default_rng(seed)
    model._drop_rng = np.random.default_rng(seed + 1)
    opt = Adam(model.params, lr=model.config.lr)
    model.train_mode(True)
    curve = []
    cfg = model.config
    try:
        for step in range(1, steps + 1):
            if cfg.warmup_lr is not None and cfg.warmup_steps > 0:
                frac = min(step / cfg.warmup_steps, 1.0)
                opt.lr = cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * frac
            elif cosine_to is not None and step > cosine_after:
                span = max(steps - cosine_after, 1)
                frac = 0.5 * (1.0 + math.cos(math.pi * (step - cosine_after) / span))
                opt.lr = cosine_to + (cfg.lr - cosine_to) * frac
            batch = sample_batch(triplets, mix, batch_size, rng)
            groups = [[t for t in batch if len(t.target) < length_split],
                      [t for t in batch if len(t.target) >= length_split]]
            total_tokens = sum(len(t.target) - 1 for t in batch)
            opt.zero_grad()
            value = 0.0
            for group in groups:
                if not group:
                    continue
                images = np.stack([images_by_id[t.image_id] for t in group])
                loss, n = model.loss(images, [t.instr_ids for t in group],
                                     [t.target for t in group])
                weight = n / total_tokens
                loss.backward(seed=np.array(weight))
                value += loss.item() * weight
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss {value} at step {step}")
            opt.step()
            curve.append((step, value))
            if target_loss is not None and value < target_loss:
                break
    finally:
        model.train_mode(False)
    return curve


def write_loss_curve(path, curve) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, value in curve:
            fh.write(f"{step},{value!r}\n")


CHECKPOINT_FORMAT = 1


def save_checkpoint(model: UnifiedModel, path) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config),
            "seed": model.seed, "vocab": model.vocab.to_manifest()}
    np.savez_compressed(path, __meta__=np.array(json.dumps(meta)),
                        **{k: v.data for k, v in model.params.items()})


def load_checkpoint(path) -> UnifiedModel:
    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["__meta__"]))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"unsupported checkpoint format {meta.get('format')}")
    vocab = Vocab.from_manifest(meta["vocab"])
    model = UnifiedModel(ModelConfig(**meta["config"]), vocab, seed=meta["seed"])
    for name, tensor in model.params.items():
        if name not in blob:
            raise ModelError(f"checkpoint missing tensor {name}")
        if blob[name].shape != tensor.data.shape:
            raise ShapeMismatch(f"{name}: {blob[name].shape} vs {tensor.data.shape}")
        tensor.data = blob[name].astype(model.dtype)
    return model
