"""Tiny pre-norm causal transformer decoder with LoRA on the query/value projections.

The base weights are pretrained on a copy task and then frozen; the LoRA
factors are the only decoder parameters trained downstream.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import vocab
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CapacityError, ConfigError, ShapeError, TrainingFailure
from .numerics import (
    DiffArray,
    as_diff,
    concat,
    gelu,
    layer_norm,
    log_softmax,
    masked_softmax,
    no_grad,
    parameter,
    pick,
    take_rows,
)
from .optim import AdamW, ParamGroup

# per-position roles
AUDIO, INSTRUCTION, TARGET, PADDING = 0, 1, 2, 3


@dataclass(frozen=True)
class DecoderConfig:
    vocab: int = vocab.VOCAB_SIZE
    d_llm: int = 48
    num_blocks: int = 2
    num_heads: int = 2
    max_len: int = 64
    lora_rank: int = 4
    lora_alpha: float = 8.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_llm % self.num_heads:
            raise ConfigError("d_llm must be divisible by num_heads")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")


@dataclass
class TokenSequence:
    """Token ids with per-position roles; audio positions carry id -1."""

    ids: np.ndarray
    roles: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.int64)
        if self.ids.shape != self.roles.shape:
            raise ShapeError("ids and roles must align")

    def target(self) -> list[int]:
        return [int(i) for i, r in zip(self.ids, self.roles) if r == TARGET]


@dataclass
class LowRankDelta:
    A: DiffArray  # (r, d_in)
    B: DiffArray  # (d_out, r)
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def effective(self, W) -> np.ndarray:
        return np.asarray(getattr(W, "values", W)) + self.scale * (self.B.values @ self.A.values)


def apply_lora(W: DiffArray, delta: LowRankDelta | None, x) -> DiffArray:
    """x @ (W + (alpha/r) B A)^T with W of shape (d_out, d_in)."""
    x = as_diff(x)
    W = as_diff(W)
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != weight input dim {W.shape[1]}")
    out = x @ W.transpose()
    if delta is None:
        return out
    if delta.A.shape[1] != W.shape[1] or delta.B.shape[0] != W.shape[0]:
        raise ShapeError("LoRA factors do not match the frozen weight")
    return out + ((x @ delta.A.transpose()) @ delta.B.transpose()) * delta.scale


def _causal_mask(L: int) -> np.ndarray:
    return np.triu(np.ones((L, L), dtype=bool), k=1)


class Decoder:
    """Parameters live in ``self.params`` (base) and ``self.lora`` (adapters)."""

    def __init__(self, config: DecoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, V = config.d_llm, config.vocab
        h = config.mlp_ratio * d

        def lin(d_out, d_in):
            return rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)

        p = {
            "tok_emb": rng.standard_normal((V, d)) * 0.5,
            "pos_emb": rng.standard_normal((config.max_len, d)) * 0.5,
            "ln_f.g": np.ones(d),
            "ln_f.b": np.zeros(d),
            "head.W": lin(V, d),
            "head.b": np.zeros(V),
        }
        for i in range(config.num_blocks):
            b = f"block{i}."
            p.update({
                b + "ln1.g": np.ones(d), b + "ln1.b": np.zeros(d),
                b + "attn.q": lin(d, d), b + "attn.k": lin(d, d),
                b + "attn.v": lin(d, d), b + "attn.o": lin(d, d) / math.sqrt(2 * config.num_blocks),
                b + "ln2.g": np.ones(d), b + "ln2.b": np.zeros(d),
                b + "mlp.W1": lin(h, d), b + "mlp.b1": np.zeros(h),
                b + "mlp.W2": lin(d, h) / math.sqrt(2 * config.num_blocks), b + "mlp.b2": np.zeros(d),
            })
        self.params: dict[str, DiffArray] = {k: parameter(v, k) for k, v in p.items()}
        self.lora: dict[str, LowRankDelta] = {}
        self.frozen = False

    # -- parameter management ------------------------------------------------

    def attach_lora(self, rng: np.random.Generator) -> None:
        """Fresh LoRA factors on every q and v projection; B starts at zero."""
        c = self.config
        self.lora = {}
        for i in range(c.num_blocks):
            for proj in ("q", "v"):
                name = f"block{i}.attn.{proj}"
                A = rng.standard_normal((c.lora_rank, c.d_llm)) / math.sqrt(c.d_llm)
                B = np.zeros((c.d_llm, c.lora_rank))
                self.lora[name] = LowRankDelta(parameter(A, f"lora.{name}.A"),
                                               parameter(B, f"lora.{name}.B"), c.lora_alpha)

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.zero_grad()
        self.frozen = True

    def lora_arrays(self) -> dict[str, DiffArray]:
        out = {}
        for name, delta in self.lora.items():
            out[f"lora.{name}.A"] = delta.A
            out[f"lora.{name}.B"] = delta.B
        return out

    def trainable(self) -> dict[str, DiffArray]:
        out = {} if self.frozen else dict(self.params)
        out.update(self.lora_arrays())
        return out

    # -- forward ----------------------------------------------------------------

    def embed_ids(self, ids) -> DiffArray:
        ids = np.asarray(ids, dtype=np.int64)
        if np.any((ids < 0) | (ids >= self.config.vocab)):
            raise ShapeError("token id out of vocabulary range")
        return take_rows(self.params["tok_emb"], ids)

    def forward(self, x: DiffArray) -> DiffArray:
        """Logits (..., L, V) for an embedded sequence x (..., L, d)."""
        c = self.config
        L = x.shape[-2]
        if L > c.max_len:
            raise CapacityError(f"sequence length {L} exceeds max_len {c.max_len}")
        P = self.params
        x = x + P["pos_emb"][:L]
        mask = _causal_mask(L)
        for i in range(c.num_blocks):
            b = f"block{i}."
            x = x + self._attention(layer_norm(x, P[b + "ln1.g"], P[b + "ln1.b"]), b, mask)
            h = layer_norm(x, P[b + "ln2.g"], P[b + "ln2.b"])
            h = gelu(h @ P[b + "mlp.W1"].transpose() + P[b + "mlp.b1"])
            x = x + (h @ P[b + "mlp.W2"].transpose() + P[b + "mlp.b2"])
        x = layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        return x @ P["head.W"].transpose() + P["head.b"]

    def _attention(self, h: DiffArray, prefix: str, mask: np.ndarray) -> DiffArray:
        c = self.config
        P = self.params
        H = c.num_heads
        dh = c.d_llm // H
        lead = h.shape[:-2]
        L = h.shape[-2]
        q = apply_lora(P[prefix + "attn.q"], self.lora.get(prefix + "attn.q"), h)
        k = apply_lora(P[prefix + "attn.k"], None, h)
        v = apply_lora(P[prefix + "attn.v"], self.lora.get(prefix + "attn.v"), h)
        nd = len(lead)

        def heads(t):  # (..., L, d) -> (..., H, L, dh)
            return t.reshape(lead + (L, H, dh)).transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2))

        q, k, v = heads(q), heads(k), heads(v)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        att = masked_softmax(scores, mask)
        out = (att @ v).transpose(tuple(range(nd)) + (nd + 1, nd, nd + 2)).reshape(lead + (L, c.d_llm))
        return apply_lora(P[prefix + "attn.o"], None, out)

    def assemble(self, audio_embeds, ids) -> DiffArray:
        """[audio; embed(ids)] along the sequence axis."""
        tok = self.embed_ids(ids)
        if audio_embeds is None:
            return tok
        audio_embeds = as_diff(audio_embeds)
        if audio_embeds.shape[-1] != self.config.d_llm:
            raise ShapeError(f"audio embedding dim {audio_embeds.shape[-1]} != d_llm {self.config.d_llm}")
        return concat([audio_embeds, tok], axis=-2)

    # -- persistence --------------------------------------------------------------

    def state(self) -> tuple[dict[str, np.ndarray], dict[str, bool]]:
        arrays = {f"decoder.{k}": v.values for k, v in self.params.items()}
        flags = {k: not self.frozen for k in arrays}
        for k, v in self.lora_arrays().items():
            arrays[k] = v.values
            flags[k] = True
        return arrays, flags

    def save(self, path) -> None:
        arrays, flags = self.state()
        save_checkpoint(path, arrays, flags, {"kind": "decoder", "config": asdict(self.config),
                                              "frozen": self.frozen})

    @classmethod
    def load(cls, path) -> Decoder:
        arrays, flags, meta = load_checkpoint(path)
        if meta.get("kind") != "decoder":
            raise ConfigError(f"{path}: not a decoder checkpoint")
        dec = cls(DecoderConfig(**meta["config"]))
        dec.load_arrays(arrays)
        if meta.get("frozen"):
            dec.freeze()
        return dec

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            a = arrays[f"decoder.{k}"]
            if a.shape != p.shape:
                raise ConfigError(f"checkpoint shape mismatch for {k}: {a.shape} vs {p.shape}")
            p.values = np.array(a, dtype=np.float64)


def decoder_forward(decoder: Decoder, embeds, roles, target_ids) -> DiffArray:
    """Logits for a mixed sequence.

    ``embeds`` supplies the audio-prefix rows (…, A, d); ``target_ids``
    holds ids for every non-audio position, in order.  ``roles`` marks each
    of the A + len(ids) positions.
    """
    roles = np.asarray(roles)
    n_audio = 0 if embeds is None else as_diff(embeds).shape[-2]
    if np.any(roles[..., :n_audio] != AUDIO) or np.any(roles[..., n_audio:] == AUDIO):
        raise ShapeError("audio_prefix roles must cover exactly the leading embedded positions")
    return decoder.forward(decoder.assemble(embeds, target_ids))


def generate(decoder: Decoder, audio_embeds, instruction_ids, max_new: int,
             return_first_probs: bool = False):
    """Greedy decoding for a batch of prefixes.

    ``instruction_ids`` is (B, I) (or 1-D for a single prefix).  Returns a list
    of TokenSequence (generated part only, EOS included when produced) and,
    optionally, the next-token distribution at the first generated position.
    """
    single = np.ndim(instruction_ids) == 1
    instr = np.atleast_2d(np.asarray(instruction_ids, dtype=np.int64))
    B = instr.shape[0]
    if audio_embeds is not None:
        audio_embeds = as_diff(audio_embeds)
        if audio_embeds.ndim == 2:
            audio_embeds = DiffArray(audio_embeds.values[None])
    generated = np.zeros((B, 0), dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    first_probs = None
    with no_grad():
        for step in range(max_new):
            ids = np.concatenate([instr, generated], axis=1)
            logits = decoder.forward(decoder.assemble(audio_embeds, ids)).values[:, -1, :]
            if step == 0 and return_first_probs:
                z = logits - logits.max(axis=-1, keepdims=True)
                first_probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, vocab.PAD, nxt)
            generated = np.concatenate([generated, nxt[:, None]], axis=1)
            done |= nxt == vocab.EOS
            if done.all():
                break
    seqs = []
    for b in range(B):
        row = []
        for t in generated[b]:
            if t == vocab.PAD:
                break
            row.append(int(t))
            if t == vocab.EOS:
                break
        seqs.append(TokenSequence(row, [TARGET] * len(row)))
    out = seqs[0] if single else seqs
    if return_first_probs:
        return out, (first_probs[0] if single and first_probs is not None else first_probs)
    return out


# -- copy-task pretraining -----------------------------------------------------------


@dataclass
class CopyBatch:
    ids: np.ndarray  # (B, L) full sequence
    label_mask: np.ndarray  # (B, L-1): position j predicts ids[:, j+1] and is scored


def copy_batch(rng: np.random.Generator, batch: int, min_len: int = 1, max_len: int = 8,
               tokens=vocab.CONTENT_TOKENS) -> CopyBatch:
    """Sequences ``x1..xn SEP x1..xn EOS`` right-padded with PAD."""
    tokens = np.asarray(tokens)
    lens = rng.integers(min_len, max_len + 1, size=batch)
    L = 2 * max_len + 2
    ids = np.full((batch, L), vocab.PAD, dtype=np.int64)
    mask = np.zeros((batch, L - 1), dtype=bool)
    for b, n in enumerate(lens):
        xs = rng.choice(tokens, size=n)
        seq = np.concatenate([xs, [vocab.SEP], xs, [vocab.EOS]])
        ids[b, : seq.size] = seq
        mask[b, n: 2 * n + 1] = True  # predictions for x1..xn EOS
    return CopyBatch(ids, mask)


def masked_cross_entropy(logits: DiffArray, labels: np.ndarray, mask: np.ndarray) -> DiffArray:
    logp = log_softmax(logits)
    nll = -pick(logp, np.where(mask, labels, 0))
    n = int(mask.sum())
    return (nll * mask.astype(np.float64)).sum() * (1.0 / n)


def copy_accuracy(decoder: Decoder, batch: CopyBatch) -> float:
    with no_grad():
        logits = decoder.forward(decoder.embed_ids(batch.ids[:, :-1])).values
    pred = logits.argmax(axis=-1)
    ok = (pred == batch.ids[:, 1:]) & batch.label_mask
    return float(ok.sum() / batch.label_mask.sum())


@dataclass
class PretrainResult:
    decoder: Decoder
    steps: int
    heldout_accuracy: float
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, acc)


def pretrain_decoder(config: DecoderConfig = DecoderConfig(), steps: int = 5000, seed: int = 0,
                     batch_size: int = 32, lr: float = 3e-3, target_accuracy: float = 0.99,
                     eval_every: int = 100, heldout_size: int = 512, log=None) -> PretrainResult:
    """Train on the copy task until held-out next-token accuracy reaches the target, then freeze."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    heldout = copy_batch(np.random.default_rng(np.random.SeedSequence([seed, 1])), heldout_size)
    dec = Decoder(config, seed=seed)
    opt = AdamW([ParamGroup(list(dec.params.values()), lr, weight_decay=0.0)])
    warmup = 100
    history = []
    acc = 0.0
    step = 0
    for step in range(1, steps + 1):
        batch = copy_batch(rng, batch_size)
        opt.zero_grad()
        logits = dec.forward(dec.embed_ids(batch.ids[:, :-1]))
        loss = masked_cross_entropy(logits, batch.ids[:, 1:], batch.label_mask)
        if not np.isfinite(loss.item()):
            raise TrainingFailure(f"copy pretraining diverged at step {step}")
        loss.backward()
        opt.step(min(1.0, step / warmup))
        if step % eval_every == 0 or step == steps:
            acc = copy_accuracy(dec, heldout)
            history.append((step, loss.item(), acc))
            if log:
                log(f"pretrain step {step} loss {loss.item():.4f} heldout acc {acc:.4f}")
            if acc >= target_accuracy:
                break
    if acc < target_accuracy:
        raise TrainingFailure(f"copy pretraining reached {acc:.4f} < {target_accuracy} in {steps} steps")
    dec.freeze()
    return PretrainResult(dec, step, acc, history)
