"""Small transformer autoencoder over tokenized behavior sequences.

One model serves three consumers: sequence embeddings for compression,
reconstruction losses for outlier filtering, and the evaluation harness.
Implemented directly in numpy (float64) with hand-written gradients so
training is exactly reproducible: fixed parameter iteration order,
seeded masking, no threads, no dropout.

Objective: masked-denoising reconstruction. A plain bidirectional
encoder asked to reproduce its unmasked input can learn the identity
map, which makes losses useless for telling typical sequences from
junk; masking a fixed fraction of positions and scoring only those
keeps the loss discriminative.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import BehaviorSequence, ContractError, Dataset, DeviceCatalog

CHECKPOINT_VERSION = 1
LN_EPS = 1e-8
_MASK_STREAM_TAG = 0xA5  # rng stream id for training masks
_SCORE_STREAM_TAG = 0x5C  # rng stream id for scoring masks
SCORING_MASK_PATTERNS = 4


class DegenerateCorpusError(ValueError):
    """Raised when the corpus yields fewer than two real tokens."""


@dataclass(frozen=True)
class Vocab:
    """Bijection between `Device:action` tokens and integer ids.

    Ids 0..2 are the specials (pad, mask, unk); real tokens follow in
    sorted order.
    """

    tokens: tuple[str, ...]

    PAD = 0
    MASK = 1
    UNK = 2
    SPECIALS = ("<pad>", "<mask>", "<unk>")

    def __post_init__(self) -> None:
        if self.tokens[: len(self.SPECIALS)] != self.SPECIALS:
            raise ContractError("vocab must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocab tokens must be unique")

    @classmethod
    def build(
        cls,
        sequences: Iterable[BehaviorSequence],
        catalog: DeviceCatalog | None = None,
    ) -> "Vocab":
        seen: set[str] = set()
        for seq in sequences:
            seen.update(seq.tokens())
        if catalog is not None:
            seen.update(catalog.tokens())
        return cls(tokens=cls.SPECIALS + tuple(sorted(seen)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def real_token_count(self) -> int:
        return len(self.tokens) - len(self.SPECIALS)

    def encode_token(self, token: str) -> int:
        return self._index().get(token, self.UNK)

    def _index(self) -> dict[str, int]:
        cached = getattr(self, "_idx", None)
        if cached is None:
            cached = {tok: i for i, tok in enumerate(self.tokens)}
            object.__setattr__(self, "_idx", cached)
        return cached


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    heads: int = 2
    layers: int = 2
    ffn_dim: int = 128
    max_len: int = 128
    mask_ratio: float = 0.25
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % 2 != 0:
            raise ContractError("embed_dim must be even (sin/cos interleaving)")
        if self.embed_dim % self.heads != 0:
            raise ContractError("heads must divide embed_dim")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractError("mask_ratio must lie strictly between 0 and 1")
        if min(self.layers, self.ffn_dim, self.max_len, self.epochs, self.batch_size) < 1:
            raise ContractError("layers, ffn_dim, max_len, epochs, batch_size must be >= 1")


@dataclass(frozen=True)
class TokenizedSequence:
    ids: np.ndarray
    hours: np.ndarray
    truncated: bool


def tokenize(s: BehaviorSequence, v: Vocab, max_len: int = 128) -> TokenizedSequence:
    """One token per behavior plus its hour-of-day bucket, capped at max_len."""
    tokens = s.tokens()
    truncated = len(tokens) > max_len
    ids = np.array([v.encode_token(t) for t in tokens[:max_len]], dtype=np.int64)
    hours = np.array([b.timestamp.hour for b in s.behaviors[:max_len]], dtype=np.int64)
    return TokenizedSequence(ids=ids, hours=hours, truncated=truncated)


def positional_encoding(pos: int, d: int) -> np.ndarray:
    """Interleaved sinusoid position vector: dim 2i holds sin(pos/10000^(2i/d)),
    dim 2i+1 the matching cos."""
    if d % 2 != 0:
        raise ContractError("positional encoding needs an even dimension")
    if pos < 0:
        raise ContractError("position must be non-negative")
    i = np.arange(d // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def pe_matrix(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def _sequence_scoring_seed(model_seed: int, sequence_id: str, pattern: int) -> list[int]:
    digest = hashlib.sha256(sequence_id.encode("utf-8")).digest()
    return [model_seed, _SCORE_STREAM_TAG, int.from_bytes(digest[:8], "big"), pattern]


def _mask_size(n: int, mask_ratio: float) -> int:
    return max(1, int(round(mask_ratio * n)))


class SeqAutoencoder:
    """Trained weights plus the vocab/config needed to apply them.

    Immutable once training finishes; `encode` and `sequence_loss` may be
    called concurrently.
    """

    def __init__(
        self,
        vocab: Vocab,
        config: ModelConfig,
        params: dict[str, np.ndarray],
        loss_trace: tuple[float, ...] = (),
    ) -> None:
        self.vocab = vocab
        self.config = config
        self.params = params
        self.loss_trace = loss_trace
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise ContractError(f"parameter {name} contains non-finite values")

    # -- construction -------------------------------------------------

    @classmethod
    def init(cls, vocab: Vocab, config: ModelConfig) -> "SeqAutoencoder":
        """Seeded initialization; creation order of tensors is fixed."""
        rng = np.random.default_rng(config.seed)
        d, ffn, v = config.embed_dim, config.ffn_dim, vocab.size
        params: dict[str, np.ndarray] = {}
        params["tok_emb"] = rng.normal(0.0, 0.3, size=(v, d))
        params["hour_emb"] = rng.normal(0.0, 0.3, size=(24, d))
        for i in range(config.layers):
            scale = 1.0 / np.sqrt(d)
            params[f"l{i}.wq"] = rng.normal(0.0, scale, size=(d, d))
            params[f"l{i}.wk"] = rng.normal(0.0, scale, size=(d, d))
            params[f"l{i}.wv"] = rng.normal(0.0, scale, size=(d, d))
            params[f"l{i}.w1"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, ffn))
            params[f"l{i}.b1"] = np.zeros(ffn)
            params[f"l{i}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(ffn), size=(ffn, d))
            params[f"l{i}.b2"] = np.zeros(d)
            params[f"l{i}.ln_g"] = np.ones(d)
            params[f"l{i}.ln_b"] = np.zeros(d)
        params["out_w"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, v))
        params["out_b"] = np.zeros(v)
        return cls(vocab=vocab, config=config, params=params)

    # -- forward ------------------------------------------------------

    def _input_embedding(self, ids: np.ndarray, hours: np.ndarray) -> np.ndarray:
        n = len(ids)
        return (
            self.params["tok_emb"][ids]
            + pe_matrix(n, self.config.embed_dim)
            + self.params["hour_emb"][hours]
        )

    def _forward(self, ids: np.ndarray, hours: np.ndarray, keep_cache: bool):
        cfg = self.config
        heads, d = cfg.heads, cfg.embed_dim
        dk = d // heads
        n = len(ids)
        h = self._input_embedding(ids, hours)
        cache: list[dict[str, np.ndarray]] = []
        for i in range(cfg.layers):
            p = self.params
            q = h @ p[f"l{i}.wq"]
            k = h @ p[f"l{i}.wk"]
            v = h @ p[f"l{i}.wv"]
            qh = q.reshape(n, heads, dk).transpose(1, 0, 2)
            kh = k.reshape(n, heads, dk).transpose(1, 0, 2)
            vh = v.reshape(n, heads, dk).transpose(1, 0, 2)
            scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dk)
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            a = (attn @ vh).transpose(1, 0, 2).reshape(n, d)
            pre = a @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
            act = np.maximum(pre, 0.0)
            f = act @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
            u = a + f
            mu = u.mean(axis=1, keepdims=True)
            var = u.var(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + LN_EPS)
            xhat = (u - mu) * inv
            out = xhat * p[f"l{i}.ln_g"] + p[f"l{i}.ln_b"]
            if keep_cache:
                cache.append(
                    {
                        "h_in": h, "qh": qh, "kh": kh, "vh": vh, "attn": attn,
                        "a": a, "pre": pre, "act": act, "u": u, "inv": inv, "xhat": xhat,
                    }
                )
            h = out
        return h, cache

    def encode(self, ids: np.ndarray, hours: np.ndarray) -> np.ndarray:
        """Per-token representation matrix; deterministic for fixed weights."""
        if len(ids) == 0:
            raise ContractError("encode needs at least one token")
        if len(ids) > self.config.max_len:
            raise ContractError("token list exceeds max_len")
        z, _ = self._forward(ids, hours, keep_cache=False)
        return z

    def attention_rows(self, ids: np.ndarray, hours: np.ndarray) -> np.ndarray:
        """First-layer attention distribution, exposed for invariant probes."""
        cfg = self.config
        heads, d = cfg.heads, cfg.embed_dim
        dk = d // heads
        n = len(ids)
        h = self._input_embedding(ids, hours)
        q = (h @ self.params["l0.wq"]).reshape(n, heads, dk).transpose(1, 0, 2)
        k = (h @ self.params["l0.wk"]).reshape(n, heads, dk).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(dk)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        return attn

    # -- loss and gradients --------------------------------------------

    def masked_loss(
        self,
        ids: np.ndarray,
        hours: np.ndarray,
        mask_positions: np.ndarray,
        with_grads: bool = False,
    ):
        """Mean NLL of the original tokens at masked positions.

        Masked input positions are replaced by the mask token before
        encoding; the loss reads only those positions.
        """
        if len(ids) == 0:
            raise ContractError("loss needs a non-empty sequence")
        if len(mask_positions) == 0:
            raise ContractError("at least one position must be masked")
        ids_in = ids.copy()
        ids_in[mask_positions] = self.vocab.MASK
        z, cache = self._forward(ids_in, hours, keep_cache=with_grads)
        logits = z @ self.params["out_w"] + self.params["out_b"]

        rows = logits[mask_positions]
        rows = rows - rows.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(rows).sum(axis=1))
        targets = ids[mask_positions]
        log_p = rows[np.arange(len(targets)), targets] - log_z
        loss = float(-log_p.mean())
        if not with_grads:
            return loss, None

        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        n_masked = len(mask_positions)
        probs = np.exp(rows - log_z[:, None])
        dlogits = np.zeros_like(logits)
        dlogits[mask_positions] = probs / n_masked
        dlogits[mask_positions, targets] -= 1.0 / n_masked

        grads["out_w"] = z.T @ dlogits
        grads["out_b"] = dlogits.sum(axis=0)
        dh = dlogits @ self.params["out_w"].T

        cfg = self.config
        heads, d = cfg.heads, cfg.embed_dim
        dk = d // heads
        n = len(ids)
        for i in reversed(range(cfg.layers)):
            c = cache[i]
            p = self.params
            # layer norm
            dxhat = dh * p[f"l{i}.ln_g"]
            grads[f"l{i}.ln_g"] = (dh * c["xhat"]).sum(axis=0)
            grads[f"l{i}.ln_b"] = dh.sum(axis=0)
            u_centered = c["u"] - c["u"].mean(axis=1, keepdims=True)
            inv = c["inv"]
            dvar = (dxhat * u_centered).sum(axis=1, keepdims=True) * (-0.5) * inv**3
            dmu = (-inv) * dxhat.sum(axis=1, keepdims=True) + dvar * (-2.0 / d) * u_centered.sum(
                axis=1, keepdims=True
            )
            du = dxhat * inv + dvar * (2.0 / d) * u_centered + dmu / d
            # residual: u = a + ffn(a)
            da = du.copy()
            df = du
            grads[f"l{i}.w2"] = c["act"].T @ df
            grads[f"l{i}.b2"] = df.sum(axis=0)
            dact = df @ p[f"l{i}.w2"].T
            dpre = dact * (c["pre"] > 0.0)
            grads[f"l{i}.w1"] = c["a"].T @ dpre
            grads[f"l{i}.b1"] = dpre.sum(axis=0)
            da += dpre @ p[f"l{i}.w1"].T
            # attention
            doh = da.reshape(n, heads, dk).transpose(1, 0, 2)
            attn = c["attn"]
            dattn = doh @ c["vh"].transpose(0, 2, 1)
            dvh = attn.transpose(0, 2, 1) @ doh
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dqh = dscores @ c["kh"] / np.sqrt(dk)
            dkh = dscores.transpose(0, 2, 1) @ c["qh"] / np.sqrt(dk)
            dq = dqh.transpose(1, 0, 2).reshape(n, d)
            dk_full = dkh.transpose(1, 0, 2).reshape(n, d)
            dv = dvh.transpose(1, 0, 2).reshape(n, d)
            h_in = c["h_in"]
            grads[f"l{i}.wq"] = h_in.T @ dq
            grads[f"l{i}.wk"] = h_in.T @ dk_full
            grads[f"l{i}.wv"] = h_in.T @ dv
            dh = dq @ p[f"l{i}.wq"].T + dk_full @ p[f"l{i}.wk"].T + dv @ p[f"l{i}.wv"].T

        np.add.at(grads["tok_emb"], ids_in, dh)
        np.add.at(grads["hour_emb"], hours, dh)
        return loss, grads

    def sequence_loss(self, s: BehaviorSequence) -> float:
        """Reconstruction loss: mean over the fixed scoring mask patterns.

        Masks are derived from (model seed, sequence id hash), so the
        value is deterministic per (model, sequence) and independent of
        call order.
        """
        toks = tokenize(s, self.vocab, self.config.max_len)
        n = len(toks.ids)
        k = _mask_size(n, self.config.mask_ratio)
        total = 0.0
        for pattern in range(SCORING_MASK_PATTERNS):
            rng = np.random.default_rng(_sequence_scoring_seed(self.config.seed, s.id, pattern))
            mask = np.sort(rng.choice(n, size=k, replace=False))
            loss, _ = self.masked_loss(toks.ids, toks.hours, mask, with_grads=False)
            total += loss
        return total / SCORING_MASK_PATTERNS

    # -- persistence ----------------------------------------------------

    def weight_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode("utf-8"))
            digest.update(self.params[name].tobytes())
        return digest.hexdigest()

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": {
                "embed_dim": self.config.embed_dim,
                "heads": self.config.heads,
                "layers": self.config.layers,
                "ffn_dim": self.config.ffn_dim,
                "max_len": self.config.max_len,
                "mask_ratio": self.config.mask_ratio,
                "epochs": self.config.epochs,
                "batch_size": self.config.batch_size,
                "learning_rate": self.config.learning_rate,
                "seed": self.config.seed,
            },
            "vocab": list(self.vocab.tokens),
            "loss_trace": list(self.loss_trace),
        }
        np.savez(path, meta=np.array(json.dumps(meta)), **self.params)

    @classmethod
    def load(cls, path) -> "SeqAutoencoder":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ContractError(f"unsupported checkpoint version {meta['version']}")
            params = {name: data[name] for name in data.files if name != "meta"}
        return cls(
            vocab=Vocab(tokens=tuple(meta["vocab"])),
            config=ModelConfig(**meta["config"]),
            params=params,
            loss_trace=tuple(meta["loss_trace"]),
        )


def train_autoencoder(
    ds: Dataset,
    cfg: ModelConfig,
    *,
    catalog: DeviceCatalog | None = None,
    vocab: Vocab | None = None,
) -> SeqAutoencoder:
    """Train the masked-denoising autoencoder on `ds`.

    Fully deterministic for a fixed seed: sequences are visited in
    dataset order (no epoch shuffling), masks come from a dedicated
    seeded stream, and the optimizer walks parameters in sorted-name
    order. Returns the model with its per-epoch loss trace attached.
    """
    if len(ds) == 0:
        raise ContractError("cannot train on an empty dataset")
    if vocab is None:
        vocab = Vocab.build(ds.sequences, catalog)
    if vocab.real_token_count < 2:
        raise DegenerateCorpusError("corpus and catalog yield fewer than 2 distinct tokens")

    model = SeqAutoencoder.init(vocab, cfg)
    tokenized = [tokenize(s, vocab, cfg.max_len) for s in ds.sequences]

    adam_m = {name: np.zeros_like(v) for name, v in model.params.items()}
    adam_v = {name: np.zeros_like(v) for name, v in model.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    trace: list[float] = []

    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for start in range(0, len(tokenized), cfg.batch_size):
            batch = tokenized[start : start + cfg.batch_size]
            grads_sum: dict[str, np.ndarray] | None = None
            batch_loss = 0.0
            for offset, toks in enumerate(batch):
                n = len(toks.ids)
                k = _mask_size(n, cfg.mask_ratio)
                # mask keyed by (seed, epoch, position): adding or removing
                # sequences does not reshuffle anyone else's masks
                mask_rng = np.random.default_rng(
                    [cfg.seed, _MASK_STREAM_TAG, epoch, start + offset]
                )
                mask = np.sort(mask_rng.choice(n, size=k, replace=False))
                loss, grads = model.masked_loss(toks.ids, toks.hours, mask, with_grads=True)
                batch_loss += loss
                if grads_sum is None:
                    grads_sum = grads
                else:
                    for name in grads_sum:
                        grads_sum[name] += grads[name]
            assert grads_sum is not None
            scale = 1.0 / len(batch)
            step += 1
            for name in sorted(model.params):
                g = grads_sum[name] * scale
                adam_m[name] = beta1 * adam_m[name] + (1 - beta1) * g
                adam_v[name] = beta2 * adam_v[name] + (1 - beta2) * g * g
                m_hat = adam_m[name] / (1 - beta1**step)
                v_hat = adam_v[name] / (1 - beta2**step)
                model.params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            epoch_loss += batch_loss
        trace.append(epoch_loss / len(tokenized))

    model.loss_trace = tuple(trace)
    return model


def reconstruction_loss(m: SeqAutoencoder, s: BehaviorSequence) -> float:
    return m.sequence_loss(s)


def mean_reconstruction_loss(m: SeqAutoencoder, sequences: Sequence[BehaviorSequence]) -> float:
    if not sequences:
        raise ContractError("mean loss over an empty set is undefined")
    return float(np.mean([m.sequence_loss(s) for s in sequences]))
