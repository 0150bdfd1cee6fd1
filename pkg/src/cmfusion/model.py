"""Cross-modal audio/text fusion network.

Per dialogue, both modalities are ``[T, d_in]`` sequences of utterance-level
feature vectors. Seven ``[T, d_model]`` streams are computed and concatenated
before a two-layer classification head:

====== ======================================================================
name   computation
====== ======================================================================
c_a    cross-attention branch, audio stream (after ``n_sca_layers`` blocks)
c_t    cross-attention branch, text stream
s_a    self-attention branch over the audio encoding
s_t    self-attention branch over the text encoding
mid    stacked per-modality LSTMs, concatenated, BiLSTM, feed-forward
r_a    LayerNorm(Linear(audio features))
r_t    LayerNorm(Linear(text features))
====== ======================================================================

All residual updates inside the attention blocks are elementwise sums
followed by layer norm. Masked (padding) key positions receive a -1e9 logit.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import BiLSTM, FeedForward, LayerNorm, Linear, LSTM, Module
from .tensor import ShapeError, Tensor

STREAMS: tuple[str, ...] = ("c_a", "c_t", "s_a", "s_t", "mid", "r_a", "r_t")

LLD_DIM = 6552
BOTTLENECK_DIM = 6144
TEXT_DIM = 4096
MASK_LOGIT = -1e9


@dataclass
class ModelConfig:
    d_audio_in: int = LLD_DIM + BOTTLENECK_DIM
    d_text_in: int = TEXT_DIM
    d_model: int = 128
    n_sca_layers: int = 2
    ff_inner: int | None = None
    n_classes: int = 7
    seed: int = 0
    share_encoders: bool = False
    streams: tuple[str, ...] = STREAMS
    # leading audio columns holding handcrafted descriptors; None scales 6552/12696
    audio_lld_dim: int | None = None
    # [start, stop) audio columns forced to zero (feature ablations)
    audio_zero_range: tuple[int, int] | None = None

    def __post_init__(self):
        self.streams = tuple(self.streams)
        if self.audio_zero_range is not None:
            self.audio_zero_range = tuple(int(v) for v in self.audio_zero_range)
        for name in ("d_audio_in", "d_text_in", "d_model", "n_sca_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.ff_inner is not None and self.ff_inner < 1:
            raise ValueError(f"ff_inner must be positive, got {self.ff_inner}")
        if self.d_model % 2:
            raise ValueError(f"d_model must be even (split across LSTM directions), got {self.d_model}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {self.n_classes}")
        unknown = set(self.streams) - set(STREAMS)
        if unknown or not self.streams or len(set(self.streams)) != len(self.streams):
            raise ValueError(f"streams must be a non-empty subset of {STREAMS}, got {self.streams}")
        # keep canonical order so the aggregation layout never depends on input order
        self.streams = tuple(s for s in STREAMS if s in self.streams)
        if self.audio_lld_dim is not None and not 0 <= self.audio_lld_dim <= self.d_audio_in:
            raise ValueError(f"audio_lld_dim {self.audio_lld_dim} outside [0, {self.d_audio_in}]")
        if self.audio_zero_range is not None:
            lo, hi = self.audio_zero_range
            if not 0 <= lo <= hi <= self.d_audio_in:
                raise ValueError(f"audio_zero_range {self.audio_zero_range} outside [0, {self.d_audio_in}]")

    @property
    def lld_dim(self) -> int:
        if self.audio_lld_dim is not None:
            return self.audio_lld_dim
        return int(round(self.d_audio_in * LLD_DIM / (LLD_DIM + BOTTLENECK_DIM)))

    @property
    def aggregation_width(self) -> int:
        return len(self.streams) * self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        d["audio_zero_range"] = None if self.audio_zero_range is None else list(self.audio_zero_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Configuration small enough for exhaustive finite-difference checks."""
    base = dict(d_audio_in=6, d_text_in=8, d_model=8, n_sca_layers=2, n_classes=3, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def _rng(seed: int, name: str) -> np.random.Generator:
    # per-module streams: a module's init does not depend on which others exist
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# -- attention -------------------------------------------------------------

def _mask_bias(mask: np.ndarray, n_query: int) -> np.ndarray:
    """Additive logits ``[B, Tq, Tk]`` that hide padded key positions."""
    return np.broadcast_to(((1.0 - mask) * MASK_LOGIT)[:, None, :],
                           (mask.shape[0], n_query, mask.shape[1])).copy()


class AttentionLayer(Module):
    """Single-head scaled dot-product attention plus its two norm sublayers."""

    def __init__(self, d: int, ff_inner: int | None, rng: np.random.Generator):
        self.d = d
        limit = np.sqrt(6.0 / (2 * d))
        self.W_Q = Tensor(rng.uniform(-limit, limit, (d, d)), requires_grad=True)
        self.W_K = Tensor(rng.uniform(-limit, limit, (d, d)), requires_grad=True)
        self.W_V = Tensor(rng.uniform(-limit, limit, (d, d)), requires_grad=True)
        self.ln1 = LayerNorm(d)
        self.ff = FeedForward(d, ff_inner, rng)
        self.ln2 = LayerNorm(d)

    def propagate(self, query_src: Tensor, kv_src: Tensor, mask: np.ndarray) -> Tensor:
        """``softmax(Q K^T / sqrt(d)) V`` with queries from ``query_src``."""
        if query_src.shape != kv_src.shape or query_src.shape[-1] != self.d:
            raise ShapeError(f"attention inputs {query_src.shape} and {kv_src.shape} for width {self.d}")
        q = T.matmul(query_src, T.transpose(self.W_Q))
        k = T.matmul(kv_src, T.transpose(self.W_K))
        v = T.matmul(kv_src, T.transpose(self.W_V))
        logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.d))
        logits = T.add(logits, Tensor(_mask_bias(mask, query_src.shape[1])))
        return T.matmul(T.softmax(logits, axis=-1), v)

    def finish(self, h_ln: Tensor) -> Tensor:
        return attention_block_finish(self, h_ln)


class CrossAttentionLayer(Module):
    """One stacked cross-attention level: one attention layer per receiving stream.

    ``to_text`` computes softmax(Q_a K_t^T / sqrt(d)) V_t, which updates the
    text stream; ``to_audio`` computes softmax(Q_t K_a^T / sqrt(d)) V_a, which
    updates the audio stream.
    """

    def __init__(self, d: int, ff_inner: int | None, seed: int, prefix: str):
        self.to_text = AttentionLayer(d, ff_inner, _rng(seed, prefix + ".to_text"))
        self.to_audio = AttentionLayer(d, ff_inner, _rng(seed, prefix + ".to_audio"))


def cross_attention_propagate(layer: CrossAttentionLayer, H_a: Tensor, H_t: Tensor,
                              mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Return ``(dH_a_to_t, dH_t_to_a)``."""
    d_at = layer.to_text.propagate(H_a, H_t, mask)
    d_ta = layer.to_audio.propagate(H_t, H_a, mask)
    return d_at, d_ta


def residual_norm_update(ln: LayerNorm, H: Tensor, dH: Tensor) -> Tensor:
    if H.shape != dH.shape:
        raise ShapeError(f"residual update: {H.shape} vs {dH.shape}")
    return ln(T.add(H, dH))


def attention_block_finish(layer: AttentionLayer, h_ln: Tensor) -> Tensor:
    return layer.ln2(T.add(h_ln, layer.ff(h_ln)))


def self_attention_block(layer: AttentionLayer, H: Tensor, mask: np.ndarray) -> Tensor:
    delta = layer.propagate(H, H, mask)
    return attention_block_finish(layer, residual_norm_update(layer.ln1, H, delta))


def cross_attention_block(layer: CrossAttentionLayer, H_a: Tensor, H_t: Tensor,
                          mask: np.ndarray) -> tuple[Tensor, Tensor]:
    d_at, d_ta = cross_attention_propagate(layer, H_a, H_t, mask)
    new_a = attention_block_finish(layer.to_audio, residual_norm_update(layer.to_audio.ln1, H_a, d_ta))
    new_t = attention_block_finish(layer.to_text, residual_norm_update(layer.to_text.ln1, H_t, d_at))
    return new_a, new_t


# -- the network --------------------------------------------------------------

class CMRobertaModel(Module):
    """The fusion network. Only the branches feeding ``config.streams`` are built."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        d, seed, ff = c.d_model, c.seed, c.ff_inner
        want = set(c.streams)
        need_attn = bool(want & {"c_a", "c_t", "s_a", "s_t"})
        if need_attn or ("mid" in want and c.share_encoders):
            self.enc_a = BiLSTM(c.d_audio_in, d, _rng(seed, "enc_a"))
            self.enc_t = BiLSTM(c.d_text_in, d, _rng(seed, "enc_t"))
        if want & {"c_a", "c_t"}:
            self.cross = [CrossAttentionLayer(d, ff, seed, f"cross.{i}") for i in range(c.n_sca_layers)]
        if "s_a" in want:
            self.self_a = [AttentionLayer(d, ff, _rng(seed, f"self_a.{i}")) for i in range(c.n_sca_layers)]
        if "s_t" in want:
            self.self_t = [AttentionLayer(d, ff, _rng(seed, f"self_t.{i}")) for i in range(c.n_sca_layers)]
        if "mid" in want:
            if not c.share_encoders:
                self.mid_a1 = LSTM(c.d_audio_in, d, _rng(seed, "mid_a1"))
                self.mid_t1 = LSTM(c.d_text_in, d, _rng(seed, "mid_t1"))
            self.mid_a2 = LSTM(d, d, _rng(seed, "mid_a2"))
            self.mid_t2 = LSTM(d, d, _rng(seed, "mid_t2"))
            self.mid_join = BiLSTM(2 * d, d, _rng(seed, "mid_join"))
            self.mid_ff = FeedForward(d, ff, _rng(seed, "mid_ff"))
        if "r_a" in want:
            self.res_a = Linear(c.d_audio_in, d, _rng(seed, "res_a"))
            self.res_a_ln = LayerNorm(d)
        if "r_t" in want:
            self.res_t = Linear(c.d_text_in, d, _rng(seed, "res_t"))
            self.res_t_ln = LayerNorm(d)
        self.head1 = Linear(c.aggregation_width, d, _rng(seed, "head1"))
        self.head2 = Linear(d, c.n_classes, _rng(seed, "head2"))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: stored {arr.shape}, model {p.shape}")
            p.data[...] = arr

    # -- forward pieces ------------------------------------------------------
    def prepare(self, X_a, X_t, mask=None) -> tuple[Tensor, Tensor, np.ndarray]:
        """Validate and batch inputs; returns ``[B, T, d]`` tensors and a ``[B, T]`` mask."""
        X_a = X_a if isinstance(X_a, Tensor) else Tensor(X_a)
        X_t = X_t if isinstance(X_t, Tensor) else Tensor(X_t)
        if X_a.ndim == 2:
            X_a = Tensor(X_a.data[None])
            X_t = Tensor(X_t.data[None]) if X_t.ndim == 2 else X_t
            if mask is not None:
                mask = np.asarray(mask)[None]
        if X_a.ndim != 3 or X_t.ndim != 3:
            raise ShapeError(f"inputs must be [T, d] or [B, T, d]; got audio {X_a.shape}, text {X_t.shape}")
        if X_a.shape[:2] != X_t.shape[:2]:
            raise ShapeError(f"audio and text sequences are not aligned: {X_a.shape[:2]} vs {X_t.shape[:2]}")
        c = self.config
        if X_a.shape[-1] != c.d_audio_in:
            raise ShapeError(f"audio features: got {X_a.shape[-1]}, model expects {c.d_audio_in}")
        if X_t.shape[-1] != c.d_text_in:
            raise ShapeError(f"text features: got {X_t.shape[-1]}, model expects {c.d_text_in}")
        mask = np.ones(X_a.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
        if mask.shape != X_a.shape[:2]:
            raise ShapeError(f"mask {mask.shape} does not match sequences {X_a.shape[:2]}")
        if c.audio_zero_range is not None:
            lo, hi = c.audio_zero_range
            xa = X_a.data.copy()
            xa[..., lo:hi] = 0.0
            X_a = Tensor(xa, requires_grad=X_a.requires_grad) if X_a.is_leaf else X_a
        return X_a, X_t, mask

    def encode(self, X_a: Tensor, X_t: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        if X_a.shape[:-1] != X_t.shape[:-1]:
            raise ShapeError(f"audio and text sequences are not aligned: {X_a.shape} vs {X_t.shape}")
        return self.enc_a(X_a, mask), self.enc_t(X_t, mask)

    def cross_branch(self, H_a: Tensor, H_t: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        ca, ct = H_a, H_t
        for layer in self.cross:
            ca, ct = cross_attention_block(layer, ca, ct, mask)
        return ca, ct

    def self_branch(self, H: Tensor, modality: str, mask: np.ndarray) -> Tensor:
        for layer in getattr(self, f"self_{modality}"):
            H = self_attention_block(layer, H, mask)
        return H

    def sca_forward(self, H_a: Tensor, H_t: Tensor, mask: np.ndarray) -> dict[str, Tensor]:
        """Cross and self branches run side by side from the same encodings."""
        out: dict[str, Tensor] = {}
        if hasattr(self, "cross"):
            out["c_a"], out["c_t"] = self.cross_branch(H_a, H_t, mask)
        if hasattr(self, "self_a"):
            out["s_a"] = self.self_branch(H_a, "a", mask)
        if hasattr(self, "self_t"):
            out["s_t"] = self.self_branch(H_t, "t", mask)
        return out

    def mid_level_fusion(self, X_a: Tensor, X_t: Tensor, mask: np.ndarray,
                         encoded: tuple[Tensor, Tensor] | None = None) -> Tensor:
        if self.config.share_encoders:
            a1, t1 = encoded if encoded is not None else self.encode(X_a, X_t, mask)
        else:
            a1, t1 = self.mid_a1(X_a, mask), self.mid_t1(X_t, mask)
        a2, t2 = self.mid_a2(a1, mask), self.mid_t2(t1, mask)
        joined = self.mid_join(T.concat([a2, t2], axis=-1), mask)
        return self.mid_ff(joined)

    def residual_branch(self, X: Tensor, modality: str) -> Tensor:
        if modality == "a":
            return self.res_a_ln(self.res_a(X))
        return self.res_t_ln(self.res_t(X))

    def branch_dependencies(self) -> dict[str, tuple[str, ...]]:
        """Parameter-name prefixes each branch reads (used to memoise branches)."""
        mid = ("mid_", "enc_a.", "enc_t.") if self.config.share_encoders else ("mid_",)
        return {
            "cross": ("enc_a.", "enc_t.", "cross."),
            "self_a": ("enc_a.", "self_a."),
            "self_t": ("enc_t.", "self_t."),
            "mid": mid,
            "res_a": ("res_a",),
            "res_t": ("res_t",),
        }

    def streams(self, X_a, X_t, mask=None, memo=None) -> tuple[dict[str, Tensor], np.ndarray]:
        """Compute every configured stream.

        ``memo(branch, compute)`` may return a cached result instead of calling
        ``compute()``; by default every branch is computed.
        """
        X_a, X_t, mask = self.prepare(X_a, X_t, mask)
        want = set(self.config.streams)
        run = memo or (lambda branch, compute: compute())
        enc: list[tuple[Tensor, Tensor]] = []

        def encoded():
            if not enc:
                try:
                    enc.append(self.encode(X_a, X_t, mask))
                except ShapeError as e:
                    raise ShapeError(f"encoder: {e}") from e
            return enc[0]

        out: dict[str, Tensor] = {}
        try:
            if want & {"c_a", "c_t"}:
                out["c_a"], out["c_t"] = run("cross", lambda: self.cross_branch(*encoded(), mask))
            if "s_a" in want:
                out["s_a"] = run("self_a", lambda: self.self_branch(encoded()[0], "a", mask))
            if "s_t" in want:
                out["s_t"] = run("self_t", lambda: self.self_branch(encoded()[1], "t", mask))
        except ShapeError as e:
            raise ShapeError(f"attention streams: {e}") from e
        if "mid" in want:
            try:
                shared = encoded() if self.config.share_encoders else None
                out["mid"] = run("mid", lambda: self.mid_level_fusion(X_a, X_t, mask, shared))
            except ShapeError as e:
                raise ShapeError(f"stream mid: {e}") from e
        for key, X, m in (("r_a", X_a, "a"), ("r_t", X_t, "t")):
            if key in want:
                try:
                    out[key] = run(f"res_{m}", lambda X=X, m=m: self.residual_branch(X, m))
                except ShapeError as e:
                    raise ShapeError(f"stream {key}: {e}") from e
        return out, mask

    def aggregate(self, X_a, X_t, mask=None, zero_streams: Sequence[str] = (),
                  memo=None) -> tuple[Tensor, np.ndarray]:
        """Featurewise concatenation of the configured streams: ``[B, T, k*d_model]``."""
        streams, mask = self.streams(X_a, X_t, mask, memo)
        parts = []
        for key in self.config.streams:
            s = streams[key]
            if key in zero_streams:
                s = Tensor(np.zeros(s.shape))
            parts.append(s)
        return T.concat(parts, axis=-1), mask

    def forward(self, X_a, X_t, mask=None, memo=None) -> Tensor:
        """Logits ``[B, T, n_classes]`` (or ``[T, n_classes]`` for an unbatched dialogue)."""
        batched = (X_a.ndim if isinstance(X_a, Tensor) else np.ndim(X_a)) == 3
        agg, _ = self.aggregate(X_a, X_t, mask, memo=memo)
        logits = self.head2(T.relu(self.head1(agg)))
        if not batched:
            return Tensor._from_op(logits.data[0], (logits,), lambda g: (g[None],), "squeeze")
        return logits

    __call__ = forward


def model_forward(model: CMRobertaModel, X_a, X_t, mask=None) -> Tensor:
    return model.forward(X_a, X_t, mask)


def predict_proba(model: CMRobertaModel, X_a, X_t, mask=None) -> np.ndarray:
    with T.no_grad():
        logits = model.forward(X_a, X_t, mask)
        return T.softmax(logits, axis=-1).data
