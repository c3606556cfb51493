"""Multimodal transformer encoder with MLM, MPM and TIA heads.

A sequence is laid out as ``[CLS] text [SEP] <pad> patches``: the text span
(segment "T") is padded to a common width, then the patch span (segment "I")
follows. Position ids are explicit (text slots count from 0 at [CLS]; patches
use their row-major grid index), and padding is excluded through the
attention mask, so the amount of padding never changes real outputs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .image import MaskedPatchGrid, PatchGrid
from .tensor import Tensor
from .text import CLS_ID, PAD_ID, SEP_ID, MaskedSequence, TokenSequence

SEGMENT_TEXT, SEGMENT_IMAGE = 0, 1
CHECKPOINT_MAGIC = b"FBRT"
CHECKPOINT_VERSION = 1
# patch features live in [0, 1]; centering them keeps the shared offset from
# swamping the per-patch differences after projection
PATCH_FEATURE_CENTER = 0.5


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff: int = 256
    vocab_size: int = 32
    max_text_len: int = 64  # text slots including [CLS] and [SEP]
    num_patches: int = 16
    patch_dim: int = 54
    num_segments: int = 2
    max_seq_len: int = 512
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.max_text_len < 3:
            raise ValueError("max_text_len must leave room for [CLS], [SEP] and one token")
        if self.max_text_len + self.num_patches > self.max_seq_len:
            raise ValueError(
                f"max_text_len {self.max_text_len} + {self.num_patches} patches exceeds the sequence budget {self.max_seq_len}"
            )
        if self.num_segments != 2:
            raise ValueError("exactly two segments (text, image) are supported")

    @classmethod
    def full_scale(cls, vocab_size: int, patch_dim: int = 54) -> "ModelConfig":
        return cls(num_layers=12, hidden=768, heads=12, ff=3072, vocab_size=vocab_size,
                   max_text_len=448, num_patches=64, patch_dim=patch_dim, max_seq_len=512)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


@dataclass
class MultimodalInput:
    """One assembled text/image example."""

    token_ids: list[int]  # [CLS] text [SEP]
    patch_features: np.ndarray  # (m, d_patch), masked patches already zeroed
    label: int = 1
    masked_text_positions: list[int] = field(default_factory=list)  # slot indices, [CLS] = 0
    masked_text_ids: list[int] = field(default_factory=list)
    masked_patch_positions: list[int] = field(default_factory=list)
    masked_patch_targets: np.ndarray | None = None

    @property
    def text_len(self) -> int:
        return len(self.token_ids)

    @property
    def num_patches(self) -> int:
        return self.patch_features.shape[0]

    @property
    def seq_len(self) -> int:
        return self.text_len + self.num_patches

    @property
    def segments(self) -> list[int]:
        return [SEGMENT_TEXT] * self.text_len + [SEGMENT_IMAGE] * self.num_patches

    @property
    def positions(self) -> list[int]:
        return list(range(self.text_len)) + list(range(self.num_patches))


def assemble_input(text, patches, label: int = 1, config: ModelConfig | None = None) -> MultimodalInput:
    """Build ``[CLS] text [SEP] patches`` from masked or unmasked components."""
    if len(text.ids) == 0:
        raise ValueError("text must contain at least one token")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    ids = [CLS_ID, *text.ids, SEP_ID]
    if config is not None:
        if len(ids) > config.max_text_len:
            raise ValueError(f"{len(text.ids)} text tokens + 2 specials exceed max_text_len {config.max_text_len}")
        if patches.num_patches != config.num_patches:
            raise ValueError(f"expected {config.num_patches} patches, got {patches.num_patches}")
        if patches.features.shape[1] != config.patch_dim:
            raise ValueError(f"expected patch features of dim {config.patch_dim}, got {patches.features.shape[1]}")
    inp = MultimodalInput(ids, np.asarray(patches.features), label)
    if isinstance(text, MaskedSequence):
        inp.masked_text_positions = [p + 1 for p in text.masked_positions]
        inp.masked_text_ids = list(text.original_ids)
    if isinstance(patches, MaskedPatchGrid):
        inp.masked_patch_positions = list(patches.masked_positions)
        inp.masked_patch_targets = patches.targets
    return inp


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, Tt)
    text_positions: np.ndarray  # (B, Tt)
    patch_features: np.ndarray  # (B, m, d_patch)
    attention_mask: np.ndarray  # (B, Tt + m) bool
    labels: np.ndarray  # (B,)
    text_lengths: np.ndarray  # (B,)
    mlm_rows: np.ndarray
    mlm_cols: np.ndarray
    mlm_targets: np.ndarray
    mpm_rows: np.ndarray
    mpm_cols: np.ndarray  # patch index within the grid
    mpm_targets: np.ndarray  # (P, d_patch)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def text_width(self) -> int:
        return self.token_ids.shape[1]

    @property
    def width(self) -> int:
        return self.attention_mask.shape[1]


def collate(inputs: Sequence[MultimodalInput], text_width: int | None = None, dtype=np.float64) -> Batch:
    """Stack examples, padding the text span to ``text_width`` (default: the
    longest text in the batch). MLM/MPM targets are collected from positive
    examples only."""
    if not inputs:
        raise ValueError("empty batch")
    longest = max(x.text_len for x in inputs)
    width = longest if text_width is None else text_width
    if width < longest:
        raise ValueError(f"text width {width} is shorter than the longest text ({longest})")
    m = inputs[0].num_patches
    b = len(inputs)
    ids = np.full((b, width), PAD_ID, dtype=np.int64)
    pos = np.tile(np.arange(width, dtype=np.int64), (b, 1))
    mask = np.zeros((b, width + m), dtype=bool)
    feats = np.empty((b, m, inputs[0].patch_features.shape[1]), dtype=dtype)
    mlm_r, mlm_c, mlm_t, mpm_r, mpm_c, mpm_t = [], [], [], [], [], []
    for i, x in enumerate(inputs):
        if x.num_patches != m:
            raise ValueError("all examples in a batch must have the same patch count")
        ids[i, : x.text_len] = x.token_ids
        pos[i, x.text_len :] = 0
        mask[i, : x.text_len] = True
        mask[i, width:] = True
        feats[i] = x.patch_features
        if x.label == 1:
            mlm_r += [i] * len(x.masked_text_positions)
            mlm_c += x.masked_text_positions
            mlm_t += x.masked_text_ids
            if x.masked_patch_positions:
                mpm_r += [i] * len(x.masked_patch_positions)
                mpm_c += x.masked_patch_positions
                mpm_t.append(x.masked_patch_targets)
    d = feats.shape[2]
    return Batch(
        token_ids=ids,
        text_positions=pos,
        patch_features=feats,
        attention_mask=mask,
        labels=np.array([x.label for x in inputs], dtype=np.int64),
        text_lengths=np.array([x.text_len for x in inputs], dtype=np.int64),
        mlm_rows=np.array(mlm_r, dtype=np.int64),
        mlm_cols=np.array(mlm_c, dtype=np.int64),
        mlm_targets=np.array(mlm_t, dtype=np.int64),
        mpm_rows=np.array(mpm_r, dtype=np.int64),
        mpm_cols=np.array(mpm_c, dtype=np.int64),
        mpm_targets=np.concatenate(mpm_t).astype(dtype) if mpm_t else np.zeros((0, d), dtype=dtype),
    )


@dataclass
class TaskLosses:
    mlm: float
    mpm: float
    tia: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.mlm, self.mpm, self.tia)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.hidden, cfg.ff
    shapes = [
        ("embed.word", (cfg.vocab_size, d), "normal"),
        ("embed.text_position", (cfg.max_text_len, d), "normal"),
        ("embed.patch_position", (cfg.num_patches, d), "normal"),
        ("embed.segment", (cfg.num_segments, d), "normal"),
        ("embed.patch_proj.w", (cfg.patch_dim, d), "normal"),
        ("embed.patch_proj.b", (d,), "zeros"),
        ("embed.ln.g", (d,), "ones"),
        ("embed.ln.b", (d,), "zeros"),
    ]
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        for name in ("q", "k", "v", "o"):
            shapes += [(p + f"attn.{name}.w", (d, d), "normal"), (p + f"attn.{name}.b", (d,), "zeros")]
        shapes += [
            (p + "ln1.g", (d,), "ones"), (p + "ln1.b", (d,), "zeros"),
            (p + "ff1.w", (d, f), "normal"), (p + "ff1.b", (f,), "zeros"),
            (p + "ff2.w", (f, d), "normal"), (p + "ff2.b", (d,), "zeros"),
            (p + "ln2.g", (d,), "ones"), (p + "ln2.b", (d,), "zeros"),
        ]
    shapes += [
        ("mlm.w", (d, cfg.vocab_size), "normal"), ("mlm.b", (cfg.vocab_size,), "zeros"),
        ("mpm.w", (d, cfg.patch_dim), "normal"), ("mpm.b", (cfg.patch_dim,), "zeros"),
        ("tia.w", (d, 1), "normal"), ("tia.b", (1,), "zeros"),
    ]
    return shapes


class FashionBERT:
    """Parameters plus the forward computations.

    ``params`` maps names to leaf tensors in a fixed order; the optimizer and
    checkpoint code iterate it directly.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, params: dict | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, shape, init in _param_shapes(config):
                if init == "normal":
                    arr = rng.normal(0.0, config.init_std, size=shape)
                elif init == "ones":
                    arr = np.ones(shape)
                else:
                    arr = np.zeros(shape)
                params[name] = arr
        expected = {name: shape for name, shape, _ in _param_shapes(config)}
        if set(params) != set(expected):
            raise ValueError("parameter names do not match the configuration")
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name] if not isinstance(params[name], Tensor) else params[name].data)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def astype(self, dtype) -> "FashionBERT":
        return FashionBERT(self.config, dtype=dtype, params={k: v.data for k, v in self.params.items()})

    def copy(self) -> "FashionBERT":
        return self.astype(self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward -------------------------------------------------------
    def embed(self, batch: Batch) -> Tensor:
        P = self.params
        seg = P["embed.segment"]
        text = T.embedding_lookup(P["embed.word"], batch.token_ids)
        text = text + T.embedding_lookup(P["embed.text_position"], batch.text_positions) + seg[SEGMENT_TEXT]
        feats = Tensor((batch.patch_features - PATCH_FEATURE_CENTER).astype(self.dtype, copy=False))
        img = feats @ P["embed.patch_proj.w"] + P["embed.patch_proj.b"]
        img = img + P["embed.patch_position"] + seg[SEGMENT_IMAGE]
        x = T.concat([text, img], axis=1)
        return T.layer_norm(x, P["embed.ln.g"], P["embed.ln.b"])

    def _attention(self, x: Tensor, bias: np.ndarray, prefix: str) -> Tensor:
        P = self.params
        b, k, d = x.shape
        h = self.config.heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return t.reshape(b, k, h, dh).transpose(0, 2, 1, 3)

        q = heads(x @ P[prefix + "q.w"] + P[prefix + "q.b"])
        kk = heads(x @ P[prefix + "k.w"] + P[prefix + "k.b"])
        v = heads(x @ P[prefix + "v.w"] + P[prefix + "v.b"])
        scores = (q @ kk.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + bias
        ctx = T.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, k, d)
        return ctx @ P[prefix + "o.w"] + P[prefix + "o.b"]

    def encode(self, batch: Batch) -> Tensor:
        """Last-layer hidden states, shape ``(B, width, hidden)``."""
        P = self.params
        x = self.embed(batch)
        # padded keys get -inf logits: exactly zero attention weight
        bias = np.where(batch.attention_mask, 0.0, -np.inf).astype(self.dtype)[:, None, None, :]
        for i in range(self.config.num_layers):
            p = f"layer{i}."
            x = T.layer_norm(x + self._attention(x, bias, p + "attn."), P[p + "ln1.g"], P[p + "ln1.b"])
            ffn = T.gelu(x @ P[p + "ff1.w"] + P[p + "ff1.b"]) @ P[p + "ff2.w"] + P[p + "ff2.b"]
            x = T.layer_norm(x + ffn, P[p + "ln2.g"], P[p + "ln2.b"])
        return x

    # -- heads ---------------------------------------------------------
    def mlm_loss(self, hidden: Tensor, batch: Batch) -> Tensor:
        if batch.mlm_rows.size == 0:
            raise ValueError("MLM loss needs at least one masked token in a positive example")
        h = hidden[batch.mlm_rows, batch.mlm_cols]
        logits = h @ self.params["mlm.w"] + self.params["mlm.b"]
        return T.cross_entropy(logits, batch.mlm_targets)

    def mpm_logits(self, hidden: Tensor, batch: Batch) -> Tensor:
        h = hidden[batch.mpm_rows, batch.text_width + batch.mpm_cols]
        return h @ self.params["mpm.w"] + self.params["mpm.b"]

    def mpm_loss(self, hidden: Tensor, batch: Batch) -> Tensor:
        if batch.mpm_rows.size == 0:
            raise ValueError("MPM loss needs at least one masked patch in a positive example")
        predicted = T.softmax(self.mpm_logits(hidden, batch), axis=-1)
        target = T._softmax_array(batch.mpm_targets.astype(self.dtype, copy=False), -1)
        return T.kl_divergence(target, predicted)

    def tia_logits(self, hidden: Tensor) -> Tensor:
        return (hidden[:, 0, :] @ self.params["tia.w"] + self.params["tia.b"]).reshape(-1)

    def tia_loss(self, hidden: Tensor, batch: Batch) -> tuple[Tensor, np.ndarray]:
        logits = self.tia_logits(hidden)
        return T.bce_with_logits(logits, batch.labels), T._sigmoid_array(logits.data)

    def task_losses(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        hidden = self.encode(batch)
        tia, _ = self.tia_loss(hidden, batch)
        return self.mlm_loss(hidden, batch), self.mpm_loss(hidden, batch), tia

    def score(self, batch: Batch) -> np.ndarray:
        """TIA match probabilities; no graph is recorded."""
        with T.no_grad():
            hidden = self.encode(batch)
            return T._sigmoid_array(self.tia_logits(hidden).data)


def match_score(model: FashionBERT, text: TokenSequence, patches: PatchGrid) -> float:
    """Probability that ``text`` describes the image behind ``patches``.
    Nothing is masked on this path."""
    batch = collate([assemble_input(text, patches, 1, model.config)], dtype=model.dtype)
    return float(model.score(batch)[0])


def score_pairs(model: FashionBERT, pairs, batch_size: int = 128, text_width: int | None = None) -> np.ndarray:
    """Match probabilities for ``(TokenSequence, PatchGrid)`` pairs, in order."""
    out = []
    for lo in range(0, len(pairs), batch_size):
        chunk = [assemble_input(t, p, 1, model.config) for t, p in pairs[lo : lo + batch_size]]
        out.append(model.score(collate(chunk, text_width=text_width, dtype=model.dtype)))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: FashionBERT) -> None:
    """Header (magic, version, JSON config) then named float32 LE blocks."""
    header = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    chunks.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<HB", len(raw), p.ndim) + raw + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> FashionBERT:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = ModelConfig.from_dict(json.loads(buf[off : off + hlen].decode("utf-8")))
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", buf, off)
        off += 3
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        params[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    return FashionBERT(config, dtype=np.float32, params=params)
