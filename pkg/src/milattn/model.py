"""Attention-pooled MIL head: forward pass, loss, analytic gradients and
checkpoint serialization.

The trainable model is deliberately tiny: per instance embedding V_k, an
attention score w1 . tanh(w2 V_k), softmax-normalized attention weights
over the bag, an attention-weighted sum A of the embeddings, then a single
affine classification layer over A. The attention linear maps carry no
bias; the classifier does. All head math runs in float64 so analytic
gradients can be held to tight finite-difference tolerances.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CorruptPayloadError, UnsupportedVersionError
from .numerics import RngStream, cross_entropy, finite_diff_grad, relative_error, softmax
from .validation import require_finite

N_CLASSES = 4  # HER2 scores 0..3
DEFAULT_ATTENTION_DIM = 128

CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIII")  # magic, version, L, M, C


@dataclass
class MILParams:
    """Trainable tensors of the attention head and classifier."""

    w2: np.ndarray  # (L, M) first attention linear layer
    w1: np.ndarray  # (L,)   second attention linear layer
    wc: np.ndarray  # (C, M) classifier weights
    bc: np.ndarray  # (C,)   classifier bias

    def __post_init__(self):
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.wc = np.asarray(self.wc, dtype=np.float64)
        self.bc = np.asarray(self.bc, dtype=np.float64)
        L, M = self.w2.shape
        C = self.bc.shape[0]
        if self.w1.shape != (L,) or self.wc.shape != (C, M):
            raise ValueError(
                f"inconsistent parameter shapes: w2 {self.w2.shape}, "
                f"w1 {self.w1.shape}, wc {self.wc.shape}, bc {self.bc.shape}")
        for name in ("w2", "w1", "wc", "bc"):
            require_finite(name, getattr(self, name))

    @property
    def attention_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[1]

    @property
    def n_classes(self) -> int:
        return self.bc.shape[0]

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.w2, self.w1, self.wc, self.bc)

    def copy(self) -> "MILParams":
        return MILParams(self.w2.copy(), self.w1.copy(), self.wc.copy(), self.bc.copy())


@dataclass
class Gradients:
    """d(loss)/d(params), same shapes as MILParams."""

    w2: np.ndarray
    w1: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    def tensors(self) -> tuple[np.ndarray, ...]:
        return (self.w2, self.w1, self.wc, self.bc)


@dataclass
class Bag:
    """The MIL unit: N patch embeddings sampled from one slide."""

    slide_id: str
    label: int
    embeddings: np.ndarray  # (N, M) float64
    patch_xy: np.ndarray | None = None  # (N, 2) patch top-left coords, if known

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValueError(f"bag embeddings must be (N>=1, M), got {self.embeddings.shape}")
        require_finite("bag embeddings", self.embeddings)
        if self.patch_xy is not None:
            self.patch_xy = np.asarray(self.patch_xy).reshape(-1, 2)
            if self.patch_xy.shape[0] != self.embeddings.shape[0]:
                raise ValueError("patch_xy and embeddings disagree on bag size")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class BagOutput:
    attention: np.ndarray  # (N,) softmax weights, sums to 1
    bag_vector: np.ndarray  # (M,) attention-weighted sum of embeddings
    logits: np.ndarray  # (C,)
    probs: np.ndarray  # (C,) class distribution


def init_params(attention_dim: int, embed_dim: int, n_classes: int = N_CLASSES,
                rng: RngStream | None = None) -> MILParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, zero classifier bias."""
    if attention_dim < 1 or embed_dim < 1 or n_classes < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = rng if rng is not None else RngStream(0)
    bm = 1.0 / np.sqrt(embed_dim)
    bl = 1.0 / np.sqrt(attention_dim)
    return MILParams(
        w2=rng.uniform(-bm, bm, (attention_dim, embed_dim)),
        w1=rng.uniform(-bl, bl, attention_dim),
        wc=rng.uniform(-bm, bm, (n_classes, embed_dim)),
        bc=np.zeros(n_classes),
    )


def _check_dims(params: MILParams, bag: Bag) -> None:
    if bag.embeddings.shape[1] != params.embed_dim:
        raise ValueError(
            f"bag embedding dim {bag.embeddings.shape[1]} does not match "
            f"model embed_dim {params.embed_dim}")


def forward(params: MILParams, bag: Bag) -> BagOutput:
    """Attention scores, pooled bag vector, logits and class probabilities."""
    _check_dims(params, bag)
    E = bag.embeddings
    hidden = np.tanh(E @ params.w2.T)      # (N, L)
    scores = hidden @ params.w1            # (N,)
    attention = softmax(scores)
    pooled = attention @ E                 # (M,)
    logits = params.wc @ pooled + params.bc
    return BagOutput(attention=attention, bag_vector=pooled,
                     logits=logits, probs=softmax(logits))


def bag_loss(params: MILParams, bag: Bag) -> float:
    """Cross-entropy of the bag's class distribution against its label."""
    if not (0 <= bag.label < params.n_classes):
        raise IndexError(f"bag label {bag.label} out of range for {params.n_classes} classes")
    return cross_entropy(forward(params, bag).probs, bag.label)


def backward(params: MILParams, bag: Bag) -> tuple[float, Gradients]:
    """Loss and its analytic gradient wrt the head parameters.

    Chain rule through the classifier softmax (fused with cross-entropy as
    probs - onehot), the attention-weighted sum, the attention softmax and
    the tanh layer. Embeddings are constants: the embedder stays frozen.
    """
    _check_dims(params, bag)
    if not (0 <= bag.label < params.n_classes):
        raise IndexError(f"bag label {bag.label} out of range for {params.n_classes} classes")
    E = bag.embeddings
    hidden = np.tanh(E @ params.w2.T)      # (N, L)
    scores = hidden @ params.w1            # (N,)
    attention = softmax(scores)
    pooled = attention @ E                 # (M,)
    logits = params.wc @ pooled + params.bc
    probs = softmax(logits)
    loss = cross_entropy(probs, bag.label)

    d_logits = probs.copy()
    d_logits[bag.label] -= 1.0
    g_wc = np.outer(d_logits, pooled)
    g_bc = d_logits.copy()
    d_pooled = params.wc.T @ d_logits                      # (M,)
    d_attention = E @ d_pooled                             # (N,)
    d_scores = attention * (d_attention - attention @ d_attention)
    g_w1 = hidden.T @ d_scores                             # (L,)
    d_hidden = np.outer(d_scores, params.w1)               # (N, L)
    d_pre = d_hidden * (1.0 - hidden * hidden)
    g_w2 = d_pre.T @ E                                     # (L, M)
    return loss, Gradients(w2=g_w2, w1=g_w1, wc=g_wc, bc=g_bc)


def params_to_vector(params: MILParams) -> np.ndarray:
    return np.concatenate([t.ravel() for t in params.tensors()])


def vector_to_params(vec: np.ndarray, attention_dim: int, embed_dim: int,
                     n_classes: int) -> MILParams:
    L, M, C = attention_dim, embed_dim, n_classes
    sizes = (L * M, L, C * M, C)
    if vec.size != sum(sizes):
        raise ValueError(f"vector length {vec.size} does not match dims ({L}, {M}, {C})")
    parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
    return MILParams(parts[0].reshape(L, M), parts[1], parts[2].reshape(C, M), parts[3])


def gradient_check(seed: int = 0, bag_sizes=(1, 5, 100), embed_dim: int = 8,
                   attention_dim: int = 4, n_classes: int = N_CLASSES,
                   repeats: int = 3, h: float = 1e-6) -> float:
    """Max relative error of backward() against central finite differences.

    Sweeps random parameter draws and bag sizes; the finite-difference side
    never touches the analytic gradient code.
    """
    worst = 0.0
    for n in bag_sizes:
        for rep in range(repeats):
            rng = RngStream(seed, stream_id=n * 1000 + rep)
            params = init_params(attention_dim, embed_dim, n_classes, rng)
            bag = Bag(slide_id="gradcheck", label=int(rng.integers(0, n_classes)),
                      embeddings=rng.normal(0.0, 1.0, (n, embed_dim)))

            def loss_at(vec):
                return bag_loss(vector_to_params(vec, attention_dim, embed_dim, n_classes), bag)

            _, grads = backward(params, bag)
            analytic = np.concatenate([g.ravel() for g in grads.tensors()])
            numeric = finite_diff_grad(loss_at, params_to_vector(params), h)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def save_checkpoint(params: MILParams, path, metadata: dict | None = None) -> None:
    """Write params to the binary checkpoint layout; metadata, when given,
    goes to a JSON sidecar next to the checkpoint."""
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                   params.attention_dim, params.embed_dim,
                                   params.n_classes))
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    if metadata is not None:
        sidecar = p.with_suffix(p.suffix + ".json")
        sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> MILParams:
    """Read and validate a checkpoint written by save_checkpoint."""
    p = Path(path)
    data = p.read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise CorruptPayloadError(f"corrupt payload: {p} is shorter than the header")
    magic, version, L, M, C = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic: expected {CHECKPOINT_MAGIC!r}, found {magic!r} in {p}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"version unsupported: {version} in {p}")
    if L < 1 or M < 1 or C < 1:
        raise CorruptPayloadError(f"corrupt payload: dims ({L}, {M}, {C}) in {p}")
    n_params = L * M + L + C * M + C
    expected = _CKPT_HEADER.size + n_params * 8
    if len(data) != expected:
        raise CorruptPayloadError(
            f"corrupt payload: {p} has {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f8", count=n_params, offset=_CKPT_HEADER.size)
    if not np.all(np.isfinite(flat)):
        raise CorruptPayloadError(f"corrupt payload: non-finite parameter in {p}")
    return vector_to_params(flat.astype(np.float64), L, M, C)
