"""SIFT cross-attention loss: per-query cross-entropy, layer/head/query averaging and the gated objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from siftsup.config import LossConfig
from siftsup.errors import LengthMismatch, ParseError, ResolutionMismatch
from siftsup.refattn import GridSpec, ReferenceAttention

logger = logging.getLogger("siftsup.loss")

ATN_MAGIC = b"ATN1"
_ROW_TOLERANCE = 1e-5


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """Softmax attention weights of shape (L, H, Nq, Nk) with optional query/key grids."""

    weights: np.ndarray
    query_grid: GridSpec | None = None
    key_grid: GridSpec | None = None

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ValueError(f"attention must have shape (L, H, Nq, Nk), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("attention weights must be finite and non-negative")
        if w.size and np.max(np.abs(w.sum(axis=-1) - 1.0)) > _ROW_TOLERANCE:
            raise ValueError("attention rows must sum to 1")
        if self.query_grid is not None and self.query_grid.size != w.shape[2]:
            raise ValueError(f"query grid has {self.query_grid.size} cells, attention has {w.shape[2]} queries")
        if self.key_grid is not None and self.key_grid.size != w.shape[3]:
            raise ValueError(f"key grid has {self.key_grid.size} cells, attention has {w.shape[3]} keys")
        object.__setattr__(self, "weights", w)

    @property
    def layers(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]

    @property
    def num_queries(self) -> int:
        return self.weights.shape[2]

    @property
    def num_keys(self) -> int:
        return self.weights.shape[3]


def sift_loss_per_query(p_i: np.ndarray, q_row: np.ndarray, epsilon_floor: float = 1e-12) -> float:
    """-sum_j p_ij * log(max(q_ij, eps)); keys with p_ij == 0 contribute nothing."""
    p = np.asarray(p_i, dtype=np.float64)
    q = np.asarray(q_row, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"reference has {p.shape} entries, attention row has {q.shape}")
    support = p > 0
    return float(-np.sum(p[support] * np.log(np.maximum(q[support], epsilon_floor))))


def sift_loss_gradient(p_i: np.ndarray, q_row: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Gradient of the cross-entropy w.r.t. the logits that produced *q_row*: scale * (q - p).

    Works row-wise on stacked (..., Nk) arrays as well.
    """
    p = np.asarray(p_i, dtype=np.float64)
    q = np.asarray(q_row, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"reference has {p.shape} entries, attention row has {q.shape}")
    return scale * (q - p)


def _same_resolution(a: GridSpec, b: GridSpec) -> bool:
    return a.resolution == b.resolution


def match_reference(refs: list[ReferenceAttention], attn: AttentionTensor) -> ReferenceAttention:
    """Reference at the tensor's resolution: by grid when the tensor carries one, else by (Nq, Nk)."""
    for ref in refs:
        if attn.query_grid is not None and attn.key_grid is not None:
            if _same_resolution(ref.query_grid, attn.query_grid) and _same_resolution(ref.key_grid, attn.key_grid):
                return ref
        elif (ref.query_grid.size, ref.key_grid.size) == (attn.num_queries, attn.num_keys):
            return ref
    raise ResolutionMismatch(
        f"no reference attention for a {attn.num_queries}x{attn.num_keys} attention tensor "
        f"(references: {[(r.query_grid.size, r.key_grid.size) for r in refs]})"
    )


def sift_loss_sums(ref: ReferenceAttention, attn: AttentionTensor, epsilon_floor: float = 1e-12) -> tuple[float, int]:
    """Summed per-query losses over every (layer, head, supervised query) and the number of terms."""
    idx, probs = ref.dense()
    if len(idx) == 0:
        return 0.0, 0
    q = attn.weights[:, :, idx, :]
    log_q = np.log(np.maximum(q, epsilon_floor))
    total = float(-np.sum(probs * log_q))
    return total, attn.layers * attn.heads * len(idx)


def sift_loss_total(
    refs: list[ReferenceAttention], attn: list[AttentionTensor], epsilon_floor: float = 1e-12
) -> float:
    """Mean per-query loss over all (layer, head, supervised query) terms.

    Each tensor is scored against the reference at its own resolution; the divisor is
    the sum over layers of H times the supervised query count at that resolution.
    Returns 0.0 when no query is supervised anywhere.
    """
    total = 0.0
    terms = 0
    for tensor in attn:
        ref = match_reference(refs, tensor)
        s, n = sift_loss_sums(ref, tensor, epsilon_floor)
        total += s
        terms += n
    if terms == 0:
        logger.debug("no supervised queries; SIFT loss is 0")
        return 0.0
    return total / terms


def combined_loss(denoise_term: float, t: int, sift_term: float, cfg: LossConfig | None = None) -> float:
    """omega(t) * denoise + lambda * sift, with the SIFT term applied only at t <= eta."""
    cfg = cfg or LossConfig()
    base = cfg.omega(t) * denoise_term
    if t <= cfg.eta:
        return base + cfg.lambda_sift * sift_term
    return base


# ---------------------------------------------------------------------------
# ATN1 files
# ---------------------------------------------------------------------------


def encode_attention(attn: AttentionTensor) -> bytes:
    w = attn.weights
    header = ATN_MAGIC + np.array([w.ndim], dtype="<u4").tobytes() + np.array(w.shape, dtype="<u8").tobytes()
    return header + np.ascontiguousarray(w, dtype="<f4").tobytes()


def decode_attention(raw: bytes) -> AttentionTensor:
    """Parse an ATN1 blob. Rank 3 (H, Nq, Nk) is read as a single layer."""
    if len(raw) < 8 or raw[:4] != ATN_MAGIC:
        raise ParseError("not an ATN1 attention file")
    rank = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if rank not in (3, 4):
        raise ParseError(f"ATN1 rank must be 3 or 4, got {rank}")
    offset = 8 + 8 * rank
    if len(raw) < offset:
        raise ParseError("truncated ATN1 header")
    dims = tuple(int(v) for v in np.frombuffer(raw, dtype="<u8", count=rank, offset=8))
    count = int(np.prod(dims))
    if len(raw) != offset + 4 * count:
        raise ParseError(f"ATN1 payload has {len(raw) - offset} bytes, expected {4 * count} for dims {dims}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
    if rank == 3:
        data = data[np.newaxis]
    try:
        return AttentionTensor(data.astype(np.float64))
    except ValueError as e:
        raise ParseError(f"invalid attention weights: {e}") from e


def write_attention(attn: AttentionTensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_attention(attn))


def read_attention(path: str | Path) -> AttentionTensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    return decode_attention(raw)
