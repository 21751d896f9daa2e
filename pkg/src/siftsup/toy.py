"""A minimal trainable cross-attention layer and the gradient-descent loop that fits it to SIFT references.

Only query/key projections are modelled: the SIFT loss depends on attention weights alone,
so values and output projections are left out. The denoising term is absent as well; each
step minimizes lambda * L_SIFT when the sampled timestep passes the eta gate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax
from scipy.stats import entropy

from siftsup.config import FeatureSpec, ToyTrainConfig
from siftsup.errors import DimMismatch, InvalidPerturbation, NoSupervisedQueries
from siftsup.loss import AttentionTensor, sift_loss_gradient, sift_loss_total
from siftsup.refattn import GridSpec, ReferenceAttention

logger = logging.getLogger("siftsup.toy")


@dataclass
class ToyAttentionLayer:
    """Stacked per-layer projections: w_q and w_k have shape (L, d, d); heads split the columns."""

    w_q: np.ndarray
    w_k: np.ndarray
    heads: int

    def __post_init__(self) -> None:
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        if self.w_q.ndim == 2:
            self.w_q = self.w_q[np.newaxis]
        if self.w_k.ndim == 2:
            self.w_k = self.w_k[np.newaxis]
        if self.w_q.shape != self.w_k.shape or self.w_q.shape[1] != self.w_q.shape[2]:
            raise DimMismatch(f"projections must both be (L, d, d), got {self.w_q.shape} and {self.w_k.shape}")
        if self.heads < 1 or self.dim % self.heads:
            raise DimMismatch(f"head count {self.heads} does not divide width {self.dim}")
        if not (np.all(np.isfinite(self.w_q)) and np.all(np.isfinite(self.w_k))):
            raise ValueError("projection matrices must be finite")

    @classmethod
    def initialize(
        cls, dim: int, heads: int, layers: int = 1, init_scale: float = 1.0, rng: np.random.Generator | None = None
    ) -> ToyAttentionLayer:
        rng = rng or np.random.default_rng(0)
        w_q = init_scale * rng.standard_normal((layers, dim, dim)) / math.sqrt(dim)
        w_k = init_scale * rng.standard_normal((layers, dim, dim)) / math.sqrt(dim)
        return cls(w_q, w_k, heads)

    @property
    def dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def layers(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def temperature(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def copy(self) -> ToyAttentionLayer:
        return ToyAttentionLayer(self.w_q.copy(), self.w_k.copy(), self.heads)

    def num_parameters(self) -> int:
        return self.w_q.size + self.w_k.size


@dataclass(frozen=True)
class AttentionDiagnostics:
    """Attention sharpness and alignment, averaged over layers and heads."""

    entropy: tuple[float, ...]
    supervised: tuple[int, ...]
    argmax_alignment: float
    sift_loss: float

    @property
    def mean_supervised_entropy(self) -> float:
        if not self.supervised:
            return 0.0
        return float(np.mean([self.entropy[i] for i in self.supervised]))

    def to_text(self, prefix: str = "") -> str:
        lines = [
            f"{prefix}sift_loss={self.sift_loss:.9g}",
            f"{prefix}mean_supervised_entropy={self.mean_supervised_entropy:.9g}",
            f"{prefix}argmax_alignment={self.argmax_alignment:.9g}",
        ]
        return "".join(line + "\n" for line in lines)


@dataclass
class ToyRun:
    layer: ToyAttentionLayer
    before: AttentionDiagnostics
    after: AttentionDiagnostics
    loss_history: list[float] = field(default_factory=list)
    gated_steps: list[int] = field(default_factory=list)
    queries: np.ndarray | None = None
    keys: np.ndarray | None = None

    def history_text(self) -> str:
        return "".join(f"{step} {loss:.9g}\n" for step, loss in enumerate(self.loss_history))


# ---------------------------------------------------------------------------
# Synthetic features
# ---------------------------------------------------------------------------


def _fourier_basis(spec: FeatureSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    return spec.frequency_scale * rng.standard_normal((2, spec.dim // 2))


def make_features(grid: GridSpec, spec: FeatureSpec, seed: int, stream: int = 0) -> np.ndarray:
    """Random Fourier positional encodings of cell centres plus seeded noise, shape (grid.size, dim).

    The frequency basis depends on *seed* only, so query and key grids built with the same seed
    share it; *stream* selects an independent noise draw. Rows are rescaled to squared norm dim/2.
    """
    rows, cols = np.divmod(np.arange(grid.size), grid.grid_w)
    coords = np.column_stack([(cols + 0.5) / grid.grid_w, (rows + 0.5) / grid.grid_h])
    phase = 2 * np.pi * coords @ _fourier_basis(spec, seed)
    feats = np.concatenate([np.cos(phase), np.sin(phase)], axis=1)
    feats -= feats.mean(axis=0)
    noise_rng = np.random.default_rng([seed, stream + 1])
    feats += spec.noise * noise_rng.standard_normal(feats.shape)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return feats / norms * math.sqrt(spec.dim / 2)


def one_hot_reference(query_grid: GridSpec, key_grid: GridSpec, n_queries: int, seed: int) -> ReferenceAttention:
    """Reference with *n_queries* distinct supervised queries, each pointing at one random key cell."""
    if not 1 <= n_queries <= query_grid.size:
        raise ValueError(f"n_queries must be in [1, {query_grid.size}], got {n_queries}")
    rng = np.random.default_rng([seed, 2])
    queries = rng.choice(query_grid.size, n_queries, replace=False)
    keys = rng.integers(0, key_grid.size, n_queries)
    ref = ReferenceAttention(query_grid, key_grid)
    ref.histograms = {int(i): {int(j): 1} for i, j in sorted(zip(queries, keys))}
    return ref


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_dims(layer: ToyAttentionLayer, queries: np.ndarray, keys: np.ndarray) -> None:
    if queries.ndim != 2 or keys.ndim != 2 or queries.shape[1] != layer.dim or keys.shape[1] != layer.dim:
        raise DimMismatch(f"features must be (N, {layer.dim}), got {queries.shape} and {keys.shape}")


def _head_logits(layer: ToyAttentionLayer, queries: np.ndarray, keys: np.ndarray, li: int):
    q_proj = queries @ layer.w_q[li]
    k_proj = keys @ layer.w_k[li]
    dh = layer.head_dim
    q_heads = q_proj.reshape(len(queries), layer.heads, dh).transpose(1, 0, 2)
    k_heads = k_proj.reshape(len(keys), layer.heads, dh).transpose(1, 0, 2)
    logits = q_heads @ k_heads.transpose(0, 2, 1) * layer.temperature
    return q_heads, k_heads, logits


def forward(layer: ToyAttentionLayer, queries: np.ndarray, keys: np.ndarray, layer_index: int = 0) -> np.ndarray:
    """Attention weights (H, Nq, Nk) of one layer."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    _check_dims(layer, queries, keys)
    _, _, logits = _head_logits(layer, queries, keys, layer_index)
    return softmax(logits, axis=-1)


def forward_all(
    layer: ToyAttentionLayer,
    queries: np.ndarray,
    keys: np.ndarray,
    query_grid: GridSpec | None = None,
    key_grid: GridSpec | None = None,
) -> AttentionTensor:
    weights = np.stack([forward(layer, queries, keys, li) for li in range(layer.layers)])
    return AttentionTensor(weights, query_grid, key_grid)


def sift_gradients(
    layer: ToyAttentionLayer, queries: np.ndarray, keys: np.ndarray, ref: ReferenceAttention
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of L_SIFT with respect to w_q and w_k."""
    idx, probs = ref.dense()
    if len(idx) == 0:
        raise NoSupervisedQueries("reference attention has no supervised queries")
    _check_dims(layer, queries, keys)
    scale = 1.0 / (layer.layers * layer.heads * len(idx))
    dh = layer.head_dim
    grad_q = np.zeros_like(layer.w_q)
    grad_k = np.zeros_like(layer.w_k)
    for li in range(layer.layers):
        q_heads, k_heads, logits = _head_logits(layer, queries, keys, li)
        attn = softmax(logits, axis=-1)
        for h in range(layer.heads):
            d_logits = np.zeros_like(attn[h])
            d_logits[idx] = sift_loss_gradient(probs, attn[h][idx], scale)
            d_q = d_logits @ k_heads[h] * layer.temperature
            d_k = d_logits.T @ q_heads[h] * layer.temperature
            cols = slice(h * dh, (h + 1) * dh)
            grad_q[li][:, cols] = queries.T @ d_q
            grad_k[li][:, cols] = keys.T @ d_k
    return grad_q, grad_k


def sift_loss_of(
    layer: ToyAttentionLayer,
    queries: np.ndarray,
    keys: np.ndarray,
    ref: ReferenceAttention,
    epsilon_floor: float = 1e-12,
) -> float:
    attn = forward_all(layer, queries, keys, ref.query_grid, ref.key_grid)
    return sift_loss_total([ref], [attn], epsilon_floor)


def attention_diagnostics(attn: AttentionTensor, ref: ReferenceAttention) -> AttentionDiagnostics:
    """Per-query entropy and reference argmax agreement of layer/head-averaged attention."""
    row_entropy = entropy(attn.weights, axis=-1).mean(axis=(0, 1))
    mean_rows = attn.weights.mean(axis=(0, 1))
    supervised = tuple(ref.supervised_indices)
    hits = sum(int(np.argmax(mean_rows[i]) == np.argmax(ref.dense_row(i))) for i in supervised)
    return AttentionDiagnostics(
        entropy=tuple(float(e) for e in row_entropy),
        supervised=supervised,
        argmax_alignment=hits / len(supervised) if supervised else 0.0,
        sift_loss=sift_loss_total([ref], [attn]),
    )


# ---------------------------------------------------------------------------
# Training and gradient check
# ---------------------------------------------------------------------------


def train_toy(cfg: ToyTrainConfig, ref: ReferenceAttention) -> ToyRun:
    """Plain gradient descent on lambda * L_SIFT; deterministic under ``cfg.seed``."""
    cfg.validate()
    if not len(ref):
        raise NoSupervisedQueries("cannot train on a reference with no supervised queries")

    queries = make_features(ref.query_grid, cfg.features, cfg.seed, stream=0)
    keys = make_features(ref.key_grid, cfg.features, cfg.seed, stream=1)
    layer = ToyAttentionLayer.initialize(
        cfg.features.dim, cfg.heads, cfg.layers, cfg.init_scale, np.random.default_rng([cfg.seed, 3])
    )
    timestep_rng = np.random.default_rng([cfg.seed, 4])

    def diagnose() -> AttentionDiagnostics:
        return attention_diagnostics(forward_all(layer, queries, keys, ref.query_grid, ref.key_grid), ref)

    before = diagnose()
    history: list[float] = []
    gated: list[int] = []
    lo, hi = cfg.timestep_range
    for step in range(cfg.steps):
        history.append(sift_loss_of(layer, queries, keys, ref))
        t = int(timestep_rng.integers(lo, hi, endpoint=True))
        if t > cfg.eta:
            gated.append(step)
            continue
        grad_q, grad_k = sift_gradients(layer, queries, keys, ref)
        layer.w_q = layer.w_q - cfg.learning_rate * (cfg.lambda_sift * grad_q)
        layer.w_k = layer.w_k - cfg.learning_rate * (cfg.lambda_sift * grad_k)
    after = diagnose()
    history.append(after.sift_loss)

    logger.info(
        "toy training: loss %.4f -> %.4f, alignment %.2f -> %.2f, %d of %d steps gated off",
        before.sift_loss, after.sift_loss, before.argmax_alignment, after.argmax_alignment, len(gated), cfg.steps,
    )
    return ToyRun(layer, before, after, history, gated, queries, keys)


def grad_check(
    layer: ToyAttentionLayer,
    queries: np.ndarray,
    keys: np.ndarray,
    ref: ReferenceAttention,
    step: float = 1e-5,
    n_params: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients over a random parameter subset."""
    if not step > 0:
        raise InvalidPerturbation(f"perturbation step must be > 0, got {step}")
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    grad_q, grad_k = sift_gradients(layer, queries, keys, ref)
    analytic = np.concatenate([grad_q.ravel(), grad_k.ravel()])

    total = layer.num_parameters()
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, min(max(n_params, 50), total), replace=False)
    half = layer.w_q.size

    worst = 0.0
    for flat in picks:
        probe = layer.copy()
        target = probe.w_q if flat < half else probe.w_k
        pos = np.unravel_index(flat % half, target.shape)
        original = target[pos]
        target[pos] = original + step
        plus = sift_loss_of(probe, queries, keys, ref)
        target[pos] = original - step
        minus = sift_loss_of(probe, queries, keys, ref)
        numeric = (plus - minus) / (2 * step)
        a = analytic[flat]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    logger.debug("grad check over %d parameters: max relative error %.3g", len(picks), worst)
    return worst
