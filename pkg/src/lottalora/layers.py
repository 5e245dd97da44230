"""The core layer: frozen random projection scaled by a trainable scalar,
plus a trainable low-rank correction path.

Forward rule per layer:  h_out = beta * (h W^T) + s * (h A^T B^T),
where W is the frozen backbone matrix [d_out, d_in], A is [r, d_in],
B is [d_out, r], and s = alpha/r (standard) or alpha/sqrt(r)
(rank-stabilized).  B starts at zero so a fresh layer computes exactly the
backbone projection; beta starts at 1.  Gradients reach A, B, beta (and
the optional combined-path LayerNorm affine) but never W.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .initfam import BackboneMatrix
from .numerics import Tensor, add, add_bias, const_scale, layernorm, linear, scalar_scale, tensor
from .prng import Stream

SCALING_MODES = ("standard", "rank_stabilized")


@dataclass
class AdapterState:
    """Trainable low-rank state for one layer."""

    a: Tensor  # [rank, d_in]
    b: Tensor  # [d_out, rank]
    beta: Tensor  # scalar backbone gain
    alpha: float
    rank: int
    scaling_mode: str = "standard"

    @property
    def scale(self) -> float:
        if self.scaling_mode == "rank_stabilized":
            return self.alpha / math.sqrt(self.rank)
        return self.alpha / self.rank


def init_adapter(rank: int, d_in: int, d_out: int, alpha: float, mode: str, stream: Stream,
                 b_init: str = "zeros") -> AdapterState:
    """Fresh adapter: A Kaiming-uniform, B zero (default), beta = 1.

    ``b_init="kaiming"`` breaks the symmetry instead; required for the
    zero-scaffold ablation, where a zero B makes the whole network a
    gradient fixed point.  B draws follow A on the same stream.
    """
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    if mode not in SCALING_MODES:
        raise ConfigError(f"scaling_mode must be one of {SCALING_MODES}, got {mode!r}")
    if b_init not in ("zeros", "kaiming"):
        raise ConfigError(f"b_init must be 'zeros' or 'kaiming', got {b_init!r}")
    bound = math.sqrt(6.0 / (d_in * (1.0 + 5.0)))  # Kaiming uniform, a = sqrt(5)
    a_data = bound * (2.0 * stream.unit_block(rank * d_in).reshape(rank, d_in) - 1.0)
    if b_init == "kaiming":
        b_bound = math.sqrt(6.0 / (rank * (1.0 + 5.0)))  # fan-in of B is the rank
        b_data = b_bound * (2.0 * stream.unit_block(d_out * rank).reshape(d_out, rank) - 1.0)
    else:
        b_data = np.zeros((d_out, rank))
    return AdapterState(
        a=tensor(a_data, requires_grad=True),
        b=tensor(b_data, requires_grad=True),
        beta=tensor(np.asarray(1.0), requires_grad=True),
        alpha=alpha,
        rank=rank,
        scaling_mode=mode,
    )


class LottaLayer:
    """Frozen backbone + adapter, with an optional combined-path LayerNorm.

    ``frozen_bias`` is a fixed random offset (never trained, not counted):
    the frozen remnant of a standard dense layer's bias.  It sits outside
    both the backbone and adapter paths, so it is untouched by beta and
    absent from the effective weight.
    """

    def __init__(self, backbone: BackboneMatrix, adapter: AdapterState, use_layernorm: bool = False,
                 frozen_bias: np.ndarray | None = None):
        if adapter.a.shape[1] != backbone.cols or adapter.b.shape[0] != backbone.rows:
            raise DimensionError(
                f"adapter shapes {adapter.a.shape}/{adapter.b.shape} do not match backbone "
                f"{backbone.rows}x{backbone.cols}"
            )
        self.backbone = backbone
        self.w = Tensor(backbone.data, requires_grad=False)
        self.adapter = adapter
        self.frozen_bias = None
        if frozen_bias is not None:
            if frozen_bias.shape != (backbone.rows,):
                raise DimensionError(f"frozen bias must have shape ({backbone.rows},)")
            fb = frozen_bias.astype(np.float32)
            fb.setflags(write=False)
            self.frozen_bias = fb
        self.ln_gamma = None
        self.ln_bias = None
        if use_layernorm:
            self.ln_gamma = tensor(np.ones(backbone.rows), requires_grad=True)
            self.ln_bias = tensor(np.zeros(backbone.rows), requires_grad=True)

    @property
    def d_in(self) -> int:
        return self.backbone.cols

    @property
    def d_out(self) -> int:
        return self.backbone.rows

    def set_backbone(self, backbone: BackboneMatrix, frozen_bias: np.ndarray | None = None) -> None:
        """Swap in a new frozen matrix (resampling / seed gating)."""
        if (backbone.rows, backbone.cols) != (self.d_out, self.d_in):
            raise DimensionError(
                f"replacement backbone {backbone.rows}x{backbone.cols} does not match "
                f"{self.d_out}x{self.d_in}"
            )
        self.backbone = backbone
        self.w = Tensor(backbone.data, requires_grad=False)
        if frozen_bias is not None:
            fb = frozen_bias.astype(np.float32)
            fb.setflags(write=False)
            self.frozen_bias = fb

    def forward(self, h: Tensor) -> Tensor:
        """Pre-activation output; LayerNorm (when enabled) wraps the sum."""
        backbone_path = scalar_scale(linear(h, self.w), self.adapter.beta)
        low_rank = linear(linear(h, self.adapter.a), self.adapter.b)
        out = add(backbone_path, const_scale(low_rank, self.adapter.scale))
        if self.frozen_bias is not None:
            out = add_bias(out, Tensor(self.frozen_bias, requires_grad=False))
        if self.ln_gamma is not None:
            out = layernorm(out, self.ln_gamma, self.ln_bias)
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        named = [("A", self.adapter.a), ("B", self.adapter.b), ("beta", self.adapter.beta)]
        if self.ln_gamma is not None:
            named += [("ln_gamma", self.ln_gamma), ("ln_bias", self.ln_bias)]
        return named

    def effective_weight(self) -> np.ndarray:
        """Merged matrix beta*W + s*(B @ A) in f64 (LayerNorm not applied)."""
        w = self.backbone.data.astype(np.float64)
        ba = self.adapter.b.data.astype(np.float64) @ self.adapter.a.data.astype(np.float64)
        return float(self.adapter.beta.data) * w + self.adapter.scale * ba


class DenseLayer:
    """Fully trainable linear layer with bias (full-training mode, heads)."""

    def __init__(self, d_in: int, d_out: int, stream: Stream):
        bound = math.sqrt(6.0 / (d_in * (1.0 + 5.0)))
        w_data = bound * (2.0 * stream.unit_block(d_out * d_in).reshape(d_out, d_in) - 1.0)
        self.w = tensor(w_data, requires_grad=True)
        self.b = tensor(np.zeros(d_out), requires_grad=True)
        self.d_in = d_in
        self.d_out = d_out

    def forward(self, h: Tensor) -> Tensor:
        return add_bias(linear(h, self.w), self.b)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [("W", self.w), ("bias", self.b)]


def spectral_norm(w: np.ndarray, iters: int = 100) -> float:
    """Largest singular value by power iteration on W^T W.

    Deterministic start vector; returns 0.0 for an all-zero matrix.
    Relative error vs a full SVD is well under 1e-3 for the matrix sizes
    used here.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        return 0.0
    rng = np.random.default_rng(0)
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    last = 0.0
    for _ in range(iters):
        u = w @ v
        norm_u = np.linalg.norm(u)
        if norm_u == 0.0:
            return 0.0
        v = w.T @ (u / norm_u)
        sigma = np.linalg.norm(v)
        v /= sigma
        if abs(sigma - last) <= 1e-13 * max(sigma, 1.0):
            break
        last = sigma
    return float(np.linalg.norm(w @ v))
