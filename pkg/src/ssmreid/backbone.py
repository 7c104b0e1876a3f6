"""Bidirectional selective-state-space blocks and the block stack.

The scan evaluates the input-dependent linear recurrence

    h_t = exp(dt_t * A) . h_{t-1} + (dt_t * B_t) u_t,   y_t = C_t . h_t + D u_t

with A strictly negative and dt_t > 0.  The implementation is chunked and
vectorized: with S_t the running sum of dt * A inside a chunk, all states of
the chunk follow in closed form as

    h_t = exp(S_t) . (h_in + sum_{s<=t} exp(-S_s) (dt_s * B_s) u_s)

which needs one cumulative sum instead of a timestep loop.  Per-step decay is
clamped below at a level whose factor already underflows the recurrence, so
exp(-S_s) cannot overflow within a chunk.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .tokens import TokenSequence

_SCAN_CHUNK = 16
# exp(-40) ~ 4e-18: decay this strong is zero for the recurrence, and the
# clamp keeps |S| within a chunk below overflow range for exp(-S)
_MIN_LOG_DECAY = -40.0


class SsmParams(nn.Module):
    """Parameters of one scan direction.

    Holds the state-decay matrix (log-parameterized so A = -exp(A_log) stays
    negative), the per-timestep input/output projections, the step-size map
    (softplus keeps dt positive), the direct feedthrough, and a depthwise
    causal convolution applied before the scan.
    """

    def __init__(
        self,
        inner_dim: int,
        state_dim: int,
        conv_width: int = 4,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if inner_dim < 1 or state_dim < 1 or conv_width < 1:
            raise ValueError("inner_dim, state_dim and conv_width must be >= 1")
        self.inner_dim = inner_dim
        self.state_dim = state_dim
        self.conv_width = conv_width
        self.A_log = nn.Parameter(
            torch.log(torch.arange(1, state_dim + 1, dtype=dtype)).repeat(inner_dim, 1)
        )
        self.D_skip = nn.Parameter(torch.ones(inner_dim, dtype=dtype))
        self.B_proj = nn.Linear(inner_dim, state_dim, bias=False, dtype=dtype)
        self.C_proj = nn.Linear(inner_dim, state_dim, bias=False, dtype=dtype)
        self.dt_proj = nn.Linear(inner_dim, inner_dim, dtype=dtype)
        self.conv = nn.Conv1d(
            inner_dim,
            inner_dim,
            kernel_size=conv_width,
            padding=conv_width - 1,
            groups=inner_dim,
            dtype=dtype,
        )
        self._init_dt()

    def _init_dt(self, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
        # bias set so softplus(dt_proj(.)) starts in [dt_min, dt_max]
        bound = self.inner_dim**-0.5
        nn.init.uniform_(self.dt_proj.weight, -bound, bound)
        dt = torch.exp(
            torch.rand(self.inner_dim, dtype=self.dt_proj.bias.dtype)
            * (math.log(dt_max) - math.log(dt_min))
            + math.log(dt_min)
        ).clamp(min=1e-4)
        inv_softplus = dt + torch.log(-torch.expm1(-dt))
        with torch.no_grad():
            self.dt_proj.bias.copy_(inv_softplus)

    def state_matrix(self) -> Tensor:
        return -torch.exp(self.A_log)

    def causal_conv(self, x: Tensor) -> Tensor:
        """Depthwise convolution over the sequence, looking backward only.

        Computed as k shifted multiply-adds, which beats a grouped Conv1d at
        the short sequence lengths this model sees.
        """
        width = self.conv_width
        weight = self.conv.weight[:, 0, :]  # (D, k)
        padded = F.pad(x, (0, 0, width - 1, 0))
        seq_len = x.shape[-2]
        out = self.conv.bias + padded[..., width - 1 :, :] * weight[:, width - 1]
        for j in range(width - 1):
            out = out + padded[..., j : j + seq_len, :] * weight[:, j]
        return out

    def delta(self, u: Tensor) -> Tensor:
        return F.softplus(self.dt_proj(u))


def _chunked_scan(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    """Vectorized left-to-right recurrence; loops over chunks, not timesteps."""
    seq_len, inner = u.shape[-2], u.shape[-1]
    state = a.shape[-1]
    x = delta * u  # Euler input term, (..., T, D)
    d_a = (delta.unsqueeze(-1) * a).clamp(min=_MIN_LOG_DECAY)  # (..., T, D, n), < 0
    source = x.unsqueeze(-1) * b.unsqueeze(-2)  # (dt_s * B_s) u_s, (..., T, D, n)
    batch = torch.broadcast_shapes(u.shape[:-2], b.shape[:-2])
    h = u.new_zeros(*batch, inner, state)
    outputs = []
    for start in range(0, seq_len, _SCAN_CHUNK):
        end = min(start + _SCAN_CHUNK, seq_len)
        cum = d_a[..., start:end, :, :].cumsum(dim=-3)  # S_t, (..., Tc, D, n)
        inner_sum = (torch.exp(-cum) * source[..., start:end, :, :]).cumsum(dim=-3)
        states = torch.exp(cum) * (h.unsqueeze(-3) + inner_sum)  # h_t for all t
        outputs.append((states * c[..., start:end, :].unsqueeze(-2)).sum(-1))
        h = states[..., -1, :, :]
    return torch.cat(outputs, dim=-2)


def selective_scan(
    u: Tensor,
    delta: Tensor,
    params: SsmParams,
    direction: str = "forward",
) -> Tensor:
    """Run the selective recurrence over (..., T, D_inner) inputs.

    ``backward`` applies the same recurrence to the reversed sequence and
    reverses the result.  Per-timestep B_t and C_t are projections of u_t.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if u.shape != delta.shape:
        raise ValueError("u and delta must have identical shapes")
    if u.shape[-2] < 1:
        raise ValueError("sequence must have at least one timestep")
    if not torch.isfinite(u).all():
        raise ValueError("non-finite values in scan input")
    if not torch.isfinite(delta).all() or (delta <= 0).any():
        raise ValueError("delta must be strictly positive and finite")
    b = params.B_proj(u)
    c = params.C_proj(u)
    if direction == "backward":
        u, delta, b, c = (t.flip(-2) for t in (u, delta, b, c))
    y = _chunked_scan(u, delta, params.state_matrix(), b, c)
    y = y + params.D_skip * u
    if direction == "backward":
        y = y.flip(-2)
    return y


class BiMbBlock(nn.Module):
    """Pre-norm gated block scanning the sequence in both directions.

    The two directions have independent parameters (convolution included);
    the backward path reverses the sequence before its convolution and scan
    and reverses the result, so swapping the two parameter sets commutes with
    reversing the input.
    """

    def __init__(
        self,
        embed_dim: int,
        inner_dim: int,
        state_dim: int,
        conv_width: int = 4,
        drop_rate: float = 0.0,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if not 0 <= drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")
        self.drop_rate = drop_rate
        self.norm = nn.LayerNorm(embed_dim, dtype=dtype)
        self.in_proj = nn.Linear(embed_dim, 2 * inner_dim, dtype=dtype)
        self.forward_ssm = SsmParams(inner_dim, state_dim, conv_width, dtype=dtype)
        self.backward_ssm = SsmParams(inner_dim, state_dim, conv_width, dtype=dtype)
        self.out_proj = nn.Linear(inner_dim, embed_dim, dtype=dtype)

    def _direction(self, value: Tensor, ssm: SsmParams, reverse: bool) -> Tensor:
        if reverse:
            value = value.flip(-2)
        u = F.silu(ssm.causal_conv(value))
        y = selective_scan(u, ssm.delta(u), ssm, "forward")
        return y.flip(-2) if reverse else y

    def _residual(self, x: Tensor) -> Tensor:
        normed = self.norm(x)
        value, gate = self.in_proj(normed).chunk(2, dim=-1)
        mixed = self._direction(value, self.forward_ssm, reverse=False) + self._direction(
            value, self.backward_ssm, reverse=True
        )
        return self.out_proj(mixed * F.silu(gate))

    def forward(
        self,
        x: Tensor,
        drop_draw: Tensor | float | None = None,
        rng: torch.Generator | None = None,
    ) -> Tensor:
        """Residual update; in training mode the residual branch is dropped
        per sample with probability ``drop_rate`` and rescaled when kept.

        The uniform draw comes from ``drop_draw`` or is taken from ``rng``;
        training with drop_rate > 0 requires one of them so the module itself
        stays deterministic.
        """
        residual = self._residual(x)
        if not torch.isfinite(residual).all():
            raise ValueError("non-finite values in block residual")
        if self.training and self.drop_rate > 0:
            batch_shape = x.shape[:-2]
            if drop_draw is None:
                if rng is None:
                    raise ValueError(
                        "training with stochastic depth needs drop_draw or rng"
                    )
                drop_draw = torch.rand(
                    batch_shape, generator=rng, dtype=x.dtype, device=x.device
                )
            draw = torch.as_tensor(drop_draw, dtype=x.dtype, device=x.device)
            draw = draw.expand(batch_shape)
            keep = (draw >= self.drop_rate).to(x.dtype) / (1.0 - self.drop_rate)
            residual = residual * keep.reshape(*batch_shape, 1, 1)
        return x + residual


class Backbone(nn.Module):
    """Ordered stack of bidirectional blocks; position metadata passes through."""

    def __init__(self, blocks: list[BiMbBlock]):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def forward(
        self,
        seq: TokenSequence,
        depth: int | None = None,
        rng: torch.Generator | None = None,
    ) -> TokenSequence:
        if depth is None:
            depth = len(self.blocks)
        if not 0 <= depth <= len(self.blocks):
            raise ValueError(f"depth must be in [0, {len(self.blocks)}], got {depth}")
        data = seq.data
        for block in self.blocks[:depth]:
            data = block(data, rng=rng)
        return seq.with_data(data)
