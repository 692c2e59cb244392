"""Structure-aware stride layer.

Composition: a deformable local aggregation over the (frame, joint) grid,
then multi-stride joint subsampling with preceding-valid fill, then selective
scans over four flatten directions, summed. Shapes are (T, V, C) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .ssm import SelectiveSsmParams, selective_scan
from .tensor import (Conv3x3Params, DepthwiseConv3x3Params, LinearParams,
                     Tensor, add, bilinear_gather, depthwise_conv3x3,
                     grid_conv3x3, linear, make_op, mul, register_op, reshape,
                     reverse0, silu, slice_last, concat_last, tensor,
                     transpose01)

STREAM_ORDER = ("temporal_forward", "temporal_backward",
                "spatial_forward", "spatial_backward")


def tap_rank(k: int) -> int:
    """Channel-mixing rank per sampled neighbor; grows with the tap grid."""
    return 2 * k * k


@dataclass
class NeighborMixParams:
    """Per-tap channel map: diagonal plus a low-rank correction.

    Applying to a feature vector s gives ``diag * s + up @ (down @ s)``. The
    diagonal part keeps identity and zero maps exactly representable at any
    rank.
    """

    diag: Tensor   # (C,)
    down: Tensor   # (rho, C)
    up: Tensor     # (C, rho)

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.diag, self.down, self.up)

    def apply(self, s: Tensor) -> Tensor:
        lo = linear(s, LinearParams(self.down))
        return add(mul(s, self.diag), linear(lo, LinearParams(self.up)))


@dataclass
class SaConvParams:
    """Deformable spatiotemporal aggregation parameters.

    ``offset_net`` predicts one (dt, dv) displacement per joint from a 3x3
    grid convolution; ``taps`` holds one channel mixer per sampled neighbor
    of the K x K grid placed around the shifted center; ``local_conv`` is a
    per-channel 3x3 aggregation of the undisplaced neighborhood.
    """

    kernel_size: int
    offset_net: Conv3x3Params          # C -> 2
    taps: list[NeighborMixParams]      # K*K entries
    local_conv: DepthwiseConv3x3Params

    def __post_init__(self):
        k = self.kernel_size
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel size must be odd and >= 1, got {k}")
        if self.offset_net.weight.shape[0] != 2:
            raise ConfigError("offset net must produce exactly 2 channels")
        if len(self.taps) != k * k:
            raise ConfigError(f"expected {k * k} neighbor mixers, got {len(self.taps)}")

    def tensors(self) -> tuple[Tensor, ...]:
        out = list(self.offset_net.tensors()) + list(self.local_conv.tensors())
        for tap in self.taps:
            out.extend(tap.tensors())
        return tuple(out)


@dataclass
class StrideConfig:
    strides: tuple[int, ...] = (1, 2, 3)
    fractions: tuple[float, ...] = (0.5, 0.25, 0.25)

    def __post_init__(self):
        if len(self.strides) != len(self.fractions):
            raise ConfigError("strides and fractions must align")
        if any(s < 1 for s in self.strides):
            raise ConfigError(f"strides must be >= 1, got {self.strides}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"channel fractions must sum to 1, got {self.fractions}")

    def split_points(self, channels: int) -> list[int]:
        """Channel boundaries of each stride group; rejects indivisible widths."""
        bounds = [0]
        acc = 0.0
        for frac in self.fractions:
            acc += frac
            edge = acc * channels
            if abs(edge - round(edge)) > 1e-9:
                raise ConfigError(
                    f"channel count {channels} not divisible by fractions {self.fractions}")
            bounds.append(int(round(edge)))
        return bounds


@dataclass
class StreamSet:
    """Enabled scan directions, each with its own scan parameters."""

    params: dict[str, SelectiveSsmParams] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            raise ConfigError("at least one scan stream must be enabled")
        unknown = set(self.params) - set(STREAM_ORDER)
        if unknown:
            raise ConfigError(f"unknown stream names: {sorted(unknown)}")

    def ordered(self) -> list[tuple[str, SelectiveSsmParams]]:
        return [(name, self.params[name]) for name in STREAM_ORDER if name in self.params]

    def tensors(self) -> tuple[Tensor, ...]:
        out = []
        for _, p in self.ordered():
            out.extend(p.tensors())
        return tuple(out)


@dataclass
class SasLayerParams:
    sa: SaConvParams
    stride_cfg: StrideConfig
    streams: StreamSet
    gates: dict[str, LinearParams] = field(default_factory=dict)

    def tensors(self) -> tuple[Tensor, ...]:
        out = list(self.sa.tensors()) + list(self.streams.tensors())
        for name in STREAM_ORDER:
            if name in self.gates:
                out.extend(self.gates[name].tensors())
        return tuple(out)


def predict_offsets(x: Tensor, p: SaConvParams) -> Tensor:
    """Per-(frame, joint) displacement (dt, dv), unbounded; clamping happens
    later in sampling."""
    if x.shape[-1] != p.offset_net.weight.shape[1]:
        raise DimensionError(
            f"offset net expects {p.offset_net.weight.shape[1]} channels, got {x.shape[-1]}")
    return grid_conv3x3(x, p.offset_net)


def sa_conv(x: Tensor, p: SaConvParams) -> Tensor:
    """Deformable aggregation: shift the K x K grid by the predicted offset,
    bilinearly sample each tap, mix per tap, and add the local aggregation."""
    t_n, v_n, _ = x.shape
    k = p.kernel_size
    offsets = predict_offsets(x, p)
    half = (k - 1) // 2
    base_t = tensor(np.broadcast_to(np.arange(t_n, dtype=x.dtype)[:, None], (t_n, v_n)).copy())
    base_v = tensor(np.broadcast_to(np.arange(v_n, dtype=x.dtype)[None, :], (t_n, v_n)).copy())
    center_t = add(base_t, reshape(slice_last(offsets, 0, 1), (t_n, v_n)))
    center_v = add(base_v, reshape(slice_last(offsets, 1, 2), (t_n, v_n)))
    out = depthwise_conv3x3(x, p.local_conv)
    tap = 0
    for dt in range(-half, half + 1):
        for dv in range(-half, half + 1):
            pt = add(center_t, tensor(np.full((t_n, v_n), float(dt), dtype=x.dtype)))
            pv = add(center_v, tensor(np.full((t_n, v_n), float(dv), dtype=x.dtype)))
            sample = bilinear_gather(x, pt, pv)
            out = add(out, p.taps[tap].apply(sample))
            tap += 1
    return out


def stride_sample(x: Tensor, s: int) -> Tensor:
    """Subsample joints at stride s, filling skipped joints with the
    preceding valid joint: y(t, v) = x(t, floor(v/s)*s)."""
    if s < 1:
        raise DomainError(f"stride must be >= 1, got {s}")
    v_n = x.shape[1]
    idx = (np.arange(v_n) // s) * s
    out = x.data[:, idx]

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (slice(None), idx), g)
            x.accumulate_grad(dx)

    return make_op(out, (x,), backward)


def stride_scan(x: Tensor, cfg: StrideConfig) -> Tensor:
    """Split channels into stride groups, subsample each, and re-concatenate.

    The first group keeps its stride-1 channels verbatim; joint ordering and
    shape are preserved.
    """
    bounds = cfg.split_points(x.shape[-1])
    parts = []
    for i, s in enumerate(cfg.strides):
        group = slice_last(x, bounds[i], bounds[i + 1])
        parts.append(group if s == 1 else stride_sample(group, s))
    return concat_last(parts)


def _flatten(x: Tensor, spatial_major: bool) -> Tensor:
    t_n, v_n, c = x.shape
    if spatial_major:
        return reshape(transpose01(x), (v_n * t_n, c))
    return reshape(x, (t_n * v_n, c))


def _unflatten(y: Tensor, shape: tuple[int, int, int], spatial_major: bool) -> Tensor:
    t_n, v_n, c = shape
    if spatial_major:
        return transpose01(reshape(y, (v_n, t_n, c)))
    return reshape(y, (t_n, v_n, c))


def stream_scan(x: Tensor, name: str, p: SelectiveSsmParams,
                gate: LinearParams | None = None) -> Tensor:
    """One directional scan: flatten, optionally reverse, scan, undo."""
    spatial = name.startswith("spatial")
    backward_dir = name.endswith("backward")
    seq = _flatten(x, spatial)
    if backward_dir:
        seq = reverse0(seq)
    out = selective_scan(seq, p)
    if gate is not None:
        out = mul(out, silu(linear(seq, gate)))
    if backward_dir:
        out = reverse0(out)
    return _unflatten(out, x.shape, spatial)


def four_stream_scan(x: Tensor, streams: StreamSet,
                     gates: dict[str, LinearParams] | None = None) -> Tensor:
    """Sum of the enabled directional scans, in fixed stream order.

    Temporal streams flatten frame-major (all joints of frame 0 first);
    spatial streams flatten joint-major. Backward variants reverse the
    flattened sequence before scanning and reverse the output after.
    """
    total = None
    for name, p in streams.ordered():
        gate = gates.get(name) if gates else None
        y = stream_scan(x, name, p, gate)
        total = y if total is None else add(total, y)
    return total


def sas_ssm_layer(x: Tensor, p: SasLayerParams) -> Tensor:
    """Full structure-aware stride layer: sa_conv -> stride_scan -> streams."""
    return four_stream_scan(stride_scan(sa_conv(x, p.sa), p.stride_cfg),
                            p.streams, p.gates or None)


def _stride_sample_op(x):
    return stride_sample(x, 2)


register_op("stride_sample", _stride_sample_op)
