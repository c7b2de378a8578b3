"""Flow-guided cross-scale fusion.

A WarpHead turns a (shallow, deep) feature pair into a 2-channel flow field at
shallow resolution, then the deep feature is bilinearly sampled along that
flow instead of being uniformly upsampled.  Four head constructions are
supported, differing in how the flow is computed:

  sf    concat shallow with upsampled-projected deep, one 3x3 conv
  lsf   same concat, but a kxk conv (k grows with the scale ratio)
  rifw  3x3 conv on shallow + kxk conv on deep, added
  ifwm  1x1 conv on shallow + kxk conv on deep, added

Flow offsets are in deep-feature (source) pixel units and are applied on top
of the base half-pixel upsampling grid, so an all-zero flow reproduces plain
bilinear upsampling exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ifwm import kernels
from ifwm.errors import ChannelCountError, ContractError, DataError, GeometryError
from ifwm.tensor import (
    ConvParams,
    Tensor,
    active_tape,
    add,
    bilinear_upsample,
    concat_channels,
    conv2d,
    kaiming_conv,
)


class FusionVariant(Enum):
    SF = "sf"
    LSF = "lsf"
    RIFW = "rifw"
    IFWM = "ifwm"


# how the flow is combined, and the kernel schedule, per variant
CALC_PROCESS = {
    FusionVariant.SF: "concat+conv",
    FusionVariant.LSF: "concat+conv",
    FusionVariant.RIFW: "conv+add",
    FusionVariant.IFWM: "conv+add",
}
KERNEL_DESC = {
    FusionVariant.SF: "3x3",
    FusionVariant.LSF: "kxk",
    FusionVariant.RIFW: "3x3+kxk",
    FusionVariant.IFWM: "1x1+kxk",
}


def kernel_size_for_ratio(ratio: int) -> int:
    """Deep-branch kernel size for a given scale ratio: 3, 7, 15 for 2, 4, 8."""
    if ratio not in (2, 4, 8):
        raise ContractError(f"scale ratio must be 2, 4 or 8, got {ratio}")
    return 2 * ratio - 1


@dataclass
class WarpHead:
    """Convolutions for one (deep -> shallow) fusion site.

    channel_proj maps the deep feature onto the shallow channel count before
    warping; the remaining convs produce the 2-channel flow and depend on the
    variant (pixel/region for conv+add, concat_conv for concat+conv).
    """

    variant: FusionVariant
    ratio: int
    channel_proj: ConvParams
    pixel_conv: Optional[ConvParams] = None
    region_conv: Optional[ConvParams] = None
    concat_conv: Optional[ConvParams] = None

    def flow_convs(self) -> list:
        if self.variant in (FusionVariant.IFWM, FusionVariant.RIFW):
            return [self.pixel_conv, self.region_conv]
        return [self.concat_conv]

    def named_params(self, prefix: str) -> dict:
        out = {}
        for attr in ("channel_proj", "pixel_conv", "region_conv", "concat_conv"):
            p = getattr(self, attr)
            if p is not None:
                out[f"{prefix}.{attr}.weight"] = p.weight
                out[f"{prefix}.{attr}.bias"] = p.bias
        return out


def build_warp_head(seed: int, name: str, variant: FusionVariant, ratio: int,
                    xs_c: int, xd_c: int, dtype=np.float64) -> WarpHead:
    k = kernel_size_for_ratio(ratio)
    proj = kaiming_conv(seed, f"{name}.channel_proj", xd_c, xs_c, 1, dtype=dtype)
    if variant in (FusionVariant.IFWM, FusionVariant.RIFW):
        pk = 1 if variant is FusionVariant.IFWM else 3
        return WarpHead(
            variant, ratio, proj,
            pixel_conv=kaiming_conv(seed, f"{name}.pixel_conv", xs_c, 2, pk, dtype=dtype),
            region_conv=kaiming_conv(seed, f"{name}.region_conv", xd_c, 2, k, dtype=dtype),
        )
    ck = 3 if variant is FusionVariant.SF else k
    return WarpHead(
        variant, ratio, proj,
        concat_conv=kaiming_conv(seed, f"{name}.concat_conv", 2 * xs_c, 2, ck, dtype=dtype),
    )


def _check_pair(head: WarpHead, xs: Tensor, xd: Tensor) -> None:
    if xs.h != xd.h * head.ratio or xs.w != xd.w * head.ratio:
        raise GeometryError(
            f"deep extents {xd.h}x{xd.w} times ratio {head.ratio} "
            f"do not give shallow extents {xs.h}x{xs.w}")
    if xs.n != xd.n:
        raise GeometryError(f"batch mismatch: {xs.n} vs {xd.n}")


def compute_warp_map(head: WarpHead, xs: Tensor, xd: Tensor) -> Tensor:
    """Per-pixel (dx, dy) sampling offsets at shallow resolution."""
    _check_pair(head, xs, xd)
    if head.variant in (FusionVariant.IFWM, FusionVariant.RIFW):
        shallow = conv2d(xs, head.pixel_conv)
        deep = bilinear_upsample(conv2d(xd, head.region_conv), head.ratio)
        flow = add(shallow, deep)
    else:
        up = bilinear_upsample(conv2d(xd, head.channel_proj), head.ratio)
        flow = conv2d(concat_channels([xs, up]), head.concat_conv)
    if not np.isfinite(flow.data).all():
        raise DataError("warp map contains non-finite values")
    return flow


def grid_sample_bilinear(source: Tensor, flow: Tensor) -> Tensor:
    """Sample source at (base upsampling grid + flow), border-clamped.

    Output spatial extents follow the flow field.  Differentiable w.r.t. both
    the source values and the flow offsets; the flow gradient is zero where
    the sampling point was clamped to the border.
    """
    if flow.c != 2:
        raise ChannelCountError(f"flow field must have 2 channels, got {flow.c}")
    if source.n != flow.n:
        raise GeometryError(f"batch mismatch: {source.n} vs {flow.n}")
    out = Tensor(kernels.grid_sample_fwd(source.data, flow.data))
    tape = active_tape()
    if tape is not None and (source.requires_grad or flow.requires_grad):
        need_s, need_f = source.requires_grad, flow.requires_grad
        src_data, flow_data = source.data, flow.data

        def backward(g):
            gs, gf = kernels.grid_sample_bwd(np.ascontiguousarray(g), src_data, flow_data)
            return (gs if need_s else None, gf if need_f else None)

        out.requires_grad = True
        tape.record("grid_sample_bilinear", (source, flow), out, backward)
    return out


def ifwm_fuse(head: WarpHead, xs: Tensor, xd: Tensor) -> Tensor:
    """Shallow feature plus the flow-warped, channel-projected deep feature."""
    _check_pair(head, xs, xd)
    if head.channel_proj.out_channels != xs.c:
        raise ChannelCountError(
            f"channel_proj outputs {head.channel_proj.out_channels}, shallow has {xs.c}")
    proj = conv2d(xd, head.channel_proj)
    flow = compute_warp_map(head, xs, xd)
    return add(xs, grid_sample_bilinear(proj, flow))
