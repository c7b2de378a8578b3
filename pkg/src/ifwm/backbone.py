"""Multi-resolution segmentation backbone.

Four parallel branches at strides 4/8/16/32 exchange information after every
stage: deep-to-shallow transfers go through a fusion head (plain upsampling
for the baseline, flow-guided warping otherwise) and shallow-to-deep
transfers through strided conv chains.  The head concatenates all branches at
stride 4 and projects to class logits at input resolution.

Parameters live in an insertion-ordered name -> Tensor registry.  Every
parameter is initialised from an RNG keyed by (seed, name), so two networks
built with the same seed share bit-identical values for every name they have
in common regardless of variant or build order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ifwm.errors import ConfigError, GeometryError
from ifwm.flowwarp import (
    FusionVariant,
    WarpHead,
    build_warp_head,
    compute_warp_map,
    grid_sample_bilinear,
)
from ifwm.tensor import (
    BatchNormState,
    ConvParams,
    Tensor,
    add,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    conv2d,
    kaiming_conv,
    make_batch_norm,
    relu,
)

VARIANT_NAMES = ("baseline", "sf", "lsf", "rifw", "ifwm")


@dataclass
class NetworkSpec:
    stem_channels: int = 16
    branch_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    num_stages: int = 2
    num_classes: int = 4
    fusion: str = "ifwm"
    seed: int = 0
    dtype: str = "f64"

    def validate(self) -> None:
        if self.fusion not in VARIANT_NAMES:
            raise ConfigError(f"unknown fusion variant {self.fusion!r}")
        if len(self.branch_widths) != 4:
            raise ConfigError(f"need 4 branch widths, got {len(self.branch_widths)}")
        if any(w < 1 for w in self.branch_widths) or self.stem_channels < 1:
            raise ConfigError("channel widths must be positive")
        if self.blocks_per_stage < 1 or self.num_stages < 1:
            raise ConfigError("blocks_per_stage and num_stages must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def variant(self) -> Optional[FusionVariant]:
        return None if self.fusion == "baseline" else FusionVariant(self.fusion)


@dataclass
class _ConvBN:
    conv: ConvParams
    bn: BatchNormState


@dataclass
class _Block:
    cb1: _ConvBN
    cb2: _ConvBN


@dataclass
class _FuseSite:
    """Deep branch j feeding shallow branch i (j > i)."""

    ratio: int
    channel_proj: ConvParams
    head: Optional[WarpHead] = None


class Network:
    def __init__(self, spec: NetworkSpec):
        spec.validate()
        self.spec = spec
        self.registry: dict = {}
        self._build()

    # -- construction ------------------------------------------------------

    def _conv(self, name: str, in_c: int, out_c: int, k: int, stride: int = 1) -> ConvParams:
        p = kaiming_conv(self.spec.seed, name, in_c, out_c, k, stride=stride,
                         dtype=self.spec.np_dtype)
        self.registry[f"{name}.weight"] = p.weight
        self.registry[f"{name}.bias"] = p.bias
        return p

    def _bn(self, name: str, c: int) -> BatchNormState:
        st = make_batch_norm(c, dtype=self.spec.np_dtype)
        self.registry[f"{name}.gamma"] = st.gamma
        self.registry[f"{name}.beta"] = st.beta
        self.registry[f"{name}.running_mean"] = st.running_mean
        self.registry[f"{name}.running_var"] = st.running_var
        return st

    def _conv_bn(self, name: str, in_c: int, out_c: int, k: int, stride: int = 1) -> _ConvBN:
        return _ConvBN(self._conv(f"{name}.conv", in_c, out_c, k, stride),
                       self._bn(f"{name}.bn", out_c))

    def _build(self) -> None:
        sp = self.spec
        w = sp.branch_widths
        self.stem1 = self._conv_bn("stem.conv1", 3, sp.stem_channels, 3, stride=2)
        self.stem2 = self._conv_bn("stem.conv2", sp.stem_channels, sp.stem_channels, 3, stride=2)

        # branch i reaches stride 4 * 2**i via i strided convs from the stem,
        # widths stepping through the branch ladder
        self.trans: list = []
        for i in range(4):
            chain = []
            if i == 0:
                chain.append(self._conv_bn("trans0.step0", sp.stem_channels, w[0], 3))
            else:
                in_c = sp.stem_channels
                for j in range(i):
                    chain.append(self._conv_bn(f"trans{i}.step{j}", in_c, w[j + 1], 3, stride=2))
                    in_c = w[j + 1]
            self.trans.append(chain)

        self.stages: list = []
        self.fuses: list = []
        for s in range(1, sp.num_stages + 1):
            stage = []
            for i in range(4):
                blocks = []
                for b in range(sp.blocks_per_stage):
                    base = f"stage{s}.branch{i}.block{b}"
                    blocks.append(_Block(self._conv_bn(f"{base}.c1", w[i], w[i], 3),
                                         self._conv_bn(f"{base}.c2", w[i], w[i], 3)))
                stage.append(blocks)
            self.stages.append(stage)

            fuse: dict = {}
            for i in range(4):
                for j in range(4):
                    if j == i:
                        continue
                    base = f"fuse{s}.b{j}to{i}"
                    if j > i:
                        ratio = 2 ** (j - i)
                        if sp.variant is None:
                            site = _FuseSite(ratio, self._conv(f"{base}.channel_proj",
                                                               w[j], w[i], 1))
                        else:
                            head = build_warp_head(sp.seed, base, sp.variant, ratio,
                                                   w[i], w[j], dtype=sp.np_dtype)
                            for pname, t in head.named_params(base).items():
                                self.registry[pname] = t
                            site = _FuseSite(ratio, head.channel_proj, head)
                        fuse[(j, i)] = site
                    else:
                        steps = []
                        in_c = w[j]
                        for t in range(i - j):
                            out_c = w[i] if t == i - j - 1 else in_c
                            steps.append(self._conv(f"{base}.down{t}", in_c, out_c, 3, stride=2))
                            in_c = out_c
                        fuse[(j, i)] = steps
            self.fuses.append(fuse)

        concat_c = sum(w)
        self.head_proj = self._conv("head.proj", concat_c, sp.num_classes, 1)

    # -- inference ---------------------------------------------------------

    def _run_cb(self, cb: _ConvBN, x: Tensor, training: bool) -> Tensor:
        return relu(batch_norm(conv2d(x, cb.conv), cb.bn, training))

    def _run_block(self, blk: _Block, x: Tensor, training: bool) -> Tensor:
        y = relu(batch_norm(conv2d(x, blk.cb1.conv), blk.cb1.bn, training))
        y = batch_norm(conv2d(y, blk.cb2.conv), blk.cb2.bn, training)
        return relu(add(y, x))

    def forward(self, image: Tensor, training: bool = False) -> Tensor:
        if image.c != 3:
            raise GeometryError(f"expected 3 input channels, got {image.c}")
        if image.h % 32 or image.w % 32:
            raise GeometryError(
                f"input extents must be divisible by 32, got {image.h}x{image.w}")
        x = self._run_cb(self.stem1, image, training)
        x = self._run_cb(self.stem2, x, training)

        feats = []
        for chain in self.trans:
            f = x
            for cb in chain:
                f = self._run_cb(cb, f, training)
            feats.append(f)

        for stage, fuse in zip(self.stages, self.fuses):
            feats = [self._run_branch(stage[i], feats[i], training) for i in range(4)]
            feats = self._exchange(fuse, feats)

        ups = [feats[0]] + [bilinear_upsample(feats[i], 2 ** i) for i in range(1, 4)]
        logits = conv2d(concat_channels(ups), self.head_proj)
        return bilinear_upsample(logits, 4)

    def _run_branch(self, blocks, x: Tensor, training: bool) -> Tensor:
        for blk in blocks:
            x = self._run_block(blk, x, training)
        return x

    def _exchange(self, fuse: dict, feats: list) -> list:
        out = []
        for i in range(4):
            total = feats[i]
            for j in range(4):
                if j == i:
                    continue
                site = fuse[(j, i)]
                if j > i:
                    proj = conv2d(feats[j], site.channel_proj)
                    if site.head is None:
                        contrib = bilinear_upsample(proj, site.ratio)
                    else:
                        flow = compute_warp_map(site.head, feats[i], feats[j])
                        contrib = grid_sample_bilinear(proj, flow)
                else:
                    contrib = feats[j]
                    for t, conv in enumerate(site):
                        contrib = conv2d(contrib, conv)
                        if t < len(site) - 1:
                            contrib = relu(contrib)
                total = add(total, contrib)
            out.append(relu(total))
        return out

    # -- parameter access --------------------------------------------------

    def parameters(self) -> list:
        return [t for t in self.registry.values() if t.requires_grad]

    def named_parameters(self) -> dict:
        return {n: t for n, t in self.registry.items() if t.requires_grad}

    def state_dict(self) -> dict:
        return dict(self.registry)


def build_network(spec: NetworkSpec) -> Network:
    return Network(spec)
