"""Finite-difference verification of every backward rule.

The oracle is plain central differences on the forward path: with no tape
active the ops never touch their backward closures, so the numeric gradient
is independent of the code being checked.  Relative error uses a floored
denominator so near-zero gradients are compared absolutely.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional

import numpy as np

from ifwm.backbone import NetworkSpec, build_network
from ifwm.errors import ContractError
from ifwm.flowwarp import (
    FusionVariant,
    build_warp_head,
    compute_warp_map,
    grid_sample_bilinear,
    ifwm_fuse,
)
from ifwm.tensor import (
    IGNORE_LABEL,
    Tape,
    Tensor,
    add,
    batch_norm,
    bilinear_upsample,
    concat_channels,
    conv2d,
    kaiming_conv,
    make_batch_norm,
    mul,
    record_on,
    relu,
    softmax_cross_entropy,
    sum_all,
)

FD_STEP = 1e-6
REL_FLOOR = 1e-3


def numerical_gradient(value: Callable[[], float], x: np.ndarray,
                       h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of value() w.r.t. every entry of x."""
    flat = x.ravel()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = REL_FLOOR) -> float:
    denom = np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def fd_check(make_loss: Callable[[], Tensor], wrt: Iterable[Tensor],
             h: float = FD_STEP) -> float:
    """Worst relative error between tape gradients and central differences."""
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    tape = Tape()
    with record_on(tape):
        loss = make_loss()
    tape.backward(loss)

    def value() -> float:
        return make_loss().item()

    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_err(analytic, numerical_gradient(value, t.data, h)))
    return worst


def _quad(t: Tensor) -> Tensor:
    # sum of squares; keeps the incoming gradient non-constant
    return sum_all(mul(t, t))


# ---------------------------------------------------------------------------
# per-op checks, each mapping a seed to a worst-case relative error


def check_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    p = kaiming_conv(seed, "gc.conv", 3, 4, 3, stride=1 if seed % 2 == 0 else 2)
    return fd_check(lambda: _quad(conv2d(x, p)), [x, p.weight, p.bias])


def check_batch_norm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 3, 3)) * 1.5 + 0.3, requires_grad=True)
    bn = make_batch_norm(4)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, size=bn.gamma.shape)
    bn.beta.data[:] = rng.standard_normal(bn.beta.shape) * 0.2
    bn.running_mean.data[:] = rng.standard_normal(bn.running_mean.shape) * 0.2
    bn.running_var.data[:] = rng.uniform(0.5, 2.0, size=bn.running_var.shape)
    training = seed % 2 == 0
    return fd_check(lambda: _quad(batch_norm(x, bn, training)), [x, bn.gamma, bn.beta])


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((2, 3, 4, 4))
    d += 0.3 * np.sign(d)  # keep activations away from the kink
    x = Tensor(d, requires_grad=True)
    return fd_check(lambda: _quad(relu(x)), [x])


def check_bilinear_upsample(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    factor = (2, 4, 8)[seed % 3]
    return fd_check(lambda: _quad(bilinear_upsample(x, factor)), [x])


def check_concat_channels(seed: int) -> float:
    rng = np.random.default_rng(seed)
    parts = [Tensor(rng.standard_normal((1, c, 3, 3)), requires_grad=True)
             for c in (2, 3, 1)]
    return fd_check(lambda: _quad(concat_channels(parts)), parts)


def check_add(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    return fd_check(lambda: _quad(add(a, b)), [a, b])


def check_mul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    return fd_check(lambda: sum_all(mul(a, b)), [a, b])


def check_sum_all(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    return fd_check(lambda: _quad(x), [x])


def check_softmax_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    if seed % 2 == 0:
        labels[0, 0, 0] = IGNORE_LABEL
    return fd_check(lambda: softmax_cross_entropy(logits, labels), [logits])


def _variant_for(seed: int) -> FusionVariant:
    return (FusionVariant.IFWM, FusionVariant.RIFW,
            FusionVariant.SF, FusionVariant.LSF)[seed % 4]


def check_compute_warp_map(seed: int) -> float:
    rng = np.random.default_rng(seed)
    head = build_warp_head(seed, "gc.warp", _variant_for(seed), 2, 3, 5)
    xs = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    xd = Tensor(rng.standard_normal((1, 5, 4, 4)), requires_grad=True)
    wrt = [xs, xd]
    for p in head.flow_convs():
        wrt += [p.weight, p.bias]
    if head.variant in (FusionVariant.SF, FusionVariant.LSF):
        wrt += [head.channel_proj.weight, head.channel_proj.bias]
    return fd_check(lambda: _quad(compute_warp_map(head, xs, xd)), wrt)


def check_grid_sample_bilinear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    src = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    flow = Tensor(rng.standard_normal((1, 2, 8, 8)) * 0.6, requires_grad=True)
    return fd_check(lambda: _quad(grid_sample_bilinear(src, flow)), [src, flow])


def check_ifwm_fuse(seed: int) -> float:
    rng = np.random.default_rng(seed)
    head = build_warp_head(seed, "gc.fuse", _variant_for(seed), 2, 3, 6)
    xs = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    xd = Tensor(rng.standard_normal((1, 6, 4, 4)), requires_grad=True)
    wrt = [xs, xd, head.channel_proj.weight, head.channel_proj.bias]
    for p in head.flow_convs():
        wrt += [p.weight, p.bias]
    return fd_check(lambda: _quad(ifwm_fuse(head, xs, xd)), wrt)


def check_backbone(seed: int, entries: int = 5) -> float:
    """End-to-end loss gradient at a handful of sampled parameter entries."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(stem_channels=4, branch_widths=(4, 6, 8, 10),
                       blocks_per_stage=1, num_stages=1, num_classes=3,
                       fusion=_variant_for(seed).value, seed=seed)
    net = build_network(spec)
    x = Tensor(rng.standard_normal((2, 3, 32, 32)), requires_grad=False)
    labels = rng.integers(0, 3, size=(2, 32, 32))

    def make_loss():
        return softmax_cross_entropy(net.forward(x, training=True), labels)

    params = net.named_parameters()
    names = rng.choice(sorted(params), size=entries, replace=False)
    for t in params.values():
        t.grad = None
    tape = Tape()
    with record_on(tape):
        loss = make_loss()
    tape.backward(loss)

    def value() -> float:
        return make_loss().item()

    worst = 0.0
    for name in names:
        t = params[str(name)]
        flat = t.data.ravel()
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + FD_STEP
        fp = value()
        flat[i] = orig - FD_STEP
        fm = value()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * FD_STEP)
        analytic = 0.0 if t.grad is None else float(t.grad.ravel()[i])
        denom = max(REL_FLOOR, abs(analytic) + abs(numeric))
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


CHECKS: Dict[str, Callable[[int], float]] = {
    "conv2d": check_conv2d,
    "batch_norm": check_batch_norm,
    "relu": check_relu,
    "bilinear_upsample": check_bilinear_upsample,
    "concat_channels": check_concat_channels,
    "add": check_add,
    "mul": check_mul,
    "sum_all": check_sum_all,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "compute_warp_map": check_compute_warp_map,
    "grid_sample_bilinear": check_grid_sample_bilinear,
    "ifwm_fuse": check_ifwm_fuse,
    "backbone": check_backbone,
}

THRESHOLDS: Dict[str, float] = {name: 1e-4 for name in CHECKS}
THRESHOLDS["backbone"] = 1e-3


def run_suite(seeds: int = 20, ops: Optional[Iterable[str]] = None) -> Dict[str, float]:
    """Worst error per op across the given number of seeds."""
    if ops is None:
        selected = dict(CHECKS)
    else:
        selected = {}
        for name in ops:
            if name not in CHECKS:
                raise ContractError(f"unknown gradcheck op {name!r}")
            selected[name] = CHECKS[name]
    return {name: max(fn(s) for s in range(seeds)) for name, fn in selected.items()}


def format_report(results: Dict[str, float]) -> str:
    lines = []
    for name, err in results.items():
        thr = THRESHOLDS[name]
        status = "ok" if err <= thr else "FAIL"
        lines.append(f"{name:24s} max_rel_err={err:.3e} threshold={thr:.0e} {status}")
    return "\n".join(lines)


def suite_passed(results: Dict[str, float]) -> bool:
    return all(err <= THRESHOLDS[name] for name, err in results.items())
