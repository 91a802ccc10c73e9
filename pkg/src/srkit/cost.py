"""Analytic parameter and Mult-Adds accounting.

Nothing here builds tensors: costs follow from a NetworkSpec by arithmetic, so any
variant is analysed in microseconds.  A conv layer costs
``K^2 * (C_in / G) * C_out * H_out * W_out`` multiply-accumulates; additions,
activations and pixel shuffles cost nothing.  Body layers run at the LR grid
``hr / scale``, kept as an exact rational so x3 of 720p is exact.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .arch import IMAGE_CHANNELS, NetworkSpec, SpecError, build, head_stages

HD_720P = (1280, 720)


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    mult_adds: Fraction
    out_w: Fraction | None
    out_h: Fraction | None


@dataclass
class CostReport:
    per_layer: list = field(default_factory=list)
    hr_resolution: tuple = HD_720P
    scale: int = 4
    variant: str = ""

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.per_layer)

    @property
    def total_mult_adds(self) -> Fraction:
        return sum((layer.mult_adds for layer in self.per_layer), Fraction(0))

    def layer(self, name: str) -> LayerCost:
        for layer in self.per_layer:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "name", "params", "mult_adds", "out_w", "out_h"])
        for i, layer in enumerate(self.per_layer):
            writer.writerow([i, layer.name, layer.params, _fmt_number(layer.mult_adds),
                             _fmt_number(layer.out_w), _fmt_number(layer.out_h)])
        writer.writerow(["", "TOTAL", self.total_params, _fmt_number(self.total_mult_adds), "", ""])
        return buf.getvalue()

    def table(self) -> str:
        w, h = self.hr_resolution
        lines = [f"{self.variant} x{self.scale} @ {w}x{h} HR",
                 f"{'layer':<28}{'params':>12}{'mult-adds':>18}   out"]
        for layer in self.per_layer:
            out = "-" if layer.out_w is None else f"{_fmt_number(layer.out_w)}x{_fmt_number(layer.out_h)}"
            lines.append(f"{layer.name:<28}{layer.params:>12,}{float(layer.mult_adds):>18,.0f}   {out}")
        lines.append(f"{'total':<28}{self.total_params:>12,}{float(self.total_mult_adds):>18,.0f}")
        lines.append(f"params {self.total_params / 1e3:,.0f}K   mult-adds {float(self.total_mult_adds) / 1e9:.1f}G")
        return "\n".join(lines)


def _fmt_number(v) -> str:
    if v is None:
        return ""
    if isinstance(v, Fraction) and v.denominator != 1:
        return repr(float(v))
    return str(int(v))


def conv_params(c_in: int, c_out: int, k: int, groups: int = 1) -> int:
    return k * k * (c_in // groups) * c_out + c_out


def conv_mult_adds(c_in: int, c_out: int, k: int, groups, w, h) -> Fraction:
    return Fraction(k * k * (c_in // groups) * c_out) * w * h


def count(spec: NetworkSpec, hr_width: int = HD_720P[0], hr_height: int = HD_720P[1],
          scale: int = 4) -> CostReport:
    """Per-layer parameters and Mult-Adds of ``spec`` producing a ``hr_width x hr_height`` image.

    Parameters cover every scale head; Mult-Adds only the head for ``scale``.
    Layers reused through recursive sharing report their parameters once,
    at the first use.
    """
    if hr_width <= 0 or hr_height <= 0:
        raise ValueError("HR dimensions must be positive")
    if scale not in spec.scales:
        raise SpecError(f"scale {scale} not in spec scales {spec.scales}")
    c = spec.channels
    lr_w, lr_h = Fraction(hr_width, scale), Fraction(hr_height, scale)
    layers = []

    def add(name, c_in, c_out, k, groups, w, h, owns_params=True):
        params = conv_params(c_in, c_out, k, groups) if owns_params else 0
        layers.append(LayerCost(name, params, conv_mult_adds(c_in, c_out, k, groups, w, h), w, h))

    add("entry", IMAGE_CHANNELS, c, 3, 1, lr_w, lr_h)
    for b in range(spec.blocks):
        owns = not (spec.recursive and b > 0)
        for u in range(spec.units_per_block):
            unit = f"blocks.{b}.units.{u}"
            if spec.efficient:
                add(f"{unit}.conv1", c, c, 3, spec.group_size, lr_w, lr_h, owns)
                add(f"{unit}.conv2", c, c, 3, spec.group_size, lr_w, lr_h, owns)
                add(f"{unit}.conv3", c, c, 1, 1, lr_w, lr_h, owns)
            else:
                add(f"{unit}.conv1", c, c, 3, 1, lr_w, lr_h, owns)
                add(f"{unit}.conv2", c, c, 3, 1, lr_w, lr_h, owns)
            if spec.local_cascading:
                add(f"blocks.{b}.fuse.{u}", c * (u + 2), c, 1, 1, lr_w, lr_h)
        if spec.global_cascading:
            add(f"fuse.{b}", c * (b + 2), c, 1, 1, lr_w, lr_h)
    hg = spec.head_groups
    for s in spec.scales:
        w, h = lr_w, lr_h
        for i, r in enumerate(head_stages(s)):
            name = f"up{s}.{i}"
            if s == scale:
                add(name, c, c * r * r, 3, hg, w, h)
                w, h = w * r, h * r
            else:
                layers.append(LayerCost(name, conv_params(c, c * r * r, 3, hg), Fraction(0), None, None))
    add("exit", c, IMAGE_CHANNELS, 3, 1, Fraction(hr_width), Fraction(hr_height))
    return CostReport(layers, (hr_width, hr_height), scale, spec.variant)


def total_params(spec: NetworkSpec) -> int:
    return count(spec, scale=spec.scales[0]).total_params


# ---------------------------------------------------------------------------
# Residual-E cost algebra
# ---------------------------------------------------------------------------


def residual_block_mult_adds(c_in: int, c_out: int, k: int, f) -> Fraction:
    """Two K x K convolutions over an ``f x f`` map."""
    return 2 * Fraction(k * k * c_in * c_out) * f * f


def residual_e_block_mult_adds(c_in: int, c_out: int, k: int, f, groups: int) -> Fraction:
    """Two grouped K x K convolutions plus one pointwise over an ``f x f`` map."""
    return 2 * Fraction(k * k * c_in * c_out, groups) * f * f + Fraction(c_in * c_out) * f * f


def residual_e_ratio(groups: int, k: int = 3, exact: bool = False):
    """Cost of a residual-E block relative to a plain residual block: ``1/G + 1/(2K^2)``."""
    if groups < 1 or k < 1:
        raise ValueError("groups and kernel size must be >= 1")
    r = Fraction(1, groups) + Fraction(1, 2 * k * k)
    return r if exact else float(r)


# ---------------------------------------------------------------------------
# Cross-check against an executed network
# ---------------------------------------------------------------------------


class CostMismatch(AssertionError):
    pass


def instrumented_count(spec: NetworkSpec, hr_width: int, hr_height: int, scale: int):
    """Build ``spec`` and run one forward pass counting MACs per conv.

    Returns ``(canonical parameter count, {layer: macs})``.
    """
    if hr_width % scale or hr_height % scale:
        raise ValueError("instrumented count needs HR dims divisible by the scale")
    net, store = build(spec, seed=0)
    x = np.zeros((1, IMAGE_CHANNELS, hr_height // scale, hr_width // scale), dtype=np.float32)
    macs = {}
    net.forward(x, scale, macs=macs)
    return store.count(), macs


def verify_against_built(spec: NetworkSpec, hr_width: int = 24, hr_height: int = 24) -> None:
    """Assert analytic counts equal the built store and an instrumented forward, for every scale."""
    for scale in spec.scales:
        report = count(spec, hr_width, hr_height, scale)
        n_params, macs = instrumented_count(spec, hr_width, hr_height, scale)
        if n_params != report.total_params:
            raise CostMismatch(f"{spec.variant} x{scale}: params analytic {report.total_params} != built {n_params}")
        analytic = {layer.name: layer.mult_adds for layer in report.per_layer if layer.mult_adds}
        measured = {k: Fraction(v) for k, v in macs.items()}
        if analytic != measured:
            diff = sorted(set(analytic.items()) ^ set(measured.items()))
            raise CostMismatch(f"{spec.variant} x{scale}: per-layer MACs differ: {diff[:6]}")
        if sum(measured.values()) != report.total_mult_adds:
            raise CostMismatch(f"{spec.variant} x{scale}: total MACs differ")


# ---------------------------------------------------------------------------
# Group-size / recursion sweep
# ---------------------------------------------------------------------------


def sweep_spec(groups: int, recursive: bool, base: NetworkSpec | None = None) -> NetworkSpec:
    base = base or NetworkSpec.preset("carn")
    return NetworkSpec.preset(
        "custom",
        blocks=base.blocks, units_per_block=base.units_per_block, channels=base.channels,
        scales=base.scales, local_cascading=True, global_cascading=True,
        efficient=True, group_size=groups, recursive=recursive,
    )


def body_params(report: CostReport) -> int:
    """Parameters of the feature body: everything except upsampling heads and the exit conv."""
    return sum(layer.params for layer in report.per_layer
               if not layer.name.startswith("up") and layer.name != "exit")


def sweep(groups=(1, 2, 4, 8, 16, 32, 64), recursive=(False, True), hr=HD_720P, scale: int = 4,
          base: NetworkSpec | None = None) -> list:
    """One row per (group size, recursion) residual-E network."""
    rows = []
    for g in groups:
        for rec in recursive:
            spec = sweep_spec(g, rec, base)
            report = count(spec, hr[0], hr[1], scale)
            rows.append({
                "groups": g,
                "recursive": int(rec),
                "params": report.total_params,
                "body_params": body_params(report),
                "mult_adds": report.total_mult_adds,
            })
    return rows
