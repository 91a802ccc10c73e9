"""Cascading residual network family: specs, parameter store, layers, network.

Layer naming (canonical names, ``.weight`` / ``.bias`` appended):

    entry                       3 -> C, 3x3
    blocks.{b}.units.{u}.conv1  first 3x3 of residual unit u in block b
    blocks.{b}.units.{u}.conv2  second 3x3
    blocks.{b}.units.{u}.conv3  1x1 pointwise (efficient units only)
    blocks.{b}.fuse.{u}         local fusion 1x1, C*(u+2) -> C
    fuse.{b}                    global fusion 1x1, C*(b+2) -> C
    up{s}.{i}                   i-th upsampling conv of the x{s} head
    exit                        C -> 3, 3x3 at HR

With ``recursive=True`` the units of blocks 1..B-1 are aliases of block 0's
units; fusion convs stay per block.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .tensor import ConvParams

VARIANTS = ("baseline", "carn-nl", "carn-ng", "carn", "carn-m", "custom")
SUPPORTED_SCALES = (2, 3, 4)
IMAGE_CHANNELS = 3

# Fields each named variant fixes; everything else (widths, depths, scales) is free.
PINNED = {
    "baseline": dict(local_cascading=False, global_cascading=False, group_size=1, recursive=False, efficient=False),
    "carn-nl": dict(local_cascading=False, global_cascading=True, group_size=1, recursive=False, efficient=False),
    "carn-ng": dict(local_cascading=True, global_cascading=False, group_size=1, recursive=False, efficient=False),
    "carn": dict(local_cascading=True, global_cascading=True, group_size=1, recursive=False, efficient=False),
    "carn-m": dict(local_cascading=True, global_cascading=True, group_size=4, recursive=True, efficient=True),
}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "carn"
    blocks: int = 3
    units_per_block: int = 3
    channels: int = 64
    group_size: int = 1
    recursive: bool = False
    efficient: bool = False
    scales: tuple = SUPPORTED_SCALES
    local_cascading: bool = True
    global_cascading: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(sorted({int(s) for s in self.scales})))
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("blocks", "units_per_block", "channels", "group_size"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.scales or not set(self.scales) <= set(SUPPORTED_SCALES):
            raise SpecError(f"scales must be a non-empty subset of {SUPPORTED_SCALES}, got {self.scales}")
        if self.channels % self.group_size:
            raise SpecError(f"channels ({self.channels}) not divisible by group_size ({self.group_size})")
        if not self.efficient and self.group_size != 1:
            raise SpecError("group_size > 1 requires efficient (residual-E) units")
        if self.variant != "custom":
            for key, want in PINNED[self.variant].items():
                if getattr(self, key) != want:
                    raise SpecError(f"variant {self.variant} requires {key}={want}")

    @classmethod
    def preset(cls, variant: str, **overrides) -> "NetworkSpec":
        """Named variant with optional overrides.

        Overriding a field the variant pins (cascading switches, group size,
        sharing, unit type) turns the result into a ``custom`` spec.
        """
        if variant not in VARIANTS:
            raise SpecError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant == "custom":
            return cls(variant="custom", **overrides)
        base = dict(PINNED[variant])
        pinned_changed = any(k in base and base[k] != v for k, v in overrides.items())
        base.update(overrides)
        return cls(variant="custom" if pinned_changed else variant, **base)

    @property
    def head_groups(self) -> int:
        """Group size of the upsampling convs: matches the residual-E group size."""
        return self.group_size if self.efficient else 1

    def with_(self, **changes) -> "NetworkSpec":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def head_stages(scale: int) -> list:
    """Pixel-shuffle factors of the upsampling head for ``scale``."""
    if scale == 4:
        return [2, 2]
    if scale in (2, 3):
        return [scale]
    raise SpecError(f"unsupported scale {scale}")


class ParamStore:
    """Named tensors with alias support for shared layers.

    ``entries`` holds canonical tensors; ``aliases`` maps a layer name to the
    canonical entry it reuses.  ``fan_in`` records each entry's input channel
    count, which drives initialization.
    """

    def __init__(self):
        self.entries: dict[str, np.ndarray] = {}
        self.aliases: dict[str, str] = {}
        self.fan_in: dict[str, int] = {}

    def add(self, name: str, array: np.ndarray, fan_in: int | None = None) -> None:
        if name in self.entries or name in self.aliases:
            raise KeyError(f"duplicate parameter {name}")
        self.entries[name] = array
        if fan_in is not None:
            self.fan_in[name] = fan_in

    def alias(self, name: str, canonical: str) -> None:
        canonical = self.resolve(canonical)
        if canonical not in self.entries:
            raise KeyError(f"alias target {canonical} not in store")
        self.aliases[name] = canonical

    def resolve(self, name: str) -> str:
        return self.aliases.get(name, name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[self.resolve(name)]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.entries[self.resolve(name)] = value

    def __contains__(self, name: str) -> bool:
        return self.resolve(name) in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def count(self) -> int:
        """Number of scalar parameters, each shared entry counted once."""
        return sum(int(a.size) for a in self.entries.values())

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        key = self.resolve(name)
        if key in self.entries:
            self.entries[key] += grad
        else:
            self.entries[key] = grad.copy()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.entries = {k: v.copy() for k, v in self.entries.items()}
        out.aliases = dict(self.aliases)
        out.fan_in = dict(self.fan_in)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        out.entries = {k: v.astype(dtype) for k, v in out.entries.items()}
        return out


def init_weights(store: ParamStore, seed: int) -> None:
    """Fill every entry with U(-k, k), ``k = 1 / sqrt(input channels of its layer)``."""
    rng = np.random.default_rng(seed)
    for name, arr in store.entries.items():
        if name not in store.fan_in:
            raise KeyError(f"no fan-in recorded for {name}")
        k = 1.0 / np.sqrt(store.fan_in[name])
        arr[...] = rng.uniform(-k, k, size=arr.shape).astype(arr.dtype)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Context:
    """Per-call options: activation retention, MAC instrumentation, non-finite checks."""

    def __init__(self, train: bool = False, macs: dict | None = None, check_finite: bool = False):
        self.train = train
        self.macs = macs
        self.check_finite = check_finite

    def after_conv(self, conv: "Conv", p: ConvParams, y: np.ndarray) -> None:
        if self.macs is not None:
            n = y.shape[0]
            self.macs[conv.name] = self.macs.get(conv.name, 0) + n * T.conv_mult_adds(p, y.shape[2], y.shape[3])
        if self.check_finite:
            T.check_finite(y, conv.name)


class Conv:
    def __init__(self, name: str, c_in: int, c_out: int, k: int, groups: int = 1):
        self.name = name
        self.c_in, self.c_out, self.k, self.groups = c_in, c_out, k, groups

    @property
    def weight_name(self) -> str:
        return self.name + ".weight"

    @property
    def bias_name(self) -> str:
        return self.name + ".bias"

    def declare(self, store: ParamStore, dtype) -> None:
        shape = (self.c_out, self.c_in // self.groups, self.k, self.k)
        store.add(self.weight_name, np.zeros(shape, dtype=dtype), fan_in=self.c_in)
        store.add(self.bias_name, np.zeros(self.c_out, dtype=dtype), fan_in=self.c_in)

    def params(self, store: ParamStore) -> ConvParams:
        return ConvParams(store[self.weight_name], store[self.bias_name], self.groups)

    def forward(self, store, x, ctx: Context):
        p = self.params(store)
        y, cols = T.conv2d_cached(x, p, keep_cols=ctx.train)
        ctx.after_conv(self, p, y)
        return y, ((x, cols) if ctx.train else None)

    def backward(self, store, cache, grad_out, grads: ParamStore):
        x, cols = cache
        gx, gw, gb = T.conv2d_backward(x, self.params(store), grad_out, cols)
        grads.accumulate(self.weight_name, gw)
        grads.accumulate(self.bias_name, gb)
        return gx


class ResidualUnit:
    """Plain residual block (two 3x3) or residual-E block (two grouped 3x3 + 1x1).

    ``y = relu(last_conv(... relu(conv1(x)) ...) + x)``
    """

    def __init__(self, name: str, channels: int, efficient: bool, groups: int = 1):
        self.name = name
        if efficient:
            self.convs = [
                Conv(f"{name}.conv1", channels, channels, 3, groups),
                Conv(f"{name}.conv2", channels, channels, 3, groups),
                Conv(f"{name}.conv3", channels, channels, 1),
            ]
        else:
            self.convs = [
                Conv(f"{name}.conv1", channels, channels, 3),
                Conv(f"{name}.conv2", channels, channels, 3),
            ]

    def forward(self, store, x, ctx):
        conv_caches = []
        h = x
        for conv in self.convs[:-1]:
            h, c = conv.forward(store, h, ctx)
            h = T.relu(h)
            conv_caches.append(c)
        out, c = self.convs[-1].forward(store, h, ctx)
        conv_caches.append(c)
        y = T.relu(T.add(out, x))
        return y, ((conv_caches, y) if ctx.train else None)

    def backward(self, store, cache, grad_out, grads):
        conv_caches, y = cache
        g_sum = T.relu_backward(y, grad_out)
        g = g_sum
        for i in range(len(self.convs) - 1, -1, -1):
            g = self.convs[i].backward(store, conv_caches[i], g, grads)
            if i > 0:
                # the input of conv i is relu(previous conv), cached as conv i's x
                g = T.relu_backward(conv_caches[i][0], g)
        return g + g_sum


class Cascade:
    """Chain of stages, optionally with concat-and-fuse after every stage.

    With fusions, output ``k`` is ``fuse_k([F_0, ..., F_{k-1}, stage_k(F_{k-1})])``
    where ``F_0`` is the input.  Without, stages are simply chained.  Used both
    for the units inside a block and for the blocks across the network.
    """

    def __init__(self, stages, fusions=None):
        self.stages = stages
        self.fusions = fusions

    def forward(self, store, x, ctx):
        feats = [x]
        caches = []
        cur = x
        for i, stage in enumerate(self.stages):
            r, stage_cache = stage.forward(store, cur, ctx)
            fuse_cache = None
            if self.fusions is not None:
                cur, fuse_cache = self.fusions[i].forward(store, T.concat_channels(feats + [r]), ctx)
            else:
                cur = r
            caches.append((stage_cache, fuse_cache))
            if self.fusions is not None:
                feats.append(cur)
        return cur, (caches if ctx.train else None)

    def backward(self, store, caches, grad_out, grads):
        n = len(self.stages)
        g_feats = [None] * (n + 1)
        g_feats[n] = grad_out
        for i in range(n - 1, -1, -1):
            stage_cache, fuse_cache = caches[i]
            g = g_feats[i + 1]
            if self.fusions is not None:
                g_cat = self.fusions[i].backward(store, fuse_cache, g, grads)
                parts = T.split_channels(g_cat, [g.shape[1]] * (i + 2))
                for j in range(i + 1):
                    g_feats[j] = parts[j] if g_feats[j] is None else g_feats[j] + parts[j]
                g = parts[i + 1]
            g_in = self.stages[i].backward(store, stage_cache, g, grads)
            g_feats[i] = g_in if g_feats[i] is None else g_feats[i] + g_in
        return g_feats[0]


class Network:
    """A built network bound to its parameter store."""

    def __init__(self, spec: NetworkSpec, params: ParamStore | None = None, dtype=np.float32):
        self.spec = spec
        c = spec.channels
        self.entry = Conv("entry", IMAGE_CHANNELS, c, 3)
        blocks = []
        for b in range(spec.blocks):
            units = [ResidualUnit(f"blocks.{b}.units.{u}", c, spec.efficient, spec.group_size)
                     for u in range(spec.units_per_block)]
            fusions = None
            if spec.local_cascading:
                fusions = [Conv(f"blocks.{b}.fuse.{u}", c * (u + 2), c, 1) for u in range(spec.units_per_block)]
            blocks.append(Cascade(units, fusions))
        self.blocks = blocks
        global_fusions = None
        if spec.global_cascading:
            global_fusions = [Conv(f"fuse.{b}", c * (b + 2), c, 1) for b in range(spec.blocks)]
        self.body = Cascade(blocks, global_fusions)
        self.heads = {
            s: [(Conv(f"up{s}.{i}", c, c * r * r, 3, spec.head_groups), r) for i, r in enumerate(head_stages(s))]
            for s in spec.scales
        }
        self.exit = Conv("exit", c, IMAGE_CHANNELS, 3)
        if params is None:
            params = self._declare(dtype)
        self.params = params

    def convs(self):
        """Every conv layer use, in execution order (heads in scale order)."""
        out = [self.entry]
        for b, block in enumerate(self.blocks):
            for u, unit in enumerate(block.stages):
                out.extend(unit.convs)
                if block.fusions is not None:
                    out.append(block.fusions[u])
            if self.body.fusions is not None:
                out.append(self.body.fusions[b])
        for s in self.spec.scales:
            out.extend(conv for conv, _ in self.heads[s])
        out.append(self.exit)
        return out

    def shared_unit_aliases(self) -> dict:
        """Layer name -> canonical layer name for recursive sharing."""
        if not self.spec.recursive:
            return {}
        out = {}
        for b in range(1, self.spec.blocks):
            for u in range(self.spec.units_per_block):
                out[f"blocks.{b}.units.{u}"] = f"blocks.0.units.{u}"
        return out

    def _declare(self, dtype) -> ParamStore:
        store = ParamStore()
        shared = self.shared_unit_aliases()
        pending = []
        for conv in self.convs():
            unit = conv.name.rsplit(".", 1)[0]
            if unit in shared:
                pending.append(conv)
            else:
                conv.declare(store, dtype)
        for conv in pending:
            unit, leaf = conv.name.rsplit(".", 1)
            target = f"{shared[unit]}.{leaf}"
            store.alias(conv.weight_name, target + ".weight")
            store.alias(conv.bias_name, target + ".bias")
        return store

    # -- execution -------------------------------------------------------

    def _run(self, x, scale: int, ctx: Context):
        if scale not in self.heads:
            raise SpecError(f"scale {scale} not supported by this network (scales={self.spec.scales})")
        if x.ndim != 4 or x.shape[1] != IMAGE_CHANNELS:
            raise T.ShapeError("forward", "C", IMAGE_CHANNELS, x.shape[1] if x.ndim == 4 else x.ndim)
        store = self.params
        h0, entry_cache = self.entry.forward(store, x, ctx)
        feat, body_cache = self.body.forward(store, h0, ctx)
        head_cache = []
        for conv, r in self.heads[scale]:
            out, c = conv.forward(store, feat, ctx)
            head_cache.append(c)
            feat = T.pixel_shuffle(out, r)
        y, exit_cache = self.exit.forward(store, feat, ctx)
        return y, (scale, entry_cache, body_cache, head_cache, exit_cache)

    def forward_train(self, x, scale: int, macs: dict | None = None):
        """Forward pass that retains activations; returns ``(y, trace)`` for ``backward``."""
        return self._run(x, scale, Context(train=True, macs=macs))

    def forward(self, x, scale: int, macs: dict | None = None, check_finite: bool = False):
        """Inference forward pass; activations are released as soon as possible."""
        return self._run(x, scale, Context(train=False, macs=macs, check_finite=check_finite))[0]

    __call__ = forward

    def backward(self, trace, grad_out) -> ParamStore:
        """Gradients of every parameter touched by the traced forward pass.

        Shared entries receive the sum over all their uses.
        """
        scale, entry_cache, body_cache, head_cache, exit_cache = trace
        grads = ParamStore()
        grads.aliases = dict(self.params.aliases)
        store = self.params
        g = self.exit.backward(store, exit_cache, grad_out, grads)
        for (conv, r), cache in zip(reversed(self.heads[scale]), reversed(head_cache)):
            g = conv.backward(store, cache, T.pixel_unshuffle(g, r), grads)
        g = self.body.backward(store, body_cache, g, grads)
        self.entry.backward(store, entry_cache, g, grads)
        grads.aliases = {}
        return grads

    def first_nonfinite_layer(self, x, scale: int) -> str | None:
        """Name of the first conv whose output is NaN/Inf, or None."""
        try:
            self.forward(x, scale, check_finite=True)
        except T.NumericError as e:
            return e.where
        return None


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32):
    """Construct a network for ``spec`` with freshly initialized parameters."""
    net = Network(spec, dtype=dtype)
    init_weights(net.params, seed)
    return net, net.params


def infer_spec(store: ParamStore) -> NetworkSpec:
    """Recover a spec from parameter names and shapes (used when loading checkpoints)."""
    names = set(store.entries) | set(store.aliases)
    channels = store["entry.weight"].shape[0]
    blocks = 0
    while f"blocks.{blocks}.units.0.conv1.weight" in names:
        blocks += 1
    units = 0
    while f"blocks.0.units.{units}.conv1.weight" in names:
        units += 1
    if blocks == 0 or units == 0:
        raise SpecError("store does not describe a cascading network")
    efficient = "blocks.0.units.0.conv3.weight" in names
    group_size = channels // store["blocks.0.units.0.conv1.weight"].shape[1]
    fields_ = dict(
        blocks=blocks,
        units_per_block=units,
        channels=channels,
        group_size=group_size,
        recursive=bool(store.aliases),
        efficient=efficient,
        scales=tuple(s for s in SUPPORTED_SCALES if f"up{s}.0.weight" in names),
        local_cascading="blocks.0.fuse.0.weight" in names,
        global_cascading="fuse.0.weight" in names,
    )
    for variant, pinned in PINNED.items():
        if all(fields_[k] == v for k, v in pinned.items()):
            return NetworkSpec(variant=variant, **fields_)
    return NetworkSpec(variant="custom", **fields_)


def load_network(store: ParamStore) -> Network:
    return Network(infer_spec(store), params=store)
