"""Binary masks over layered flat parameter vectors.

Provides the layer layout bookkeeping, ERK per-layer density allocation,
the cosine-annealed prune-rate schedule, and the prune/regrow primitives
used by dynamic sparse training. All operations are pure: they take
immutable inputs and return fresh values.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class LayerSpec:
    """One weight tensor inside the flat parameter vector.

    ``shape`` is (fan_in, fan_out) for linear layers and
    (in_channels, out_channels, kernel_h, kernel_w) for conv layers.
    """

    kind: str  # "linear" | "conv"
    shape: tuple[int, ...]
    offset: int

    def __post_init__(self):
        if self.kind not in ("linear", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        expected = 2 if self.kind == "linear" else 4
        if len(self.shape) != expected:
            raise ValueError(f"{self.kind} layer needs {expected} dims, got {self.shape}")
        if any(d < 1 for d in self.shape):
            raise ValueError(f"layer dims must be >= 1, got {self.shape}")

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def fan_out(self) -> int:
        # bias length: output neurons for linear, output channels for conv
        return self.shape[1]


@dataclass(frozen=True)
class LayerLayout:
    """Ordered, contiguous layers covering a flat parameter vector."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        off = 0
        for spec in self.layers:
            if spec.offset != off:
                raise ValueError(f"layer at offset {spec.offset} breaks contiguity (expected {off})")
            off += spec.count
        object.__setattr__(self, "_total", off)

    @property
    def total_count(self) -> int:
        return self._total

    def slices(self):
        return [slice(s.offset, s.offset + s.count) for s in self.layers]

    @staticmethod
    def from_specs(specs: list[tuple[str, tuple[int, ...]]]) -> "LayerLayout":
        """Build a layout from (kind, shape) pairs, computing offsets."""
        layers = []
        off = 0
        for kind, shape in specs:
            spec = LayerSpec(kind, tuple(int(d) for d in shape), off)
            layers.append(spec)
            off += spec.count
        return LayerLayout(tuple(layers))

    def to_dict(self) -> dict:
        return {"layers": [{"kind": s.kind, "shape": list(s.shape)} for s in self.layers]}

    @staticmethod
    def from_dict(d: dict) -> "LayerLayout":
        return LayerLayout.from_specs([(e["kind"], tuple(e["shape"])) for e in d["layers"]])


def mlp_layout(dims: list[int]) -> LayerLayout:
    """Layout for a fully-connected net with the given layer widths."""
    if len(dims) < 2:
        raise ValueError("need at least input and output width")
    return LayerLayout.from_specs([("linear", (dims[i], dims[i + 1])) for i in range(len(dims) - 1)])


@dataclass(frozen=True)
class Mask:
    """Per-parameter binary activation pattern aligned with a layout."""

    bits: np.ndarray  # bool, length = layout.total_count
    layout: LayerLayout

    def __post_init__(self):
        if self.bits.dtype != np.bool_ or self.bits.shape != (self.layout.total_count,):
            raise ValueError("mask bits must be a bool vector matching the layout")
        self.bits.setflags(write=False)

    @property
    def active_per_layer(self) -> np.ndarray:
        return np.array([int(self.bits[sl].sum()) for sl in self.layout.slices()])

    @property
    def active_count(self) -> int:
        return int(self.bits.sum())

    def replace_bits(self, bits: np.ndarray) -> "Mask":
        return Mask(bits.astype(bool), self.layout)

    @staticmethod
    def all_ones(layout: LayerLayout) -> "Mask":
        return Mask(np.ones(layout.total_count, dtype=bool), layout)

    # --- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        """Header (layer count, per-layer parameter counts) + little-endian packed bits."""
        head = struct.pack("<I", len(self.layout.layers))
        head += b"".join(struct.pack("<Q", s.count) for s in self.layout.layers)
        packed = np.packbits(self.bits, bitorder="little").tobytes()
        return head + packed

    @staticmethod
    def from_bytes(blob: bytes, layout: LayerLayout) -> "Mask":
        (n_layers,) = struct.unpack_from("<I", blob, 0)
        if n_layers != len(layout.layers):
            raise ValueError(f"mask has {n_layers} layers, layout has {len(layout.layers)}")
        off = 4
        for spec in layout.layers:
            (count,) = struct.unpack_from("<Q", blob, off)
            off += 8
            if count != spec.count:
                raise ValueError("per-layer counts in mask header do not match layout")
        total = layout.total_count
        packed = np.frombuffer(blob, dtype=np.uint8, offset=off)
        if len(packed) != (total + 7) // 8:
            raise ValueError("mask bit payload has wrong length")
        bits = np.unpackbits(packed, count=total, bitorder="little").astype(bool)
        return Mask(bits, layout)

    def to_debug_json(self) -> str:
        out = []
        for spec, sl in zip(self.layout.layers, self.layout.slices()):
            idx = np.flatnonzero(self.bits[sl])
            out.append({"kind": spec.kind, "shape": list(spec.shape),
                        "active": int(len(idx)), "indices": idx.tolist()})
        return json.dumps({"layers": out})


@dataclass(frozen=True)
class PruneSchedule:
    """Cosine-annealed prune fraction: starts at alpha0, reaches 0 at the last round."""

    alpha0: float
    total_rounds: int

    def __post_init__(self):
        if not 0.0 <= self.alpha0 < 1.0:
            raise ConfigurationError(f"alpha0 must be in [0, 1), got {self.alpha0}")
        if self.total_rounds < 2:
            raise ConfigurationError("schedule needs at least 2 rounds")


def cosine_alpha(schedule: PruneSchedule, t: int) -> float:
    """Prune fraction at round t: 0.5 * alpha0 * (1 + cos(t*pi/(T-1)))."""
    if not 0 <= t <= schedule.total_rounds - 1:
        raise ValueError(f"round {t} outside [0, {schedule.total_rounds - 1}]")
    return 0.5 * schedule.alpha0 * (1.0 + math.cos(t * math.pi / (schedule.total_rounds - 1)))


def erk_densities(layout: LayerLayout, target_density: float, scale: float = 1.0) -> np.ndarray:
    """Per-layer densities from Erdos-Renyi-kernel factors.

    Linear layers get raw factor (fan_in+fan_out)/(fan_in*fan_out); conv layers
    (cin+cout+kh+kw)/(cin*cout*kh*kw). Factors are scaled by a common multiplier
    so the parameter-count-weighted mean density equals ``target_density``.
    Layers whose scaled density exceeds 1 are clamped dense and the surplus is
    redistributed over the remaining layers until a fixed point.
    """
    if not 0.0 < target_density <= 1.0:
        raise ConfigurationError(f"target density must be in (0, 1], got {target_density}")
    if scale <= 0.0:
        raise ConfigurationError(f"erk scale must be positive, got {scale}")

    counts = np.array([s.count for s in layout.layers], dtype=float)
    raw = np.empty(len(counts))
    for j, spec in enumerate(layout.layers):
        raw[j] = scale * sum(spec.shape) / float(spec.count)

    budget = target_density * counts.sum()
    dens = np.empty(len(counts))
    clamped = np.zeros(len(counts), dtype=bool)
    while True:
        free = ~clamped
        remaining = budget - counts[clamped].sum()
        if remaining <= 0 or not free.any():
            raise ConfigurationError("target density infeasible after clamping")
        eps = remaining / float((raw[free] * counts[free]).sum())
        dens[free] = eps * raw[free]
        dens[clamped] = 1.0
        over = free & (dens > 1.0)
        if not over.any():
            break
        clamped |= over

    # Force the integer budget: sum of per-layer rounded counts must equal the
    # rounded global budget. Largest-remainder allocation, capped at layer size.
    int_budget = int(round(budget))
    ideal = dens * counts
    per = np.floor(ideal).astype(int)
    short = int_budget - int(per.sum())
    if short > 0:
        order = np.argsort(-(ideal - per), kind="stable")
        for j in order:
            if short == 0:
                break
            if per[j] < counts[j]:
                per[j] += 1
                short -= 1
    elif short < 0:
        order = np.argsort(ideal - per, kind="stable")
        for j in order:
            if short == 0:
                break
            if per[j] > 1:
                per[j] -= 1
                short += 1
    if int(per.sum()) != int_budget:
        raise ConfigurationError("target density infeasible: cannot meet integer budget")
    # keep analytic densities where they already round to the allocation
    rounded = np.rint(ideal).astype(int)
    adjust = rounded != per
    dens[adjust] = per[adjust] / counts[adjust]
    return dens


def layer_active_counts(layout: LayerLayout, densities: np.ndarray) -> np.ndarray:
    counts = np.array([s.count for s in layout.layers])
    return np.rint(np.asarray(densities) * counts).astype(int)


def init_mask(layout: LayerLayout, densities: np.ndarray, seed) -> Mask:
    """Seeded uniform mask with round(density_j * count_j) active bits per layer."""
    densities = np.asarray(densities, dtype=float)
    if len(densities) != len(layout.layers):
        raise ValueError("one density per layer required")
    if (densities <= 0.0).any() or (densities > 1.0).any():
        raise ConfigurationError("per-layer densities must be in (0, 1]")
    targets = layer_active_counts(layout, densities)
    if (targets == 0).any():
        raise ConfigurationError("a layer with zero active weights cannot learn")
    rng = np.random.default_rng(seed)
    bits = np.zeros(layout.total_count, dtype=bool)
    for spec, k in zip(layout.layers, targets):
        chosen = rng.choice(spec.count, size=int(k), replace=False)
        bits[spec.offset + chosen] = True
    return Mask(bits, layout)


def magnitude_prune(weights: np.ndarray, mask: Mask, alpha: float) -> tuple[Mask, np.ndarray]:
    """Clear floor(alpha * active_j) smallest-|weight| active bits per layer.

    Ties broken by lowest flat index. Returns the intermediate mask and the
    per-layer pruned counts.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if len(weights) != mask.layout.total_count:
        raise ValueError("weights length does not match mask layout")
    bits = mask.bits.copy()
    pruned = np.zeros(len(mask.layout.layers), dtype=int)
    for j, sl in enumerate(mask.layout.slices()):
        active = np.flatnonzero(mask.bits[sl])
        k = int(alpha * len(active))
        if k == 0:
            continue
        mags = np.abs(weights[sl][active])
        # stable sort keeps lowest flat index first among equal magnitudes
        order = np.argsort(mags, kind="stable")
        drop = active[order[:k]]
        bits[sl.start + drop] = False
        pruned[j] = k
    return Mask(bits, mask.layout), pruned


def gradient_regrow(mask: Mask, dense_grad: np.ndarray, counts: np.ndarray) -> Mask:
    """Set counts[j] inactive bits with largest |dense_grad| per layer.

    Ties broken by lowest flat index; restores the active volume removed by a
    matching prune step.
    """
    if len(dense_grad) != mask.layout.total_count:
        raise ValueError("gradient length does not match mask layout")
    bits = mask.bits.copy()
    for j, sl in enumerate(mask.layout.slices()):
        k = int(counts[j])
        if k == 0:
            continue
        inactive = np.flatnonzero(~mask.bits[sl])
        if k > len(inactive):
            raise RuntimeError(f"layer {j}: cannot regrow {k} bits, only {len(inactive)} inactive")
        mags = np.abs(dense_grad[sl][inactive])
        order = np.argsort(-mags, kind="stable")
        grow = inactive[order[:k]]
        bits[sl.start + grow] = True
    return Mask(bits, mask.layout)


def random_regrow(mask: Mask, counts: np.ndarray, rng: np.random.Generator) -> Mask:
    """As gradient_regrow but inactive positions are chosen uniformly at random."""
    bits = mask.bits.copy()
    for j, sl in enumerate(mask.layout.slices()):
        k = int(counts[j])
        if k == 0:
            continue
        inactive = np.flatnonzero(~mask.bits[sl])
        if k > len(inactive):
            raise RuntimeError(f"layer {j}: cannot regrow {k} bits, only {len(inactive)} inactive")
        grow = rng.choice(inactive, size=k, replace=False)
        bits[sl.start + grow] = True
    return Mask(bits, mask.layout)


def apply_mask(values: np.ndarray, mask: Mask) -> np.ndarray:
    """Hadamard product of a flat weight vector with the mask bits."""
    if len(values) != mask.layout.total_count:
        raise ValueError("values length does not match mask layout")
    return np.where(mask.bits, values, 0.0)
