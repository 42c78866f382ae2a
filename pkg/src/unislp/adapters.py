"""Adapter task modules: single adapter, adapter stacking and adapter fusion.

Each adapter is a residual bottleneck ``h + up(gelu(down(norm(h))))`` whose
up-projection starts at zero, so a fresh adapter is an exact identity.
``norm`` is a non-affine layer norm; all of an adapter's parameters sit in
its two projections.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import Tensor

SINGLE, STACK, FUSION = "single", "stack", "fusion"
KINDS = (SINGLE, STACK, FUSION)


class TaskModuleError(ValueError):
    pass


def name_rng(seed: int, name: str) -> np.random.Generator:
    """Initialisation stream keyed by (model seed, component name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Adapter(Module):
    def __init__(self, d_model: int, adapter_dim: int, rng: np.random.Generator):
        self.down = Linear(d_model, adapter_dim, rng)
        self.up = Linear(adapter_dim, d_model, rng, init="zeros")

    def delta(self, h: Tensor) -> Tensor:
        return self.up(T.gelu(self.down(T.layer_norm(h))))

    def __call__(self, h: Tensor) -> Tensor:
        return h + self.delta(h)


def adapter_forward(adapter: Adapter, h: Tensor) -> Tensor:
    return adapter(h)


def stack_forward(adapters: list[Adapter], h: Tensor) -> Tensor:
    """Apply adapters bottom to top."""
    if not adapters:
        raise TaskModuleError("stack needs at least one adapter")
    for a in adapters:
        h = a(h)
    return h


class FusionBlock(Module):
    """Single-head attention over member-adapter deltas with shared key/value maps.

    Value and output maps start as identities, so a singleton fusion
    reproduces its member and identity members contribute nothing.
    """

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng, init="identity")
        self.output = Linear(d_model, d_model, rng, init="identity")
        self._scale = 1.0 / math.sqrt(d_model)

    def __call__(self, members: list[Adapter], h: Tensor, return_weights: bool = False):
        if not members:
            raise TaskModuleError("fusion needs at least one member")
        lead, d = h.shape[:-1], h.shape[-1]
        m = len(members)
        deltas = T.stack([a.delta(h) for a in members], axis=-2)  # [..., M, d]
        q = self.query(T.layer_norm(h)).reshape(*lead, d, 1)
        scores = (self.key(deltas) @ q).reshape(*lead, m) * self._scale
        weights = T.softmax(scores, axis=-1)
        mix = (weights.reshape(*lead, 1, m) @ self.value(deltas)).reshape(*lead, d)
        out = h + self.output(mix)
        return (out, weights) if return_weights else out


def fusion_forward(block: FusionBlock, members: list[Adapter], h: Tensor, return_weights: bool = False):
    return block(members, h, return_weights=return_weights)


class AdapterBank(Module):
    """One named adapter per layer slot, plus an optional task classification head."""

    def __init__(self, name: str, slots: list[str], d_model: int, adapter_dim: int,
                 seed: int, n_class_labels: int | None = None):
        self.name = name
        rng = name_rng(seed, "adapter/" + name)
        self.slots = {s: Adapter(d_model, adapter_dim, rng) for s in slots}
        self.cls_head = Linear(d_model, n_class_labels, rng) if n_class_labels else None

    def named_parameters(self, prefix: str = ""):
        for slot, a in self.slots.items():
            yield from a.named_parameters(f"{prefix}{slot}.")
        if self.cls_head is not None:
            yield from self.cls_head.named_parameters(prefix + "cls_head.")


class FusionBank(Module):
    def __init__(self, name: str, slots: list[str], d_model: int, seed: int,
                 n_class_labels: int | None = None):
        self.name = name
        rng = name_rng(seed, "fusion/" + name)
        self.slots = {s: FusionBlock(d_model, rng) for s in slots}
        self.cls_head = Linear(d_model, n_class_labels, rng) if n_class_labels else None

    def named_parameters(self, prefix: str = ""):
        for slot, blk in self.slots.items():
            yield from blk.named_parameters(f"{prefix}{slot}.")
        if self.cls_head is not None:
            yield from self.cls_head.named_parameters(prefix + "cls_head.")


@dataclass
class AdapterTaskModule:
    kind: str
    members: list[str]
    banks: dict[str, AdapterBank] = field(repr=False)
    fusion: FusionBank | None = field(default=None, repr=False)
    trainable_set: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TaskModuleError(f"unknown module kind {self.kind!r}")
        if len(set(self.members)) != len(self.members):
            raise TaskModuleError(f"duplicate member names in {self.members}")
        if self.kind == SINGLE and len(self.members) != 1:
            raise TaskModuleError("a single-adapter module has exactly one member")
        if not self.members:
            raise TaskModuleError("task module without members")
        if (self.kind == FUSION) != (self.fusion is not None):
            raise TaskModuleError("fusion block present iff kind is fusion")

    def apply(self, slot: str, h: Tensor) -> Tensor:
        adapters = [self.banks[m].slots[slot] for m in self.members]
        if self.kind == FUSION:
            return self.fusion.slots[slot](adapters, h)
        return stack_forward(adapters, h)

    @property
    def cls_head(self) -> Linear | None:
        if self.kind == FUSION:
            return self.fusion.cls_head
        return self.banks[self.members[-1]].cls_head

    @property
    def owner(self) -> str:
        """Name of the component this module trains."""
        return self.fusion.name if self.kind == FUSION else self.members[-1]


def adapter_param_count(n_layers: int, d_model: int, adapter_dim: int, n_class_labels: int = 0) -> int:
    """Closed form: L * (2ad + a + d), plus a d->C head when present."""
    head = d_model * n_class_labels + n_class_labels if n_class_labels else 0
    return n_layers * (2 * adapter_dim * d_model + adapter_dim + d_model) + head


def fusion_param_count(n_layers: int, d_model: int, n_class_labels: int = 0) -> int:
    """Four d->d maps per layer; independent of the number of fused members."""
    head = d_model * n_class_labels + n_class_labels if n_class_labels else 0
    return n_layers * 4 * (d_model * d_model + d_model) + head


def build_task_module(kind: str, members: list[str], model, checkpoints: dict[str, str] | None = None,
                      *, fusion_name: str | None = None, n_class_labels: int | None = None) -> AdapterTaskModule:
    """Load members, create the trainable component if absent, and freeze everything else.

    Single: the member is trainable. Stack: only the top member is trainable;
    lower members must already be trained. Fusion: only the fusion block
    (and its head) is trainable; all members must already exist.
    ``n_class_labels`` sizes the classification head of a freshly created
    component.
    """
    members = list(members)
    if kind not in KINDS:
        raise TaskModuleError(f"unknown module kind {kind!r}")
    if len(set(members)) != len(members):
        raise TaskModuleError(f"duplicate member names in {members}")
    if not members:
        raise TaskModuleError("task module without members")
    if kind == SINGLE and len(members) != 1:
        raise TaskModuleError("a single-adapter module has exactly one member")
    for path in (checkpoints or {}).values():
        model.load_component(path)

    fresh = members[-1] if kind in (SINGLE, STACK) else None
    for m in members:
        if m not in model.adapters:
            if m != fresh:
                raise TaskModuleError(f"missing member adapter {m!r}")
            model.add_adapter(m, n_class_labels)

    fusion = None
    if kind == FUSION:
        fusion_name = fusion_name or "+".join(members)
        fusion = model.fusions.get(fusion_name) or model.add_fusion(fusion_name, n_class_labels)
        prefix = f"fusion/{fusion_name}/"
    else:
        prefix = f"adapter/{members[-1]}/"

    trainable = frozenset(n for n in model.registry() if n.startswith(prefix))
    model.set_trainable(trainable)
    return AdapterTaskModule(kind, members, {m: model.adapters[m] for m in members}, fusion, trainable)
