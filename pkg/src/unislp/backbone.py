"""Toy-scale unified transformer encoder-decoder with one adapter slot per layer.

Pre-norm layers; the adapter slot sits after the feed-forward residual add.
The encoder carries a CTC projection head and a mean-pooled classification
head; the decoder predicts the next token under causal self-attention plus
cross-attention to the encoder states.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .adapters import AdapterBank, AdapterTaskModule, FusionBank, TaskModuleError, name_rng
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, sinusoidal_positions
from .tensor import Parameter, Tensor


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 2
    vocab_size: int = 42
    n_class_labels: int = 8
    max_positions: int = 128
    adapter_dim: int = 16
    d_in: int = 8
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    blank_id: int = 3
    seed: int = 0

    def __post_init__(self):
        for f in ("d_model", "n_heads", "d_ff", "vocab_size", "n_class_labels",
                  "max_positions", "adapter_dim", "d_in", "encoder_layers", "decoder_layers"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        specials = {self.pad_id, self.bos_id, self.eos_id, self.blank_id}
        if len(specials) != 4 or max(specials) >= self.vocab_size or min(specials) < 0:
            raise ValueError("pad/bos/eos/blank ids must be distinct and inside the vocabulary")

    @property
    def n_layers(self) -> int:
        return self.encoder_layers + self.decoder_layers

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.ln_attn = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, h, mask):
        x = self.ln_attn(h)
        h = h + self.attn(x, x, mask)
        return h + self.ff(self.ln_ff(h))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.ln_self = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_cross = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, h, memory, self_mask, cross_mask):
        x = self.ln_self(h)
        h = h + self.self_attn(x, x, self_mask)
        h = h + self.cross_attn(self.ln_cross(h), memory, cross_mask)
        return h + self.ff(self.ln_ff(h))


@dataclass
class EncoderOutput:
    states: Tensor  # [B, T, d]
    ctc_logits: Tensor  # [B, T, V]
    cls_logits: Tensor  # [B, C]
    lengths: np.ndarray


def _pad(seqs: Sequence[np.ndarray], value=0.0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    tail = np.asarray(seqs[0]).shape[1:]
    out = np.full((len(seqs), int(lengths.max()), *tail), value, dtype=np.asarray(seqs[0]).dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class UnifiedModel(Module):
    def __init__(self, config: ModelConfig):
        cfg = config
        self._cfg = cfg
        rng = name_rng(cfg.seed, "backbone")
        self.input_proj = Linear(cfg.d_in, cfg.d_model, rng)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.encoder_layers)]
        self.encoder_norm = LayerNorm(cfg.d_model)
        self.ctc_head = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.cls_head = Linear(cfg.d_model, cfg.n_class_labels, rng)
        self.token_emb = Parameter(rng.normal(0.0, cfg.d_model ** -0.5, size=(cfg.vocab_size, cfg.d_model)))
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(cfg.d_model)
        self.out_proj = Linear(cfg.d_model, cfg.vocab_size, rng)
        self._pos = sinusoidal_positions(cfg.max_positions, cfg.d_model)
        self._adapters: dict[str, AdapterBank] = {}
        self._fusions: dict[str, FusionBank] = {}
        self._name_params()

    # ------------------------------------------------------------ registry

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def slots(self) -> list[str]:
        return [f"enc.{i}" for i in range(self._cfg.encoder_layers)] + \
               [f"dec.{i}" for i in range(self._cfg.decoder_layers)]

    @property
    def adapters(self) -> dict[str, AdapterBank]:
        return self._adapters

    @property
    def fusions(self) -> dict[str, FusionBank]:
        return self._fusions

    def backbone_parameters(self) -> list[tuple[str, Parameter]]:
        return list(super().named_parameters())

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        for name, bank in self._adapters.items():
            yield from bank.named_parameters(f"{prefix}adapter/{name}/")
        for name, bank in self._fusions.items():
            yield from bank.named_parameters(f"{prefix}fusion/{name}/")

    def registry(self) -> dict[str, Parameter]:
        reg = {}
        for name, p in self.named_parameters():
            if name in reg:
                raise RuntimeError(f"duplicate parameter name {name}")
            reg[name] = p
        return reg

    def _name_params(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def add_adapter(self, name: str, n_class_labels: int | None = None, adapter_dim: int | None = None) -> AdapterBank:
        if name in self._adapters:
            raise TaskModuleError(f"adapter {name!r} already exists")
        cfg = self._cfg
        bank = AdapterBank(name, self.slots, cfg.d_model, adapter_dim or cfg.adapter_dim, cfg.seed, n_class_labels)
        self._adapters[name] = bank
        self._name_params()
        return bank

    def add_fusion(self, name: str, n_class_labels: int | None = None) -> FusionBank:
        if name in self._fusions:
            raise TaskModuleError(f"fusion {name!r} already exists")
        bank = FusionBank(name, self.slots, self._cfg.d_model, self._cfg.seed, n_class_labels)
        self._fusions[name] = bank
        self._name_params()
        return bank

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        reg = self.registry()
        unknown = names - set(reg)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)[:3]}")
        for n, p in reg.items():
            p.trainable = n in names

    def trainable_names(self) -> set[str]:
        return {n for n, p in self.registry().items() if p.trainable}

    # ------------------------------------------------------------ persistence

    def state_dict(self, prefix: str | None = None) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.registry().items()
                if prefix is None or n.startswith(prefix)}

    def load_state_dict(self, params: dict[str, np.ndarray], strict: bool = True) -> None:
        reg = self.registry()
        missing = set(reg) - set(params)
        extra = set(params) - set(reg)
        if extra or (strict and missing):
            raise ckpt.CheckpointError(
                f"checkpoint mismatch: missing={sorted(missing)[:3]} unexpected={sorted(extra)[:3]}")
        for n, arr in params.items():
            if reg[n].shape != arr.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {n}: {reg[n].shape} vs {arr.shape}")
            reg[n].data = np.array(arr, dtype=np.float64)

    def save_backbone(self, path, meta: dict | None = None):
        params = {n: p.data for n, p in self.backbone_parameters()}
        return ckpt.save(path, params, self._cfg.to_dict(), meta)

    def save_component(self, path, component: str, meta: dict | None = None):
        """Write ``adapter/<name>`` or ``fusion/<name>`` parameters to their own archive."""
        prefix = component.rstrip("/") + "/"
        params = self.state_dict(prefix)
        if not params:
            raise KeyError(f"no parameters under {prefix}")
        return ckpt.save(path, params, self._cfg.to_dict(), meta)

    @classmethod
    def from_checkpoint(cls, path) -> "UnifiedModel":
        config, _, params = ckpt.load(path)
        model = cls(ModelConfig.from_dict(config))
        model.load_state_dict(params)
        return model

    def load_component(self, path) -> list[str]:
        """Register the adapter/fusion banks stored in ``path``; returns their qualified names."""
        config, _, params = ckpt.load(path)
        if config and config.get("d_model") != self._cfg.d_model:
            raise TaskModuleError(f"{path}: d_model {config.get('d_model')} != {self._cfg.d_model}")
        groups: dict[tuple[str, str], dict[str, np.ndarray]] = {}
        for full, arr in params.items():
            kind, name, rest = full.split("/", 2)
            if kind not in ("adapter", "fusion"):
                raise ckpt.CheckpointError(f"{path}: unexpected entry {full}")
            groups.setdefault((kind, name), {})[rest] = arr
        loaded = []
        for (kind, name), entries in groups.items():
            head = entries.get("cls_head.weight")
            n_cls = head.shape[1] if head is not None else None
            if kind == "adapter":
                down = entries.get(f"{self.slots[0]}.down.weight")
                if down is None or down.shape[0] != self._cfg.d_model:
                    raise TaskModuleError(f"{path}: adapter {name!r} does not match d_model")
                bank = self.add_adapter(name, n_cls, adapter_dim=down.shape[1])
            else:
                bank = self.add_fusion(name, n_cls)
            reg = dict(bank.named_parameters())
            if set(reg) != set(entries):
                raise TaskModuleError(f"{path}: {kind} {name!r} layer layout does not match the model")
            for rest, p in reg.items():
                if p.shape != entries[rest].shape:
                    raise TaskModuleError(f"{path}: shape mismatch for {kind}/{name}/{rest}")
                p.data = np.array(entries[rest], dtype=np.float64)
            self._name_params()
            loaded.append(f"{kind}/{name}")
        return loaded

    # ------------------------------------------------------------ forward

    def _slot(self, slot: str, h: Tensor, module: AdapterTaskModule | None) -> Tensor:
        return h if module is None else module.apply(slot, h)

    def encode_batch(self, features: Sequence[np.ndarray], module: AdapterTaskModule | None = None) -> EncoderOutput:
        cfg = self._cfg
        feats = [np.asarray(f, dtype=np.float64) for f in features]
        for f in feats:
            if f.ndim != 2 or f.shape[1] != cfg.d_in:
                raise InputError(f"features must be [T, {cfg.d_in}], got {f.shape}")
            if not 0 < len(f) <= cfg.max_positions:
                raise InputError(f"frame count {len(f)} outside [1, {cfg.max_positions}]")
        x, lengths = _pad(feats)
        b, t, _ = x.shape
        valid = np.arange(t)[None, :] < lengths[:, None]  # [B, T]
        mask = ~valid[:, None, None, :]
        h = self.input_proj(Tensor(x)) + Tensor(self._pos[:t])
        for i, layer in enumerate(self.encoder):
            h = self._slot(f"enc.{i}", layer(h, mask), module)
        states = self.encoder_norm(h)
        ctc_logits = self.ctc_head(states)
        pool = np.broadcast_to((valid / lengths[:, None])[:, :, None], states.shape)
        pooled = (states * Tensor(pool)).sum(axis=1)
        head = module.cls_head if module is not None and module.cls_head is not None else self.cls_head
        return EncoderOutput(states, ctc_logits, head(pooled), lengths)

    def encode(self, features, module: AdapterTaskModule | None = None):
        """Single utterance: returns (states [T, d], ctc_logits [T, V], cls_logits [C])."""
        out = self.encode_batch([features], module)
        return out.states[0], out.ctc_logits[0], out.cls_logits[0]

    def decode_batch(self, states: Tensor, enc_lengths, prefixes: Sequence[Sequence[int]],
                     module: AdapterTaskModule | None = None) -> Tensor:
        """Logits [B, U, V]; row i scores the token following prefix[: i + 1]."""
        cfg = self._cfg
        if any(len(p) == 0 for p in prefixes):
            raise InputError("decoder prefix must be nonempty")
        if any(len(p) > cfg.max_positions for p in prefixes):
            raise InputError("decoder prefix longer than max_positions")
        ids, plen = _pad([np.asarray(p, dtype=np.int64) for p in prefixes], value=cfg.pad_id)
        b, u = ids.shape
        enc_lengths = np.asarray(enc_lengths)
        s = states.shape[1]
        causal = np.triu(np.ones((u, u), dtype=bool), k=1)[None, None]
        pad_k = (np.arange(u)[None, :] >= plen[:, None])[:, None, None, :]
        self_mask = causal | pad_k
        cross_mask = (np.arange(s)[None, :] >= enc_lengths[:, None])[:, None, None, :]
        h = T.embedding(self.token_emb, ids) + Tensor(self._pos[:u])
        for i, layer in enumerate(self.decoder):
            h = self._slot(f"dec.{i}", layer(h, states, self_mask, cross_mask), module)
        return self.out_proj(self.decoder_norm(h))

    def decode_logits(self, enc_states: Tensor, prefix: Sequence[int],
                      module: AdapterTaskModule | None = None) -> Tensor:
        """Single utterance: enc_states [T, d], prefix of u ids -> logits [u, V]."""
        enc_states = T.as_tensor(enc_states)
        states = enc_states.reshape(1, *enc_states.shape)
        return self.decode_batch(states, [enc_states.shape[0]], [list(prefix)], module)[0]


def count_parameters(model: UnifiedModel, filter: str | AdapterTaskModule = "all") -> int:
    """Scalar parameter count: ``"all"``, ``"trainable"``, ``"backbone"`` or ``trainable_under(module)``."""
    reg = model.registry()
    if isinstance(filter, AdapterTaskModule):
        return int(sum(reg[n].data.size for n in filter.trainable_set))
    if filter == "all":
        return int(sum(p.data.size for p in reg.values()))
    if filter == "trainable":
        return int(sum(p.data.size for p in reg.values() if p.trainable))
    if filter == "backbone":
        return int(sum(p.data.size for _, p in model.backbone_parameters()))
    raise ValueError(f"unknown filter {filter!r}")


def decoder_stack_param_count(cfg: ModelConfig) -> int:
    """Parameters of one dedicated decoder: embeddings, decoder layers, final norm and output projection."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    attn = 4 * (d * d + d)
    layer = 3 * 2 * d + 2 * attn + (d * f + f + f * d + d)
    return v * d + cfg.decoder_layers * layer + 2 * d + (d * v + v)
