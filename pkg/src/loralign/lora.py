"""Low-rank adapters on frozen dense layers.

Layer names follow ``<enc|dec>.<block>.<attn.qkv|attn.proj|mlp.fc1|mlp.fc2>``.
A layer computes ``x @ W + (x @ A) @ B + bias``; the update ``A @ B`` is
never scaled and never materialized in the forward pass.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .autodiff import Param, Tape

INIT_STD = 0.02
LAYER_NAME = re.compile(r"^(enc|dec)\.(\d+)\.(attn\.qkv|attn\.proj|mlp\.fc1|mlp\.fc2)$")


class LoraError(ValueError):
    pass


@dataclass
class LoraAdapter:
    A: Param
    B: Param
    rank: int

    @property
    def n_params(self) -> int:
        return self.A.value.size + self.B.value.size


def init_adapter(m: int, n: int, r: int, seed, name: str = "") -> LoraAdapter:
    """Gaussian ``A`` (std 0.02) and all-zero ``B``, so the update starts at exactly zero."""
    if not (1 <= r <= min(m, n)):
        raise LoraError(f"rank {r} out of range [1, {min(m, n)}] for a {m}x{n} layer {name!r}".rstrip())
    rng = np.random.default_rng(seed)
    A = Param(rng.normal(0.0, INIT_STD, size=(m, r)), name=f"{name}.lora_A")
    B = Param(np.zeros((r, n)), name=f"{name}.lora_B")
    return LoraAdapter(A, B, r)


@dataclass
class AdaptedLinear:
    name: str
    W: Param
    bias: Param | None = None
    adapter: LoraAdapter | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.value.shape

    def params(self) -> list[Param]:
        out = [self.W]
        if self.bias is not None:
            out.append(self.bias)
        if self.adapter is not None:
            out += [self.adapter.A, self.adapter.B]
        return out


def lora_forward(tape: Tape, layer: AdaptedLinear, x):
    """Record ``x @ W + (x @ A) @ B (+ bias)`` on ``tape``."""
    xv = x.value if hasattr(x, "value") else np.asarray(x)
    m = layer.W.value.shape[0]
    if xv.shape[-1] != m:
        raise LoraError(f"layer {layer.name}: input has {xv.shape[-1]} features, expected {m}")
    y = tape.matmul(x, layer.W)
    if layer.adapter is not None:
        y = tape.add(y, tape.matmul(tape.matmul(x, layer.adapter.A), layer.adapter.B))
    if layer.bias is not None:
        y = tape.add(y, layer.bias)
    return y


def merge(layer: AdaptedLinear) -> np.ndarray:
    """``W + A @ B`` as a new array; the layer is left untouched."""
    if layer.adapter is None:
        raise LoraError(f"layer {layer.name} has no adapter to merge")
    return layer.W.value + layer.adapter.A.value @ layer.adapter.B.value


@dataclass(frozen=True)
class PlacementSpec:
    encoder: bool = True
    decoder: bool = True
    attention: bool = True
    mlp: bool = True

    def __post_init__(self):
        if not (self.encoder or self.decoder):
            raise LoraError("placement needs at least one of encoder/decoder")
        if not (self.attention or self.mlp):
            raise LoraError("placement needs at least one of attention/mlp")

    @classmethod
    def parse(cls, text: str) -> "PlacementSpec":
        """Parse ``enc+dec+attn+mlp``-style strings (``all`` selects everything)."""
        parts = {p.strip() for p in text.replace(",", "+").split("+") if p.strip()}
        if parts == {"all"}:
            return cls()
        unknown = parts - {"enc", "dec", "attn", "mlp"}
        if unknown:
            raise LoraError(f"unknown placement token(s): {', '.join(sorted(unknown))}")
        return cls("enc" in parts, "dec" in parts, "attn" in parts, "mlp" in parts)

    def __str__(self):
        toks = [t for t, f in (("enc", self.encoder), ("dec", self.decoder), ("attn", self.attention), ("mlp", self.mlp)) if f]
        return "+".join(toks)

    def matches(self, name: str) -> bool:
        mt = LAYER_NAME.match(name)
        if mt is None:
            return False
        region, _, kind = mt.groups()
        region_ok = self.encoder if region == "enc" else self.decoder
        kind_ok = self.attention if kind.startswith("attn") else self.mlp
        return region_ok and kind_ok


def select_targets(model, spec: PlacementSpec) -> list[str]:
    names = [entry.name for entry in model.layer_registry() if spec.matches(entry.name)]
    if not names:
        raise LoraError(f"placement {spec} selects no layers")
    return names


def inject_adapters(model, names, rank: int, seed: int) -> None:
    """Attach fresh adapters to ``names`` and freeze every base parameter."""
    for p in model.parameters():
        p.trainable = False
    for i, name in enumerate(names):
        layer = model.layers[name]
        m, n = layer.shape
        layer.adapter = init_adapter(m, n, rank, np.random.SeedSequence([seed, i]), name=name)


def remove_adapters(model) -> None:
    for layer in model.layers.values():
        layer.adapter = None


def adapted_layers(model) -> list[AdaptedLinear]:
    return [layer for layer in model.layers.values() if layer.adapter is not None]


def trainable_param_count(model) -> int:
    """Sum of ``r * (m + n)`` over adapted layers."""
    return sum(layer.adapter.rank * (layer.shape[0] + layer.shape[1]) for layer in adapted_layers(model))
