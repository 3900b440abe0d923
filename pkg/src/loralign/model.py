"""A small pre-norm attention/MLP encoder-decoder for 32x32 RGB restoration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Param, Tape
from .lora import AdaptedLinear, lora_forward

BLOCK_LAYERS = ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image: int = 32
    channels: int = 3
    patch: int = 4
    dim: int = 32
    heads: int = 4
    hidden: int = 64
    enc_blocks: int = 2
    dec_blocks: int = 2

    @property
    def tokens(self) -> int:
        return (self.image // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


class RegistryEntry(NamedTuple):
    name: str
    m: int
    n: int
    kind: str
    region: str


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    b, h, w, c = images.shape
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, p: int, h: int, w: int, c: int) -> np.ndarray:
    b = tokens.shape[0]
    x = tokens.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


class ToyRestorer:
    """Patch embed, encoder and decoder blocks, un-embed, plus a global input residual.

    The un-embed starts at zero, so a freshly built model is the identity map.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.layers: dict[str, AdaptedLinear] = {}
        self.norms: dict[str, Param] = {}

        def dense(name, m, n, std, zero=False):
            w = np.zeros((m, n)) if zero else rng.normal(0.0, std, size=(m, n))
            self.layers[name] = AdaptedLinear(
                name, Param(w, name=f"{name}.weight"), Param(np.zeros((1, n)), name=f"{name}.bias")
            )

        d, hid = cfg.dim, cfg.hidden
        n_blocks = cfg.enc_blocks + cfg.dec_blocks
        resid_std = 0.5 / math.sqrt(d * n_blocks)
        dense("embed", cfg.patch_dim, d, 1.0 / math.sqrt(cfg.patch_dim))
        for region, count in (("enc", cfg.enc_blocks), ("dec", cfg.dec_blocks)):
            for i in range(count):
                pre = f"{region}.{i}"
                for ln in ("ln1", "ln2"):
                    self.norms[f"{pre}.{ln}.scale"] = Param(np.ones((1, d)), name=f"{pre}.{ln}.scale")
                    self.norms[f"{pre}.{ln}.offset"] = Param(np.zeros((1, d)), name=f"{pre}.{ln}.offset")
                dense(f"{pre}.attn.qkv", d, 3 * d, 1.0 / math.sqrt(d))
                dense(f"{pre}.attn.proj", d, d, resid_std)
                dense(f"{pre}.mlp.fc1", d, hid, 1.0 / math.sqrt(d))
                dense(f"{pre}.mlp.fc2", hid, d, resid_std)
        dense("unembed", d, cfg.patch_dim, 0.0, zero=True)

    # ------------------------------------------------------------------
    def block_names(self) -> list[str]:
        cfg = self.config
        return [f"enc.{i}" for i in range(cfg.enc_blocks)] + [f"dec.{i}" for i in range(cfg.dec_blocks)]

    def layer_registry(self) -> list[RegistryEntry]:
        """Adapter-capable dense layers in forward order."""
        out = []
        for blk in self.block_names():
            region = blk.split(".")[0]
            for suffix in BLOCK_LAYERS:
                name = f"{blk}.{suffix}"
                m, n = self.layers[name].shape
                out.append(RegistryEntry(name, m, n, suffix.split(".")[0], region))
        return out

    def base_parameters(self) -> list[Param]:
        out = []
        for layer in self.layers.values():
            out.append(layer.W)
            if layer.bias is not None:
                out.append(layer.bias)
        out.extend(self.norms.values())
        return out

    def parameters(self) -> list[Param]:
        """Base parameters followed by adapter parameters."""
        out = self.base_parameters()
        for layer in self.layers.values():
            if layer.adapter is not None:
                out += [layer.adapter.A, layer.adapter.B]
        return out

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def n_base_params(self) -> int:
        return sum(p.value.size for p in self.base_parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def trainable_parameters(self) -> list[Param]:
        return [p for p in self.parameters() if p.trainable]

    # ------------------------------------------------------------------
    def _norm(self, tape, x, pre):
        return tape.record("layer-norm", x, self.norms[f"{pre}.scale"], self.norms[f"{pre}.offset"])

    def _block(self, tape, h, blk):
        a = self._norm(tape, h, f"{blk}.ln1")
        qkv = lora_forward(tape, self.layers[f"{blk}.attn.qkv"], a)
        o = tape.record("attention", qkv, heads=self.config.heads)
        h = tape.add(h, lora_forward(tape, self.layers[f"{blk}.attn.proj"], o))
        a = self._norm(tape, h, f"{blk}.ln2")
        f = lora_forward(tape, self.layers[f"{blk}.mlp.fc1"], a)
        f = tape.record("gelu", f)
        f = lora_forward(tape, self.layers[f"{blk}.mlp.fc2"], f)
        return tape.add(h, f)

    def forward(self, tape: Tape, images):
        """Record the restoration of ``images`` (b x 32 x 32 x 3) on ``tape``."""
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != (cfg.image, cfg.image, cfg.channels):
            raise ModelError(f"expected images of shape (b, {cfg.image}, {cfg.image}, {cfg.channels}), got {images.shape}")
        b = images.shape[0]
        p = cfg.patch
        g = cfg.image // p
        h = lora_forward(tape, self.layers["embed"], patchify(images, p))
        for blk in self.block_names():
            h = self._block(tape, h, blk)
        out = lora_forward(tape, self.layers["unembed"], h)
        out = tape.record("reshape", out, shape=(b, g, g, p, p, cfg.channels))
        out = tape.record("transpose", out, axes=(0, 1, 3, 2, 4, 5))
        out = tape.record("reshape", out, shape=(b, cfg.image, cfg.image, cfg.channels))
        return tape.add(out, images)

    def restore(self, images, batch: int = 64) -> np.ndarray:
        """Forward pass without gradients, in fixed-size chunks."""
        images = np.asarray(images, dtype=np.float64)
        outs = []
        for i in range(0, images.shape[0], batch):
            outs.append(self.forward(Tape(), images[i : i + batch]).value)
        return np.concatenate(outs, axis=0)

    # ------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ModelError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ModelError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value[...] = arr


def forward(model: ToyRestorer, tape: Tape, images):
    return model.forward(tape, images)


def layer_registry(model: ToyRestorer) -> list[RegistryEntry]:
    return model.layer_registry()
