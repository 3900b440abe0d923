"""Singular-vector alignment between adapted and pre-trained weights.

For each adapted layer the top-``k`` singular vectors of ``W + A @ B`` are
sign-matched against those of the frozen ``W`` and penalized for drifting
away from them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .autodiff import Tape
from .lora import adapted_layers

GUARD = 1e-12


class AlignError(ValueError):
    pass


@dataclass(frozen=True)
class AlignConfig:
    k: int = 16
    T: float = 7.0
    w_align: float = 100.0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise AlignError(f"k must be a positive integer, got {self.k}")
        if not self.T > 0:
            raise AlignError(f"T must be positive, got {self.T}")
        if not self.w_align >= 0:
            raise AlignError(f"w_align must be non-negative, got {self.w_align}")


def flip_threshold_cosine(T: float) -> float:
    """Cosine below which a unit-vector pair has ratio above ``T``."""
    return (1.0 - T * T) / (1.0 + T * T)


def build_reference_frames(model, k: int) -> dict[str, linalg.TopK]:
    """Top-``k`` singular frames of every adapted layer's frozen weight."""
    frames = {}
    for layer in adapted_layers(model):
        try:
            frames[layer.name] = linalg.top_k(linalg.svd(layer.W.value), k)
        except linalg.LinalgError as exc:
            raise AlignError(f"layer {layer.name}: {exc}") from exc
    if not frames:
        raise AlignError("model has no adapted layers")
    return frames


def flip_ratios(Uk_ref, Uk_new) -> np.ndarray:
    """Per-column ``|u_ref - u_new| / |u_ref + u_new|`` with the zero guards applied."""
    num = np.linalg.norm(Uk_ref - Uk_new, axis=0)
    den = np.linalg.norm(Uk_ref + Uk_new, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    r = np.where(den < GUARD, np.inf, r)
    return np.where((den < GUARD) & (num < GUARD), 0.0, r)


def sign_correct(Uk_ref, Vk_ref, Uk_new, Vk_new, T: float):
    """Negate column pairs of ``(Uk_new, Vk_new)`` whose left ratio exceeds ``T``.

    Returns ``(Uk_corr, Vk_corr, flipped)`` where ``flipped`` is a boolean mask.
    """
    Uk_ref, Vk_ref, Uk_new, Vk_new = (np.asarray(a, dtype=np.float64) for a in (Uk_ref, Vk_ref, Uk_new, Vk_new))
    if Uk_ref.shape != Uk_new.shape or Vk_ref.shape != Vk_new.shape or Uk_ref.shape[1] != Vk_ref.shape[1]:
        raise AlignError(
            f"sign_correct shape mismatch: U {Uk_ref.shape}/{Uk_new.shape}, V {Vk_ref.shape}/{Vk_new.shape}"
        )
    flipped = flip_ratios(Uk_ref, Uk_new) > T
    sgn = np.where(flipped, -1.0, 1.0)
    return Uk_new * sgn, Vk_new * sgn, flipped


def alignment_scores(Uk_corr, Vk_corr, Uk_ref, Vk_ref):
    Uk_corr, Vk_corr = np.asarray(Uk_corr), np.asarray(Vk_corr)
    if Uk_corr.shape != np.shape(Uk_ref) or Vk_corr.shape != np.shape(Vk_ref):
        raise AlignError(f"alignment_scores shape mismatch: {Uk_corr.shape} vs {np.shape(Uk_ref)}")
    return Uk_corr.T @ Uk_ref, Vk_corr.T @ Vk_ref


def layer_align_loss(S_U, S_V) -> float:
    """``0.5 * (mean((1 - diag S_U)^2) + mean((1 - diag S_V)^2))``."""
    S_U, S_V = np.asarray(S_U), np.asarray(S_V)
    if S_U.ndim != 2 or S_U.shape[0] != S_U.shape[1] or S_U.shape != S_V.shape:
        raise AlignError(f"score matrices must be equal-size squares, got {S_U.shape} and {S_V.shape}")
    du = 1.0 - np.diagonal(S_U)
    dv = 1.0 - np.diagonal(S_V)
    return 0.5 * (float(np.mean(du * du)) + float(np.mean(dv * dv)))


def _paired_dots(tape: Tape, cols, ref):
    # column-wise <cols_i, ref_i> as a 1 x k node
    prod = tape.mul(cols, ref)
    return tape.matmul(np.ones((1, ref.shape[0])), prod)


def layer_align_node(tape: Tape, layer, frame: linalg.TopK, T: float):
    """Differentiable alignment loss of one adapted layer; flip signs enter as constants."""
    ad = layer.adapter
    w_new = tape.add(layer.W, tape.matmul(ad.A, ad.B))
    uk, vk = tape.svd_topk(w_new, frame.k_eff, guess=frame.source)
    _, _, flipped = sign_correct(frame.Uk, frame.Vk, uk.value, vk.value, T)
    sgn = np.where(flipped, -1.0, 1.0)[None, :]
    if flipped.any():
        uk, vk = tape.scale(uk, sgn), tape.scale(vk, sgn)
    one = np.ones((1, frame.k_eff))
    du = tape.sub(one, _paired_dots(tape, uk, frame.Uk))
    dv = tape.sub(one, _paired_dots(tape, vk, frame.Vk))
    total = tape.add(tape.mean(tape.mul(du, du)), tape.mean(tape.mul(dv, dv)))
    return tape.scale(total, 0.5)


def mean_align_loss(tape: Tape, model, frames: dict[str, linalg.TopK], k: int, T: float):
    """Unweighted mean of per-layer alignment losses, recorded on ``tape``."""
    layers = adapted_layers(model)
    if not layers:
        raise AlignError("model has no adapted layers")
    total = None
    for layer in layers:
        frame = frames.get(layer.name)
        if frame is None:
            raise AlignError(f"no reference frame for layer {layer.name}")
        if frame.k_eff != min(k, min(layer.shape)):
            raise AlignError(f"layer {layer.name}: frame has k={frame.k_eff}, loss asked for k={k}")
        try:
            term = layer_align_node(tape, layer, frame, T)
        except linalg.LinalgError as exc:
            raise AlignError(f"layer {layer.name}: {exc}") from exc
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / len(layers))
