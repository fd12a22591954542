"""Compression transforms: distillation, structured pruning, binarization.

Each transform consumes a model and returns a new one carrying its own
compression descriptor; the input model is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (
    BinarizedConv2d,
    Conv2d,
    Linear,
    Model,
    build_model,
    conv_spatial_sizes,
)
from .training import TrainSpec, train_model

# Cost of one xnor-popcount MAC relative to one float MAC; equals the
# reciprocal packing width of the binary kernels.
BINARY_MAC_WEIGHT = 1.0 / 64.0

PRUNE_REGULARITIES = ("weight", "kernel", "filter")


@dataclass(frozen=True)
class CompressionStats:
    compression_ratio: float  # baseline parameter bits / compressed bits
    ncc: float  # normalized compute complexity, 1.0 for the baseline
    param_bits: int
    baseline_bits: int
    macs_weighted: float
    baseline_macs: float


def distill(teacher: Model, student_arch: str, temperature: float, mix: float,
            x: np.ndarray, y: np.ndarray, spec: TrainSpec,
            seed: int = 0) -> Model:
    """Train a fresh student on temperature-softened teacher outputs."""
    if temperature <= 0:
        raise ValueError("distillation temperature must be > 0")
    student = build_model(student_arch, num_classes=teacher.num_classes, seed=seed)
    train_model(student, x, y, spec, teacher=teacher,
                temperature=temperature, mix=mix)
    student.compression = {
        "kind": "distilled",
        "teacher_arch": teacher.arch,
        "temperature": temperature,
        "mix": mix,
    }
    return student


def prune(model: Model, regularity: str, sparsity: float) -> Model:
    """Zero the lowest-magnitude units of every conv layer, with masks.

    Granularities: individual weights, KHxKW kernel slices ranked by L1
    norm, or whole output-channel filters ranked by L1 norm. The unit
    count per layer is round(sparsity * units), so the achieved sparsity
    is the closest value the granularity allows. Linear layers are left
    untouched. Masks persist: masked weights stay exactly zero through
    subsequent training steps.
    """
    if regularity not in PRUNE_REGULARITIES:
        raise ValueError(f"regularity must be one of {PRUNE_REGULARITIES}, got {regularity!r}")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    out = model.clone()
    zeroed, total = 0, 0
    for _, layer in out.conv_layers():
        if not isinstance(layer, Conv2d):
            raise ValueError("pruning expects full-precision conv layers")
        mask = _prune_mask(layer.weight.data, regularity, sparsity)
        layer.mask = mask
        layer.apply_mask()
        zeroed += int(mask.size - mask.sum())
        total += mask.size
    out.compression = {
        "kind": "pruned",
        "regularity": regularity,
        "sparsity": sparsity,
        "achieved_sparsity": zeroed / total if total else 0.0,
    }
    return out


def _prune_mask(w: np.ndarray, regularity: str, sparsity: float) -> np.ndarray:
    mask = np.ones_like(w, dtype=np.float32)
    if regularity == "weight":
        flat = np.abs(w).reshape(-1)
        k = int(round(sparsity * flat.size))
        if k:
            idx = np.argsort(flat, kind="stable")[:k]
            mask.reshape(-1)[idx] = 0.0
    elif regularity == "kernel":
        co, ci = w.shape[:2]
        norms = np.abs(w).sum(axis=(2, 3)).reshape(-1)  # L1 per kernel
        k = int(round(sparsity * norms.size))
        if k:
            idx = np.argsort(norms, kind="stable")[:k]
            mask.reshape(co * ci, *w.shape[2:])[idx] = 0.0
    else:  # filter
        norms = np.abs(w).sum(axis=(1, 2, 3))  # L1 per output filter
        k = int(round(sparsity * norms.size))
        if k:
            idx = np.argsort(norms, kind="stable")[:k]
            mask[idx] = 0.0
    return mask


def binarize_xnor(model: Model, seed: int = 0) -> Model:
    """Rebuild the architecture in its binary variant, XNOR scheme.

    Every non-stem conv becomes sign(W) with per-filter scale mean(|W|);
    first and last layers stay full precision. Weights, batchnorm
    parameters, and running statistics transfer by name.
    """
    return _binarize(model, {"scheme": "xnor"}, seed)


def binarize_abc(model: Model, num_bases: int = 3, seed: int = 0) -> Model:
    """Binary variant with `num_bases` shifted sign bases per layer."""
    if num_bases < 1:
        raise ValueError("num_bases must be >= 1")
    return _binarize(model, {"scheme": "abc", "num_bases": num_bases}, seed)


def _binarize(model: Model, binary: dict, seed: int) -> Model:
    if model.compression.get("kind") == "binarized":
        raise ValueError("model is already binarized")
    out = build_model(model.arch, num_classes=model.num_classes,
                      seed=seed, binary=binary)
    src = dict(model.named_arrays())
    for name, arr in out.named_arrays():
        if name in src:
            arr[...] = src[name]
    out.invalidate_caches()
    out.compression = {"kind": "binarized", **binary}
    return out


# ---------------------------------------------------------------------------
# size and compute accounting


def compression_stats(model: Model, baseline: Model,
                      binary_mac_weight: float = BINARY_MAC_WEIGHT) -> CompressionStats:
    """Parameter-bit ratio and normalized compute complexity vs a baseline.

    Bits: 32 per surviving float parameter, 1 per binary weight plus 32
    per stored scale (mask bookkeeping excluded). Compute: one unit per
    float multiply-accumulate, ``binary_mac_weight`` per xnor-popcount
    MAC, pruned MACs removed at the mask's structural granularity.
    """
    if model.arch != baseline.arch or model.num_classes != baseline.num_classes:
        raise ValueError(
            f"architecture mismatch: {model.arch}/{model.num_classes} vs "
            f"{baseline.arch}/{baseline.num_classes}"
        )
    bits = _param_bits(model)
    base_bits = _param_bits(baseline)
    macs = _weighted_macs(model, binary_mac_weight)
    base_macs = _weighted_macs(baseline, binary_mac_weight)
    return CompressionStats(
        compression_ratio=base_bits / bits,
        ncc=macs / base_macs,
        param_bits=bits,
        baseline_bits=base_bits,
        macs_weighted=macs,
        baseline_macs=base_macs,
    )


def _param_bits(model: Model) -> int:
    bits = 0
    for path, layer in model._walk():
        if isinstance(layer, BinarizedConv2d):
            p = layer.weight.data.size
            scales = layer.out_ch if layer.scheme == "xnor" else layer.num_bases
            bits += layer.num_bases * p + 32 * scales
        elif isinstance(layer, Conv2d):
            surviving = layer.weight.data.size if layer.mask is None \
                else int(layer.mask.sum())
            bits += 32 * surviving
        else:
            for _, t in layer.param_items():
                bits += 32 * t.data.size
            for _, arr in layer.array_items():
                bits += 32 * arr.size
    return bits


def _weighted_macs(model: Model, binary_mac_weight: float) -> float:
    spatial = conv_spatial_sizes(model)
    macs = 0.0
    for path, layer in model._walk():
        if isinstance(layer, BinarizedConv2d):
            oh, ow = spatial[path]
            per_basis = oh * ow * layer.kernel * layer.kernel * layer.in_ch * layer.out_ch
            macs += binary_mac_weight * layer.num_bases * per_basis
        elif isinstance(layer, Conv2d):
            oh, ow = spatial[path]
            full = oh * ow * layer.kernel * layer.kernel * layer.in_ch * layer.out_ch
            if layer.mask is not None:
                full *= layer.mask.sum() / layer.mask.size
            macs += full
        elif isinstance(layer, Linear):
            macs += layer.weight.data.size
    return macs
