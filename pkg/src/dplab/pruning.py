"""Per-layer magnitude pruning with rewinding to initialization.

``keep_fraction`` is always the fraction of weights *retained*. Biases are
never pruned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .data import Dataset
from .optim import DpConfig, PhasePlan, train
from .models import Model


@dataclass(frozen=True)
class PruneSpec:
    """``keep_fraction`` is one float for every pruned layer or a ``{layer: fraction}`` mapping.

    ``layers`` restricts pruning to the named weight matrices (default: all).
    """

    keep_fraction: float | dict = 1.0
    pretrain_epochs: int = 20
    layers: tuple[str, ...] | None = None
    rewind: str = "to_init"

    def __post_init__(self):
        fractions = self.keep_fraction.values() if isinstance(self.keep_fraction, dict) else [self.keep_fraction]
        for f in fractions:
            if not 0 < f <= 1:
                raise ValueError(f"keep_fraction must be in (0, 1], got {f}")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        if self.rewind != "to_init":
            raise ValueError(f"unsupported rewind {self.rewind!r}")

    def fraction_for(self, layer: str) -> float:
        if isinstance(self.keep_fraction, dict):
            return self.keep_fraction.get(layer, 1.0)
        return self.keep_fraction

    def target_layers(self, model: Model) -> list[str]:
        names = model.weight_names()
        if self.layers is None:
            return names
        unknown = set(self.layers) - set(names)
        if unknown:
            raise ValueError(f"cannot prune unknown layers {sorted(unknown)}")
        return [n for n in names if n in self.layers]


def keep_count(size: int, keep_fraction: float) -> int:
    """``ceil(keep_fraction * size)`` using the decimal value of ``keep_fraction``."""
    return math.ceil(Fraction(repr(float(keep_fraction))) * size)


def magnitude_mask(weights: np.ndarray, keep_fraction: float) -> np.ndarray:
    """0/1 mask keeping the ``ceil(keep_fraction * size)`` largest ``|w|``; ties go to the lower flat index."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot build a mask for an empty tensor")
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    k = keep_count(w.size, keep_fraction)
    order = np.argsort(-np.abs(w.ravel()), kind="stable")
    mask = np.zeros(w.size)
    mask[order[:k]] = 1.0
    return mask.reshape(w.shape)


def masks_from(model: Model, spec: PruneSpec) -> dict[str, np.ndarray]:
    return {name: magnitude_mask(model.params[name], spec.fraction_for(name))
            for name in spec.target_layers(model)}


def rewind(init_model: Model, masks: dict[str, np.ndarray]) -> Model:
    out = init_model.copy()
    out.masks.update({k: v.copy() for k, v in masks.items()})
    return out.apply_masks()


def prune_pipeline(init_model: Model, spec: PruneSpec, train_cfg: DpConfig, dataset: Dataset,
                   seed: int = 0) -> Model:
    """Pretrain a copy, take per-layer magnitude masks, apply them to the original init.

    With ``pretrain_epochs == 0`` the masks come from the init weights themselves.
    """
    if spec.pretrain_epochs > 0:
        pretrained = train(init_model, dataset, PhasePlan.single(train_cfg, spec.pretrain_epochs), seed).model
    else:
        pretrained = init_model
    return rewind(init_model, masks_from(pretrained, spec))


def cross_dataset_prune(init_model: Model, proxy_dataset: Dataset, spec: PruneSpec, train_cfg: DpConfig,
                        seed: int = 0) -> Model:
    """:func:`prune_pipeline` with pretraining on a different (public/proxy) dataset."""
    if proxy_dataset.dim != init_model.input_dim:
        raise ValueError(f"proxy dataset has input width {proxy_dataset.dim}, model expects {init_model.input_dim}")
    return prune_pipeline(init_model, spec, train_cfg, proxy_dataset, seed)


def mask_density(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size
