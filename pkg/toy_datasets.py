"""
Toy Datasets - desk-scale labelled data as flow tokens [N, D, C]
gauss2d, rings2d, toyimg8 (patchified 8x8 images) and file-backed archives
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

import checkpoint_store

logger = logging.getLogger(__name__)

DATASETS = ('gauss2d', 'rings2d', 'toyimg8', 'file')
IMAGE_SIDE = 8
GAUSS_RADIUS = 3.0
GAUSS_STD = 0.5
RING_NOISE = 0.1
IMAGE_NOISE = 0.1


def dataset_geometry(name: str, patch: int = 1) -> Tuple[int, int]:
    """(tokens, channels) a built-in dataset produces"""
    if name in ('gauss2d', 'rings2d'):
        return 2, 1
    if name == 'toyimg8':
        if patch < 1 or IMAGE_SIDE % patch:
            raise ValueError(f"patch {patch} does not divide the {IMAGE_SIDE}x{IMAGE_SIDE} image")
        return (IMAGE_SIDE // patch) ** 2, patch * patch
    raise ValueError(f"no fixed geometry for dataset '{name}'")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[.., H, W] -> [.., (H/p)(W/p), p*p], row-major over patches and pixels"""
    *batch, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} does not divide {h}x{w}")
    gh, gw = h // patch, w // patch
    x = images.reshape(*batch, gh, patch, gw, patch)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*batch, gh * gw, patch * patch)


def unpatchify(tokens: np.ndarray, patch: int, side: int = IMAGE_SIDE) -> np.ndarray:
    *batch, _, _ = tokens.shape
    g = side // patch
    x = tokens.reshape(*batch, g, g, patch, patch)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*batch, side, side)


def _templates(classes: int) -> np.ndarray:
    """One 8x8 stripe pattern per class, orientation k*pi/K"""
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(np.float64)
    out = []
    for k in range(classes):
        angle = np.pi * k / classes
        phase = (np.cos(angle) * xx + np.sin(angle) * yy) * (2.0 * np.pi / 4.0)
        out.append(np.sin(phase))
    return np.stack(out)


@dataclass
class ToyDataset:
    name: str
    classes: int
    patch: int = 1
    x: Optional[np.ndarray] = None          # file datasets only
    labels: Optional[np.ndarray] = None

    @classmethod
    def load(cls, name: str, classes: int, patch: int = 1, path=None) -> 'ToyDataset':
        if name not in DATASETS:
            raise ValueError(f"unknown dataset '{name}'")
        if name != 'file':
            return cls(name, classes, patch)
        arrays, meta = checkpoint_store.read_archive(path)
        if meta.get('kind') != 'dataset' or 'x' not in arrays or 'labels' not in arrays:
            raise ValueError(f"{path} is not a dataset archive")
        labels = arrays['labels'].astype(np.int64)
        if labels.min() < 0 or labels.max() >= classes:
            raise ValueError(f"{path}: labels outside [0, {classes})")
        logger.info(f"📊 Loaded {len(labels)} samples from {path}")
        return cls(name, classes, patch, x=arrays['x'], labels=labels)

    @property
    def geometry(self) -> Tuple[int, int]:
        if self.name == 'file':
            return self.x.shape[1], self.x.shape[2]
        return dataset_geometry(self.name, self.patch)

    def class_means(self) -> np.ndarray:
        """gauss2d component means [K, 2]"""
        angles = 2.0 * np.pi * np.arange(self.classes) / self.classes
        return GAUSS_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    def draw(self, rng: np.random.Generator, n: int,
             labels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, List[str]]:
        """n labelled samples as tokens [n, D, C], labels [n], and sample ids"""
        if self.name == 'file':
            index = rng.integers(0, len(self.labels), n)
            return self.x[index].copy(), self.labels[index].copy(), [str(i) for i in index]

        labels = rng.integers(0, self.classes, n) if labels is None else np.asarray(labels, dtype=np.int64)
        if self.name == 'gauss2d':
            points = self.class_means()[labels] + GAUSS_STD * rng.standard_normal((n, 2))
            x = points[:, :, None]
        elif self.name == 'rings2d':
            radius = 1.0 + labels + RING_NOISE * rng.standard_normal(n)
            angle = rng.uniform(0.0, 2.0 * np.pi, n)
            x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)[:, :, None]
        else:
            images = _templates(self.classes)[labels] + IMAGE_NOISE * rng.standard_normal((n, IMAGE_SIDE, IMAGE_SIDE))
            x = patchify(images, self.patch)
        return x, labels, [f"{self.name}:{i}" for i in range(n)]

    def balanced(self, rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray, List[str]]:
        """n samples with labels cycling through every class"""
        if self.name == 'file':
            return self.x.copy(), self.labels.copy(), [str(i) for i in range(len(self.labels))]
        return self.draw(rng, n, labels=np.arange(n) % self.classes)


def write_dataset_archive(path, x: np.ndarray, labels: np.ndarray) -> Path:
    """Store tokens [N, D, C] and labels for dataset = file"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or len(labels) != len(x):
        raise ValueError("expected tokens [N, D, C] with one label per sample")
    return checkpoint_store.write_archive(path, {'x': x, 'labels': np.asarray(labels, dtype=np.float64)},
                                          {'kind': 'dataset', 'samples': len(x)})


def stream_rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Stateless generator for (seed, stream, step); resuming needs no saved RNG state"""
    return np.random.default_rng([int(seed), int(stream), int(step)])


TRAIN_STREAM, EVAL_STREAM, SAMPLE_STREAM, INIT_STREAM = 0, 1, 2, 3
