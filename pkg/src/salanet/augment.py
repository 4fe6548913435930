"""Random flips, rotations and zooms for matched SA / LA training slices."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ValidationError


@dataclass
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    max_rotation: float = 15.0  # degrees, symmetric range
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    independent_views: bool = True
    seed: int = 0

    def __post_init__(self):
        self.zoom_range = tuple(float(z) for z in self.zoom_range)
        self.validate()

    def validate(self):
        if not (0 <= self.p_hflip <= 1 and 0 <= self.p_vflip <= 1):
            raise ValidationError("flip probabilities must lie in [0, 1]")
        zmin, zmax = self.zoom_range
        if not (0 < zmin <= 1 <= zmax):
            raise ValidationError(f"zoom range must satisfy 0 < zmin <= 1 <= zmax, got {self.zoom_range}")
        if self.max_rotation < 0:
            raise ValidationError("max_rotation must be non-negative")
        return self

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(p_hflip=0.0, p_vflip=0.0, max_rotation=0.0, zoom_range=(1.0, 1.0))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["zoom_range"] = list(self.zoom_range)
        return d


@dataclass
class Transform2D:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0  # degrees, counter-clockwise in (row, col) display
    zoom: float = 1.0

    @property
    def is_affine_identity(self) -> bool:
        return self.angle == 0.0 and self.zoom == 1.0


def sample_transform(policy: AugmentPolicy, rng: np.random.Generator) -> Transform2D:
    hflip = bool(rng.random() < policy.p_hflip)
    vflip = bool(rng.random() < policy.p_vflip)
    angle = float(rng.uniform(-policy.max_rotation, policy.max_rotation)) if policy.max_rotation > 0 else 0.0
    zmin, zmax = policy.zoom_range
    zoom = float(rng.uniform(zmin, zmax)) if zmax > zmin else zmin
    return Transform2D(hflip, vflip, angle, zoom)


def apply_transform(image: np.ndarray, tf: Transform2D, order: int) -> np.ndarray:
    """Rotate/zoom about the slice centre (zero fill), then flip."""
    out = image
    if not tf.is_affine_identity:
        theta = np.deg2rad(tf.angle)
        c, s = np.cos(theta), np.sin(theta)
        # output -> input mapping: inverse rotation, divided by zoom
        inv = np.array([[c, s], [-s, c]]) / tf.zoom
        center = (np.array(image.shape, dtype=float) - 1) / 2
        offset = center - inv @ center
        src = image if order == 0 or np.issubdtype(image.dtype, np.floating) else image.astype(np.float32)
        out = ndimage.affine_transform(src, inv, offset=offset, order=order, mode="constant", cval=0.0,
                                       prefilter=False)
        if order == 0:
            out = out.astype(image.dtype)
    if tf.hflip:
        out = out[:, ::-1]
    if tf.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def augment_pair(sa_image, sa_labels, la_image, la_labels, policy: AugmentPolicy, rng: np.random.Generator):
    """Augment one (SA, LA) training pair.

    An image and its own label slice always share a transform (linear for the
    image, nearest for labels).  With ``policy.independent_views`` the two views
    draw separate transforms, otherwise one transform is applied to both.
    Returns ``(sa_image, sa_labels, la_image, la_labels)``.
    """
    for img, lab, name in ((sa_image, sa_labels, "SA"), (la_image, la_labels, "LA")):
        if img.ndim != 2 or (lab is not None and lab.shape != img.shape):
            raise ValidationError(f"{name} image/label slices must be 2D and equally shaped")
    tf_sa = sample_transform(policy, rng)
    tf_la = sample_transform(policy, rng) if policy.independent_views else tf_sa
    out = []
    for img, lab, tf in ((sa_image, sa_labels, tf_sa), (la_image, la_labels, tf_la)):
        out.append(apply_transform(img, tf, order=1))
        out.append(None if lab is None else apply_transform(lab, tf, order=0))
    return tuple(out)
