"""Synthetic stand-in dataset: coloured shapes on noisy backgrounds.

Class ``i`` of ``n`` is the shape ``SHAPES[i]`` drawn in hue band ``i``, with
the ``n`` bands spread evenly around the colour wheel. Every class has its
own shape and its own hue, so classes are separable by design and a class
left out of training differs from the rest in both cues. Position, scale, rotation, saturation, brightness and
background vary per image.
"""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .data import (
    IMAGE_SIZE,
    DatasetManifest,
    Record,
    compute_stats,
    split_dataset,
    write_ppm,
)

SHAPES = ("circle", "square", "triangle", "bar", "cross", "ring", "star", "crescent")
MAX_CLASSES = len(SHAPES)
HUE_JITTER = 0.25  # fraction of the band spacing
MANIFEST_NAME = "manifest.json"


def hue_centre(cid, num_classes):
    return cid / num_classes


def class_dir_name(cid, num_classes):
    deg = int(round(hue_centre(cid, num_classes) * 360))
    return f"{cid:02d}-{SHAPES[cid]}-h{deg:03d}"


def _shape_mask(shape, u, v, r):
    if shape == "circle":
        return u * u + v * v <= r * r
    if shape == "square":
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    if shape == "triangle":
        s3 = np.sqrt(3.0)
        return (v >= -0.5 * r) & (s3 * u + v <= r) & (-s3 * u + v <= r)
    if shape == "bar":
        return (np.abs(u) <= 1.2 * r) & (np.abs(v) <= 0.35 * r)
    if shape == "cross":
        arm = (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
        return arm | ((np.abs(v) <= r) & (np.abs(u) <= 0.3 * r))
    if shape == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= 0.3 * r * r)
    if shape == "star":
        reach = r * (0.6 + 0.4 * np.cos(5 * np.arctan2(v, u)))
        return u * u + v * v <= reach * reach
    if shape == "crescent":
        return (u * u + v * v <= r * r) & ((u - 0.5 * r) ** 2 + v * v > 0.6 * r * r)
    raise ValueError(f"unknown shape {shape!r}")


def render(cid, num_classes, rng, size=IMAGE_SIZE):
    """One (size, size, 3) uint8 image of class ``cid``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    # background: grey level + linear shading + pixel noise
    base = rng.uniform(0.25, 0.65)
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    bg = base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    img = np.repeat(bg[..., None], 3, axis=2)
    img += rng.normal(0.0, 0.03, size=3)  # slight colour cast
    img += rng.normal(0.0, 0.06, size=img.shape)

    r = rng.uniform(0.18, 0.30) * size
    cx, cy = rng.uniform(0.35, 0.65, size=2) * size
    theta = rng.uniform(0.0, 2 * np.pi)
    dx, dy = xx - cx, cy - yy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(SHAPES[cid], u, v, r)

    jitter = HUE_JITTER / num_classes
    hue = (hue_centre(cid, num_classes) + rng.uniform(-jitter, jitter)) % 1.0
    colour = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)))
    texture = rng.normal(0.0, 0.05, size=mask.shape + (3,))
    img[mask] = colour + texture[mask]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def synth_generate(num_classes, per_class, seed, out_dir, size=IMAGE_SIZE,
                   ratios=(80, 10, 10), stats_scope="train"):
    """Write ``num_classes * per_class`` PPM images plus a split manifest.

    Returns the manifest (also saved as ``out_dir/manifest.json``).
    """
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in 1..{MAX_CLASSES}, got {num_classes}")
    if per_class < 4:
        raise ValueError(f"per_class must be at least 4, got {per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes, records = [], []
    for cid in range(num_classes):
        name = class_dir_name(cid, num_classes)
        classes.append(name)
        (out / name).mkdir(exist_ok=True)
        for k in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, cid, k]))
            rel = f"{name}/img_{k:04d}.ppm"
            write_ppm(out / rel, render(cid, num_classes, rng, size))
            records.append(Record(rel, cid, rel))
    manifest = DatasetManifest(classes, records, str(out))
    split_dataset(manifest, ratios, seed)
    compute_stats(manifest, stats_scope, size)
    manifest.save(out / MANIFEST_NAME)
    return manifest
