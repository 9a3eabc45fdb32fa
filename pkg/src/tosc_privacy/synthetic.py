"""Procedural stand-in corpora with the shapes of the real ones.

``synthetic-objects`` mimics the 10-class 32x32 colour classification corpus:
one class-specific shape per image on a random two-colour gradient, with
random colour, size, position and pixel noise, so that images carry plenty of
class-irrelevant detail for an inversion attacker to recover.

``synthetic-faces`` mimics the 40-attribute 64x64 face corpus. A handful of
attributes are rendered (hair colour and texture, smile, moustache, glasses,
skin tone, lipstick, hat, jaw width); the rest are random bits.

Both are used for smoke tests and offline demonstrations only.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import CELEBA_ATTRIBUTES, write_split


def _grid(n, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return np.broadcast_to(yy, (n, size, size)), np.broadcast_to(xx, (n, size, size))


def _col(v):
    return v[:, None, None]


def _shape_mask(cls, dx, dy, r, theta):
    # rotate into the object frame
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    au, av = np.abs(u), np.abs(v)
    dist = np.sqrt(dx ** 2 + dy ** 2)
    inside = dist <= r
    if cls == 0:
        return inside
    if cls == 1:
        return (au <= 0.8 * r) & (av <= 0.8 * r)
    if cls == 2:
        return (v <= 0.7 * r) & (v >= -0.9 * r + 1.7 * au)
    if cls == 3:
        return inside & (dist >= 0.55 * r)
    if cls == 4:
        return (au <= r) & (av <= r) & (np.floor((v + r) / (0.5 * r)) % 2 == 0)
    if cls == 5:
        return (au <= r) & (av <= r) & (np.floor((u + r) / (0.5 * r)) % 2 == 0)
    if cls == 6:
        return ((au <= 0.3 * r) & (av <= r)) | ((av <= 0.3 * r) & (au <= r))
    if cls == 7:
        return au + av <= r
    if cls == 8:
        return (au <= r) & (av <= r) & ((np.floor((u + r) / (0.67 * r)) + np.floor((v + r) / (0.67 * r))) % 2 == 0)
    if cls == 9:
        return (au <= r) & (av <= r) & (np.floor((u + v + 2 * r) / (0.6 * r)) % 2 == 0)
    raise ValueError(cls)


def synthesize_objects(n: int, seed: int, size: int = 32):
    """Return ``(images uint8 (n, size, size, 3), labels int64 (n,))``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    yy, xx = _grid(n, size)
    # background: linear gradient between two random colours along a random direction
    angle = rng.uniform(0, 2 * np.pi, n)
    t = (np.cos(angle)[:, None, None] * (xx - size / 2) + np.sin(angle)[:, None, None] * (yy - size / 2)) / size + 0.5
    c0, c1 = rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, (n, 3))
    img = c0[:, None, None, :] * (1 - t[..., None]) + c1[:, None, None, :] * t[..., None]
    # foreground colour pushed away from the background mean so shapes stay visible
    bg_mean = 0.5 * (c0 + c1)
    fg = rng.uniform(0, 1, (n, 3))
    fg = np.where(np.abs(fg - bg_mean) < 0.3, (fg + 0.5) % 1.0, fg)
    cx = size / 2 + rng.uniform(-0.2, 0.2, n) * size
    cy = size / 2 + rng.uniform(-0.2, 0.2, n) * size
    r = rng.uniform(0.22, 0.38, n) * size
    theta = rng.uniform(-0.35, 0.35, n)
    dx, dy = xx - _col(cx), yy - _col(cy)
    mask = np.zeros((n, size, size), dtype=bool)
    for k in range(10):
        sel = labels == k
        if sel.any():
            mask[sel] = _shape_mask(k, dx[sel], dy[sel], _col(r[sel]), _col(theta[sel]))
    img = np.where(mask[..., None], fg[:, None, None, :], img)
    img = img + rng.normal(0, 0.03, img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), labels.astype(np.int64)


RENDERED_FACE_ATTRIBUTES = (
    "Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair", "Bald", "Wavy_Hair",
    "Smiling", "Mustache", "Eyeglasses", "Pale_Skin", "Wearing_Lipstick",
    "Wearing_Hat", "Male",
)


def synthesize_faces(n: int, seed: int, size: int = 64):
    """Return ``(images uint8 (n, size, size, 3), attributes int64 (n, 40))``."""
    rng = np.random.default_rng(seed)
    A = {name: i for i, name in enumerate(CELEBA_ATTRIBUTES)}
    attrs = (rng.uniform(size=(n, len(CELEBA_ATTRIBUTES))) < 0.3).astype(np.int64)
    hair = rng.integers(0, 4, n)  # black, blond, brown, gray
    for h, name in enumerate(("Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair")):
        attrs[:, A[name]] = hair == h
    attrs[:, A["Bald"]] = rng.uniform(size=n) < 0.08
    attrs[attrs[:, A["Bald"]] == 1, A["Wavy_Hair"]] = 0
    attrs[:, A["Smiling"]] = rng.uniform(size=n) < 0.5
    attrs[:, A["Male"]] = rng.uniform(size=n) < 0.45
    attrs[:, A["Mustache"]] = (rng.uniform(size=n) < 0.5) & (attrs[:, A["Male"]] == 1)
    attrs[:, A["Wearing_Lipstick"]] = (rng.uniform(size=n) < 0.6) & (attrs[:, A["Male"]] == 0)

    s = size / 64.0
    yy, xx = _grid(n, size)
    img = rng.uniform(0.1, 0.9, (n, 1, 1, 3)) * np.ones((1, size, size, 1))
    img = img + 0.1 * np.sin(xx[..., None] / (4 + 6 * rng.uniform(size=(n, 1, 1, 1))))
    cx = 32 * s + rng.uniform(-3, 3, n) * s
    cy = 34 * s + rng.uniform(-2, 2, n) * s
    jaw = np.where(attrs[:, A["Male"]] == 1, 17.0, 14.5) * s * rng.uniform(0.95, 1.05, n)
    dx, dy = xx - _col(cx), yy - _col(cy)

    skin = rng.uniform([0.55, 0.35, 0.25], [0.85, 0.65, 0.5], (n, 3))
    pale = attrs[:, A["Pale_Skin"]] == 1
    skin[pale] = 0.5 * skin[pale] + 0.45
    hair_rgb = np.array([[0.08, 0.06, 0.05], [0.9, 0.8, 0.45], [0.45, 0.28, 0.12], [0.65, 0.65, 0.65]])[hair]
    hair_rgb = np.clip(hair_rgb + rng.normal(0, 0.04, (n, 3)), 0, 1)

    wavy = attrs[:, A["Wavy_Hair"]] == 1
    edge = _col(cy - 6 * s) + np.where(_col(wavy), 2.5 * s * np.sin(xx / (2.0 * s)), 0.0)
    hair_mask = ((dx / (_col(jaw) + 5 * s)) ** 2 + ((dy + 4 * s) / (22 * s)) ** 2 <= 1) & (yy < edge + 14 * s)
    hair_mask &= ~_col(attrs[:, A["Bald"]] == 1)
    img = np.where(hair_mask[..., None], hair_rgb[:, None, None, :], img)

    face = (dx / _col(jaw)) ** 2 + (dy / (20 * s)) ** 2 <= 1
    face &= ~(hair_mask & (yy < edge))
    img = np.where(face[..., None], skin[:, None, None, :], img)

    for ex in (-6.5, 6.5):
        eye = ((dx - ex * s) ** 2 + (dy + 3 * s) ** 2) <= (1.6 * s) ** 2
        img = np.where(eye[..., None], 0.05, img)
    glasses = _col(attrs[:, A["Eyeglasses"]] == 1)
    rim = np.zeros_like(face)
    for ex in (-6.5, 6.5):
        d = np.sqrt((dx - ex * s) ** 2 + (dy + 3 * s) ** 2)
        rim |= (d >= 3.2 * s) & (d <= 4.2 * s)
    rim |= (np.abs(dy + 3 * s) <= 0.5 * s) & (np.abs(dx) <= 2.5 * s)
    img = np.where((rim & glasses)[..., None], 0.02, img)

    smile = _col(attrs[:, A["Smiling"]] == 1)
    mouth_y = np.where(smile, 11 * s - 0.12 * dx ** 2 / s, 10 * s)
    mouth = (np.abs(dx) <= 6 * s) & (np.abs(dy - mouth_y) <= 0.9 * s)
    lips = np.where(_col(attrs[:, A["Wearing_Lipstick"]] == 1)[..., None], [[0.75, 0.05, 0.15]], [[0.35, 0.1, 0.1]])
    img = np.where(mouth[..., None], lips, img)

    stache = _col(attrs[:, A["Mustache"]] == 1) & (np.abs(dx) <= 5.5 * s) & (np.abs(dy - 6 * s) <= 1.3 * s)
    img = np.where(stache[..., None], hair_rgb[:, None, None, :] * 0.6, img)

    hat = _col(attrs[:, A["Wearing_Hat"]] == 1) & (yy < _col(cy - 13 * s)) & (np.abs(dx) <= _col(jaw) + 6 * s)
    img = np.where(hat[..., None], rng.uniform(0, 1, (n, 1, 1, 3)), img)

    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), attrs


def build_synthetic_corpus(root, name: str, n_train: int, n_test: int, seed: int = 0) -> Path:
    """Write a synthetic corpus in the standard on-disk layout; returns the corpus directory."""
    if name == "synthetic-objects":
        make, key = synthesize_objects, "labels"
    elif name == "synthetic-faces":
        make, key = synthesize_faces, "attributes"
    else:
        raise ValueError(f"no synthetic generator for {name!r}")
    for split, n, offset in (("train", n_train, 0), ("test", n_test, 1)):
        images, y = make(n, seed * 2 + offset)
        write_split(root, name, split, images, **{key: y})
    return Path(root) / name
