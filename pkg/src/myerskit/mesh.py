"""Icosphere triangle meshes and small mesh utilities."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


def _icosahedron():
    # Polar orientation: vertices 0 and 11 sit on the poles.
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        a = 2 * np.pi * k / 5
        verts.append((r * np.cos(a), r * np.sin(a), z))
    for k in range(5):
        a = 2 * np.pi * k / 5 + np.pi / 5
        verts.append((r * np.cos(a), r * np.sin(a), -z))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces.append((0, u0, u1))
        faces.append((u0, l0, u1))
        faces.append((u1, l0, l1))
        faces.append((11, l1, l0))
    return np.array(verts), np.array(faces, dtype=np.int64)


def _orient_outward(verts, faces):
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    normal = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normal, a + b + c) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


@lru_cache(maxsize=8)
def icosphere(level: int):
    """Unit icosphere after ``level`` rounds of 4:1 subdivision.

    Returns read-only ``(vertices (V, 3), faces (F, 3))``; level 5 has
    10242 vertices.  Both poles are vertices.
    """
    verts, faces = _icosahedron()
    faces = _orient_outward(verts, faces)
    for _ in range(level):
        edges = np.sort(
            np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1
        )
        uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        mid = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        nf = len(faces)
        m01 = len(verts) + inverse[:nf]
        m12 = len(verts) + inverse[nf:2 * nf]
        m20 = len(verts) + inverse[2 * nf:]
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate([
            np.stack([a, m01, m20], axis=1),
            np.stack([b, m12, m01], axis=1),
            np.stack([c, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ])
        verts = np.concatenate([verts, mid])
    verts.setflags(write=False)
    faces.setflags(write=False)
    return verts, faces


def spherical_triangle_areas(verts, faces):
    """Exact areas of the geodesic triangles on the unit sphere."""
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) \
        + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(triple, denom)


def flat_triangle_areas(verts, faces):
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def level_for_resolution(resolution: int) -> int:
    # about ``resolution`` mesh edges around a great circle
    return max(1, int(np.ceil(np.log2(max(resolution, 8) / 5.0))))
