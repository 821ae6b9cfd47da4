"""Random template builders shared by the tests."""

from __future__ import annotations

import math

import numpy as np

from latent_search.template import (
    DESCRIPTOR_DIM,
    EMBEDDING_HALF,
    FingerprintTemplate,
    GlobalEmbedding,
    Kind,
    MinutiaeTemplate,
    Modality,
    VirtualMinutiaeTemplate,
)


def unit_rows(rng, n, d=DESCRIPTOR_DIM):
    a = rng.normal(size=(n, d))
    return (a / np.linalg.norm(a, axis=1, keepdims=True)).astype(np.float32)


def random_minutiae(rng, m, width=512, height=512):
    xy = np.column_stack([rng.uniform(0, width, m), rng.uniform(0, height, m)]).astype(np.float32)
    theta = rng.uniform(0, 2 * math.pi, m).astype(np.float32)
    theta[theta >= np.float32(2 * math.pi)] = 0
    kinds = rng.integers(0, 2, m).astype(np.uint8)
    return MinutiaeTemplate(np.column_stack([xy, theta]), kinds, unit_rows(rng, m))


def random_virtual(rng, n):
    cells = rng.choice(32 * 32, size=n, replace=False)
    xy = np.column_stack([8 + 16 * (cells % 32), 8 + 16 * (cells // 32)]).astype(np.float32)
    theta = rng.uniform(0, math.pi, n).astype(np.float32)
    return VirtualMinutiaeTemplate(
        np.column_stack([xy, theta]), np.full(n, int(Kind.VIRTUAL), np.uint8), unit_rows(rng, n)
    )


def random_embedding(rng):
    return GlobalEmbedding(unit_rows(rng, 1, EMBEDDING_HALF)[0], unit_rows(rng, 1, EMBEDDING_HALF)[0])


def random_template(rng, m=None, n=None, tid="t0", modality=Modality.LATENT):
    m = int(rng.integers(0, 30)) if m is None else m
    n = int(rng.integers(0, 40)) if n is None else n
    return FingerprintTemplate(
        id=tid,
        modality=modality,
        minutiae=random_minutiae(rng, m),
        virtual=random_virtual(rng, n),
        embedding=random_embedding(rng),
    )
