"""Three-stage latent fingerprint search over minutiae, virtual minutiae and global embeddings."""

from __future__ import annotations

import os

# numba's default TBB layer is often unavailable; OpenMP ships with the wheels
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"

from .engine import Engine, Gallery, LatencyModel, StageConfig, global_similarity, predict_latency, stage_score  # noqa: E402
from .matcher import LssrParams, minutiae_similarity  # noqa: E402
from .template import FingerprintTemplate, GlobalEmbedding, MinutiaeTemplate, VirtualMinutiaeTemplate  # noqa: E402

__all__ = [
    "Engine",
    "FingerprintTemplate",
    "Gallery",
    "GlobalEmbedding",
    "LatencyModel",
    "LssrParams",
    "MinutiaeTemplate",
    "StageConfig",
    "VirtualMinutiaeTemplate",
    "global_similarity",
    "minutiae_similarity",
    "predict_latency",
    "stage_score",
]
