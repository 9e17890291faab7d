"""Golden test vectors stored as one flat binary plus a JSON manifest.

``<stem>.bin`` holds every array back to back as little-endian float64 in C
order. ``<stem>.json`` lists, in file order, each array's name, shape, byte
offset and byte length, together with the model config that produced them::

    {"format": "tpmcu.vectors/1", "dtype": "<f8", "config": {...},
     "arrays": [{"name": "x", "shape": [8, 64], "offset": 0, "nbytes": 4096}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .execution import run_block_monolithic
from .model import BlockWeights, ModelConfig

VECTORS_FORMAT = "tpmcu.vectors/1"
DTYPE = np.dtype("<f8")


def _paths(stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_vectors(stem: str | Path, arrays: dict[str, np.ndarray], cfg: ModelConfig | None = None) -> Path:
    """Write ``arrays`` (insertion order kept) and return the manifest path."""
    bin_path, json_path = _paths(stem)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=DTYPE)
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes})
            offset += data.nbytes
    manifest = {
        "format": VECTORS_FORMAT,
        "dtype": DTYPE.str,
        "config": asdict(cfg) if cfg is not None else None,
        "arrays": entries,
    }
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return json_path


def load_vectors(stem: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig | None]:
    bin_path, json_path = _paths(stem)
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != VECTORS_FORMAT:
        raise ValueError(f"{json_path}: unsupported format {manifest.get('format')!r}")
    raw = bin_path.read_bytes()
    dtype = np.dtype(manifest["dtype"])
    arrays = {}
    for e in manifest["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise ValueError(f"{bin_path}: array {e['name']!r} runs past end of file")
        arr = np.frombuffer(raw[e["offset"]:end], dtype=dtype)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    cfg = ModelConfig(**manifest["config"]) if manifest.get("config") else None
    return arrays, cfg


def golden_case(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Input, weights and monolithic output for a prompt pass of ``cfg``."""
    rng = np.random.default_rng(seed)
    w = BlockWeights.random(cfg, rng)
    x = rng.standard_normal((cfg.seq_len, cfg.embed_dim))
    arrays = {"x": x, **w.matrices(), "norm1": w.norm1, "norm2": w.norm2}
    arrays["out"] = run_block_monolithic(x, w, cfg)
    return arrays


def weights_from_arrays(arrays: dict[str, np.ndarray]) -> BlockWeights:
    return BlockWeights(**{name: arrays[name] for name in (*BlockWeights.MATRICES, "norm1", "norm2")})
