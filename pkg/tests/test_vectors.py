import json

import numpy as np
import pytest

from tpmcu.execution import run_block_partitioned
from tpmcu.model import ModelConfig
from tpmcu.partition import plan_partition
from tpmcu.vectors import golden_case, load_vectors, save_vectors, weights_from_arrays

CFG = ModelConfig(seq_len=4, embed_dim=16, head_dim=4, num_heads=4, intermediate_dim=32, name="tiny")


def test_roundtrip(tmp_path):
    arrays = golden_case(CFG, seed=3)
    manifest = save_vectors(tmp_path / "case", arrays, CFG)
    got, cfg = load_vectors(tmp_path / "case")
    assert cfg == CFG
    assert list(got) == list(arrays)
    for k in arrays:
        assert np.array_equal(got[k], arrays[k])
    meta = json.loads(manifest.read_text())
    assert meta["arrays"][0] == {"name": "x", "shape": [4, 16], "offset": 0, "nbytes": 4 * 16 * 8}
    assert (tmp_path / "case.bin").stat().st_size == sum(e["nbytes"] for e in meta["arrays"])


def test_golden_drives_partitioned_run(tmp_path):
    save_vectors(tmp_path / "g", golden_case(CFG), CFG)
    arrays, cfg = load_vectors(tmp_path / "g")
    w = weights_from_arrays(arrays)
    for n in (1, 2, 4):
        out = run_block_partitioned(arrays["x"], plan_partition(cfg, n), w, cfg)
        np.testing.assert_allclose(out, arrays["out"], rtol=1e-5, atol=1e-12)


def test_truncated_binary(tmp_path):
    save_vectors(tmp_path / "t", {"a": np.ones(10)})
    (tmp_path / "t.bin").write_bytes(b"\0" * 16)
    with pytest.raises(ValueError):
        load_vectors(tmp_path / "t")


def test_bad_format(tmp_path):
    save_vectors(tmp_path / "f", {"a": np.ones(2)})
    (tmp_path / "f.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_vectors(tmp_path / "f")
