import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from miniweave import checkpoint as C
from miniweave import config as cfgmod

arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                    elements=st.floats(width=32, allow_nan=True, allow_infinity=True))


@settings(max_examples=40, deadline=None)
@given(tensors=st.dictionaries(st.text(min_size=1, max_size=20), arrays, max_size=5))
def test_round_trip_bit_identical(tensors):
    back, meta = C.loads(C.dumps(tensors, {"phase": "dps", "step": 3}))
    assert meta == {"phase": "dps", "step": 3}
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    assert C.diff(tensors, back) == []


def test_file_round_trip(tmp_path):
    t = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    C.save(tmp_path / "x.mwv", t, {"phase": "cati"})
    back, meta = C.load(tmp_path / "x.mwv")
    assert np.array_equal(back["a.w"], t["a.w"]) and meta["phase"] == "cati"
    assert not (tmp_path / "x.mwv.tmp").exists()


def test_little_endian_header():
    blob = C.dumps({"w": np.ones(2, np.float32)})
    assert blob[:4] == b"MWV1" and blob[4:8] == (1).to_bytes(4, "little")


@pytest.mark.parametrize("mutate", [
    lambda b: b"MWV2" + b[4:],
    lambda b: b[:-3],
    lambda b: b[:20] + bytes([b[20] ^ 0xFF]) + b[21:],
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
])
def test_corruption_is_a_clean_error(mutate):
    blob = C.dumps({"w": np.ones((3, 3), np.float32)}, {"step": 1})
    with pytest.raises(C.CheckpointError):
        C.loads(mutate(blob))


def test_rejects_non_float32():
    with pytest.raises(C.CheckpointError):
        C.dumps({"w": np.ones(2, np.float64)})


def test_diff_names():
    a = {"x": np.zeros(2, np.float32), "y": np.ones(1, np.float32)}
    b = {"x": np.zeros(2, np.float32), "y": np.full(1, 2, np.float32), "z": np.zeros(1, np.float32)}
    assert C.diff(a, b) == ["y", "z"]


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = cfgmod.RunConfig()
        cfg.save(tmp_path / "c.json")
        again = cfgmod.load(tmp_path / "c.json")
        assert again.hash() == cfg.hash() and again.unet.channels == (64, 128)

    @pytest.mark.parametrize("bad", [
        {"bogus": 1},
        {"dps": {"alpha": 0.1, "gamma": 2}},
        {"dps": {"epochs": "ten"}},
        {"cati": {"lr_lora": 1e-2}},
        {"sampler": {"steps": 30}},
        {"control": {"end_fraction": 1.5}},
        {"data": {"pair_seeds": [1, 2], "concept_pairs": [3], "demo_pair": 1}},
        {"seed": True},
    ])
    def test_invalid(self, bad):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.from_dict(bad)

    def test_missing_file(self, tmp_path):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(tmp_path / "none.json")

    def test_seeded(self):
        cfg = cfgmod.RunConfig().seeded(7)
        assert cfg.seed == cfg.unet.seed == cfg.dps.seed == cfg.cati.seed == 7

    def test_partial_override(self):
        cfg = cfgmod.from_dict({"dps": {"epochs": 3}, "unet": {"channels": [32, 64]}})
        assert cfg.dps.epochs == 3 and cfg.dps.alpha == 0.1 and cfg.unet.channels == (32, 64)
