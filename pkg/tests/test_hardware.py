import json

import pytest

from tlut.hardware import PROFILE_NAMES, HardwareModel, load_profile


@pytest.mark.parametrize("name", PROFILE_NAMES)
def test_profiles_load(name):
    hw = load_profile(name)
    assert hw.name == name and hw.fitted
    assert hw.tcm_bytes > hw.l2_bytes


def test_measured_bandwidths_embedded():
    hw = load_profile("sd8gen3")
    assert (hw.bw_dma, hw.bw_l2fetch, hw.bw_vecload) == (59e9, 32e9, 20e9)
    assert hw.tcm_bytes == 8 * 2**20 and hw.mma_dims == (32, 32, 32)


def test_lanes_and_k_per_lut():
    hw = HardwareModel()
    assert hw.lookup_lanes(16) == 64
    assert hw.k_per_lut(16, 4) == 16


def test_json_round_trip(tmp_path):
    hw = load_profile("sd8gen3")
    p = tmp_path / "x.json"
    p.write_text(json.dumps(hw.to_dict()))
    assert load_profile(p) == hw


def test_invalid():
    with pytest.raises(ValueError):
        HardwareModel(bw_dma=0)
    with pytest.raises(FileNotFoundError):
        load_profile("nope")
