import numpy as np
import pytest

from cmfusion.checkpoint import MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from cmfusion.model import CMRobertaModel, tiny_config
from cmfusion.train import AdamState, TrainConfig


def _ckpt(seed=0):
    cfg = tiny_config(seed=seed)
    model = CMRobertaModel(cfg)
    params = {k: p.data.copy() for k, p in model.named_parameters()}
    adam = AdamState.zeros_like(params)
    adam.t = 3
    adam.m = {k: v + 0.25 for k, v in adam.m.items()}
    return Checkpoint(cfg, params, adam, TrainConfig(seed=seed).to_dict(), {"epoch": 7, "best_epoch": 4})


def test_roundtrip_restores_everything(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "m.cmf", ck)
    back = load_checkpoint(tmp_path / "m.cmf")
    assert back.model_config == ck.model_config and back.train_config == ck.train_config
    assert back.counters == ck.counters and back.adam.t == 3
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes()
        np.testing.assert_array_equal(back.adam.m[k], ck.adam.m[k])
    rebuilt = dict(back.build_model().named_parameters())
    np.testing.assert_array_equal(rebuilt["head1.W"].data, ck.params["head1.W"])


def test_serialisation_is_byte_deterministic():
    assert to_bytes(_ckpt()) == to_bytes(_ckpt())
    assert to_bytes(_ckpt(0)) != to_bytes(_ckpt(1))


def test_without_optimiser_state():
    ck = _ckpt()
    ck.adam = None
    assert from_bytes(to_bytes(ck)).adam is None


@pytest.mark.parametrize("tamper", [
    lambda b: b"XXXXXXXX" + b[8:],             # magic
    lambda b: b[:8] + b"\x09" + b[9:],         # version
    lambda b: b[:-1] + bytes([b[-1] ^ 1]),     # payload bit flip, caught by CRC
    lambda b: b[:len(b) // 2],                 # truncation
])
def test_corruption_detected(tamper):
    raw = to_bytes(_ckpt())
    assert raw.startswith(MAGIC)
    with pytest.raises(CheckpointError):
        from_bytes(tamper(raw))


def test_parameter_set_mismatch_is_reported():
    ck = _ckpt()
    del ck.params["head1.W"]
    with pytest.raises(CheckpointError, match="head1.W"):
        from_bytes(to_bytes(ck)).build_model()
