import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from retts.config import load_config
from retts.io import (
    Checkpoint,
    CompatibilityError,
    FormatError,
    decode_checkpoint,
    decode_matrix,
    encode_checkpoint,
    encode_matrix,
    load_checkpoint,
    load_matrix,
    save_checkpoint,
    save_matrix,
)
from retts.model import InsertionTTS


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]),
                  hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_matrix_round_trip_bit_exact(array):
    out, end = decode_matrix(encode_matrix(array))
    assert end == len(encode_matrix(array))
    assert out.dtype == array.dtype and out.shape == array.shape
    assert out.tobytes() == array.tobytes()


def test_matrix_header_layout():
    blob = encode_matrix(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"RTTS"
    assert blob[4:6] == b"\x01\x00" and blob[6] == 1 and blob[7] == 2
    assert blob[8:16] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(blob) == 16 + 24


def test_matrix_file_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 7))
    save_matrix(tmp_path / "a.mel", a)
    assert load_matrix(tmp_path / "a.mel").tobytes() == a.tobytes()


def test_truncated_matrix_names_offset(tmp_path):
    blob = encode_matrix(np.ones((3, 3)))
    for cut in (3, 10, len(blob) - 1):
        (tmp_path / "t").write_bytes(blob[:cut])
        with pytest.raises(FormatError, match="offset"):
            load_matrix(tmp_path / "t")


def test_bad_magic_version_and_trailing_bytes(tmp_path):
    blob = encode_matrix(np.ones(2))
    with pytest.raises(FormatError, match="magic"):
        decode_matrix(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        decode_matrix(blob[:4] + b"\x09\x00" + blob[6:])
    (tmp_path / "t").write_bytes(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_matrix(tmp_path / "t")


def test_zero_extent_and_non_finite_rejected():
    with pytest.raises(ValueError):
        encode_matrix(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        encode_matrix(np.array([1.0, np.inf]))


def _checkpoint():
    mc, tc = load_config("gradcheck")
    model = InsertionTTS(mc, seed=2)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    return Checkpoint(mc.to_dict(), tc.to_dict(), {"step": 7, "stage": 1, "rng": {"data": 3}}, tensors)


def test_checkpoint_save_load_save_identical(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _checkpoint())
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.meta["step"] == 7


def test_checkpoint_restores_model_exactly():
    ckpt = decode_checkpoint(encode_checkpoint(_checkpoint()))
    mc, _ = load_config("gradcheck")
    fresh = InsertionTTS(mc, seed=99)
    fresh.load_state_dict(ckpt.model_state())
    for k, v in InsertionTTS(mc, seed=2).state_dict().items():
        assert np.array_equal(fresh.state_dict()[k], v)


def test_checkpoint_incompatible_config(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _checkpoint())
    other = load_config("gradcheck")[0].to_dict() | {"d_model": 16}
    with pytest.raises(CompatibilityError, match="d_model"):
        load_checkpoint(tmp_path / "a.ckpt", other)


def test_wider_model_rejects_state_without_partial_apply():
    ckpt = _checkpoint()
    mc, _ = load_config("gradcheck")
    wide = InsertionTTS(type(mc)(**(mc.to_dict() | {"d_model": 16, "ffn_hidden": 16})), seed=0)
    before = {k: v.copy() for k, v in wide.state_dict().items()}
    with pytest.raises(ValueError):
        wide.load_state_dict(ckpt.model_state())
    for k, v in wide.state_dict().items():
        assert np.array_equal(v, before[k])


def test_corrupt_checkpoint(tmp_path):
    blob = encode_checkpoint(_checkpoint())
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-5])
    with pytest.raises(FormatError):
        decode_checkpoint(b"RTTS" + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:12])
