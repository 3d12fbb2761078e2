import struct

import numpy as np
import pytest

from difflora import checkpoint
from difflora.adapters import AdapterPlacement
from difflora.errors import FormatError
from difflora.model import ModelConfig, build_base, forward, inject_adapters
from difflora.tasks import NeedleSpec, gen_needle
from difflora.training import TrainConfig, train
from tests.conftest import make_model

TOKENS = [0, 4, 19, 44, 2, 19]


def _trained(tmp_path=None, steps=3, **kw):
    m = make_model(**kw)
    data = gen_needle(NeedleSpec(seq_len=24, n_pairs=2, n_examples=16, seed=1))
    res = train(m, data, TrainConfig(learning_rate=1e-2, batch_size=4, steps=steps))
    return m, res


def _same(a, b):
    assert a.params.keys() == b.params.keys()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_full_roundtrip_bit_exact(tmp_path):
    m, res = _trained(lambda_mode="learnable", lambda_init=0.2)
    path = tmp_path / "m.dlra"
    checkpoint.save_checkpoint(m, path, state=res.state)
    back, state = checkpoint.load_checkpoint(path, with_state=True)
    _same(m, back)
    assert back.trainable == m.trainable and back.base_names == m.base_names
    assert back.config.to_dict() == m.config.to_dict()
    assert back.lambdas() == m.lambdas()
    assert np.array_equal(forward(back, TOKENS), forward(m, TOKENS))
    assert state.step == res.state.step and state.rng_state == res.state.rng_state
    assert state.order == res.state.order and state.cursor == res.state.cursor
    assert all(state.moments[k].tobytes() == v.tobytes() for k, v in res.state.moments.items())


def test_resume_matches_uninterrupted(tmp_path):
    data = gen_needle(NeedleSpec(seq_len=24, n_pairs=2, n_examples=10, seed=2))
    cfg = TrainConfig(learning_rate=1e-2, batch_size=4, steps=3, seed=5)
    straight = make_model()
    full = train(straight, data, TrainConfig(learning_rate=1e-2, batch_size=4, steps=6, seed=5))
    part = make_model()
    res = train(part, data, cfg)
    checkpoint.save_checkpoint(part, tmp_path / "c.dlra", state=res.state)
    resumed, state = checkpoint.load_checkpoint(tmp_path / "c.dlra", with_state=True)
    rest = train(resumed, data, cfg, state=state)
    _same(straight, resumed)
    assert [r["loss"] for r in res.history + rest.history] == [r["loss"] for r in full.history]


def test_adapter_only_equals_full(tmp_path):
    m, _ = _trained(placement=AdapterPlacement.both_terms(4), group_norm=True)
    checkpoint.save_checkpoint(m, tmp_path / "full.dlra")
    checkpoint.save_checkpoint(m, tmp_path / "ad.dlra", adapter_only=True)
    assert (tmp_path / "ad.dlra").stat().st_size < (tmp_path / "full.dlra").stat().st_size
    a = checkpoint.load_checkpoint(tmp_path / "full.dlra")
    b = checkpoint.load_checkpoint(tmp_path / "ad.dlra", base=build_base(ModelConfig()))
    c = checkpoint.load_checkpoint(tmp_path / "ad.dlra")  # base rebuilt from the stored seed
    _same(a, b)
    _same(a, c)


def test_adapter_on_wrong_base(tmp_path):
    m, _ = _trained()
    checkpoint.save_checkpoint(m, tmp_path / "ad.dlra", adapter_only=True)
    with pytest.raises(FormatError, match="different base"):
        checkpoint.load_checkpoint(tmp_path / "ad.dlra", base=build_base(ModelConfig(seed=9)))


def test_corrupt_magic(tmp_path):
    path = tmp_path / "m.dlra"
    checkpoint.save_checkpoint(make_model(), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as err:
        checkpoint.load_checkpoint(path)
    assert err.value.offset == 0


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.dlra"
    checkpoint.save_checkpoint(make_model(), path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version 99") as err:
        checkpoint.load_checkpoint(path)
    assert err.value.offset == 4


@pytest.mark.parametrize("cut", [2, 6, 10, 200, -3])
def test_truncated(tmp_path, cut):
    path = tmp_path / "m.dlra"
    checkpoint.save_checkpoint(make_model(), path)
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(FormatError, match="truncated") as err:
        checkpoint.load_checkpoint(path)
    assert err.value.offset is not None and 0 <= err.value.offset <= len(data[:cut])


def test_trailing_garbage(tmp_path):
    path = tmp_path / "m.dlra"
    checkpoint.save_checkpoint(make_model(), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        checkpoint.load_checkpoint(path)


def test_layout_is_little_endian(tmp_path):
    path = tmp_path / "t.dlra"
    checkpoint.write_dlra(path, {"k": 1}, {"w": np.array([[1.5, -2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"DLRA" and struct.unpack("<I", raw[4:8])[0] == checkpoint.VERSION
    n = struct.unpack("<I", raw[8:12])[0]
    pos = 12 + n
    assert struct.unpack("<I", raw[pos:pos + 4])[0] == 1
    pos += 4
    ln = struct.unpack("<I", raw[pos:pos + 4])[0]
    assert raw[pos + 4:pos + 4 + ln] == b"w"
    pos += 4 + ln
    assert struct.unpack("<BII", raw[pos:pos + 9]) == (0, 1, 2)
    assert struct.unpack("<2d", raw[pos + 9:]) == (1.5, -2.0)


def test_single_precision_roundtrip(tmp_path):
    m = inject_adapters(build_base(ModelConfig(precision="single")),
                        ModelConfig(variant="difflora", placement=AdapterPlacement.negative_only(4),
                                    precision="single"))
    checkpoint.save_checkpoint(m, tmp_path / "s.dlra")
    back = checkpoint.load_checkpoint(tmp_path / "s.dlra")
    assert back.params["tok_emb"].dtype == np.float32
    _same(m, back)
