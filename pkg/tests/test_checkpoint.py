import numpy as np
import pytest

from smogup import checkpoint as ck
from smogup import network as nw
from smogup import trainer as tr
from smogup.network import Model

from conftest import tiny_config


def test_encode_decode_round_trip(rng):
    tensors = {"a": rng.random((2, 3)).astype(np.float32), "scalar": np.float32(1.5), "empty": np.zeros((0, 4))}
    buf = ck.encode(tensors, {"x": 1, "name": "hello world"})
    out, header = ck.decode(buf)
    assert header == {"x": "1", "name": "hello world"}
    np.testing.assert_array_equal(out["a"], tensors["a"])
    assert out["scalar"].shape == () and out["empty"].shape == (0, 4)


def test_decode_rejects_bad_input(rng):
    buf = ck.encode({"a": rng.random(10)}, {})
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode(b"NOPE!" + buf[5:])
    for cut in (7, 12, len(buf) - 1):
        with pytest.raises(ck.CheckpointError, match="truncated"):
            ck.decode(buf[:cut])
    dup = buf + buf[buf.index(b"a") - 4:]
    with pytest.raises(ck.CheckpointError, match="duplicate"):
        ck.decode(dup)


def test_model_round_trip_is_bit_exact(tmp_path, rng):
    model = Model(tiny_config(seed=5))
    ck.save(tmp_path / "m.smog", model, step=7)
    loaded = ck.load(tmp_path / "m.smog")
    assert loaded.step == 7 and loaded.model.config == model.config
    for (n, a), (m, b) in zip(model.named_parameters(), loaded.model.named_parameters()):
        assert n == m
        np.testing.assert_array_equal(a.data, b.data)
    pts = rng.normal(size=(40, 3))
    a = nw.upsample(pts, 2.5, model, seed=3)
    b = nw.upsample(pts, 2.5, loaded.model, seed=3)
    np.testing.assert_array_equal(a, b)


def test_adam_state_and_train_config(tmp_path):
    model = Model(tiny_config())
    st = tr.AdamState(model.parameters())
    st.step, st.skipped = 12, 1
    for m in st.m:
        m += 0.25
    cfg = tr.TrainConfig(batch_size=2, iterations=50)
    ck.save(tmp_path / "m.smog", model, st, 12, cfg)
    loaded = ck.load(tmp_path / "m.smog")
    back = ck.restore_state(loaded, loaded.model)
    assert back.step == 12 and back.skipped == 1
    assert all(np.all(m == 0.25) for m in back.m)
    assert ck.train_config_from(loaded.header) == cfg


def test_float64_model_saves_as_float32(tmp_path):
    model = Model(tiny_config(), dtype=np.float64)
    ck.save(tmp_path / "m.smog", model)
    loaded = ck.load(tmp_path / "m.smog").model
    name, p = model.named_parameters()[0]
    np.testing.assert_array_equal(dict(loaded.named_parameters())[name].data, p.data.astype(np.float32))


def test_load_validates_records(tmp_path):
    model = Model(tiny_config())
    tensors = {n: p.data for n, p in model.named_parameters()}
    header = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    bad = dict(tensors)
    bad.pop("coord.1.w")
    (tmp_path / "a").write_bytes(ck.encode(bad, header))
    with pytest.raises(ck.CheckpointError, match="coord.1.w"):
        ck.load(tmp_path / "a")
    bad = dict(tensors, extra=np.zeros(2))
    (tmp_path / "b").write_bytes(ck.encode(bad, header))
    with pytest.raises(ck.CheckpointError, match="extra"):
        ck.load(tmp_path / "b")
    bad = dict(tensors)
    bad["coord.1.w"] = np.zeros((1, 1))
    (tmp_path / "c").write_bytes(ck.encode(bad, header))
    with pytest.raises(ck.CheckpointError, match="shape"):
        ck.load(tmp_path / "c")
