import numpy as np
import pytest

from app_config import load_config
from encoding import partition_window
from twinnet import TwinNet, load_checkpoint, save_checkpoint
from utils import ContractError, DimensionError, ValidationError


@pytest.fixture
def window(tiny, rng):
    frames = rng.standard_normal((40, tiny.frame_dim))
    return partition_window(frames, T=20, M_p=tiny.M_p, M_h=tiny.M_h, with_future=True)


def _blocks(model, w):
    return (model.embed(w.present, w.present_index, w.present_valid),
            model.embed(w.history, w.history_index, w.history_valid),
            model.embed(w.future, w.future_index, w.future_valid))


def test_parameter_paths(tiny_model):
    names = tiny_model.store.names()
    for prefix in ("enc.", "ord.lfc.", "ord.dec.", "ord.pred.", "pro.lfc.", "pro.dec.", "pro.pred."):
        assert any(n.startswith(prefix) for n in names), prefix
    assert len(tiny_model.parameters("ord")) + len(tiny_model.parameters("pro")) + \
        len(tiny_model.parameters("enc")) == len(tiny_model.parameters())


def test_same_seed_same_weights(tiny):
    a, b = TwinNet(tiny, seed=3), TwinNet(tiny, seed=3)
    assert all(np.array_equal(x.value.data, y.value.data) for x, y in zip(a.store, b.store))
    c = TwinNet(tiny, seed=4)
    assert not np.array_equal(a.store["ord.pred.w_s"].value.data, c.store["ord.pred.w_s"].value.data)


def test_ordinary_and_prophet_shapes(tiny_model, tiny, window, rng):
    V_p, V_h, V_f = _blocks(tiny_model, window)
    q = tiny_model.encode_query(rng.standard_normal((3, tiny.word_dim)))
    out, gates = tiny_model.ordinary(V_p, V_h, q)
    assert out.probs.shape == (tiny.M_p, 3)
    assert len(gates) == tiny.K
    last, _ = tiny_model.ordinary_last(V_p, V_h, q)
    np.testing.assert_allclose(last.probs.data, out.probs.data[-1], rtol=0, atol=1e-12)
    assert tiny_model.prophet(V_p, V_h, V_f, q).probs.shape == (tiny.M_p, 3)


def test_prophet_disabled(tiny, window, rng):
    model = TwinNet(tiny.with_overrides({"disable_prophet": True}), seed=0)
    V_p, V_h, V_f = _blocks(model, window)
    with pytest.raises(ContractError):
        model.prophet(V_p, V_h, V_f, model.encode_query(rng.standard_normal((2, tiny.word_dim))))


def test_prophet_without_history_ignores_it(tiny, window, rng):
    model = TwinNet(tiny.with_overrides({"disable_prophet_history": True}), seed=0)
    V_p, V_h, V_f = _blocks(model, window)
    q = model.encode_query(rng.standard_normal((2, tiny.word_dim)))
    a = model.prophet(V_p, V_h, V_f, q).probs.data
    b = model.prophet(V_p, V_h * 3.0, V_f, q).probs.data
    np.testing.assert_array_equal(a, b)


def test_ordinary_ignores_future(tiny_model, tiny, window, rng):
    V_p, V_h, _ = _blocks(tiny_model, window)
    q = tiny_model.encode_query(rng.standard_normal((2, tiny.word_dim)))
    a, _ = tiny_model.ordinary(V_p, V_h, q)
    window.future[:] = 99.0
    V_p, V_h, _ = _blocks(tiny_model, window)
    b, _ = tiny_model.ordinary(V_p, V_h, q)
    np.testing.assert_array_equal(a.probs.data, b.probs.data)


class TestCheckpoint:

    def test_round_trip(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path / "ckpt")
        assert load_config(tmp_path / "ckpt" / "config.txt") == tiny_model.cfg
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.store.names() == tiny_model.store.names()
        for p in tiny_model.store:
            want = p.value.data.astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(loaded.store[p.name].value.data, want)

    def test_missing_index(self, tmp_path):
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path)

    def test_shape_mismatch(self, tiny_model, tmp_path):
        ckpt = save_checkpoint(tiny_model, tmp_path / "ckpt")
        index = ckpt / "index.txt"
        lines = index.read_text().splitlines()
        name, fname, _ = lines[0].split("\t")
        lines[0] = f"{name}\t{fname}\t999x2"
        index.write_text("\n".join(lines) + "\n")
        with pytest.raises(DimensionError):
            load_checkpoint(ckpt)

    def test_malformed_index_line(self, tiny_model, tmp_path):
        ckpt = save_checkpoint(tiny_model, tmp_path / "ckpt")
        (ckpt / "index.txt").write_text("just-a-name\n")
        with pytest.raises(ValidationError):
            load_checkpoint(ckpt)
