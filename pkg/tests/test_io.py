import json
import os

import numpy as np
import pytest

from actx import io
from actx.attention import AttentionHyper
from actx.model import ConjugateGroup, TrainConfig, init_params


@pytest.mark.parametrize("dtype", [0, 1])
@pytest.mark.parametrize("ndim", [1, 2, 3, 4, 5])
def test_container_round_trip(tmp_path, dtype, ndim):
    rng = np.random.default_rng(ndim)
    shape = tuple(int(v) for v in rng.integers(1, 4, size=ndim))
    t = rng.normal(size=shape)
    path = tmp_path / "t.actx"
    io.write_tensor(path, t, dtype)
    back = io.read_tensor(path)
    assert back.dtype == np.float64 and back.shape == shape
    if dtype == 1:
        assert back.tobytes() == t.tobytes()
    else:
        assert np.array_equal(back, t.astype(np.float32).astype(np.float64))


def test_exact_header_bytes():
    buf = io.encode_tensor(np.arange(4.0), dtype=1)
    assert buf[:12] == bytes.fromhex("41 43 54 58 01 01 01 00 04 00 00 00")
    assert len(buf) == 12 + 32
    assert np.frombuffer(buf[12:], "<f8").tolist() == [0.0, 1.0, 2.0, 3.0]


def test_container_errors():
    buf = io.encode_tensor(np.ones((2, 3)), dtype=0)
    with pytest.raises(io.TruncatedPayloadError, match="truncated payload"):
        io.decode_tensor(buf[:-1])
    with pytest.raises(io.TruncatedPayloadError):
        io.decode_tensor(buf[:5])
    with pytest.raises(io.BadMagicError):
        io.decode_tensor(b"ACTY" + buf[4:])
    with pytest.raises(io.BadVersionError):
        io.decode_tensor(buf[:4] + b"\x02" + buf[5:])
    with pytest.raises(io.BadDtypeError):
        io.decode_tensor(buf[:5] + b"\x07" + buf[6:])
    with pytest.raises(io.ContainerError):
        io.decode_tensor(buf + b"\x00")
    with pytest.raises(io.BadDtypeError):
        io.encode_tensor(np.ones(2), dtype=3)


def test_unwritable_directory(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    os.chmod(locked, 0o500)
    try:
        if os.access(locked, os.W_OK):
            pytest.skip("running with privileges that ignore directory permissions")
        with pytest.raises(OSError):
            io.write_tensor(locked / "x.actx", np.ones(3))
        with pytest.raises(OSError):
            io.export_attention(_uniform_maps(1, 2, 2), locked / "sub")
    finally:
        os.chmod(locked, 0o700)


def test_export_into_a_file_path_fails(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        io.export_attention(_uniform_maps(1, 2, 2), blocker / "out")


# -- PGM export ------------------------------------------------------------------------

def _uniform_maps(T, H, W, act=0.5):
    n = T * H * W
    s_act = np.full((T, H, W), act)
    s_att = np.full((T, H, W), 1.0 / n)
    return {"s_act": s_act, "s_att": s_att, "s": s_act * s_att, "c": 1 - s_act}


def test_to_bytes_rounding():
    assert io.to_bytes(np.array([0.0, 0.5, 1.0, 1.7, -0.2])).tolist() == [0, 128, 255, 255, 0]


def test_pgm_round_trip_with_comment():
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    back = io.decode_pgm(io.encode_pgm(img, "a note"))
    assert np.array_equal(back, img)


def test_export_uniform_maps(tmp_path):
    summary = io.export_attention(_uniform_maps(3, 4, 5), tmp_path)
    for name in ("s_act", "s_att", "c"):
        files = sorted(tmp_path.glob(f"{name}_t*.pgm"))
        assert len(files) == 3
    s_att = io.decode_pgm((tmp_path / "s_att_t001.pgm").read_bytes())
    assert s_att.shape == (4, 5) and np.all(s_att == 255)
    assert np.all(io.decode_pgm((tmp_path / "s_act_t000.pgm").read_bytes()) == 128)
    assert b"scaled by T*H*W=60" in (tmp_path / "s_att_t000.pgm").read_bytes()
    assert abs(sum(summary["s_att_frame_mass"]) - 1.0) <= 1e-6
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk["files"] == summary["files"] and len(on_disk["files"]) == 9


def test_export_random_bundle_mass(tmp_path):
    rng = np.random.default_rng(0)
    e = np.exp(rng.normal(size=(4, 3, 3)))
    maps = {"s_act": rng.uniform(size=(4, 3, 3)), "s_att": e / e.sum()}
    maps["s"], maps["c"] = maps["s_act"] * maps["s_att"], 1 - maps["s_act"]
    summary = io.export_attention(maps, tmp_path)
    assert abs(sum(summary["s_att_frame_mass"]) - 1.0) <= 1e-6


# -- configs ------------------------------------------------------------------------------

def test_config_defaults_and_overrides():
    cfg = io.parse_run_config({"rho": 50, "learning_rate": 0.1, "T": 6, "data_seed": 3, "seed": 2})
    assert cfg.train.hyper == AttentionHyper(rho=50)
    assert cfg.train.learning_rate == 0.1 and cfg.train.seed == 2
    assert cfg.synth.T == 6 and cfg.synth.seed == 3
    assert cfg.train.batch_size == TrainConfig().batch_size
    default = io.parse_run_config({})
    assert default.train == TrainConfig() and default.test_fraction == 0.0


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(io.ConfigError, match="lr"):
        io.parse_run_config({"lr": 0.1})
    with pytest.raises(io.ConfigError):
        io.parse_run_config({"rho": 500})
    bad = tmp_path / "c.json"
    bad.write_text("[1, 2]")
    with pytest.raises(io.ConfigError):
        io.load_run_config(bad)
    bad.write_text("{not json")
    with pytest.raises(io.ConfigError):
        io.load_run_config(bad)


def test_config_dict_round_trip():
    cfg = TrainConfig(hyper=AttentionHyper(gamma=3.0), lambda_sim=0.5, seed=4)
    assert io.parse_run_config(io.config_dict(cfg)).train == cfg


# -- datasets, checkpoints, history -------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    groups = [ConjugateGroup(i % 2, rng.normal(size=(3, 2, 2, 4)), [rng.normal(size=(2 + i, 2, 2, 4))],
                             truth_mask=(rng.uniform(size=(3, 2, 2)) > 0.5).astype(float) if i else None)
              for i in range(3)]
    io.save_dataset(groups, tmp_path)
    back = io.load_dataset(tmp_path)
    assert len(back) == 3
    for g, h in zip(groups, back):
        assert g.label == h.label and np.array_equal(g.action, h.action)
        assert np.array_equal(g.conjugates[0], h.conjugates[0])
        assert (g.truth_mask is None) == (h.truth_mask is None)
    with pytest.raises(FileNotFoundError):
        io.load_dataset(tmp_path / "missing")


@pytest.mark.parametrize("backbone_in", [None, 3])
def test_checkpoint_round_trip(tmp_path, backbone_in):
    params = init_params(4, 3, seed=2, backbone_in=backbone_in)
    cfg = TrainConfig(lambda_diff=0.3)
    io.save_checkpoint(params, cfg, tmp_path)
    loaded, cfg2 = io.load_checkpoint(tmp_path / "checkpoint.json")
    assert cfg2 == cfg
    a, b = params.arrays(), loaded.arrays()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_checkpoint_shape_disagreement(tmp_path):
    io.save_checkpoint(init_params(4, 2), TrainConfig(), tmp_path)
    io.write_tensor(tmp_path / "param_fc.bias.actx", np.zeros(5))
    with pytest.raises(io.ContainerError):
        io.load_checkpoint(tmp_path)


def test_history_round_trip(tmp_path):
    hist = [{"step": i, "loss": 1.0 / (i + 1), "class": 0.5, "sim": 0.1 * i, "diff": 0.3} for i in range(4)]
    io.write_history(hist, tmp_path / "h.csv")
    assert io.read_history(tmp_path / "h.csv") == hist
