import struct

import numpy as np
import pytest

from qdmf import checkpoint
from qdmf.diffusion import Denoiser, gaussian_mixture, train_teacher
from qdmf.distill import calibrate
from qdmf.errors import CheckpointError
from qdmf.intkernel import DeployedLayer
from qdmf.qalora import LayerPrecisionPolicy


@pytest.fixture(scope="module")
def models(schedule):
    teacher = train_teacher(gaussian_mixture(256, seed=0), schedule, epochs=2, batch=128,
                            hidden=16, depth=3, emb_dim=8)
    student = calibrate(teacher, schedule, LayerPrecisionPolicy(4, 6, 4), rank=2, batch=16, seed=0)
    rng = np.random.default_rng(0)
    for layer in student.layers:
        layer.A.data = rng.normal(0, 0.05, layer.A.shape)
    return teacher, student


def test_fp_round_trip(models, schedule):
    teacher, _ = models
    blob = checkpoint.to_bytes(teacher, schedule)
    loaded, sch = checkpoint.from_bytes(blob)
    assert checkpoint.to_bytes(loaded, sch) == blob
    assert np.array_equal(sch.alpha_bars, schedule.alpha_bars)
    x = np.random.default_rng(1).standard_normal((6, 2))
    assert np.array_equal(loaded(x, 17).data, teacher(x, 17).data)


def test_quantized_round_trip(models, schedule, tmp_path):
    _, student = models
    path = checkpoint.save(tmp_path / "q.qdmf", student, schedule)
    loaded, sch = checkpoint.load(path)
    assert all(isinstance(layer, DeployedLayer) for layer in loaded.layers)
    assert checkpoint.to_bytes(loaded, sch) == path.read_bytes()
    x = np.random.default_rng(2).standard_normal((8, 2))
    for step in (0, 50, 99):
        np.testing.assert_allclose(loaded(x, step).data, student(x, step).data, rtol=1e-9, atol=1e-9)


def test_quantizer_state(models, schedule):
    _, student = models
    loaded, _ = checkpoint.from_bytes(checkpoint.to_bytes(student, schedule))
    state = checkpoint.quantizer_state(loaded)
    assert [s["bits_w"] for s in state] == [8, 4, 4, 8]
    assert [s["bits_a"] for s in state] == [8, 6, 6, 8]
    assert [s["pinned"] for s in state] == [True, False, False, True]
    np.testing.assert_array_equal(state[1]["s_w"], student.layers[1].s_w.data)
    np.testing.assert_array_equal(state[2]["act_scales"], student.layers[2].act_scales.values)


def test_header(models, schedule):
    teacher, _ = models
    blob = checkpoint.to_bytes(teacher, schedule)
    assert blob[:4] == b"QDMF"
    assert struct.unpack_from("<HB", blob, 4) == (1, 0)


def test_corrupt_inputs(models, schedule, tmp_path):
    teacher, _ = models
    blob = checkpoint.to_bytes(teacher, schedule)
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "missing.qdmf")


def test_mixed_model_rejected(models, schedule):
    teacher, student = models
    mixed = Denoiser([teacher.layers[0], *student.layers[1:]], teacher.emb_dim)
    with pytest.raises(CheckpointError):
        checkpoint.to_bytes(mixed, schedule)
