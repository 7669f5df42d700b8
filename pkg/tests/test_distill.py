import numpy as np
import pytest

import qdmf.distill as distill
from qdmf.diffusion import Denoiser, Linear, SamplerConfig, gaussian_mixture, sample_trajectory, timestep_embedding, train_teacher
from qdmf.distill import (DistillConfig, build_student, calibrate, distill_loss, distill_step,
                          eval_trajectory_mse, finetune, generate_states, snapshot)
from qdmf.errors import ConfigurationError, TrainingDiverged
from qdmf.qalora import LayerPrecisionPolicy


@pytest.fixture(scope="module")
def small(schedule):
    data = gaussian_mixture(512, seed=0)
    return train_teacher(data, schedule, epochs=3, batch=128, hidden=16, depth=2, emb_dim=8)


@pytest.fixture
def student(small, schedule):
    return calibrate(small, schedule, LayerPrecisionPolicy(4, 4, 3), rank=2, batch=16, seed=0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DistillConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        DistillConfig(batch=0)
    with pytest.raises(ConfigurationError):
        DistillConfig(lr_act_scale=-1.0)


def test_states_start_from_noise(small, schedule):
    traj = generate_states(small, schedule, SamplerConfig(100), 8, seed=5)
    assert len(traj) == 100
    assert np.array_equal(traj.states[0][0], np.random.default_rng(5).standard_normal((8, 2)))
    ts = [t for _, t, _ in traj]
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_states_match_sampler(small, schedule):
    traj = generate_states(small, schedule, SamplerConfig(100), 8, seed=5)
    _, states = sample_trajectory(small, schedule, SamplerConfig(100), 8, seed=5)
    assert all(np.array_equal(a[0], b[0]) and a[1:] == b[1:] for a, b in zip(traj, states))


def test_loss_zero_against_itself(small, schedule):
    x = np.random.default_rng(0).standard_normal((4, 2))
    assert distill_loss(small, small, x, 50, schedule).item() == 0.0
    assert eval_trajectory_mse(small, small, schedule, n_trajectories=4, seed=0) == 0.0


def test_loss_hand_computed(schedule):
    rng = np.random.default_rng(1)
    w1, w2 = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    b1, b2 = rng.normal(size=2), rng.normal(size=2)
    teacher = Denoiser([Linear(w1, b1, requires_grad=False)], emb_dim=8)
    student = Denoiser([Linear(w2, b2)], emb_dim=8)
    x, t = rng.normal(size=(3, 2)), 42
    h = np.concatenate([x, timestep_embedding(np.full(3, t), 8)], axis=1)
    e1, e2 = h @ w1 + b1, h @ w2 + b2
    beta, ab, alpha = schedule.betas[t], schedule.alpha_bars[t], schedule.alphas[t]
    k = beta / np.sqrt(1 - ab) / np.sqrt(alpha)
    expected = np.mean((k * (e1 - e2)) ** 2)
    assert distill_step(teacher, student, x, t, schedule) == pytest.approx(expected, rel=1e-12)
    assert student.layers[0].weight.grad is not None
    assert teacher.layers[0].weight.grad is None


def test_zero_iterations_is_noop(small, student, schedule):
    before = snapshot(student)
    finetune(small, student, DistillConfig(iterations=0, batch=4), schedule)
    assert all(np.array_equal(a, b) for a, b in zip(before, snapshot(student)))


def test_finetune_touches_only_trainables(small, student, schedule):
    teacher_before = [p.data.copy() for p in small.parameters()]
    w0_before = [layer.w0.copy() for layer in student.layers]
    finetune(small, student, DistillConfig(iterations=30, batch=8), schedule)
    assert all(np.array_equal(a, p.data) for a, p in zip(teacher_before, small.parameters()))
    assert all(np.array_equal(a, layer.w0) for a, layer in zip(w0_before, student.layers))
    assert any(np.any(layer.A.data != 0) for layer in student.layers)


def test_first_steps_only_touch_their_scales(small, student, schedule):
    # 30 iterations visit steps 99..70; earlier tables must stay put
    before = [layer.act_scales.values.copy() for layer in student.layers]
    finetune(small, student, DistillConfig(iterations=30, batch=8), schedule)
    for b, layer in zip(before, student.layers):
        assert np.array_equal(b[:70], layer.act_scales.values[:70])


def test_finetune_deterministic(small, schedule):
    runs = []
    for _ in range(2):
        s = calibrate(small, schedule, LayerPrecisionPolicy(4, 4, 3), rank=2, batch=16, seed=0)
        log: list = []
        finetune(small, s, DistillConfig(iterations=20, batch=8, seed=3), schedule, progress=log)
        runs.append((snapshot(s), log))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][0], runs[1][0]))


def test_nan_aborts_with_last_good(small, student, schedule, monkeypatch):
    start = snapshot(student)
    real = distill.distill_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        loss = real(*args, **kwargs)
        if calls["n"] == 6:
            loss.data = np.array(np.nan)
        return loss

    monkeypatch.setattr(distill, "distill_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        finetune(small, student, DistillConfig(iterations=50, batch=4), schedule)
    assert info.value.iteration == 5
    assert all(np.array_equal(a, b) for a, b in zip(start, snapshot(student)))
    assert all(np.array_equal(a, b) for a, b in zip(start, info.value.last_good))


def test_build_student_round_trips_state(small, student, schedule):
    specs = [{"bits_w": l.w_spec.bits, "bits_a": l.a_spec.bits, "s_w": l.s_w.data,
              "act_scales": l.act_scales.values, "shared": l.act_scales.shared, "pinned": l.pinned}
             for l in student.layers]
    rebuilt = build_student(small, specs, rank=2)
    x = np.random.default_rng(0).standard_normal((5, 2))
    assert np.array_equal(rebuilt(x, 10).data, student(x, 10).data)


def test_calibrate_pins_edges(small, schedule):
    s = calibrate(small, schedule, LayerPrecisionPolicy(2, 4, 3), rank=1, batch=8, seed=0)
    assert [(l.w_spec.bits, l.a_spec.bits, l.pinned) for l in s.layers] == [(8, 8, True), (2, 4, False), (8, 8, True)]
    with pytest.raises(ConfigurationError):
        calibrate(small, schedule, LayerPrecisionPolicy(4, 4, 5), batch=8)


def test_trajectory_mse_decreases_along_finetune(teacher, schedule):
    student = calibrate(teacher, schedule, LayerPrecisionPolicy(4, 4, 5), rank=4, batch=64, seed=0)
    scores = [eval_trajectory_mse(teacher, student, schedule, 64, seed=9)]
    for _ in range(3):
        finetune(teacher, student, DistillConfig(iterations=300, seed=len(scores)), schedule)
        scores.append(eval_trajectory_mse(teacher, student, schedule, 64, seed=9))
    assert all(b <= 1.1 * a for a, b in zip(scores, scores[1:]))
    assert scores[-1] < scores[0]
