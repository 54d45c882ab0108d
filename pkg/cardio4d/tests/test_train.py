import math

import numpy as np
import pytest

from cardio4d.common import ConfigError, DataError
from cardio4d.data import CropSampler
from cardio4d.model import build, forward
from cardio4d.tensor_engine import Tape, Tensor, float64_mode, grad_check, softmax_channels
from cardio4d.testing import tiny_net_config
from cardio4d.train import (
    AdamState,
    EpochRecord,
    TrainConfig,
    adam_step,
    lr_schedule,
    soft_dice,
    sparse_dice_loss,
    temporal_consistency,
    total_loss,
    train_loop,
    write_epoch_log,
)


def one_hot(labels) -> np.ndarray:
    """(1, 3, X, Y, Z, T) one-hot encoding of a (X, Y, Z, T) label array."""
    return np.moveaxis(np.eye(3)[np.asarray(labels)], -1, 0)[np.newaxis]


@pytest.fixture
def labels(rng) -> np.ndarray:
    return rng.integers(0, 3, (3, 3, 2, 4))


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        (
            dict(alpha0=0),
            dict(fg_prob=0),
            dict(fg_prob=1.5),
            dict(total_epochs=0),
            dict(batch_size=2),
            dict(temporal_norm="max"),
            dict(dice_classes=()),
        ),
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        c = TrainConfig()
        assert 1e-3 == c.alpha0 and 500 == c.total_epochs and 0.9 == c.power


class TestSoftDice:
    def test_identical(self, labels):
        p = Tensor(one_hot(labels))
        assert soft_dice(p, p).item() == pytest.approx(0, abs=1e-5)

    def test_disjoint(self):
        a = Tensor(one_hot(np.ones((2, 2, 1, 1), dtype=int)))
        b = Tensor(one_hot(np.full((2, 2, 1, 1), 2)))
        assert 1.0 == pytest.approx(soft_dice(a, b).item())

    def test_half(self):
        """Two of four voxels predicted, one correctly: Dice 2·1 / (2 + 2)."""
        t = np.zeros((1, 3, 4, 1, 1, 1))
        t[0, 1, :2] = 1
        p = np.zeros_like(t)
        p[0, 1, [0, 2]] = 1

        result = soft_dice(Tensor(t), Tensor(p), classes=[1]).item()
        assert 0.5 == pytest.approx(result, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            soft_dice(Tensor(np.ones((1, 3, 2, 2, 2, 1))), Tensor(np.ones((1, 3, 2, 2, 1, 1))))


class TestSparseDiceLoss:
    def test_unlabeled_frames_ignored(self, labels, rng):
        """Neither values nor gradients depend on frames outside the mask."""
        mask = [True, False, True, False]
        p = Tensor(rng.uniform(0, 1, (1, 3, 3, 3, 2, 4)), requires_grad=True)
        a = one_hot(labels)
        b = a.copy()
        b[..., [1, 3]] = one_hot(rng.integers(0, 3, (3, 3, 2, 2)))

        with Tape() as tape:
            loss = sparse_dice_loss(p, Tensor(a), mask)
        tape.backward(loss)

        assert loss.item() == pytest.approx(sparse_dice_loss(p, Tensor(b), mask).item())
        assert (p.grad[..., [1, 3]] == 0).all()
        assert (p.grad[..., [0, 2]] != 0).any()

    def test_sum_over_frames(self, labels, rng):
        p = Tensor(rng.uniform(0, 1, (1, 3, 3, 3, 2, 4)))
        t = Tensor(one_hot(labels))
        expected = sum(
            soft_dice(Tensor(t.data[..., i : i + 1]), Tensor(p.data[..., i : i + 1])).item()
            for i in (0, 3)
        )

        result = sparse_dice_loss(p, t, [True, False, False, True]).item()
        assert expected == pytest.approx(result, rel=1e-4)

    def test_no_labeled_frames(self, labels):
        p = Tensor(one_hot(labels))
        assert 0.0 == sparse_dice_loss(p, p, [False] * 4).item()

    def test_mask_size(self, labels):
        p = Tensor(one_hot(labels))
        with pytest.raises(ValueError, match="3 mask entries for 4 frames"):
            sparse_dice_loss(p, p, [True] * 3)


def network_gradients(x, labels, mask):
    """Loss gradients of every parameter of a freshly built tiny network."""
    model = build(tiny_net_config(), seed=0)
    with Tape() as tape:
        loss, _ = total_loss(forward(model, Tensor(x)), Tensor(labels), mask)
    tape.backward(loss)
    return {k: t.grad.copy() for k, t in model.params.items()}


@pytest.mark.parametrize("seed", range(20))
def test_network_gradients_ignore_unlabeled_frames(seed):
    """Labels of frames outside the mask leave every parameter gradient unchanged."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, 8, 8, 8, 4))
    mask = np.zeros(4, dtype=bool)
    mask[rng.choice(4, rng.integers(1, 4), replace=False)] = True
    a = one_hot(rng.integers(0, 3, (8, 8, 8, 4)))
    b = a.copy()
    b[..., ~mask] = one_hot(rng.integers(0, 3, (8, 8, 8, int((~mask).sum()))))

    grads_a = network_gradients(x, a, mask)
    grads_b = network_gradients(x, b, mask)

    assert grads_a.keys() == grads_b.keys()
    for k in grads_a:
        np.testing.assert_array_equal(grads_a[k], grads_b[k], err_msg=k)


class TestTemporalConsistency:
    @pytest.fixture
    def ramp(self):
        """Frames equal to 0, 0.5 and 1 everywhere."""
        return Tensor(np.ones((1, 2, 2, 2, 2, 3)) * np.array([0, 0.5, 1.0]))

    def test_values(self, ramp):
        # Two frame pairs, each with difference 0.5 at 16 entries
        assert 0.5 == pytest.approx(temporal_consistency(ramp).item())
        assert 8.0 == pytest.approx(temporal_consistency(ramp, "sum").item())

    def test_constant(self, rng):
        p = Tensor(np.repeat(rng.uniform(size=(1, 3, 2, 2, 2, 1)), 5, axis=-1))
        assert 0.0 == temporal_consistency(p).item()

        # A single frame
        assert 0.0 == temporal_consistency(Tensor(p.data[..., :1])).item()

    def test_invalid(self, ramp):
        with pytest.raises(ValueError, match="normalization"):
            temporal_consistency(ramp, "max")

    def test_time_reversal(self, rng):
        with float64_mode():
            p = Tensor(rng.uniform(size=(2, 3, 3, 2, 2, 5)))
            reversed_ = Tensor(p.data[..., ::-1].copy())

        for normalization in ("mean", "sum"):
            assert temporal_consistency(p, normalization).item() == pytest.approx(
                temporal_consistency(reversed_, normalization).item(), rel=1e-12
            )


def test_total_loss(labels, rng):
    p = Tensor(rng.uniform(0, 1, (1, 3, 3, 3, 2, 4)))
    t = Tensor(one_hot(labels))
    mask = [True, False, True, False]

    loss, breakdown = total_loss(p, t, mask)

    assert 2 == breakdown.labeled_frames_used
    assert breakdown.total == pytest.approx(loss.item(), rel=1e-5)
    assert breakdown.dice_term == pytest.approx(sparse_dice_loss(p, t, mask).item())
    assert breakdown.temporal_term == pytest.approx(temporal_consistency(p).item())


def test_total_loss_grad_check(labels, rng):
    """Gradients of the loss through a softmax agree with finite differences."""
    with float64_mode():
        logits = Tensor(rng.standard_normal((1, 3, 3, 3, 2, 4)), requires_grad=True)
        t = Tensor(one_hot(labels))

    def f(x):
        return total_loss(softmax_channels(x), t, [True, False, True, True])[0]

    report = grad_check(f, [logits], sample=40)
    assert report.passed, report.errors


class TestLRSchedule:
    def test_values(self):
        c = TrainConfig(alpha0=1e-3, total_epochs=100)

        assert 1e-3 == lr_schedule(0, c)
        assert 0.0 == lr_schedule(100, c)
        assert 1e-3 * 0.5**0.9 == pytest.approx(lr_schedule(50, c))

        # Monotone decreasing
        values = [lr_schedule(e, c) for e in range(101)]
        assert values == sorted(values, reverse=True)

    @pytest.mark.parametrize("epoch", [-1, 101])
    def test_invalid(self, epoch):
        with pytest.raises(ValueError, match="outside"):
            lr_schedule(epoch, TrainConfig(total_epochs=100))


class TestAdam:
    def test_first_step(self):
        """The first bias-corrected step moves each parameter by lr · sign(g)."""
        p = {"w": Tensor(np.array([1.0, 2.0, 3.0]))}
        state = adam_step(p, {"w": np.array([0.5, -2.0, 0.0])}, AdamState(), lr=0.1)

        assert 1 == state.t
        np.testing.assert_allclose([0.9, 2.1, 3.0], p["w"].data, rtol=1e-6)
        assert np.float32 == p["w"].dtype

    def test_missing_gradient(self):
        p = {"w": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
        state = AdamState()
        adam_step(p, {"w": np.ones(2), "b": None}, state, lr=0.1)
        adam_step(p, {}, state, lr=0.1)

        assert 2 == state.t
        np.testing.assert_array_equal([1, 1], p["b"].data)
        assert (p["w"].data < 1).all()

    def test_scalar_reference(self, rng):
        """100 steps agree with an element-by-element evaluation of the update rule."""
        b1, b2, eps = 0.9, 0.999, 1e-8
        steps = 100
        with float64_mode():
            p = {"w": Tensor(rng.standard_normal(6))}
        grads = rng.standard_normal((steps, 6))
        grads[::7, 2] = 0.0
        lrs = rng.uniform(1e-4, 1e-1, steps)

        expected = p["w"].data.tolist()
        m = [0.0] * 6
        v = [0.0] * 6
        for t in range(1, steps + 1):
            for i in range(6):
                g = float(grads[t - 1, i])
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                m_hat = m[i] / (1 - b1**t)
                v_hat = v[i] / (1 - b2**t)
                expected[i] -= lrs[t - 1] * m_hat / (math.sqrt(v_hat) + eps)

        state = AdamState(betas=(b1, b2), eps=eps)
        for t in range(steps):
            adam_step(p, {"w": grads[t]}, state, lr=float(lrs[t]))

        assert steps == state.t
        assert np.float64 == p["w"].dtype
        np.testing.assert_allclose(expected, p["w"].data, rtol=0, atol=1e-10)


class TestTrainLoop:
    @pytest.fixture(scope="class")
    def config(self):
        return TrainConfig(total_epochs=2, alpha0=1e-2, seed=4)

    @pytest.fixture(scope="class")
    def result(self, tiny_dataset, tiny_net, config):
        return train_loop(tiny_dataset, config, tiny_net)

    def test_log(self, result, config):
        assert [0, 1] == [r.epoch for r in result.log]
        assert config.alpha0 == result.log[0].lr
        assert all(math.isfinite(x) for x in result.losses)
        for r in result.log:
            assert r.total == pytest.approx(r.dice_term + r.temporal_term)
        assert dict(epochs=2, seed=4) == result.model.info

    def test_deterministic(self, result, tiny_dataset, tiny_net, config):
        other = train_loop(tiny_dataset, config, tiny_net)

        assert result.losses == other.losses
        assert result.model.digest() == other.model.digest()

    def test_updates_in_place(self, tiny_dataset, tiny_net):
        model = build(tiny_net, seed=0)
        before = model.digest()

        result = train_loop(tiny_dataset.train[:1], TrainConfig(total_epochs=1), model)

        assert result.model is model
        assert before != model.digest()

    def test_loss_decreases(self, tiny_phantom, tiny_net):
        """Repeated steps on one crop reduce the loss."""
        model = build(tiny_net, seed=0)
        sample = CropSampler(tiny_phantom, (8, 8, 8, 4), fg_prob=1.0).sample(
            np.random.default_rng(0)
        )
        state = AdamState()
        losses = []

        for _ in range(30):
            with Tape() as tape:
                loss, breakdown = total_loss(
                    forward(model, sample.input), sample.labels, sample.labeled_mask
                )
            tape.backward(loss)
            adam_step(model.params, {k: t.grad for k, t in model.params.items()}, state, 1e-2)
            model.params.zero_grad()
            losses.append(breakdown.total)

        assert max(losses[-5:]) < losses[0]

    def test_seg3d(self, tiny_dataset):
        config = TrainConfig(total_epochs=1, crop=(8, 8, 8, 1))
        result = train_loop(tiny_dataset.train[:2], config, tiny_net_config(mode="seg3d"))

        assert (8, 8, 8, 1) == result.model.config.input_extents
        assert 1 == len(result.log)

    def test_no_sequences(self, tiny_net):
        with pytest.raises(DataError, match="No training sequences"):
            train_loop([], TrainConfig(total_epochs=1), tiny_net)


def test_write_epoch_log(tmp_path):
    records = [EpochRecord(0, 1e-3, 1.5, 0.25, 1.75), EpochRecord(1, 5e-4, 1.0, 0.25, 1.25)]
    path = write_epoch_log(tmp_path.joinpath("epochs.csv"), records)

    lines = path.read_text().splitlines()
    assert "epoch,lr,dice_term,temporal_term,total" == lines[0]
    assert "1,0.0005,1.0,0.25,1.25" == lines[2]
