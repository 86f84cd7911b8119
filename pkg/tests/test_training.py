import numpy as np
import pytest

from stgat_fuser.data import WindowedDataset
from stgat_fuser.errors import NonFiniteError, ShapeError, ValidationError
from stgat_fuser.model import build_model
from stgat_fuser.tensor import Tensor, finite_diff_check
from stgat_fuser.training import AdamState, TrainConfig, adam_step, evaluate_mse, mse_loss, train


def dataset(windows, targets):
    return WindowedDataset(np.asarray(windows, dtype=float), np.asarray(targets, dtype=float), np.arange(len(targets)))


def test_mse_examples():
    assert mse_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0
    assert mse_loss(Tensor([0.0, 0.0]), [3.0, 4.0]).item() == 12.5


def test_mse_errors():
    with pytest.raises(ShapeError, match="mismatch"):
        mse_loss(Tensor([0.0, 0.0]), [1.0])
    with pytest.raises(ShapeError, match="empty"):
        mse_loss(Tensor(np.zeros(0)), np.zeros(0))


def test_mse_gradient(rng):
    pred = Tensor(rng.normal(size=6))
    target = rng.normal(size=6)
    pred.requires_grad = True
    mse_loss(pred, target).backward()
    np.testing.assert_allclose(pred.grad, 2 * (pred.data - target) / 6, atol=1e-15)
    assert finite_diff_check(lambda p: mse_loss(p, target), pred) < 1e-8


def test_adam_first_step():
    theta = Tensor([0.0], requires_grad=True)
    adam_step({"t": theta}, {"t": np.array([0.5])}, AdamState(), TrainConfig())
    assert abs(theta.item() + 0.001) < 1e-6


def test_adam_zero_gradient_leaves_params():
    theta = Tensor([0.3, -0.2], requires_grad=True)
    state = AdamState()
    for _ in range(5):
        adam_step({"t": theta}, {"t": np.zeros(2)}, state, TrainConfig())
    np.testing.assert_array_equal(theta.data, [0.3, -0.2])
    assert state.t == 5 and (state.v["t"] >= 0).all()


def test_adam_descends_quadratic():
    theta = Tensor([1.0], requires_grad=True)
    state = AdamState()
    values = [1.0]
    for _ in range(100):
        adam_step({"t": theta}, {"t": 2 * theta.data}, state, TrainConfig())
        values.append(theta.item() ** 2)
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_errors():
    theta = Tensor([0.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        adam_step({"t": theta}, {"t": np.array([np.inf])}, AdamState(), TrainConfig())
    with pytest.raises(ShapeError):
        adam_step({"t": theta}, {"t": np.zeros(2)}, AdamState(), TrainConfig())


def test_train_config_validation():
    for bad in (dict(learning_rate=0), dict(beta1=1.0), dict(patience=0), dict(min_delta=-1)):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict(TrainConfig(seed=3).to_dict()) == TrainConfig(seed=3)


def test_constant_target_learned(tiny_cfg, rng):
    ds = dataset(rng.uniform(size=(32, 4, 7)), np.full(32, 0.5))
    _, history = train(build_model(tiny_cfg), ds, ds, TrainConfig(max_epochs=200))
    first = next(r.epoch for r in history.epochs if r.train_mse < 1e-6)
    assert first < 100


def forced_stop_fixture(cfg, rng, patience):
    train_ds = dataset(rng.uniform(size=(32, 4, 7)), rng.uniform(size=32))
    val_ds = dataset(np.zeros((8, 4, 7)), np.zeros(8))
    return train(build_model(cfg), train_ds, val_ds, TrainConfig(max_epochs=300, patience=patience)), val_ds


@pytest.mark.parametrize("patience", [1, 5, 40])
def test_early_stopping_exact(tiny_cfg, rng, patience):
    (model, history), val_ds = forced_stop_fixture(tiny_cfg, rng, patience)
    assert history.stop_reason == "early_stopping"
    assert len(history) - history.best_epoch == patience
    assert history.best_val == min(r.val_mse for r in history.epochs)
    assert evaluate_mse(model, val_ds) == history.best_val


def test_history_bookkeeping(tiny_cfg, small_data):
    _, history = train(build_model(tiny_cfg), small_data.train, small_data.val, TrainConfig(max_epochs=4))
    assert history.stop_reason == "max_epochs" and len(history) == 4
    assert [r.epoch for r in history.epochs] == [1, 2, 3, 4]
    lines = history.to_csv().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse" and len(lines) == 5


def test_training_deterministic(tiny_cfg, small_data):
    def run():
        model, history = train(build_model(tiny_cfg), small_data.train, small_data.val,
                               TrainConfig(max_epochs=3, seed=7))
        return history.to_csv(), [p.data.tobytes() for p in model.parameters().values()]
    assert run() == run()


def test_empty_dataset_rejected(tiny_cfg):
    empty = dataset(np.zeros((0, 4, 7)), np.zeros(0))
    with pytest.raises(ValidationError):
        train(build_model(tiny_cfg), empty, empty, TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_epoch_and_batch(tiny_cfg, rng):
    ds = dataset(rng.uniform(size=(8, 4, 7)), np.full(8, 1e300))
    with pytest.raises(NonFiniteError, match="epoch 1, batch 0"):
        train(build_model(tiny_cfg), ds, ds, TrainConfig())
