import json
import struct

import numpy as np
import numpy.testing as npt
import pytest

from transnorm import training
from transnorm.checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    load_checkpoint,
    load_model_state,
    model_from_checkpoint,
    model_state,
    read_tensor_file,
    save_checkpoint,
    write_tensor_file,
)
from transnorm.config import ModelConfig, TransformerConfig
from transnorm.data import SynthSpec, generate, split
from transnorm.errors import CheckpointError, ConfigError, NonFiniteError
from transnorm.model import TransNorm
from transnorm.tensor import Tensor
from transnorm.training import Adam, EarlyStopping, TrainConfig, evaluate_loss, fit, train_step

TINY = ModelConfig(input_size=32, base_width=4, transformer=TransformerConfig(layers=1, heads=2, dim=8))


@pytest.fixture(scope="module")
def dataset():
    return generate(SynthSpec(count=12, size=32, seed=3))


def params_of(model):
    return {k: p.data.copy() for k, p in model.named_parameters()}


def run_steps(data, steps, config=TINY, lr=1e-3):
    model = TransNorm(config)
    opt = Adam.for_model(model, TrainConfig(lr=lr))
    losses = [train_step(model, opt, data.images[:4], data.masks[:4]) for _ in range(steps)]
    return model, opt, losses


# ---------------------------------------------------------------- optimizer


def test_adam_single_step_by_hand():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    g = np.array([0.3, -0.1, 0.0])
    p.grad = g.copy()
    opt.step()
    g1 = g + 0.01 * np.array([1.0, -2.0, 0.5])
    m = 0.1 * g1 / (1 - 0.9)
    v = 0.001 * g1**2 / (1 - 0.999)
    npt.assert_allclose(p.data, np.array([1.0, -2.0, 0.5]) - 0.1 * m / (np.sqrt(v) + 1e-8), rtol=1e-15)


def test_adam_state_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.ones(3)
    opt.step()
    other = Adam([("p", Tensor(np.ones(3)))])
    other.load_state_tensors(opt.state_tensors())
    assert other.t == 1
    npt.assert_array_equal(other.m["p"], opt.m["p"])


# ---------------------------------------------------------------- train step


def test_training_is_bitwise_deterministic(dataset):
    a, _, la = run_steps(dataset, 10)
    b, _, lb = run_steps(dataset, 10)
    assert la == lb
    pa, pb = params_of(a), params_of(b)
    for k in pa:
        assert pa[k].tobytes() == pb[k].tobytes(), k


def test_loss_decreases_on_fixed_batch(dataset):
    _, _, losses = run_steps(dataset, 50, lr=3e-3)
    assert losses[-1] < losses[0]


def test_zero_learning_rate_leaves_parameters(dataset):
    model = TransNorm(TINY)
    before = params_of(model)
    opt = Adam.for_model(model, TrainConfig(lr=0.0))
    for _ in range(3):
        train_step(model, opt, dataset.images[:4], dataset.masks[:4])
    for k, v in params_of(model).items():
        npt.assert_array_equal(v, before[k])


def test_non_finite_parameter_is_reported(dataset):
    model = TransNorm(TINY)
    model.encoder.stages[1].first.conv.weight.data[0, 0, 0, 0] = np.nan
    opt = Adam.for_model(model, TrainConfig())
    with pytest.raises(NonFiniteError, match="conv2d"):
        train_step(model, opt, dataset.images[:2], dataset.masks[:2])


def test_non_finite_input_is_reported(dataset):
    model = TransNorm(TINY)
    images = dataset.images[:2].copy()
    images[0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="input"):
        train_step(model, Adam.for_model(model, TrainConfig()), images, dataset.masks[:2])


# ---------------------------------------------------------------- early stopping and fit


def test_early_stopping_counts_stagnant_epochs():
    stopper = EarlyStopping(10)
    stops = [stopper.update(epoch, 1.0) for epoch in range(12)]
    assert stops.index(True) == 10
    assert stopper.best_epoch == 0


def test_early_stopping_resets_on_improvement():
    stopper = EarlyStopping(2)
    assert not stopper.update(0, 3.0)
    assert not stopper.update(1, 3.0)
    assert not stopper.update(2, 2.0)
    assert not stopper.update(3, 2.5)
    assert stopper.update(4, 2.0)
    assert stopper.best_epoch == 2


def test_fit_stops_after_patience(dataset, monkeypatch):
    monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: 1.0)
    train, val, _ = split(dataset, (0.5, 0.25, 0.25))
    ckpt = fit(TransNorm(TINY), train, val, TrainConfig(max_epochs=100, patience=10, batch_size=6))
    assert ckpt.meta["stopped_early"]
    assert ckpt.meta["epochs_run"] == 11
    assert ckpt.meta["best_epoch"] == 0


def test_fit_returns_best_checkpoint(dataset):
    train, val, _ = split(dataset, (0.5, 0.25, 0.25))
    model = TransNorm(TINY)
    ckpt = fit(model, train, val, TrainConfig(max_epochs=4, batch_size=3, lr=3e-3))
    history = ckpt.meta["history"]
    assert len(history) == 4
    best = min(range(4), key=lambda i: history[i]["val_loss"])
    assert ckpt.meta["best_epoch"] == best
    assert evaluate_loss(model, val.images, val.masks) == history[best]["val_loss"]


def test_fit_rejects_empty(dataset):
    train, _, _ = split(dataset, (1.0, 0.0, 0.0))
    with pytest.raises(ConfigError):
        fit(TransNorm(TINY), train, train.subset([]), TrainConfig(max_epochs=1))


def test_train_config_keys():
    assert TrainConfig.from_dict(TrainConfig(lr=0.5).to_dict()).lr == 0.5
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- checkpoints


@pytest.fixture(scope="module")
def trained(dataset):
    model, opt, _ = run_steps(dataset, 3)
    return model, opt


def test_checkpoint_round_trip_forward_bitwise(tmp_path, trained, dataset):
    model, opt = trained
    save_checkpoint(tmp_path / "m.tnrm", checkpoint_from_model(model, opt.t, opt, {"note": "x"}))
    ckpt = load_checkpoint(tmp_path / "m.tnrm")
    assert ckpt.step == 3 and ckpt.meta == {"note": "x"}
    clone = model_from_checkpoint(ckpt)
    x = Tensor(dataset.images[4:8])
    model.eval()
    clone.eval()
    try:
        assert model(x)[0].data.tobytes() == clone(x)[0].data.tobytes()
    finally:
        model.train()
    assert evaluate_loss(model, dataset.images, dataset.masks) == evaluate_loss(
        clone, dataset.images, dataset.masks
    )


def test_resume_reproduces_next_step(tmp_path, dataset):
    model, opt, _ = run_steps(dataset, 3)
    save_checkpoint(tmp_path / "r.tnrm", checkpoint_from_model(model, opt.t, opt))
    expected = train_step(model, opt, dataset.images[4:8], dataset.masks[4:8])
    following = train_step(model, opt, dataset.images[:4], dataset.masks[:4])

    ckpt = load_checkpoint(tmp_path / "r.tnrm")
    resumed = model_from_checkpoint(ckpt)
    ropt = Adam.for_model(resumed, TrainConfig())
    ropt.load_state_tensors(ckpt.tensors)
    assert train_step(resumed, ropt, dataset.images[4:8], dataset.masks[4:8]) == expected
    assert train_step(resumed, ropt, dataset.images[:4], dataset.masks[:4]) == following


def test_checkpoint_without_optimizer_loads(tmp_path, trained):
    model, _ = trained
    save_checkpoint(tmp_path / "p.tnrm", checkpoint_from_model(model))
    ckpt = load_checkpoint(tmp_path / "p.tnrm")
    assert not any(k.startswith("adam.") for k in ckpt.tensors)


def test_truncated_checkpoint(tmp_path, trained):
    model, opt = trained
    path = tmp_path / "t.tnrm"
    save_checkpoint(path, checkpoint_from_model(model, opt.t, opt))
    raw = path.read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="truncated|corrupt"):
            load_checkpoint(path)


def test_version_and_magic(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "v.tnrm"
    save_checkpoint(path, checkpoint_from_model(model))
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 2 at offset 4"):
        load_checkpoint(path)
    raw[0:4] = b"PK\x03\x04"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_config_shape_mismatch(tmp_path, trained):
    model, _ = trained
    ckpt = checkpoint_from_model(model)
    ckpt.config = dict(ckpt.config, base_width=8)
    path = tmp_path / "s.tnrm"
    save_checkpoint(path, ckpt)
    with pytest.raises(CheckpointError, match=r"has shape .* at offset|at offset \d+ has shape"):
        load_checkpoint(path)


def test_trailing_bytes_and_missing_tensors(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "x.tnrm"
    ckpt = checkpoint_from_model(model)
    save_checkpoint(path, ckpt)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
    first = next(iter(ckpt.tensors))
    partial = Checkpoint(ckpt.config, {k: v for k, v in ckpt.tensors.items() if k != first})
    save_checkpoint(path, partial)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)


def test_load_model_state_checks_shapes(trained):
    model, _ = trained
    state = model_state(model)
    name = next(iter(state))
    state[name] = np.zeros((1,))
    with pytest.raises(CheckpointError, match=name):
        load_model_state(TransNorm(TINY), state)


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "w.bin"
    write_tensor_file(path, {"kind": "tensors"}, {"a": np.arange(6.0).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == b"TNRM"
    assert struct.unpack("<II", raw[4:12]) == (1, len(json.dumps({"kind": "tensors"})))
    assert raw[-48:] == np.arange(6.0).astype("<f8").tobytes()
    header, tensors = read_tensor_file(path)
    assert header == {"kind": "tensors"}
    npt.assert_array_equal(tensors["a"], np.arange(6.0).reshape(2, 3))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_tensor_file(tmp_path / "a.bin", {}, {"x": np.ones(2)})
    write_tensor_file(tmp_path / "a.bin", {}, {"x": np.zeros(2)})
    assert [p.name for p in tmp_path.iterdir()] == ["a.bin"]
