import math

import numpy as np
import pytest

from ria import tensor as T
from ria.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from ria.config import tiny_config
from ria.data import split_by_request
from ria.errors import ContractError, TrainingError
from ria.gradcheck import model_gradcheck
from ria.model import RiaModel, collate
from ria.train import AdamState, adam_step, batch_order, depth_sweep, plot_sweep, train


def scalar_param(value=0.0):
    return [("w", T.Tensor(np.array([value]), requires_grad=True))]


# -- optimizer -----------------------------------------------------------------

def test_first_adam_step_is_minus_lr():
    named = scalar_param()
    adam_step(named, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert named[0][1].data[0] == pytest.approx(-0.1, abs=1e-8)


def test_repeated_unit_gradient_moves_lr_per_step():
    named = scalar_param()
    state = AdamState()
    for _ in range(5):
        adam_step(named, {"w": np.array([1.0])}, state, lr=0.1)
    assert named[0][1].data[0] == pytest.approx(-0.5, abs=1e-7)


def test_zero_gradient_from_fresh_state_is_a_fixed_point():
    named = scalar_param(3.0)
    state = adam_step(named, {"w": np.array([0.0])}, AdamState(), lr=0.1)
    assert named[0][1].data[0] == 3.0 and state.m["w"][0] == 0.0


def test_moments_decay_under_zero_gradient():
    named = scalar_param()
    state = adam_step(named, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    m1, v1 = state.m["w"][0], state.v["w"][0]
    adam_step(named, {"w": np.array([0.0])}, state, lr=0.1)
    assert state.m["w"][0] == pytest.approx(0.9 * m1) and state.v["w"][0] == pytest.approx(0.999 * v1)


def test_adam_update_matches_hand_formula():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(3)]
    named = [("w", T.Tensor(w0.copy(), requires_grad=True))]
    state = AdamState()
    for g in grads:
        adam_step(named, {"w": g}, state, lr=0.01)
    w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(named[0][1].data, w, rtol=1e-14, atol=1e-15)


def test_nan_gradient_names_the_parameter():
    with pytest.raises(TrainingError, match="'w'"):
        adam_step(scalar_param(), {"w": np.array([np.nan])}, AdamState())


def test_batch_order_is_seeded():
    a = batch_order(10, 3, np.random.default_rng(4))
    b = batch_order(10, 3, np.random.default_rng(4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(np.concatenate(a).tolist()) == list(range(10))


# -- losses and registry -----------------------------------------------------------

@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_total_loss_is_l1_plus_l2_exactly(precision, tiny_records):
    cfg = tiny_config(precision=precision)
    parts = RiaModel(cfg).loss(collate(tiny_records, cfg))
    assert parts.total.data.tobytes() == (parts.l1.data + parts.l2.data).tobytes()


def test_weighted_loss_and_all_candidate_scope(tiny_records):
    cfg = tiny_config(l1_weight=0.5, l1_scope="all")
    parts = RiaModel(cfg).loss(collate(tiny_records, cfg))
    assert parts.total.item() == pytest.approx(0.5 * parts.l1.item() + parts.l2.item(), rel=1e-14)


def test_registry_covers_every_gradient_leaf(tiny_records):
    cfg = tiny_config()
    model = RiaModel(cfg)
    loss = model.loss(collate(tiny_records[:4], cfg)).total
    leaves = {id(n) for n in T.topological_order(loss) if n.requires_grad and not n._parents}
    registry = {id(p) for _, p in model.named_parameters()}
    assert leaves <= registry
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))


def test_full_model_gradcheck_on_tiny_config():
    report = model_gradcheck(tiny_config(), n_probes=60, seed=1)
    assert len(report.probes) == 60
    assert report.max_rel_err < 1e-5


# -- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_records):
    cfg = tiny_config(seed=4)
    model = RiaModel(cfg)
    blob = save_checkpoint(tmp_path / "m.ckpt", model)
    assert blob.startswith(MAGIC)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.cfg == cfg
    batch = collate(tiny_records, cfg)
    assert back(batch).listwise.logits.data.tobytes() == model(batch).listwise.logits.data.tobytes()
    assert dumps(back.named_parameters(), back.cfg) == blob


def test_corrupt_checkpoint_rejected():
    blob = bytearray(dumps(RiaModel(tiny_config()).named_parameters(), tiny_config()))
    blob[100] ^= 1
    with pytest.raises(ContractError):
        loads(bytes(blob))
    with pytest.raises(ContractError):
        loads(b"garbage" * 10)


# -- training loop -------------------------------------------------------------------

def test_training_is_deterministic(tiny_records):
    cfg = tiny_config(epochs=2, batch_size=8, seed=3)
    a, b = train(tiny_records, cfg), train(tiny_records, cfg)
    assert a.checkpoint == b.checkpoint
    assert [e.to_text() for e in a.epochs] == [e.to_text() for e in b.epochs]


def test_per_batch_losses_add_up(tiny_records):
    res = train(tiny_records, tiny_config(epochs=1, batch_size=8))
    assert res.batch_losses
    for b in res.batch_losses:
        assert b.total == b.l1 + b.l2


def test_training_rejects_overlap_and_empty(tiny_records):
    cfg = tiny_config(epochs=1)
    with pytest.raises(ContractError):
        train(tiny_records, cfg, tiny_records[:3])
    with pytest.raises(ContractError):
        train([], cfg)


def test_divergence_aborts_with_last_good_checkpoint(tiny_records):
    cfg = tiny_config(epochs=3, batch_size=4, learning_rate=1e30)
    with pytest.raises(TrainingError) as err:
        train(tiny_records, cfg)
    params = loads(err.value.checkpoint)[1]
    assert all(np.all(np.isfinite(v)) for v in params.values())


def test_training_lowers_validation_logloss(tiny_gen):
    from dataclasses import replace

    from ria.data import generate_synthetic

    recs = list(generate_synthetic(replace(tiny_gen, n_requests=600, gamma=0.8)))
    tr, va = split_by_request(recs, 0.2)
    res = train(tr, tiny_config(epochs=4, batch_size=32, learning_rate=3e-3), va)
    assert res.epochs[res.best_epoch - 1].val_listwise.logloss < res.initial_val["listwise"].logloss


def test_depth_sweep_and_plot(tmp_path, tiny_records):
    tr, va = split_by_request(tiny_records, 0.3)
    result = depth_sweep(tr, va, tiny_config(epochs=1, batch_size=16), [1, 2], seeds=[0, 1])
    assert result.depths() == [1, 2] and len(result.rows) == 4
    assert not math.isnan(result.median_auc(2))
    assert "median_listwise_auc" in result.to_text()
    plot_sweep(result, tmp_path / "sweep.png")
    assert (tmp_path / "sweep.png").read_bytes()[:4] == b"\x89PNG"
    with pytest.raises(ContractError):
        depth_sweep(tr, va, tiny_config(), [])
