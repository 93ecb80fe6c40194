from __future__ import annotations

import numpy as np
import pytest

from lsslnode.autodiff import Tensor, mse
from lsslnode.checkpoint import load_checkpoint, save_checkpoint
from lsslnode.models import init_bundle
from lsslnode.synthdata import generate_cohort, make_pair_dataset
from lsslnode.training import PretrainConfig, Pretrainer, TrainingDiverged, batch_indices, fit


@pytest.fixture(scope="module")
def pairs():
    return make_pair_dataset(generate_cohort(150, 2))


@pytest.mark.parametrize("mode", ["LSSL", "S_LSSL_NODE"])
def test_resume_reproduces_next_epoch_bit_identically(pairs, tmp_path, mode):
    cfg = PretrainConfig(epochs=3, seed=1)
    full = Pretrainer(init_bundle(mode, 1), pairs, cfg)
    full.run_epoch()
    save_checkpoint(tmp_path / "e1.ckpt", full.state_tensors(), full.state_header())
    ref = full.run_epoch()

    resumed = Pretrainer(init_bundle(mode, 1), pairs, cfg)
    tensors, meta = load_checkpoint(tmp_path / "e1.ckpt")
    resumed.load_state(tensors, meta)
    again = resumed.run_epoch()
    assert again.train_total == ref.train_total
    assert again.val_total == ref.val_total
    for a, b in zip(full.params, resumed.params):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_lowers_loss(pairs):
    tr = Pretrainer(init_bundle("AE", 0), pairs, PretrainConfig(epochs=5, seed=0))
    recs = [tr.run_epoch() for _ in range(5)]
    assert recs[-1].train_recon < recs[0].train_recon
    assert all(r.train_direction == 0.0 for r in recs)


def test_node_epoch_records_solver_stats(pairs):
    tr = Pretrainer(init_bundle("LSSL_NODE", 0), pairs, PretrainConfig(epochs=1, seed=0))
    rec = tr.run_epoch()
    assert rec.accepted_steps >= tr.steps_per_epoch and rec.fevals > rec.accepted_steps


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(pairs):
    tr = Pretrainer(init_bundle("AE", 0), pairs, PretrainConfig(epochs=1, lr=1e300, seed=0))
    tr.bundle.encoder.fc1.w.data[...] = 1e200
    with pytest.raises(TrainingDiverged):
        tr.run_epoch()


def test_batches_cover_every_index_once():
    idx = batch_indices(103, 10, np.random.default_rng(0))
    assert len(idx) == 11
    assert sorted(np.concatenate(idx).tolist()) == list(range(103))


def test_fit_is_seed_deterministic():
    def run():
        w = Tensor(np.zeros(3), requires_grad=True)
        x = np.random.default_rng(0).normal(size=(40, 3))
        y = x @ np.array([1.0, -2.0, 0.5])
        losses = fit([w], lambda idx: mse(Tensor(x[idx]) @ w.reshape(3, 1), Tensor(y[idx, None])), 40,
                     epochs=20, lr=0.1, weight_decay=0.0, batch_size=8, seed=3)
        return w.data.copy(), losses

    (w1, l1), (w2, l2) = run(), run()
    np.testing.assert_array_equal(w1, w2)
    assert l1 == l2 and l1[-1] < l1[0]
