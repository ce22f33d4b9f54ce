import math

import numpy as np
import pytest

from gcl.dataset import Triplet, quadruple_split
from gcl.encoder import FieldSchema
from gcl.errors import NumericalError
from gcl.evaluate import EvalConfig, evaluate_splits
from gcl.multifield import FieldWeights
from gcl.stw import StwFunction
from gcl.synth import SynthConfig, synth_dataset
from gcl.training import (
    SGD,
    Adam,
    TrainConfig,
    batch_loss_and_grads,
    init_state,
    sample_batches,
    train,
    train_step,
)

from oracles import central_diff, rel_err

SCHEMA = FieldSchema([("text", "text")], [("image_vec", "dense"), ("title", "text")])


@pytest.fixture(scope="module")
def data():
    ds = synth_dataset(SynthConfig(n_queries=40, docs_per_query=10, seed=0, dense_dim=6))
    a = quadruple_split([q.query_id for q in ds.queries], [d.doc_id for d in ds.corpus], seed=0)
    return ds, a


def small_config(**kw):
    base = dict(batch_size=16, epochs=2, lr=1e-2, embed_dim=8, hash_buckets=64, eval_every=0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_batch_sizes():
    batches = sample_batches(list(range(10)), 4, seed=0, epoch=0)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(i for b in batches for i in b) == list(range(10))
    assert [len(b) for b in sample_batches(list(range(9)), 4, 0, 0)] == [4, 4]


def test_batches_deterministic_and_epoch_dependent():
    items = list(range(1000))
    assert sample_batches(items, 32, 7, 3) == sample_batches(items, 32, 7, 3)
    assert sample_batches(items, 32, 7, 3) != sample_batches(items, 32, 7, 4)


def test_batch_errors():
    with pytest.raises(ValueError, match="empty"):
        sample_batches([], 4, 0, 0)
    with pytest.raises(ValueError, match=">= 2"):
        sample_batches([1, 2], 1, 0, 0)


def test_config_validation():
    for kw in ({"batch_size": 1}, {"optimizer": "rmsprop"}, {"tau": 0.0}, {"lr": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


def test_optimizers():
    p = {"x": np.array([1.0, -2.0])}
    SGD(0.5).step(p, {"x": np.array([2.0, 2.0])})
    np.testing.assert_allclose(p["x"], [0.0, -3.0])
    p = {"x": np.array([1.0])}
    Adam(0.1).step(p, {"x": np.array([3.0])})
    # first Adam step moves by lr * sign(g) up to eps
    np.testing.assert_allclose(p["x"], [0.9], atol=1e-8)


def test_param_gradients_match_finite_difference(data):
    ds, _ = data
    cfg = small_config(tau=0.5, embed_dim=3, hash_buckets=8)
    state = init_state(ds, SCHEMA, cfg)
    batch = ds.triplets[:5]
    w = np.array([cfg.stw(t.score) for t in batch])
    _, _, grads = batch_loss_and_grads(state.model, batch, ds, cfg, weights=w)
    params = state.model.flat_params()
    for key in ("lhs.text/projection", "rhs.image_vec/projection", "rhs.title/bias", "lhs.text/table"):
        arr = params[key]

        def f(x, key=key):
            saved = params[key].copy()
            params[key][...] = x
            val = batch_loss_and_grads(state.model, batch, ds, cfg, weights=w)[0]
            params[key][...] = saved
            return val

        assert rel_err(grads[key], central_diff(f, arr)) <= 1e-6, key


def test_zero_learning_rate_keeps_parameters(data):
    ds, _ = data
    cfg = small_config(lr=0.0, optimizer="sgd")
    state = init_state(ds, SCHEMA, cfg)
    before = {k: v.copy() for k, v in state.model.flat_params().items()}
    train_step(state, ds.triplets[:8], ds, cfg)
    for k, v in state.model.flat_params().items():
        assert np.array_equal(v, before[k])


def test_one_step_descends(data):
    ds, _ = data
    cfg = small_config(lr=1e-3, optimizer="sgd", tau=1.0)
    state = init_state(ds, SCHEMA, cfg)
    batch = [ds.triplets[0], ds.triplets[15]]
    before = batch_loss_and_grads(state.model, batch, ds, cfg)[0]
    train_step(state, batch, ds, cfg)
    after = batch_loss_and_grads(state.model, batch, ds, cfg)[0]
    assert after < before


def test_training_deterministic_and_finite(data):
    ds, a = data
    _, h1 = train(ds, a, small_config(), SCHEMA)
    s2, h2 = train(ds, a, small_config(), SCHEMA)
    s3, _ = train(ds, a, small_config(), SCHEMA)
    assert h1.steps == h2.steps
    assert all(math.isfinite(loss) for _, loss in h1.steps)
    for k, v in s2.model.flat_params().items():
        assert np.array_equal(v, s3.model.flat_params()[k])


def test_constant_stw_equals_unweighted_reference(data):
    ds, a = data
    _, weighted = train(ds, a, small_config(stw=StwFunction("constant", c=1.0)), SCHEMA)
    _, reference = train(ds, a, small_config(unweighted_reference=True), SCHEMA)
    assert weighted.steps == reference.steps


def test_single_field_path(data):
    ds, a = data
    schema = FieldSchema([("text", "text")], [("title", "text")])
    state, hist = train(ds, a, small_config(), schema)
    assert len(hist.steps) == state.step > 0


def test_history_and_eval_cadence(data, tmp_path):
    ds, a = data
    seen = []
    state, hist = train(
        ds, a, small_config(epochs=3, eval_every=2), SCHEMA, EvalConfig(), on_epoch=lambda s, r: seen.append(r is not None)
    )
    assert seen == [False, True, True]
    assert sorted(hist.reports) == [2, 3]
    hist.write_steps_csv(tmp_path / "s.csv")
    hist.write_evals_csv(tmp_path / "e.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "step,loss"
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "epoch,split,metric,value" and len(rows) == 1 + 2 * 4 * 3


def test_evaluation_does_not_mutate_state(data):
    ds, a = data
    state, _ = train(ds, a, small_config(epochs=1), SCHEMA)
    before = {k: v.copy() for k, v in state.model.flat_params().items()}
    evaluate_splits(state.model, ds, a, None, training_gamma=FieldWeights.uniform(1, 2))
    for k, v in state.model.flat_params().items():
        assert np.array_equal(v, before[k])


def test_nan_aborts_with_batch_ids(data):
    ds, _ = data
    cfg = small_config()
    state = init_state(ds, SCHEMA, cfg)
    state.model.flat_params()["rhs.image_vec/bias"][0] = np.nan
    with pytest.raises(NumericalError, match=r"\(q\d+,d\d+\)"):
        train_step(state, ds.triplets[:4], ds, cfg)


def test_empty_training_split(data):
    ds, a = data
    all_eval = type(a)({q: "eval" for q in a.query_split}, a.doc_split, 0)
    with pytest.raises(ValueError, match="no triplets"):
        train(ds, all_eval, small_config(), SCHEMA)
