import numpy as np
import pytest

from forec.data import NegativeSampler, SplitDataset, leave_one_out_split
from forec.models import GMFModel, ModelConfig, NMFModel, fork, params_hash
from forec.numgrad import ParamSet, Tensor, sgd_step
from forec.synthgen import SynthConfig, generate_pair
from forec.train import (ForecConfig, MamlConfig, TrainConfig, batch_loss, default_meta_iterations,
                         forec_train, loss_and_grads, maml_fast_adapt, maml_inner_step, maml_pretrain,
                         maml_task_gradient, nmf_forec_train, run_method, sample_shots, stage_hashes,
                         stage_rng, stage_stream, train_concat_equal, train_single)

from fd import fd_grad, rel_err


@pytest.fixture(scope="module")
def pair():
    src, tgt = generate_pair(SynthConfig(n_items=200, n_users_source=300, n_users_target=120, seed=2))
    n = src.n_users + tgt.n_users
    return leave_one_out_split(src, n), leave_one_out_split(tgt, n)


def _cfg(split, **kw):
    return ModelConfig(n_users=split.n_users_total, n_items=split.n_items, **kw)


def _same(a: ParamSet, b: ParamSet) -> bool:
    return list(a) == list(b) and all(a[n].numpy().tobytes() == b[n].numpy().tobytes() for n in a)


def test_zero_epochs_leave_model_unchanged(pair):
    _, tgt = pair
    model = GMFModel.init(_cfg(tgt))
    res = train_single(model, tgt, TrainConfig(epochs=0))
    assert _same(res.model.params, model.params) and res.history == []


def test_toy_positive_outscores_negative():
    split = SplitDataset("toy", 2, 1, {0: [0]}, {0: 0}, {0: 0}, np.array([0, 1]))
    model = GMFModel.init(ModelConfig(n_users=1, n_items=2, seed=0))
    res = train_single(model, split, TrainConfig(epochs=200, gmf_learning_rate=0.05))
    p = res.model.forward([0, 0], [0, 1])
    assert p[0] > p[1]
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_fixed_seed_repeats_loss_history(pair):
    _, tgt = pair
    runs = [train_single(NMFModel.init(_cfg(tgt)), tgt, TrainConfig(epochs=2, seed=5)) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert _same(runs[0].model.params, runs[1].model.params)


def test_equal_sampling_is_half_and_half(pair):
    _, tgt = pair
    # the same market under shifted user ids plays the source
    shift = tgt.n_users_total
    src = SplitDataset("copy", tgt.n_items, 2 * shift, {u + shift: v for u, v in tgt.train.items()},
                       {u + shift: v for u, v in tgt.valid.items()}, {u + shift: v for u, v in tgt.test.items()},
                       tgt.catalog)
    tgt2 = SplitDataset(tgt.market_code, tgt.n_items, 2 * shift, tgt.train, tgt.valid, tgt.test, tgt.catalog)
    res = train_concat_equal(GMFModel.init(_cfg(src)), src, tgt2, TrainConfig(epochs=3))
    for row in res.history:
        assert row["source"] == row["target"] == tgt.n_train
        assert row["n"] == 2 * tgt.n_train * 5
        assert row["with_replacement"] is False


def test_equal_sampling_flags_small_source(pair):
    src, tgt = pair
    res = train_concat_equal(GMFModel.init(_cfg(tgt)), tgt, src, TrainConfig(epochs=1))
    assert res.history[0]["with_replacement"] is True


def test_item_only_in_source_gets_updates(pair):
    src, tgt = pair
    only_src = sorted(set(src.catalog.tolist()) - set(tgt.catalog.tolist()))
    nowhere = sorted(set(range(src.n_items)) - set(src.catalog.tolist()) - set(tgt.catalog.tolist()))
    assert only_src and nowhere
    model = GMFModel.init(_cfg(tgt))
    res = train_concat_equal(model, src, tgt, TrainConfig(epochs=1, l2=0.0, negatives_scope="market"))
    before, after = model.params["gmf.item"].numpy(), res.model.params["gmf.item"].numpy()
    assert np.any(before[only_src] != after[only_src])
    assert np.array_equal(before[nowhere], after[nowhere])


def _batches(split, seed=0):
    smp = NegativeSampler.for_split(split, "global", seed)
    rng = np.random.default_rng(seed)
    return sample_shots(split, 20, smp, rng, 4), sample_shots(split, 20, smp, rng, 4)


def test_shot_batches_have_k_positives_and_negatives(pair):
    src, _ = pair
    (u, i, y), _ = _batches(src)
    assert len(u) == 100 and y.sum() == 20
    for uu, ii, yy in zip(u, i, y):
        assert (ii in src.known_positives[uu]) == (yy == 1)


def test_inner_step_is_sgd_step(pair):
    src, _ = pair
    model = NMFModel.init(_cfg(src))
    adapt, _ = _batches(src)
    _, g = loss_and_grads(model, model.params, *adapt)
    assert _same(maml_inner_step(model, model.params, adapt, 0.01), sgd_step(model.params, g, 0.01, 0.0))


def test_one_meta_iteration_matches_manual_reconstruction(pair):
    src, tgt = pair
    model = NMFModel.init(_cfg(src, seed=1))
    maml = MamlConfig(meta_iterations=1)
    base = TrainConfig(seed=3)
    got = maml_pretrain([src, tgt], model, maml, base).model.params

    rng = stage_rng(3, "maml")
    total = {}
    for k, split in enumerate((src, tgt)):
        smp = NegativeSampler.for_split(split, "global", 3).reseeded(stage_stream("maml", str(k)))
        a = sample_shots(split, 20, smp, rng, 4)
        b = sample_shots(split, 20, smp, rng, 4)
        _, ga = loss_and_grads(model, model.params, *a)
        adapted = sgd_step(model.params, ga, maml.inner_lr, 0.0)
        _, gb = loss_and_grads(model, adapted, *b)
        for n, t in gb.items():
            total[n] = t.numpy() if n not in total else total[n] + t.numpy()
    theta = model.params
    want = {n: theta[n].numpy() - maml.meta_lr * total[n] for n in theta}
    assert all(got[n].numpy().tobytes() == want[n].tobytes() for n in theta)


def test_second_order_matches_finite_difference_of_meta_objective(pair):
    src, _ = pair
    cfg = ModelConfig(n_users=src.n_users_total, n_items=src.n_items, gmf_dim=3, init_std=0.5, seed=4)
    model = GMFModel.init(cfg)
    adapt, evalb = _batches(src, seed=1)
    alpha = 0.5
    theta = model.params

    def meta_loss(h):
        p = theta.replace({"gmf.h": Tensor(h)})
        return batch_loss(model, maml_inner_step(model, p, adapt, alpha), *evalb).item()

    oracle = fd_grad(meta_loss, theta["gmf.h"].numpy())
    _, so = maml_task_gradient(model, theta, adapt, evalb, alpha, second_order=True)
    _, fo = maml_task_gradient(model, theta, adapt, evalb, alpha, second_order=False)
    err_so = rel_err(so["gmf.h"].numpy(), oracle)
    err_fo = rel_err(fo["gmf.h"].numpy(), oracle)
    assert err_so < 1e-4
    assert err_fo > 10 * err_so


def test_zero_meta_step_and_zero_inner_step(pair):
    src, tgt = pair
    model = NMFModel.init(_cfg(src))
    frozen = maml_pretrain([src, tgt], model, MamlConfig(meta_lr=0.0, meta_iterations=2), TrainConfig())
    assert _same(frozen.model.params, model.params)
    adapt, evalb = _batches(src)
    _, g0 = maml_task_gradient(model, model.params, adapt, evalb, 0.0)
    _, plain = loss_and_grads(model, model.params, *evalb)
    assert all(g0[n].numpy().tobytes() == plain[n].numpy().tobytes() for n in plain)


def test_maml_needs_two_markets(pair):
    src, _ = pair
    with pytest.raises(ValueError):
        maml_pretrain([src], NMFModel.init(_cfg(src)), MamlConfig(), TrainConfig())


def test_default_meta_iterations(pair):
    src, tgt = pair
    n = max(src.n_train, tgt.n_train)
    assert default_meta_iterations([src, tgt], MamlConfig(shots=20)) == -(-n // 40)
    assert default_meta_iterations([src, tgt], MamlConfig(shots=20, meta_epochs=3)) == 3 * -(-n // 40)


def test_fast_adapt_contracts(pair):
    _, tgt = pair
    model = NMFModel.init(_cfg(tgt, seed=2))
    assert _same(maml_fast_adapt(model, tgt, alpha=0.0).params, model.params)
    adapted = maml_fast_adapt(model, tgt, shots=20, alpha=0.01, seed=7)
    rng = stage_rng(7, "fast_adapt")
    smp = NegativeSampler.for_split(tgt, "global", 7).reseeded(stage_stream("fast_adapt", tgt.market_code))
    batch = sample_shots(tgt, 20, smp, rng, 4, source="valid")
    _, g = loss_and_grads(model, model.params, *batch)
    assert _same(adapted.params, sgd_step(model.params, g, 0.01, 0.0))
    for n in model.params:
        moved = model.params[n].numpy() != adapted.params[n].numpy()
        assert not np.any(moved & (g[n].numpy() == 0))


SMALL = dict(cfg=TrainConfig(epochs=1, seed=1),
             forec=ForecConfig(maml=MamlConfig(warmup_epochs=1, meta_iterations=5), finetune_epochs=2))


def test_forec_stage_chaining_and_freeze(pair):
    src, tgt = pair
    res = forec_train(src, tgt, _cfg(tgt, seed=1), SMALL["cfg"], SMALL["forec"])
    assert list(res.stages)[-3:] == ["pretrain", "fork", "finetune"]
    pre, forked, final = res.stages["pretrain"], res.stages["fork"], res.stages["finetune"]
    assert params_hash(forked.params) == params_hash(fork(pre).params)
    assert final is res.model
    for n in final.params.frozen_names:
        assert final.params[n].numpy().tobytes() == pre.params[n].numpy().tobytes()


def test_nmf_forec_differs_only_in_pretraining(pair):
    src, tgt = pair
    res = nmf_forec_train(src, tgt, _cfg(tgt, seed=1), SMALL["cfg"], SMALL["forec"])
    assert res.stages["pretrain"] is res.stages["++nmf"]
    assert params_hash(res.stages["fork"].params) == params_hash(fork(res.stages["pretrain"]).params)


def test_forec_can_also_tune_a_source_model(pair):
    src, tgt = pair
    forec = ForecConfig(maml=SMALL["forec"].maml, finetune_epochs=1, finetune_source=True)
    res = forec_train(src, tgt, _cfg(tgt, seed=1), SMALL["cfg"], forec)
    assert "source" in res.extra_models


def test_pipeline_determinism(pair):
    src, tgt = pair
    runs = [stage_hashes(forec_train(src, tgt, _cfg(tgt, seed=1), SMALL["cfg"], SMALL["forec"])) for _ in range(2)]
    assert runs[0] == runs[1]


@pytest.mark.parametrize("method", ["gmf", "mlp", "nmf", "gmf++", "mlp++", "nmf++", "maml"])
def test_run_method_dispatch(pair, method):
    src, tgt = pair
    res = run_method(method, src, tgt, _cfg(tgt, seed=1), TrainConfig(epochs=1), SMALL["forec"])
    p = res.model.forward([tgt.users[0]], [0])
    assert 0 < p[0] < 1


def test_run_method_single_market_equals_train_single(pair):
    _, tgt = pair
    cfg = TrainConfig(epochs=1, seed=3, negatives_scope="market")
    res = run_method("gmf", None, tgt, _cfg(tgt, seed=1), cfg)
    direct = train_single(GMFModel.init(_cfg(tgt, seed=1)), tgt, cfg,
                          NegativeSampler.for_split(tgt, "market", 3), stage="gmf")
    assert _same(res.model.params, direct.model.params)


def test_run_method_errors(pair):
    _, tgt = pair
    with pytest.raises(ValueError):
        run_method("nope", None, tgt, _cfg(tgt), TrainConfig())
    with pytest.raises(ValueError):
        run_method("forec", None, tgt, _cfg(tgt), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        MamlConfig(shots=0)
