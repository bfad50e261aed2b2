import numpy as np
import pytest

from dglab import autodiff as ad
from dglab.analysis import finite_difference_oracle
from dglab.autodiff import Tape
from dglab.exceptions import ConfigError, NumericalError
from dglab.synthdata import GenSpec, SyntheticDataset, generate
from dglab.train import (StepReport, TrainConfig, evaluate, predict_logits, seed_streams,
                         step_dgl, step_mt_only, step_unimodal, step_ut_only, step_vanilla,
                         train, train_step)

from conftest import assert_grad_close, small_batch, small_model

ENC = ("encoder-1", "encoder-2")
HEAD = ("fusion", "classifier")


def flat(model, groups):
    return {f"{g.name}/{t.name}": t.data.copy()
            for g in model.groups if g.name in groups for t in g.tensors}


def grads(step_fn, model, xs, y, **cfg):
    """Gradients a step would apply: lr=0 and no momentum leave them in the velocity."""
    m = model.copy()
    config = TrainConfig(momentum=0.0, weight_decay=0.0, **cfg)
    step_fn(m, xs, y, config, lr=0.0)
    return {f"{g.name}/{t.name}": v.copy() for g in m.groups for t, v in zip(g.tensors, g.velocity)}


def manual_grads(model, loss_fn):
    m = model.copy()
    with Tape():
        ad.backward(loss_fn(m))
    return {f"{g.name}/{t.name}": (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for g in m.groups for t in g.tensors}


def weighted_uni(xs, y, alpha):
    def loss(m):
        terms = [ad.scale(ad.softmax_cross_entropy(m.forward_unimodal(xs, k), y), alpha)
                 for k in range(m.n_modalities)]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out
    return loss


def in_groups(d, groups):
    return {k: v for k, v in d.items() if k.split("/")[0] in groups}


def assert_maps_close(a, b, tol=1e-12):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=tol, rtol=0, err_msg=k)


@pytest.fixture(params=["concat", "mlp"])
def setup(request):
    model = small_model(request.param)
    xs, y = small_batch(model, n=8)
    return model, xs, y


class TestTrainConfig:
    def test_unimodal_name_parsed(self):
        cfg = TrainConfig(mode="unimodal_2")
        assert cfg.mode == "unimodal" and cfg.modality == 1 and cfg.mode_name == "unimodal_2"

    @pytest.mark.parametrize("kw", [dict(mode="joint"), dict(mode="unimodal_0"),
                                    dict(mode="unimodal_x"), dict(alpha=-1.0), dict(lr=0.0),
                                    dict(momentum=1.0), dict(weight_decay=-1e-4),
                                    dict(batch_size=0), dict(epochs=-1), dict(seed=-3),
                                    dict(lr_decay_every=0)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=2e-3, lr_decay_factor=0.1, lr_decay_every=70)
        assert cfg.lr_at(0) == cfg.lr_at(69) == 2e-3
        assert cfg.lr_at(70) == pytest.approx(2e-4) and cfg.lr_at(140) == pytest.approx(2e-5)

    def test_seed_streams_independent_and_stable(self):
        s = seed_streams(0)
        assert s == seed_streams(0) and len(set(s.values())) == 3 and s != seed_streams(1)


class TestDGLStep:
    def test_equals_two_decoupled_updates(self, setup):
        model, xs, y = setup
        cfg = TrainConfig(mode="dgl", alpha=2.5, lr=0.1, momentum=0.9, weight_decay=1e-3)
        enc_only, head_only = model.copy(), model.copy()
        step_dgl(model, xs, y, cfg)

        with Tape():
            ad.backward(weighted_uni(xs, y, cfg.alpha)(enc_only))
        ad.sgd_step(enc_only.encoders, cfg.lr, cfg.momentum, cfg.weight_decay)
        with Tape():
            ad.backward(ad.softmax_cross_entropy(head_only.forward_detached(xs), y))
        ad.sgd_step([head_only.fusion, head_only.classifier], cfg.lr, cfg.momentum,
                    cfg.weight_decay)

        assert_maps_close(flat(model, ENC), flat(enc_only, ENC))
        assert_maps_close(flat(model, HEAD), flat(head_only, HEAD))

    def test_alpha_zero_freezes_encoders_bitwise(self, setup):
        model, xs, y = setup
        before = flat(model, ENC)
        cfg = TrainConfig(mode="dgl", alpha=0.0, lr=0.5, momentum=0.9, weight_decay=0.1)
        for step in range(3):
            step_dgl(model, xs, y, cfg, step)
        after = flat(model, ENC)
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        assert any(not np.array_equal(a, b) for a, b in
                   zip(flat(small_model(), HEAD).values(), flat(model, HEAD).values()))

    def test_head_never_sees_unimodal_losses(self, setup):
        model, xs, y = setup
        g = grads(step_dgl, model, xs, y, mode="dgl", alpha=3.0)
        pure = manual_grads(model, lambda m: ad.softmax_cross_entropy(m.forward_detached(xs), y))
        assert_maps_close(in_groups(g, HEAD), in_groups(pure, HEAD))

    def test_perturbing_W_reaches_encoders_only_via_unimodal_paths(self, setup):
        model, xs, y = setup
        other = model.copy()
        other.W.data[...] += 0.3
        for m in (model, other):
            g = grads(step_dgl, m, xs, y, mode="dgl", alpha=1.0)
            uni = manual_grads(m, weighted_uni(xs, y, 1.0))
            assert_maps_close(in_groups(g, ENC), in_groups(uni, ENC))

    def test_alpha_linearity(self, setup):
        model, xs, y = setup
        g1 = grads(step_dgl, model, xs, y, mode="dgl", alpha=1.5)
        g2 = grads(step_dgl, model, xs, y, mode="dgl", alpha=3.0)
        g3 = grads(step_dgl, model, xs, y, mode="dgl", alpha=4.5)
        for k in in_groups(g1, ENC):
            assert (2 * g1[k]).tobytes() == g2[k].tobytes()
            np.testing.assert_allclose(g3[k], 3 * g1[k], rtol=1e-12, atol=1e-15)
        for k in in_groups(g1, HEAD):
            assert g1[k].tobytes() == g2[k].tobytes() == g3[k].tobytes()

    def test_non_finite_names_the_loss(self):
        model = small_model()
        xs, y = small_batch(model)
        xs[0][0, 0] = np.nan
        with pytest.raises(NumericalError, match="unimodal"):
            step_dgl(model, xs, y, TrainConfig())


class TestModeLattice:
    def test_mt_only_encoders_match_dgl(self, setup):
        model, xs, y = setup
        dgl = grads(step_dgl, model, xs, y, mode="dgl", alpha=2.0)
        mt = grads(step_mt_only, model, xs, y, mode="mt_only", alpha=2.0)
        assert_maps_close(in_groups(mt, ENC), in_groups(dgl, ENC))

    def test_mt_only_head_is_sum_of_both_losses(self, setup):
        model, xs, y = setup
        mt = grads(step_mt_only, model, xs, y, mode="mt_only", alpha=2.0)
        ld = manual_grads(model, lambda m: ad.softmax_cross_entropy(m.forward_detached(xs), y))
        uni = manual_grads(model, weighted_uni(xs, y, 2.0))
        assert_maps_close(in_groups(mt, HEAD), {k: ld[k] + uni[k] for k in in_groups(ld, HEAD)})

    def test_ut_only_head_is_pure_multimodal(self, setup):
        model, xs, y = setup
        ut = grads(step_ut_only, model, xs, y, mode="ut_only", alpha=2.0)
        van = grads(step_vanilla, model, xs, y, mode="vanilla")
        assert_maps_close(in_groups(ut, HEAD), in_groups(van, HEAD))

    def test_ut_only_encoders_add_unimodal(self, setup):
        model, xs, y = setup
        ut = grads(step_ut_only, model, xs, y, mode="ut_only", alpha=2.0)
        van = grads(step_vanilla, model, xs, y, mode="vanilla")
        dgl = grads(step_dgl, model, xs, y, mode="dgl", alpha=2.0)
        assert_maps_close(in_groups(ut, ENC), {k: van[k] + dgl[k] for k in in_groups(van, ENC)})

    def test_ut_only_alpha_zero_is_vanilla(self, setup):
        model, xs, y = setup
        a, b = model.copy(), model.copy()
        for step in range(3):
            step_ut_only(a, xs, y, TrainConfig(mode="ut_only", alpha=0.0), step)
            step_vanilla(b, xs, y, TrainConfig(mode="vanilla"), step)
        for k, v in a.state_dict().items():
            assert v.tobytes() == b.state_dict()[k].tobytes()

    def test_mt_only_alpha_zero_freezes_encoders(self, setup):
        model, xs, y = setup
        before = flat(model, ENC)
        step_mt_only(model, xs, y, TrainConfig(mode="mt_only", alpha=0.0))
        assert all(before[k].tobytes() == v.tobytes() for k, v in flat(model, ENC).items())


class TestVanillaStep:
    @pytest.mark.parametrize("fusion", ["concat", "mlp"])
    def test_full_model_loss_matches_fd_100_instances(self, fusion):
        for seed in range(50):
            model = small_model(fusion, dims=(3, 2), hidden=(4,), rep=2, K=3, seed=seed)
            xs, y = small_batch(model, n=4, seed=100 + seed)
            g = manual_grads(model, lambda m: ad.softmax_cross_entropy(m.forward_full(xs), y))
            for group in model.groups:
                for t in group.tensors:
                    def f(v, t=t):
                        saved = t.data.copy()
                        t.data[...] = v
                        with Tape():
                            out = ad.softmax_cross_entropy(model.forward_full(xs), y).item()
                        t.data[...] = saved
                        return out
                    assert_grad_close(g[f"{group.name}/{t.name}"],
                                      finite_difference_oracle(f, t.data.copy()))

    def test_zero_lr_changes_nothing(self, setup):
        model, xs, y = setup
        before = model.state_dict()
        for fn in (step_vanilla, step_dgl, step_mt_only, step_ut_only):
            fn(model, xs, y, TrainConfig(), lr=0.0)
        for k, v in model.state_dict().items():
            assert v.tobytes() == before[k].tobytes()

    def test_report_fields(self, setup):
        model, xs, y = setup
        rep = step_vanilla(model, xs, y, TrainConfig(mode="vanilla"), step=7)
        assert isinstance(rep, StepReport) and rep.step == 7
        assert set(rep.grad_norms) == {g.name for g in model.groups}
        assert all(v >= 0 for v in rep.grad_norms.values()) and len(rep.loss_uni) == 2

    @pytest.mark.parametrize("mode", ["vanilla", "dgl", "mt_only", "ut_only"])
    def test_grad_norm_accounting(self, setup, mode):
        model, xs, y = setup
        g = grads({"vanilla": step_vanilla, "dgl": step_dgl, "mt_only": step_mt_only,
                   "ut_only": step_ut_only}[mode], model, xs, y, mode=mode)
        rep = train_step(model.copy(), xs, y, TrainConfig(mode=mode), lr=0.0)
        total = sum(float(np.sum(v ** 2)) for v in g.values())
        assert sum(n ** 2 for n in rep.grad_norms.values()) == pytest.approx(total, abs=1e-10)


class TestUnimodalStep:
    def test_only_one_encoder_moves(self):
        model = small_model()
        xs, y = small_batch(model)
        before = model.state_dict()
        step_unimodal(model, xs, y, TrainConfig(mode="unimodal_2"))
        after = model.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before
                   if k.startswith("encoder-1/"))
        assert not np.array_equal(before["encoder-2/layer0.weight"], after["encoder-2/layer0.weight"])

    def test_classifier_columns_of_other_modality_untouched_without_decay(self):
        model = small_model()
        xs, y = small_batch(model)
        W0 = model.W.data.copy()
        step_unimodal(model, xs, y, TrainConfig(mode="unimodal_1", weight_decay=0.0))
        np.testing.assert_array_equal(model.W.data[:, 3:], W0[:, 3:])
        assert not np.array_equal(model.W.data[:, :3], W0[:, :3])


@pytest.fixture(scope="module")
def tiny_data():
    return generate(GenSpec(n_classes=3, input_dims=(5, 4), mu=(3.0, 1.0), n_train=90,
                            n_test=60, seed=4))


class TestTrainLoop:
    def test_epochs_zero(self, tiny_data):
        model = small_model(K=3)
        before = model.state_dict()
        res = train(model, tiny_data[0], TrainConfig(epochs=0))
        assert res.steps == [] and res.epochs == []
        assert all(before[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    def test_deterministic(self, tiny_data):
        a, b = small_model(K=3), small_model(K=3)
        cfg = TrainConfig(epochs=3, batch_size=16, lr=0.05, seed=9)
        train(a, tiny_data[0], cfg)
        train(b, tiny_data[0], cfg)
        for k, v in a.state_dict().items():
            assert v.tobytes() == b.state_dict()[k].tobytes()

    def test_records_and_schedule(self, tiny_data):
        cfg = TrainConfig(epochs=4, batch_size=40, lr=0.1, lr_decay_every=2, seed=1)
        res = train(small_model(K=3), tiny_data[0], cfg, eval_sets={"test": tiny_data[1]},
                    on_epoch_end=lambda e, m: {"tag": e * 10})
        assert [r["lr"] for r in res.epochs] == [0.1, 0.1, pytest.approx(0.01), pytest.approx(0.01)]
        assert len(res.steps) == 4 * 3 and [s.step for s in res.steps] == list(range(12))
        assert res.epochs[-1]["tag"] == 30 and set(res.epochs[0]["splits"]) == {"test"}
        assert res.steps[5].lr == 0.1 and res.steps[6].lr == pytest.approx(0.01)

    def test_modes_share_shuffling(self, tiny_data):
        digests = [train(small_model(K=3), tiny_data[0],
                         TrainConfig(mode=m, epochs=2, seed=5)).first_batch_digests
                   for m in ("vanilla", "dgl", "mt_only", "ut_only")]
        assert all(d == digests[0] for d in digests)

    def test_dgl_alpha_zero_matches_head_only_training(self, tiny_data):
        a, b = small_model(K=3), small_model(K=3)
        init = flat(a, ENC)
        train(a, tiny_data[0], TrainConfig(mode="dgl", alpha=0.0, epochs=3, lr=0.05))
        train(b, tiny_data[0], TrainConfig(mode="mt_only", alpha=0.0, epochs=3, lr=0.05))
        assert all(init[k].tobytes() == v.tobytes() for k, v in flat(a, ENC).items())
        assert evaluate(a, tiny_data[1]) == evaluate(b, tiny_data[1])

    def test_empty_dataset(self):
        empty = SyntheticDataset([np.zeros((0, 5)), np.zeros((0, 4))], np.zeros(0, int))
        with pytest.raises(ConfigError):
            train(small_model(), empty, TrainConfig())

    def test_modality_mismatch(self, tiny_data):
        with pytest.raises(ConfigError):
            train(small_model(M=3, K=3), tiny_data[0], TrainConfig())

    def test_divergence_keeps_partial_trajectory(self, tiny_data):
        cfg = TrainConfig(mode="vanilla", epochs=5, lr=1e9, momentum=0.0, batch_size=30)
        with np.errstate(all="ignore"), pytest.raises(NumericalError) as info:
            train(small_model(K=3), tiny_data[0], cfg)
        assert len(info.value.partial.steps) >= 1

    def test_separable_data_vanilla_fits(self):
        tr, _ = generate(GenSpec(n_classes=6, input_dims=(20, 20), mu=(3.0, 3.0),
                                 sigma=(0.1, 0.1), n_train=600, n_test=10, seed=3))
        model = small_model(dims=(20, 20), hidden=(32,), rep=16, K=6, seed=0)
        cfg = TrainConfig(mode="vanilla", epochs=200, seed=0)
        res = train(model, tr, cfg, eval_sets={"train": tr})
        accs = [r["splits"]["train"]["multi_acc"] for r in res.epochs]
        assert max(accs) >= 0.95


class TestEvaluate:
    def test_uniform_predictions_chance(self):
        model = small_model(K=6)
        model.W.data[...] = 0.0
        model.b.data[...] = 0.0
        y = np.arange(60) % 6
        ds = SyntheticDataset([np.ones((60, 5)), np.ones((60, 4))], y)
        out = evaluate(model, ds)
        assert out["multi_acc"] == pytest.approx(1 / 6)  # ties resolve to class 0
        assert out["uni_acc"] == [pytest.approx(1 / 6)] * 2

    def test_single_correct_sample(self):
        model = small_model(K=3)
        model.W.data[...] = 0.0
        model.b.data[...] = [0.0, 5.0, 0.0]
        ds = SyntheticDataset([np.zeros((1, 5)), np.zeros((1, 4))], [1])
        out = evaluate(model, ds)
        assert out["multi_acc"] == 1.0 and out["uni_acc"] == [1.0, 1.0]

    def test_unimodal_accuracy_matches_direct_oracle(self, tiny_data):
        model = small_model(K=3)
        train(model, tiny_data[0], TrainConfig(epochs=3, lr=0.05))
        ds = tiny_data[1]
        state = model.state_dict()

        def encode(x, k):
            h = np.maximum(x @ state[f"encoder-{k + 1}/layer0.weight"].T
                           + state[f"encoder-{k + 1}/layer0.bias"], 0)
            return h @ state[f"encoder-{k + 1}/layer1.weight"].T + state[f"encoder-{k + 1}/layer1.bias"]

        W, b = state["classifier/weight"], state["classifier/bias"]
        cols = [slice(0, 3), slice(3, 7)]
        for k in range(2):
            logits = encode(ds.features[k], k) @ W[:, cols[k]].T + b
            want = np.mean(np.argmax(logits, axis=1) == ds.labels)
            assert evaluate(model, ds)["uni_acc"][k] == want
        np.testing.assert_allclose(predict_logits(model, ds.features, 0),
                                   encode(ds.features[0], 0) @ W[:, :3].T + b, atol=1e-12)
