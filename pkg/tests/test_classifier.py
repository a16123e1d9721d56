import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import curve_with_tail_mean, ranking_table
from pepipe.classifier import (
    ClassifierConfig,
    TrainRunLog,
    build_classifier,
    classify_image,
    finetune,
    format_ranking,
    load_classifier,
    pretrain_pretext,
    rank_models,
    save_classifier,
    write_ranking_csv,
)
from pepipe.engine import load_checkpoint
from pepipe.errors import ConfigError, InputError, LoadError
from pepipe.phantom import NEGATIVE, POSITIVE, PhantomConfig, render_many

SMALL = ClassifierConfig(epochs=2, batch_size=8, seed=5)


def phantoms(n, seed, offset=0, **kw):
    jobs = [(offset + i, POSITIVE) for i in range(n)] + [(offset + i, NEGATIVE) for i in range(n)]
    res = render_many(PhantomConfig(seed=seed, **kw), jobs)
    return np.stack([r[0] for r in res]), np.array([0] * n + [1] * n)


def params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestBuild:
    @pytest.mark.parametrize("size", [64, 224])
    def test_logits_length(self, size):
        model = build_classifier(ClassifierConfig(input_size=size))
        x = np.zeros((1, size, size, 1), np.float32)
        assert model.predict_logits(x).shape == (1, 2)

    def test_invalid_size(self):
        with pytest.raises(ConfigError):
            ClassifierConfig(input_size=60)

    def test_same_seed_same_init(self):
        a, b = build_classifier(SMALL), build_classifier(SMALL)
        assert params_equal(a.state_dict(), b.state_dict())
        c = build_classifier(SMALL, seed=6)
        assert not params_equal(a.state_dict(), c.state_dict())

    def test_head_matches_backbone(self):
        model = build_classifier(SMALL)
        assert model.head.input_shape == model.backbone.output_shape == (64,)
        assert model.param_count == sum(p.data.size for p in model.backbone.parameters() + model.head.parameters())


class TestOutputs:
    def test_zero_head_is_uniform(self):
        model = build_classifier(SMALL)
        for p in model.head.parameters():
            p.data[...] = 0
        out = classify_image(model, np.random.default_rng(0).random((64, 64, 1)))
        assert out.p_yes == 0.5 and out.p_no == 0.5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_probabilities_sum_to_one(self, seed):
        model = build_classifier(SMALL)
        img = np.random.default_rng(seed).random((64, 64, 1)) * 2
        out = classify_image(model, img)
        assert abs(out.p_yes + out.p_no - 1) <= 1e-9
        assert 0 <= out.p_yes <= 1 and 0 <= out.p_no <= 1

    def test_resizes_input(self):
        model = build_classifier(SMALL)
        img = np.full((100, 80, 1), 0.3)
        assert classify_image(model, img) == classify_image(model, np.full((64, 64, 1), 0.3))

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.05, 20.0), st.integers(0, 1000))
    def test_output_scale_preserves_decision(self, scale, seed):
        model = build_classifier(SMALL, seed=seed % 7)
        x = np.random.default_rng(seed).random((4, 64, 64, 1)).astype(np.float32)
        before = model.predict_proba(x).argmax(axis=1)
        last = len(model.head.specs) - 1
        model.head.params[f"head.layer{last}.weight"].data *= np.float32(scale)
        model.head.params[f"head.layer{last}.bias"].data *= np.float32(scale)
        assert np.array_equal(model.predict_proba(x).argmax(axis=1), before)


class TestTraining:
    def test_pretext_zero_epochs(self):
        model = build_classifier(SMALL, 3)
        init = {k: v.copy() for k, v in model.backbone.state_dict().items()}
        x = np.zeros((3, 64, 64, 1), np.float32)
        res = pretrain_pretext(model, (x, np.arange(3)), (x, np.arange(3)), SMALL, epochs=0)
        assert params_equal(res.backbone_state, init)

    def test_frozen_zero_epochs_baseline(self):
        cfg = ClassifierConfig(epochs=0, freeze_backbone=True, seed=5)
        x, y = phantoms(4, 1)
        model = build_classifier(cfg)
        res = finetune(model, None, (x, y), (x, y), cfg)
        assert res.log.records == []
        assert res.baseline_accuracy == model.accuracy(x, y)

    def test_frozen_backbone_unchanged(self):
        cfg = ClassifierConfig(epochs=1, batch_size=4, freeze_backbone=True, seed=5)
        x, y = phantoms(4, 1)
        model = build_classifier(cfg)
        before = {k: v.copy() for k, v in model.backbone.state_dict().items()}
        finetune(model, None, (x, y), (x, y), cfg)
        assert params_equal(model.backbone.state_dict(), before)

    def test_deterministic_log(self):
        x, y = phantoms(6, 2)
        runs = [finetune(build_classifier(SMALL), None, (x, y), (x, y), SMALL) for _ in range(2)]
        assert runs[0].log.records == runs[1].log.records
        assert params_equal(runs[0].best_state, runs[1].best_state)

    def test_incompatible_backbone(self):
        other = build_classifier(ClassifierConfig(widths=(8, 16, 32, 48)))
        x, y = phantoms(2, 1)
        with pytest.raises(LoadError):
            finetune(build_classifier(SMALL), other.backbone.state_dict(), (x, y), (x, y), SMALL)

    def test_checkpoint_roundtrip(self, tmp_path):
        model = build_classifier(SMALL)
        save_classifier(tmp_path / "c.ckpt", model, SMALL)
        back = load_classifier(load_checkpoint(tmp_path / "c.ckpt"))
        x = np.random.default_rng(0).random((3, 64, 64, 1)).astype(np.float32)
        np.testing.assert_array_equal(back.predict_logits(x), model.predict_logits(x))


@pytest.fixture(scope="module")
def trained_backbone():
    x, y = phantoms(100, 1)
    cfg = ClassifierConfig(augment=False, l2=0.0, epochs=25, learning_rate=1e-3, seed=3)
    res = finetune(build_classifier(cfg), None, (x[::2], y[::2]), (x[1::2], y[1::2]), cfg)
    return res.model.backbone.state_dict()


def test_memorization(trained_backbone):
    """Fresh head on learned features: full-set loss falls every epoch to < 0.05.

    Lesions are drawn large so every positive in the 16-image set is unambiguous.
    """
    x, y = phantoms(8, 2, lesion_diameter_frac=(0.10, 0.15))
    losses = []
    for k in range(1, 6):
        cfg = ClassifierConfig(dropout=0.0, augment=False, l2=0.0, epochs=k, batch_size=1,
                               learning_rate=2e-3, freeze_backbone=True, seed=3)
        model = finetune(build_classifier(cfg), trained_backbone, (x, y), (x, y), cfg).model
        p = model.predict_proba(x)
        losses.append(float(-np.mean(np.log(p[np.arange(len(y)), y]))))
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses
    assert losses[-1] < 0.05, losses


class TestRunLog:
    def test_csv_roundtrip(self, tmp_path):
        log = TrainRunLog("m", 1234, 7)
        log.add(1, 0.5, 0.6)
        log.add(2, 0.4, 0.7)
        log.write_csv(tmp_path / "log.csv")
        back = TrainRunLog.read_csv(tmp_path / "log.csv")
        assert (back.name, back.param_count, back.seed) == ("m", 1234, 7)
        assert back.val_accuracies == [0.6, 0.7]

    def test_epochs_increase(self):
        log = TrainRunLog()
        log.add(1, 0.5, 0.5)
        with pytest.raises(InputError):
            log.add(1, 0.5, 0.5)


def constant_log(name, acc, params, epochs=20):
    log = TrainRunLog(name, params)
    for e in range(1, epochs + 1):
        log.add(e, 0.0, acc)
    return log


class TestRanking:
    def test_reference_table_order(self, tmp_path):
        rng = np.random.default_rng(0)
        table = ranking_table()
        logs = []
        for _, name, params, score in table[::-1]:
            log = TrainRunLog(name, params)
            for e, acc in enumerate(curve_with_tail_mean(rng, score / 100), start=1):
                log.add(e, 0.0, acc)
            logs.append(log)
        rows = rank_models(logs)
        assert [r.model for r in rows] == [name for _, name, _, _ in table]
        for r, (rank, _, _, score) in zip(rows, table):
            assert r.rank == rank and 100 * r.score == pytest.approx(score, abs=1e-9)
        text = format_ranking(rows)
        assert "91.63" in text.splitlines()[1]
        write_ranking_csv(rows, tmp_path / "rank.csv")
        assert (tmp_path / "rank.csv").read_text().splitlines()[0] == "rank,model,param_count,score"

    def test_two_constant_curves(self):
        rows = rank_models([constant_log("InceptionResNet", 0.8436, 55.2), constant_log("MobileNet", 0.9163, 3.0)])
        assert [r.model for r in rows] == ["MobileNet", "InceptionResNet"]

    def test_tie_by_params_then_name(self):
        rows = rank_models([constant_log("b", 0.8, 10), constant_log("a", 0.8, 10), constant_log("c", 0.8, 5)])
        assert [r.model for r in rows] == ["c", "a", "b"]

    def test_oscillating_mean(self):
        log = TrainRunLog("osc", 1)
        for e in range(1, 31):
            log.add(e, 0.0, 0.8 if e % 2 else 0.9)
        assert rank_models([log])[0].score == pytest.approx(0.85, abs=1e-12)

    def test_short_log_named(self):
        with pytest.raises(InputError, match="short"):
            rank_models([constant_log("short", 0.9, 1, epochs=19)])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(1, 5)), min_size=1, max_size=8))
    def test_permutation(self, specs):
        logs = [constant_log(f"m{i}", acc, p) for i, (acc, p) in enumerate(specs)]
        rows = rank_models(logs)
        assert sorted(r.model for r in rows) == sorted(l.name for l in logs)
        assert [r.rank for r in rows] == list(range(1, len(logs) + 1))
