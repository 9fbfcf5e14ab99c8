import math

import numpy as np
import pytest

from relchain.autodiff import Tensor
from relchain.kb import NUM_TARGETS, RELATION_INDEX
from relchain.story import DatasetSplit, save_dataset
from relchain.train import (
    EmptySplitError,
    EpochRecord,
    EvalReport,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_model,
    loss_and_accuracy,
    order_sensitivity,
    permuted_instances,
    predict,
    read_log,
    results_table,
    select_epoch,
    sweep,
    train,
)

FAST = dict(emb_dim=12, hidden=12, batch_size=32, max_epochs=3, patience=5)


def cfg(**kw):
    return TrainConfig(**{**FAST, **kw})


class Oracle:
    """Stand-in model that scores the gold label (or noise) highest."""

    def __init__(self, rng=None):
        self.rng = rng

    def batch(self, instances):
        return [RELATION_INDEX[i.target] for i in instances]

    def logits(self, batch):
        if self.rng is not None:
            return Tensor(self.rng.random((len(batch), NUM_TARGETS)))
        return Tensor(np.eye(NUM_TARGETS)[batch])


class TestTrain:
    def test_deterministic(self, tiny_split):
        a = train(cfg(variant="gru"), tiny_split)
        b = train(cfg(variant="gru"), tiny_split)
        assert [r.line() for r in a.history] == [r.line() for r in b.history]
        for name, value in a.model.state_dict().items():
            assert value.tobytes() == b.model.state_dict()[name].tobytes()

    def test_deterministic_graph_model(self, tiny_split):
        a = train(cfg(family="egnn", variant="gat", layers=2, max_epochs=2), tiny_split)
        b = train(cfg(family="egnn", variant="gat", layers=2, max_epochs=2), tiny_split)
        assert all(np.array_equal(v, b.model.state_dict()[k]) for k, v in a.model.state_dict().items())

    def test_seed_changes_result(self, tiny_split):
        a = train(cfg(max_epochs=1), tiny_split)
        b = train(cfg(max_epochs=1, seed=1), tiny_split)
        assert not np.array_equal(a.model.embedding.data, b.model.embedding.data)

    def test_patience_zero_runs_one_epoch(self, tiny_split):
        assert len(train(cfg(patience=0, max_epochs=50), tiny_split).history) == 1

    def test_early_stopping(self, tiny_split):
        result = train(cfg(variant="boe", patience=2, max_epochs=60, lr=0.05), tiny_split)
        assert len(result.history) < 60
        assert len(result.history) - result.best_epoch == 2

    def test_retained_epoch_matches_selection_replay(self, tiny_split, tmp_path):
        for selection in ("max-val-acc", "min-val-loss"):
            result = train(cfg(variant="rnn", max_epochs=6, selection=selection), tiny_split, tmp_path / selection)
            assert result.best_epoch == select_epoch(result.history, selection)
            logged = read_log(tmp_path / selection / "train_log.tsv")
            assert select_epoch(logged, selection) == result.best_epoch
            loss, acc = loss_and_accuracy(result.model, tiny_split.valid)
            assert acc == result.best.val_acc and math.isclose(loss, result.best.val_loss, rel_tol=1e-9)
            reloaded, config = load_model(tmp_path / selection / "model.ckpt")
            assert config == result.config
            assert np.array_equal(predict(reloaded, tiny_split.valid), predict(result.model, tiny_split.valid))

    def test_select_epoch_earliest_wins_ties(self):
        hist = [EpochRecord(1, 1.0, 0.9, 0.5), EpochRecord(2, 0.8, 0.7, 0.6), EpochRecord(3, 0.7, 0.8, 0.6)]
        assert select_epoch(hist, "max-val-acc") == 2
        assert select_epoch(hist, "min-val-loss") == 2
        hist.append(EpochRecord(4, 0.6, 0.6, 0.55))
        assert select_epoch(hist, "min-val-loss") == 4

    def test_overfits_small_set(self, tiny_split):
        small = list(tiny_split.train[:50])
        split = DatasetSplit(small, small, tiny_split.test)
        result = train(cfg(variant="gru", emb_dim=32, hidden=32, lr=0.01, batch_size=10,
                           max_epochs=200, patience=200, slot_shuffle=False), split)
        assert loss_and_accuracy(result.model, small)[1] >= 0.98
        assert len(result.history) <= 200

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_is_diagnosed(self, tiny_split):
        with pytest.raises(TrainingDiverged, match=r"epoch \d+, batch \d+; parameter norms: embedding="):
            train(cfg(variant="boe", optimizer="sgd", lr=1e200, clip_norm=0.0, max_epochs=3), tiny_split)

    def test_empty_split(self, tiny_split):
        with pytest.raises(EmptySplitError):
            train(cfg(), DatasetSplit(tiny_split.train, [], tiny_split.test))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(family="egnn", variant="gru")
        with pytest.raises(ValueError):
            TrainConfig(selection="best")


class TestConfig:
    def test_fingerprint_ignores_dataset_path(self):
        assert cfg(dataset="a").fingerprint() == cfg(dataset="b").fingerprint()
        assert cfg(seed=1).fingerprint() != cfg(seed=2).fingerprint()
        assert len(cfg().fingerprint()) == 12

    def test_slot_shuffle_default_per_family(self):
        assert TrainConfig(family="lgraph").shuffles_slots
        assert not TrainConfig(family="egnn", variant="gcn").shuffles_slots
        assert not TrainConfig(slot_shuffle=False).shuffles_slots


class TestEvaluate:
    def test_all_correct(self, tiny_split):
        report = evaluate(Oracle(), tiny_split.test)
        assert report.per_k_accuracy == {2: 1.0, 3: 1.0, 4: 1.0}
        assert report.mean_test_accuracy == 1.0
        assert report.counts == {2: 30, 3: 30, 4: 30}

    def test_random_predictor_near_chance(self, tiny_split):
        inst = list(tiny_split.test[2]) * 40
        report = evaluate(Oracle(np.random.default_rng(0)), {2: inst})
        n, p = len(inst), 1 / NUM_TARGETS
        assert abs(report.per_k_accuracy[2] - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_mean(self):
        assert EvalReport({2: 1.0, 3: 0.5}).mean_test_accuracy == 0.75

    def test_no_side_effects(self, tiny_split):
        model = train(cfg(max_epochs=1), tiny_split).model
        before = model.state_dict()
        first = evaluate(model, tiny_split.test)
        second = evaluate(model, tiny_split.test)
        assert first.per_k_accuracy == second.per_k_accuracy
        assert all(np.array_equal(v, model.state_dict()[k]) for k, v in before.items())

    def test_empty(self, tiny_split):
        with pytest.raises(EmptySplitError):
            evaluate(Oracle(), {})
        with pytest.raises(EmptySplitError):
            evaluate(Oracle(), {2: []})

    def test_report_serialises(self):
        d = EvalReport({2: 1.0, 3: 0.5}, "abc").to_dict()
        assert d["per_k_accuracy"] == {"2": 1.0, "3": 0.5} and d["mean_test_accuracy"] == 0.75


class TestOrderSensitivity:
    def test_permutation_keeps_fact_set(self, tiny_split):
        inst = list(tiny_split.test[4])
        moved = permuted_instances(inst, seed=3)
        for a, b in zip(inst, moved):
            assert sorted(a.facts, key=str) == sorted(b.facts, key=str)
            assert a.facts != b.facts
            assert (a.query, a.target) == (b.query, b.target)

    def test_bag_model_is_insensitive(self, tiny_split):
        model = train(cfg(variant="boe", max_epochs=2), tiny_split).model
        assert order_sensitivity(model, list(tiny_split.test[3]), permutations=3) == 0.0


class TestSweep:
    def test_two_configs_and_a_failure(self, tiny_split, tmp_path):
        configs = [cfg(variant="gru", max_epochs=1), cfg(family="egnn", variant="gcn", layers=1, max_epochs=1),
                   cfg(variant="mha", emb_dim=9, max_epochs=1)]
        rows = sweep(configs, tiny_split, tmp_path)
        assert [r.name for r in rows] == ["egnn_gcn", "lgraph_gru", "lgraph_mha"]
        assert [r.status for r in rows][:2] == ["ok", "ok"]
        assert rows[2].status.startswith("error:") and rows[2].report is None
        table = (tmp_path / "results.tsv").read_text()
        lines = table.splitlines()
        assert lines[0].split("\t") == ["name", "fingerprint", "k2", "k3", "k4", "mean", "best_epoch", "status"]
        assert len(lines) == 4
        assert (tmp_path / "curves" / f"lgraph_gru-{configs[0].fingerprint()}.tsv").exists()

    def test_deterministic_table(self, tiny_split):
        configs = [cfg(variant="rnn", max_epochs=1), cfg(variant="boe", max_epochs=1)]
        assert results_table(sweep(configs, tiny_split)) == results_table(sweep(configs, tiny_split))

    def test_parallel_matches_serial(self, tiny_split, tmp_path):
        save_dataset(tiny_split, tmp_path / "data")
        configs = [cfg(variant=v, max_epochs=1, dataset=str(tmp_path / "data")) for v in ("rnn", "cnn")]
        assert results_table(sweep(configs, jobs=2)) == results_table(sweep(configs, jobs=1))

    def test_missing_dataset_recorded(self, tmp_path):
        rows = sweep([cfg(dataset=str(tmp_path / "nowhere"))])
        assert rows[0].status.startswith("error:")
