import random

import pytest

from msda.config import MixingConfig, RunConfig, TrainConfig
from msda.encoders import EncoderConfig
from msda.evaluation import (
    ConfusionCounts,
    EvaluationError,
    accuracy,
    f1,
    loo_run,
    render_table,
    threshold_predict,
    write_report,
)
from msda.synth import synthetic_bundle


class TestCounts:
    def test_from_pairs_and_total(self):
        counts = ConfusionCounts.from_pairs([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
        assert counts == ConfusionCounts(tp=2, fp=1, tn=1, fn=1)
        assert counts.total == 5

    def test_negative_rejected(self):
        with pytest.raises(EvaluationError):
            ConfusionCounts(tp=-1)

    def test_addition_pools_counts(self):
        a = ConfusionCounts(1, 2, 3, 4)
        b = ConfusionCounts(5, 6, 7, 8)
        assert a + b == ConfusionCounts(6, 8, 10, 12)


class TestMetrics:
    def test_accuracy_forced_values(self):
        assert accuracy(ConfusionCounts(3, 1, 2, 4)) == 0.5
        assert accuracy(ConfusionCounts(5, 0, 5, 0)) == 1.0
        assert accuracy(ConfusionCounts(0, 5, 0, 5)) == 0.0

    def test_accuracy_of_nothing_rejected(self):
        with pytest.raises(EvaluationError):
            accuracy(ConfusionCounts())

    def test_f1_forced_value(self):
        counts = ConfusionCounts(tp=3, fp=1, tn=0, fn=4)
        assert f1(counts) == pytest.approx(18 / 33)

    def test_f1_degenerate_conventions(self):
        assert f1(ConfusionCounts(tp=0, fp=3, tn=1, fn=2)) == 0.0
        assert f1(ConfusionCounts(tp=0, fp=0, tn=5, fn=0)) == 0.0
        assert f1(ConfusionCounts(tp=7, fp=0, tn=1, fn=0)) == 1.0

    def test_threshold_convention(self):
        assert threshold_predict(0.7) == 1
        assert threshold_predict(0.5) == 1
        assert threshold_predict(0.49) == 0
        with pytest.raises(EvaluationError):
            threshold_predict(1.2)

    def test_metrics_match_bruteforce_recount_exactly(self):
        rng = random.Random(0)
        for _ in range(200):
            n = rng.randint(1, 30)
            preds = [rng.randint(0, 1) for _ in range(n)]
            labels = [rng.randint(0, 1) for _ in range(n)]
            counts = ConfusionCounts.from_pairs(preds, labels)
            # independent recount
            tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
            fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
            tn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 0)
            fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)
            assert (counts.tp, counts.fp, counts.tn, counts.fn) == (tp, fp, tn, fn)
            assert accuracy(counts) == (tp + tn) / n
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            expected_f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            assert f1(counts) == expected_f1


def loo_rc(**overrides) -> RunConfig:
    return RunConfig(
        variant=overrides.pop("variant", "Basic"),
        encoder=EncoderConfig(dim=16, num_layers=1, vocab_hash_size=256, seed=0),
        train=TrainConfig(
            learning_rate=3e-3, epochs=2, warmup_steps=5, batch_size=8, val_fraction=0.2
        ),
        mixing=MixingConfig(finetune_trials=8),
        **overrides,
    )


@pytest.fixture(scope="module")
def small_bundle():
    return synthetic_bundle(domains=("a", "b", "c"), examples_per_domain=40, seed=0)


class TestLooHarness:
    def test_structure_and_aggregates(self, small_bundle):
        result = loo_run("Basic", small_bundle, loo_rc(), seeds=[0, 1])
        assert [r.held_out for r in result.reports] == ["a", "b", "c"]
        assert all(len(r.per_seed) == 2 for r in result.reports)
        accs = [r.accuracy for r in result.reports]
        assert result.macro_accuracy == pytest.approx(sum(accs) / 3)
        assert len(result.micro_f1_per_seed) == 2
        assert result.micro_f1 == pytest.approx(sum(result.micro_f1_per_seed) / 2)
        assert "macroA" in result.table and "Basic" in result.table

    def test_micro_f1_rederives_from_pooled_counts(self, small_bundle):
        result = loo_run("Basic", small_bundle, loo_rc(), seeds=[0])
        pooled = ConfusionCounts()
        for report in result.reports:
            pooled = pooled + ConfusionCounts(**report.per_seed[0]["counts"])
        assert pooled == result.pooled_counts_per_seed[0]
        assert f1(pooled) == result.micro_f1_per_seed[0]
        total = sum(len(small_bundle.sources[d]) for d in small_bundle.domains)
        assert pooled.total == total

    def test_rerun_reproduces_reports_exactly(self, small_bundle):
        one = loo_run("Basic", small_bundle, loo_rc(), seeds=[0])
        two = loo_run("Basic", small_bundle, loo_rc(), seeds=[0])
        assert one.to_dict() == two.to_dict()

    def test_failed_cell_is_flagged_and_others_proceed(self, small_bundle, monkeypatch):
        import msda.training as training_mod

        real_train = training_mod.train

        def flaky_train(variant, bundle, config, seed=None):
            if "b" not in bundle.domains:  # the cell holding out "b"
                raise RuntimeError("injected failure")
            return real_train(variant, bundle, config, seed=seed)

        monkeypatch.setattr(training_mod, "train", flaky_train)
        result = loo_run("Basic", small_bundle, loo_rc(), seeds=[0])
        by_domain = {r.held_out: r for r in result.reports}
        assert by_domain["b"].failed
        assert "injected failure" in by_domain["b"].error
        assert not by_domain["a"].failed and not by_domain["c"].failed
        assert result.any_failed
        assert result.macro_accuracy == pytest.approx(
            (by_domain["a"].accuracy + by_domain["c"].accuracy) / 2
        )
        assert "failed" in result.table

    def test_requires_seeds_and_domains(self, small_bundle):
        with pytest.raises(EvaluationError):
            loo_run("Basic", small_bundle, loo_rc(), seeds=[])

    def test_report_files_round_trip(self, small_bundle, tmp_path):
        result = loo_run("Basic", small_bundle, loo_rc(), seeds=[0])
        json_path, txt_path = write_report(result, tmp_path, loo_rc().to_dict())
        import json as json_mod

        payload = json_mod.loads(json_path.read_text())
        assert payload["aggregate"]["macro_accuracy"] == result.macro_accuracy
        assert txt_path.read_text() == result.table

    def test_table_layout_one_column_per_domain_plus_aggregates(self):
        from msda.evaluation import RunReport

        reports = [
            RunReport(held_out="books", seeds=(0,), accuracy=0.893, f1=0.9),
            RunReport(held_out="dvd", seeds=(0,), accuracy=0.899, f1=0.91),
        ]
        table = render_table("MoE-Avg", reports, 0.896, 0.641)
        header, row = table.strip().split("\n")
        assert header.split() == ["Method", "books", "dvd", "macroA", "uF1"]
        assert row.split() == ["MoE-Avg", "89.3", "89.9", "89.6", "64.1"]
