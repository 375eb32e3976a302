"""Smoke test for the tclab extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run with `python python/smoke_test.py` or `pytest python/`.
"""

import json
import math
import tempfile
from pathlib import Path

import tclab


def small_dataset():
    return tclab.synthetic_dataset(num_classes=3, flows_per_class=30, seed=3)


def test_series_and_flowpic():
    s = tclab.PacketSeries([10.0, 10.5, 12.0], [100, 1600, 40])
    assert s.timestamps == [0.0, 0.5, 2.0]
    assert s.sizes == [100, 1500, 40]
    hist = tclab.build_flowpic(s, resolution=32, window=15.0)
    assert len(hist) == 32 and sum(map(sum, hist)) == 3
    img = tclab.flowpic_image(s, resolution=32, normalization="unit_max")
    assert max(map(max, img)) == 1.0
    stretched = tclab.augment_series(s, "change_rtt", seed=1)
    assert len(stretched) == len(s)
    shifted = tclab.augment_series(s, "time_shift", seed=1)
    assert len(shifted) <= len(s)


def test_bad_input_raises_value_error():
    for call in (
        lambda: tclab.PacketSeries([1.0, 0.5], [10, 10]),
        lambda: tclab.augment_series(tclab.PacketSeries([0.0], [1]), "warp"),
        lambda: tclab.nemenyi_cd(1, 10),
    ):
        try:
            call()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")


def test_dataset_roundtrip_and_folds():
    ds = small_dataset()
    assert len(ds) == 90 and len(ds.labels()) == 3
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.jsonl"
        ds.save(str(path))
        again = tclab.Dataset.load(str(path))
        assert again.flow_ids() == ds.flow_ids()
    folds = tclab.make_fewshot_folds(ds, k=2, per_class=5, seed=0)
    assert len(folds) == 2
    assert len(folds[0]["train_ids"]) == 15
    assert len(folds[0]["test_ids"]) == 75
    assert ds.filter_min_class_size(31).labels() == []


def test_training_and_baseline():
    ds = small_dataset()
    fold = tclab.make_fewshot_folds(ds, k=1, per_class=10, seed=0)[0]
    (train, val), = tclab.make_train_val(ds, fold["train_ids"], s=1, ratio=0.8)
    net = tclab.train_supervised(ds, train, val, augmentation="rotate", times=2, max_epochs=3)
    assert net.mode == "supervised" and net.param_count() > 0
    assert len(net.history) >= 1
    m = net.evaluate(ds, fold["test_ids"])
    assert 0.0 <= m.accuracy <= 1.0
    assert sum(map(sum, m.confusion)) == len(fold["test_ids"])

    pre = tclab.pretrain_simclr(ds, fold["train_ids"], max_epochs=1, batch_size=8)
    ft = tclab.finetune(pre, ds, fold["train_ids"], max_epochs=3)
    assert ft.trainable_param_count() < ft.param_count()
    assert len(ft.predict(ds, fold["test_ids"])) == len(fold["test_ids"])

    booster = tclab.fit_boost(ds, fold["train_ids"], rounds=10, max_depth=3)
    assert booster.evaluate(ds, fold["train_ids"]).accuracy == 1.0
    json.loads(booster.to_json())


def test_stats():
    m = tclab.compute_metrics([0, 1, 1], [0, 1, 0], 2)
    assert abs(m.accuracy - 2 / 3) < 1e-12
    ranks = tclab.rank_methods(["a", "b"], [[0.9, 0.8, 0.7], [0.5, 0.6, 0.8]])
    assert ranks == [4 / 3, 5 / 3]
    assert abs(tclab.nemenyi_cd(7, 15) - 2.326) < 0.01
    mean, half = tclab.t_confidence_interval([1.0, 2.0, 3.0])
    assert mean == 2.0 and abs(half - 2.4841) < 1e-3
    pairs = tclab.tukey_hsd([[1, 2, 3], [1, 2, 3], [10, 11, 12]])
    assert len(pairs) == 3 and pairs[-1][4]
    chi2, p = tclab.friedman(["a", "b"], [[1, 2, 3, 4], [0, 1, 2, 3]])
    assert chi2 > 0 and 0 <= p <= 1 and not math.isnan(p)


def test_campaign():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        small_dataset().save(str(tmp / "data.jsonl"))
        grid = tmp / "grid.toml"
        grid.write_text(
            'name = "py"\n'
            'dataset = "data.jsonl"\n'
            'methods = ["boost_baseline"]\n'
            'split = { scheme = "fewshot_folds", k = 2, per_class = 5 }\n'
            "splits_per_fold = 1\n"
            "boost = { n_rounds = 5 }\n"
        )
        assert tclab.plan_campaign(str(grid)) == ["e00000", "e00001"]
        done, failed = tclab.run_campaign(str(grid), str(tmp / "out"), workers=2)
        assert (done, failed) == (2, 0)
        assert (tmp / "out" / "report" / "summary.md").exists()


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
