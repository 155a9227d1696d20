import numpy as np
import pytest

from lantern.evaluation import (
    DEFAULT_GRID,
    ablation_suite,
    evaluate,
    gate_histogram,
    masked_confusion,
    precision_recall_f1,
    segment_eval,
    threshold_sweep,
)
from lantern.synth import GeneratorConfig, generate_dataset
from lantern.training import TrainConfig, model_config_for


def _random_instance(seed, n=40, d=12):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, d)), rng.choice([-1, 0, 1], size=(n, d))


# ---------------------------------------------------------------------------
# confusion and metrics


def test_confusion_hand_checks():
    assert masked_confusion(np.array([[0.9, 0.2]]), np.array([[1, -1]]), 0.5) == (1, 0, 0)
    assert masked_confusion(np.array([[0.6, 0.6, 0.4, 0.4]]), np.array([[1, -1, 1, -1]]), 0.5) == (1, 1, 1)


def test_confusion_all_unasked():
    assert masked_confusion(np.full((3, 4), 0.9), np.zeros((3, 4), dtype=int)) == (0, 0, 0)


def test_confusion_threshold_is_inclusive():
    assert masked_confusion(np.array([[0.5]]), np.array([[1]]), 0.5) == (1, 0, 0)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.2])
def test_confusion_rejects_threshold(t):
    with pytest.raises(ValueError, match="threshold"):
        masked_confusion(np.array([[0.5]]), np.array([[1]]), t)


def test_confusion_rejects_invalid_mask():
    with pytest.raises(ValueError, match="mask"):
        masked_confusion(np.array([[0.5]]), np.array([[3]]))


def test_metric_closed_forms():
    r = precision_recall_f1(2, 1, 2)
    assert (r.precision, r.recall) == (2 / 3, 1 / 2)
    assert abs(r.f1 - 4 / 7) < 1e-15
    perfect = precision_recall_f1(5, 0, 0)
    assert (perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0)
    empty = precision_recall_f1(0, 0, 5)
    assert (empty.precision, empty.recall, empty.f1) == (0.0, 0.0, 0.0)


def test_metric_rejects_negative_counts():
    with pytest.raises(ValueError):
        precision_recall_f1(-1, 0, 0)


@pytest.mark.parametrize("seed", range(10))
def test_f1_definitional_identity(seed):
    y, m = _random_instance(seed)
    r = evaluate(y, m, 0.4)
    assert 0.0 <= r.precision <= 1.0 and 0.0 <= r.recall <= 1.0 and 0.0 <= r.f1 <= 1.0
    assert abs(r.f1 * (r.precision + r.recall) - 2 * r.precision * r.recall) <= 1e-12
    assert r.n_scored == int((m != 0).sum())
    assert r.tp + r.fn == int((m == 1).sum())


def test_metrics_ignore_unasked_predictions():
    y, m = _random_instance(3)
    y2 = y.copy()
    y2[m == 0] = np.random.default_rng(9).uniform(size=int((m == 0).sum()))
    for averaging in ("micro", "macro"):
        assert evaluate(y, m, averaging=averaging) == evaluate(y2, m, averaging=averaging)
    assert threshold_sweep(y, m).to_csv() == threshold_sweep(y2, m).to_csv()


def test_macro_averages_per_key():
    y = np.array([[0.9, 0.9], [0.1, 0.9], [0.9, 0.1]])
    m = np.array([[1, -1], [1, 1], [0, 1]])
    # key 0: tp=1 fn=1 -> P=1, R=1/2 ; key 1: tp=1 fp=1 fn=1 -> P=R=1/2
    r = evaluate(y, m, averaging="macro")
    assert abs(r.precision - 0.75) < 1e-15 and abs(r.recall - 0.5) < 1e-15
    assert abs(r.f1 - (2 / 3 + 1 / 2) / 2) < 1e-15
    assert (r.tp, r.fp, r.fn) == (2, 1, 2)
    with pytest.raises(ValueError, match="averaging"):
        evaluate(y, m, averaging="weighted")


# ---------------------------------------------------------------------------
# threshold sweep


def test_sweep_hand_check():
    sweep = threshold_sweep(np.array([[0.4, 0.6]]), np.array([[1, 1]]))
    assert sweep.thresholds == [0.3, 0.5, 0.7]
    assert [r.recall for _, r in sweep.rows] == [1.0, 0.5, 0.0]


def test_default_grid():
    assert DEFAULT_GRID == (0.3, 0.5, 0.7)


@pytest.mark.parametrize("seed", range(20))
def test_recall_non_increasing_on_random_data(seed):
    y, m = _random_instance(100 + seed)
    grid = [round(0.1 * i, 1) for i in range(1, 10)]
    recalls = [r.recall for _, r in threshold_sweep(y, m, grid).rows]
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


@pytest.mark.parametrize("grid", [(0.5, 0.3), (0.3, 0.3), ()])
def test_sweep_rejects_bad_grid(grid):
    with pytest.raises(ValueError):
        threshold_sweep(np.array([[0.5]]), np.array([[1]]), grid)


def test_sweep_csv():
    csv = threshold_sweep(np.array([[0.4, 0.6]]), np.array([[1, -1]])).to_csv().splitlines()
    assert csv[0] == "threshold,precision,recall,f1"
    assert csv[1] == "0.3,0.5,1.0,0.6666666666666666"
    assert len(csv) == 4


# ---------------------------------------------------------------------------
# segments


def test_partition_counts_add_up():
    y, m = _random_instance(4)
    rare, frequent = range(5), range(5, 12)
    seg = segment_eval(y, m, rare, frequent)
    total = evaluate(y, m)
    assert seg.rare.tp + seg.frequent.tp == total.tp
    assert seg.rare.fp + seg.frequent.fp == total.fp
    assert seg.rare.fn + seg.frequent.fn == total.fn
    assert seg.rare.n_scored + seg.frequent.n_scored == total.n_scored


def test_empty_rare_bucket():
    y, m = _random_instance(5)
    seg = segment_eval(y, m, [], range(12))
    assert (seg.rare.tp, seg.rare.fp, seg.rare.fn) == (0, 0, 0)
    assert seg.rare.f1 == 0.0


def test_overlapping_buckets():
    y, m = _random_instance(6)
    with pytest.raises(ValueError, match="overlap"):
        segment_eval(y, m, [0, 1, 2], [2, 3])


def test_segment_csv():
    y, m = _random_instance(7)
    lines = segment_eval(y, m, [0], [1]).to_csv().splitlines()
    assert lines[0] == "bucket,precision,recall,f1"
    assert [l.split(",")[0] for l in lines[1:]] == ["rare", "frequent"]


# ---------------------------------------------------------------------------
# gate histogram


def test_histogram_single_bin():
    h = gate_histogram(np.full(10, 0.5), n_bins=2)
    assert sorted(h.counts.tolist()) == [0, 10]
    assert h.mean == 0.5 and h.frac_low == 0.0 and h.frac_high == 0.0


def test_histogram_counts_and_tails():
    g = np.random.default_rng(0).uniform(0.001, 0.999, size=(37, 8))
    h = gate_histogram(g)
    assert h.total == g.size and len(h.counts) == 50
    assert h.frac_low == float((g < 0.1).mean())
    lines = h.to_csv().splitlines()
    assert lines[0] == "bin_left,bin_right,count" and len(lines) == 51
    assert sum(int(l.split(",")[2]) for l in lines[1:]) == g.size


@pytest.mark.parametrize("bad", [[0.0], [1.0], [0.5, 1.2], [np.nan]])
def test_histogram_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        gate_histogram(bad)


def test_histogram_needs_two_bins():
    with pytest.raises(ValueError):
        gate_histogram([0.5], n_bins=1)


# ---------------------------------------------------------------------------
# ablation


def test_ablation_shape():
    manifest, records = generate_dataset(GeneratorConfig(n_users=300, n_keys=20, seed=1))
    res = ablation_suite((manifest, records), model_config_for(manifest, d_embed=8, d_proj=16, n_tokens=2, d_ffn=16),
                         TrainConfig(epochs=1, steps_per_epoch=5, validation_steps=1))
    assert list(res.reports) == ["survey_only", "external_only", "fused"]
    lines = res.to_csv().splitlines()
    assert lines[0] == "variant,precision,recall,f1" and len(lines) == 4
    assert len(res.eval_idx) == 30


def test_noise_externals_do_not_hurt_fused():
    manifest, records = generate_dataset(GeneratorConfig(external_informative_fraction=0.0, seed=0))
    res = ablation_suite((manifest, records), model_config_for(manifest), TrainConfig(), variants=("survey_only", "fused"))
    assert abs(res.reports["fused"].f1 - res.reports["survey_only"].f1) <= 0.02
