import importlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps
from sklearn.metrics import silhouette_score

from gslab.analysis import report as R
from gslab.analysis import stats as S
from gslab.analysis.embed import export_embeddings, penultimate
from gslab.data import generate_glyphs
from gslab.numerics.resnet import MicroResNet, ModelConfig
from gslab import augment as A

# the package re-exports the tsne function under the module's name
TS = importlib.import_module("gslab.analysis.tsne")


# -- paired t-test ------------------------------------------------------------------------

def test_t_test_df2_closed_form():
    t, p = S.paired_t_test([1, 2, 3], [0, 0, 0])
    assert t == pytest.approx(2 * math.sqrt(3), abs=1e-12)
    cdf = 0.5 + t / (2 * math.sqrt(t * t + 2))
    assert p == pytest.approx(2 * (1 - cdf), abs=1e-12)
    assert p == pytest.approx(0.0742, abs=5e-5)


def test_t_test_degenerate_cases():
    assert S.paired_t_test([0.5, 0.6], [0.5, 0.6]) == (0.0, 1.0)
    t, p = S.paired_t_test([0.6, 0.7], [0.5, 0.6])
    assert t == math.inf and p == 0.0
    t, p = S.paired_t_test([0.4, 0.5], [0.5, 0.6])
    assert t == -math.inf and p == 0.0
    with pytest.raises(ValueError):
        S.paired_t_test([1.0], [0.0])
    with pytest.raises(ValueError):
        S.paired_t_test([1.0, 2.0], [0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=12))
def test_t_test_matches_scipy_and_is_antisymmetric(pairs):
    xs, ys = map(np.array, zip(*pairs))
    t, p = S.paired_t_test(xs, ys)
    t2, p2 = S.paired_t_test(ys, xs)
    assert t2 == -t and p2 == p
    d = xs - ys
    if d.std(ddof=1) > 1e-6:
        ref = sps.ttest_rel(xs, ys)
        assert t == pytest.approx(ref.statistic, rel=1e-9)
        assert abs(p - ref.pvalue) < 1e-9


@pytest.mark.parametrize("df", [1, 2, 5, 30])
def test_p_monotone_in_abs_t(df):
    ps = [S.student_t_sf2(t, df) for t in np.linspace(0, 20, 200)]
    assert ps[0] == pytest.approx(1.0)
    assert all(a > b for a, b in zip(ps, ps[1:]))
    assert S.student_t_sf2(math.inf, df) == 0.0


# -- selection ----------------------------------------------------------------------------

def test_mean_strategy_example():
    table = S.AugRunTable()
    for spec, mean in (("a", 0.80), ("b", 0.75), ("c", 0.90)):
        for seed in range(3):
            table.add(spec, seed, mean + 0.01 * (seed - 1))
    assert S.select_top_k(table, "mean", k=2) == ["c", "a"]


def _synthetic_table(rng, n_specs=10, seeds=3):
    table = S.AugRunTable()
    base = rng.uniform(0.7, 0.8, size=seeds)
    for s in range(seeds):
        table.add("randomcrop224", s, base[s])
    for j in range(n_specs - 1):
        shift = rng.normal(0, 0.02)
        for s in range(seeds):
            table.add(f"randomcrop224,op{j}", s, base[s] + shift + rng.normal(0, 0.01))
    return table


def _brute_force(table, k, baseline="randomcrop224"):
    """Independent re-ranking: each eligible spec's rank is the number of
    eligible specs that beat it on (p, name)."""
    ys = table.valid(baseline)
    scores = {}
    for spec in table.specs:
        if spec == baseline:
            continue
        xs = table.valid(spec)
        if np.mean(xs - ys) > 0:
            scores[spec] = (sps.ttest_rel(xs, ys).pvalue, spec)
    rank = {s: sum(other < v for other in scores.values()) for s, v in scores.items()}
    return [s for s, _ in sorted(rank.items(), key=lambda kv: kv[1])][:k]


@pytest.mark.parametrize("seed", range(10))
def test_ttest_selection_matches_brute_force(seed):
    table = _synthetic_table(np.random.default_rng(seed))
    for k in (1, 4, 9):
        assert S.select_top_k(table, "ttest", k) == _brute_force(table, k)


def test_selection_is_insertion_order_invariant():
    table = _synthetic_table(np.random.default_rng(3))
    items = list(table.rows.items())
    expected = {s: S.select_top_k(table, s, 4) for s in ("ttest", "mean")}
    rng = np.random.default_rng(0)
    for _ in range(5):
        shuffled = S.AugRunTable(dict(items[i] for i in rng.permutation(len(items))))
        for s in ("ttest", "mean"):
            assert S.select_top_k(shuffled, s, 4) == expected[s]


def test_selection_errors():
    table = _synthetic_table(np.random.default_rng(0), n_specs=3)
    with pytest.raises(ValueError):
        S.select_top_k(table, "mean", k=4)
    with pytest.raises(ValueError):
        S.select_top_k(table, "mean", k=0)
    with pytest.raises(ValueError):
        S.select_top_k(table, "ttest", k=1, baseline_spec="missing")
    with pytest.raises(ValueError):
        S.select_top_k(table, "median", k=1)


def test_table_from_ledger(tmp_path):
    path = tmp_path / "l.csv"
    path.write_text("aug_spec,seed,method,stage,train_acc,valid_acc,test_acc,wall_time_s\n"
                    "a,0,baseline,train,0.9,0.8,0.7,1.0\n"
                    "a,0,baseline,train,0.9,0.85,0.7,1.0\n"
                    "a,1,triplet,finetune,0.9,0.1,0.7,1.0\n"
                    "b,0,simclr,pretrain,,,,1.0\n")
    table = S.AugRunTable.from_ledger(path, method="baseline")
    assert table.specs == ["a"] and table.valid("a").tolist() == [0.85]
    table.add("b", 1, 0.5)
    with pytest.raises(ValueError):
        table.check_balanced()


# -- t-SNE ----------------------------------------------------------------------------------

def test_affinities_hit_target_perplexity():
    x = np.random.default_rng(0).normal(size=(60, 5))
    p = TS.conditional_affinities(TS.squared_distances(x), 10.0)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(np.diag(p) == 0)
    ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0), axis=1)
    np.testing.assert_allclose(ent, math.log(10.0), atol=1e-4)
    joint = TS.joint_affinities(x, 10.0)
    assert np.allclose(joint, joint.T) and joint.sum() == pytest.approx(1.0, abs=1e-6)


def test_squared_distances_match_scipy():
    from scipy.spatial.distance import cdist

    x = np.random.default_rng(1).normal(size=(20, 4))
    np.testing.assert_allclose(TS.squared_distances(x), cdist(x, x, "sqeuclidean"), atol=1e-12)


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(0, 1, size=(40, 10)), rng.normal(0, 1, size=(40, 10)) + 50.0])
    return x, np.repeat([0, 1], 40)


def test_tsne_properties(blobs):
    x, labels = blobs
    res = TS.tsne(x, TS.TsneConfig(perplexity=10, seed=0))
    assert res.points.shape == (80, 2)
    assert res.final_kl < res.initial_kl
    assert [it for it, _ in res.kl_history] == list(range(0, 1001, 50))
    # 2-means on the layout recovers the blobs
    from scipy.cluster.vq import kmeans2

    _, assign = kmeans2(res.points, 2, seed=0, minit="++")
    assert TS.silhouette(res.points, assign) > 0.5
    assert silhouette_score(res.points, labels) > 0.5
    again = TS.tsne(x, TS.TsneConfig(perplexity=10, seed=0))
    assert np.array_equal(again.points, res.points)


def test_silhouette_matches_sklearn():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(30, 2))
    labels = rng.integers(0, 3, size=30)
    assert TS.silhouette(pts, labels) == pytest.approx(silhouette_score(pts, labels), abs=1e-12)


def test_tsne_errors():
    with pytest.raises(ValueError):
        TS.tsne(np.zeros((30, 2)), TS.TsneConfig(perplexity=10))
    with pytest.raises(ValueError):
        TS.tsne(np.zeros(30))


# -- embeddings and reports -----------------------------------------------------------------

@pytest.fixture(scope="module")
def model_and_data():
    ds = generate_glyphs(class_count=3, per_class=10, side=12)
    cfg = ModelConfig(widths=(2, 3, 4), input_side=8, blocks_per_stage=1, num_classes=3)
    geom = A.Geometry(resize_side=12, crop_side=8, final_side=8, morph_kernel=3, blur_limit=(3, 3))
    return MicroResNet(cfg, seed=0), ds.subset(np.arange(29, -1, -1)), geom


def test_export_embeddings(tmp_path, model_and_data):
    model, ds, geom = model_and_data
    ids, labels, values = export_embeddings(model, ds, 30, 0, tmp_path / "e.csv", geom)
    assert ids.tolist() == list(range(30)) and values.shape == (30, 4)
    assert penultimate(model) == "features"
    back = R.read_embeddings_csv(tmp_path / "e.csv")
    assert np.array_equal(back[0], ids) and np.array_equal(back[1], labels) and np.array_equal(back[2], values)
    a = export_embeddings(model, ds, 10, 5, geometry=geom)
    b = export_embeddings(model, ds, 10, 5, geometry=geom)
    assert np.array_equal(a[0], b[0]) and len(a[0]) == 10
    with pytest.raises(ValueError):
        export_embeddings(model, ds, 31, 0, geometry=geom)


def test_points_csv_and_svg(tmp_path):
    pts = np.array([[0.0, 1.0], [2.0, 3.0], [1.0, 1.0]])
    R.write_points_csv(tmp_path / "p.csv", [3, 4, 5], [0, 1, 1], pts)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "id,label,x,y" and lines[1] == "3,0,0.0,1.0"
    svg = R.scatter_svg(pts, [0, 1, 1])
    assert svg.startswith("<svg") and svg.count("<circle") == 5


def test_report_rows(tmp_path):
    ledger = tmp_path / "l.csv"
    ledger.write_text("aug_spec,seed,method,stage,train_acc,valid_acc,test_acc,wall_time_s\n"
                      "b,0,baseline,train,0.9,0.8,0.7,1\n"
                      "a,0,baseline,train,1.0,0.9,0.8,1\n"
                      "b,1,baseline,train,0.8,0.6,0.5,1\n"
                      "b,0,baseline,train,0.7,0.6,0.5,1\n")
    rows = R.write_report(ledger, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == ",".join(R.REPORT_COLUMNS)
    assert text[1] == "1,b,75.00%,60.00%,50.00%"
    assert text[2] == "2,a,100.00%,90.00%,80.00%"
    assert len(rows) == 2


def test_sample_rows():
    assert R.sample_rows(5, 5, 0).tolist() == [0, 1, 2, 3, 4]
    s = R.sample_rows(100, 10, 3)
    assert np.all(np.diff(s) > 0) and np.array_equal(s, R.sample_rows(100, 10, 3))
    assert len(set(tuple(R.sample_rows(100, 10, k)) for k in range(5))) == 5
