import numpy as np
import pytest

from gslab import augment as A
from gslab import data as D
from gslab.errors import RecordError


@pytest.fixture(scope="module")
def glyphs():
    return D.generate_glyphs(class_count=5, per_class=40, side=32, seed=0)


def test_glyph_counts_and_range(glyphs):
    assert len(glyphs) == 200 and glyphs.images.shape == (200, 32, 32, 3)
    assert np.bincount(glyphs.labels).tolist() == [40] * 5
    assert glyphs.images.min() >= 0.0 and glyphs.images.max() <= 1.0


def test_glyphs_deterministic(glyphs):
    again = D.generate_glyphs(class_count=5, per_class=40, side=32, seed=0)
    assert np.array_equal(again.images, glyphs.images)
    other = D.generate_glyphs(class_count=5, per_class=40, side=32, seed=1)
    assert not np.array_equal(other.images, glyphs.images)
    # per-item streams: a larger set starts with the same images per class
    bigger = D.generate_glyphs(class_count=5, per_class=41, side=32, seed=0)
    assert np.array_equal(bigger.images[:40], glyphs.images[:40])


def test_glyphs_more_classes_than_templates():
    ds = D.generate_glyphs(class_count=26, per_class=2, side=16)
    assert ds.class_count == 26 and len(ds) == 52
    with pytest.raises(ValueError):
        D.generate_glyphs(class_count=1)


def test_glyph_classes_are_separable(glyphs):
    train, _, test = D.split(glyphs, D.SplitSpec(seed=0))
    x_tr = train.images.reshape(len(train), -1)
    x_te = test.images.reshape(len(test), -1)
    centroids = np.stack([x_tr[train.labels == k].mean(0) for k in range(5)])
    pred = np.argmin(((x_te[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == test.labels).mean() > 0.2 + 0.1


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((3, 2, 2, 3)), [0, 1], 2)
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 2, 2, 3)), [0, 2], 2)


def test_image_round_trip(tmp_path, glyphs):
    D.save_image(glyphs.images[0], tmp_path / "a.png")
    back = D.load_image(tmp_path / "a.png").pixels
    assert np.abs(back - glyphs.images[0]).max() <= 0.5 / 255 + 1e-12


def test_image_folder_round_trip(tmp_path, glyphs):
    small = glyphs.subset(np.arange(0, 200, 20))
    D.save_image_folder(small, tmp_path / "root")
    back, classes = D.load_image_folder(tmp_path / "root")
    assert classes == [f"class{k:02d}" for k in range(5)]
    assert np.array_equal(back.labels, small.labels)
    assert np.abs(back.images - small.images).max() <= 0.5 / 255 + 1e-12


def _write_csv(path, rows, header="image_path,x,y,w,h,label"):
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows))


def test_annotation_crops(tmp_path):
    page = np.random.default_rng(0).random((20, 30, 3))
    D.save_image(page, tmp_path / "page.png")
    stored = D.load_image(tmp_path / "page.png").pixels
    _write_csv(tmp_path / "ann.csv", ["page.png,2,3,5,4,alpha", "page.png,10,0,5,4,beta"])
    recs = D.read_annotations(tmp_path / "ann.csv")
    ds = D.crop_from_annotations(recs, {"alpha": 0, "beta": 1}, root=tmp_path)
    assert ds.images.shape == (2, 4, 5, 3)
    assert np.array_equal(ds.images[0], stored[3:7, 2:7])
    assert ds.labels.tolist() == [0, 1]


def test_annotation_errors(tmp_path):
    D.save_image(np.zeros((10, 10, 3)), tmp_path / "p.png")
    _write_csv(tmp_path / "bad.csv", ["p.png,0,0,5,5,a"], header="path,x,y,w,h,label")
    with pytest.raises(RecordError):
        D.read_annotations(tmp_path / "bad.csv")
    _write_csv(tmp_path / "nan.csv", ["p.png,0,0,5,5,a", "p.png,zero,0,5,5,a"])
    with pytest.raises(RecordError, match="line 3"):
        D.read_annotations(tmp_path / "nan.csv")
    for row in ("p.png,8,0,5,5,a", "p.png,0,0,0,5,a", "p.png,0,0,5,5,zzz"):
        _write_csv(tmp_path / "x.csv", [row])
        with pytest.raises(RecordError, match="line 2"):
            D.crop_from_annotations(D.read_annotations(tmp_path / "x.csv"), {"a": 0}, root=tmp_path)


def test_split_sizes_example():
    assert D.split_sizes(34061) == (23842, 5109, 5110)


@pytest.mark.parametrize("n", range(10, 110))
def test_split_is_partition(n):
    ds = D.Dataset(np.zeros((n, 1, 1, 1)), np.arange(n) % 3, 3)
    parts = D.split(ds, D.SplitSpec(seed=n))
    ids = np.concatenate([p.ids for p in parts])
    assert sorted(ids.tolist()) == list(range(n))
    assert tuple(len(p) for p in parts) == D.split_sizes(n)


def test_split_deterministic_and_seeded(glyphs):
    a = D.split(glyphs, D.SplitSpec(seed=3))
    b = D.split(glyphs, D.SplitSpec(seed=3))
    c = D.split(glyphs, D.SplitSpec(seed=4))
    assert all(np.array_equal(x.ids, y.ids) for x, y in zip(a, b))
    assert not np.array_equal(a[0].ids, c[0].ids)
    assert a[0].name.endswith("/train")
    with pytest.raises(ValueError):
        D.split(glyphs.subset(range(9)))
    with pytest.raises(ValueError):
        D.SplitSpec(fractions=(0.5, 0.2, 0.2))


def test_triplet_batch_contract(glyphs):
    rng = np.random.default_rng(0)
    tb = D.make_triplet_batch(glyphs, 500, rng)
    lab = glyphs.labels
    assert len(tb) == 1500
    assert np.all(lab[tb.anchor] == lab[tb.positive])
    assert np.all(tb.anchor != tb.positive)
    assert np.all(lab[tb.anchor] != lab[tb.negative])
    assert np.array_equal(tb.positions[:500], tb.anchor)


def test_triplet_class_frequencies_within_three_sigma():
    ds = D.Dataset(np.zeros((60, 1, 1, 1)), [0] * 10 + [1] * 20 + [2] * 30, 3)
    n = 6000
    tb = D.make_triplet_batch(ds, n, np.random.default_rng(1))
    p = np.array([10, 20, 30]) / 60
    obs = np.bincount(ds.labels[tb.anchor], minlength=3)
    assert np.all(np.abs(obs - n * p) < 3 * np.sqrt(n * p * (1 - p)))
    # negatives of class-0 anchors split 20:30 between the other classes
    neg = ds.labels[tb.negative[ds.labels[tb.anchor] == 0]]
    m, q = len(neg), 0.4
    assert abs((neg == 1).sum() - m * q) < 3 * np.sqrt(m * q * (1 - q))
    # positives are uniform over the other members of the anchor's class
    a0 = tb.anchor[ds.labels[tb.anchor] == 0]
    pos0 = tb.positive[ds.labels[tb.anchor] == 0]
    for item in range(10):
        sel = pos0[a0 == item]
        counts = np.bincount(sel, minlength=10)
        assert counts[item] == 0


def test_triplet_batch_errors():
    one_class = D.Dataset(np.zeros((4, 1, 1, 1)), [0, 0, 0, 0], 2)
    with pytest.raises(ValueError):
        D.make_triplet_batch(one_class, 2, np.random.default_rng(0))
    singleton = D.Dataset(np.zeros((4, 1, 1, 1)), [0, 0, 0, 1], 2)
    with pytest.raises(ValueError):
        D.make_triplet_batch(singleton, 2, np.random.default_rng(0))


def test_triplet_images_use_role_views(glyphs):
    p = A.AugPipeline([A.RandomCrop(28), A.HFlip()], seed=0)
    tb = D.TripletBatch(np.array([0]), np.array([0]), np.array([0]))
    out = tb.images(glyphs, p, epoch=0, step=0)
    assert out.shape == (3, 3, 28, 28)
    assert not np.array_equal(out[0], out[1]) or not np.array_equal(out[1], out[2])


def test_contrastive_layout_and_distinctness(glyphs):
    images = glyphs.unlabeled()
    pipe = A.AugPipeline([A.RandomCrop(24), A.ColorJitter(), A.Affine()], seed=0)
    cv = D.make_contrastive_batch(images, 50, pipe, np.random.default_rng(0))
    assert cv.views.shape == (100, 3, 24, 24)
    assert np.array_equal(cv.partner[:4], [1, 0, 3, 2])
    distinct = np.mean([not np.array_equal(cv.views[2 * i], cv.views[2 * i + 1]) for i in range(50)])
    assert distinct >= 0.99
    assert len(set(cv.sources.tolist())) == 50


def test_contrastive_rejects_labelled_data(glyphs):
    pipe = A.AugPipeline([A.HFlip()], seed=0)
    with pytest.raises(TypeError):
        D.contrastive_views(glyphs, [0, 1], pipe)
    with pytest.raises(ValueError):
        D.make_contrastive_batch(glyphs.unlabeled(), 1, pipe, np.random.default_rng(0))


def test_identity_pipeline_views_equal_sources(glyphs):
    images = glyphs.unlabeled()
    cv = D.contrastive_views(images, [3, 7], A.AugPipeline([], seed=0))
    src = glyphs.images[[3, 3, 7, 7]].transpose(0, 3, 1, 2)
    assert np.array_equal(cv.views, src)
