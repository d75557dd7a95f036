import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenebalance.augment import (
    AugmentationPolicy,
    BalanceError,
    BalancePlan,
    Sample,
    add_noise,
    apply_balance,
    check_parity,
    noise_field,
    plan_balance,
    replicate,
    rotate_boxes,
    rotate_sample,
)
from scenebalance.manifest import BoxRecord, DatasetManifest, ImageRecord, read_pixels, write_pixels

ALL_OPS = AugmentationPolicy(ops=("replicate", "rotate", "noise"))


def ids(n, prefix="m"):
    return [f"{prefix}{i}" for i in range(n)]


def corner_oracle(box, width, height, angle):
    """Rotate all four corners one quarter turn at a time, then re-enclose."""
    corners = [(box[0], box[1]), (box[2], box[1]), (box[0], box[3]), (box[2], box[3])]
    w, h = width, height
    for _ in range(angle // 90):
        corners = [(y, w - x) for x, y in corners]
        w, h = h, w
    xs, ys = zip(*corners)
    return (min(xs), min(ys), max(xs), max(ys))


@st.composite
def image_and_boxes(draw):
    h = draw(st.integers(1, 12))
    w = draw(st.integers(1, 12))
    c = draw(st.sampled_from([1, 3]))
    seed = draw(st.integers(0, 2**16))
    img = np.random.default_rng(seed).integers(0, 256, size=(c, h, w)).astype(np.uint8)
    boxes = []
    for _ in range(draw(st.integers(0, 4))):
        x1 = draw(st.integers(0, w - 1))
        x2 = draw(st.integers(x1 + 1, w))
        y1 = draw(st.integers(0, h - 1))
        y2 = draw(st.integers(y1 + 1, h))
        boxes.append((x1, y1, x2, y2))
    return img, np.array(boxes, dtype=np.float64).reshape(-1, 4)


class TestPlan:
    def test_replicate_800_160(self):
        plan = plan_balance((800, 160), ids(160), AugmentationPolicy())
        assert len(plan.directives) == 640
        assert set(plan.per_source_counts().values()) == {4}
        assert plan.n_minor_after == 800
        assert {d.op for d in plan.directives} == {"replicate"}

    def test_already_balanced(self):
        plan = plan_balance((5, 5), ids(5), ALL_OPS)
        assert plan.directives == [] and plan.residual == 0

    def test_round_robin_10_3(self):
        plan = plan_balance((10, 3), ids(3), ALL_OPS)
        assert [plan.per_source_counts()[s] for s in ids(3)] == [3, 2, 2]
        labels = [d.op_label for d in plan.directives]
        assert labels == ["replicate", "rotate90", "rotate180", "rotate270", "noise", "replicate", "rotate90"]

    def test_policy_restricts_cycle(self):
        policy = AugmentationPolicy(ops=("rotate", "noise"), angles=(180,))
        plan = plan_balance((7, 2), ids(2), policy)
        assert [d.op_label for d in plan.directives] == ["rotate180", "noise"] * 2 + ["rotate180"]

    @pytest.mark.parametrize("sizes", [(3, 0), (2, 5)])
    def test_rejects(self, sizes):
        with pytest.raises(ValueError):
            plan_balance(sizes, ids(sizes[1]), ALL_OPS)

    def test_id_count_mismatch(self):
        with pytest.raises(ValueError):
            plan_balance((4, 2), ids(3), ALL_OPS)

    @given(n_major=st.integers(1, 60), n_minor=st.integers(1, 60))
    def test_parity_granularity(self, n_major, n_minor):
        n_major, n_minor = max(n_major, n_minor), min(n_major, n_minor)
        plan = plan_balance((n_major, n_minor), ids(n_minor), ALL_OPS)
        assert abs(plan.n_minor_after - n_major) < n_minor
        assert set(plan.per_source_counts()) <= set(ids(n_minor))
        assert len({d.new_id for d in plan.directives}) == len(plan.directives)

    def test_csv_round_trip(self, tmp_path):
        plan = plan_balance((10, 3), ids(3), ALL_OPS)
        path = tmp_path / "plan.csv"
        path.write_text(plan.to_csv_text())
        assert path.read_text().splitlines()[0] == "source_id,op,params,new_id"
        assert BalancePlan.read_directives(path) == plan.directives

    @pytest.mark.parametrize(
        "kwargs", [dict(ops=()), dict(ops=("warp",)), dict(ops=("noise",), noise_variance=0.0), dict(ops=("rotate",), angles=(45,))]
    )
    def test_policy_validation(self, kwargs):
        with pytest.raises(ValueError):
            AugmentationPolicy(**kwargs)


class TestRotate:
    def test_worked_example(self):
        img = np.zeros((60, 100))
        out, boxes = rotate_sample(img, [(10, 20, 30, 40)], 90)
        assert out.shape == (100, 60)
        assert boxes.tolist() == [[20.0, 70.0, 40.0, 90.0]]

    def test_pixel_convention(self):
        # pixel (x, y) lands at (y, W - 1 - x)
        h, w = 3, 5
        img = np.arange(h * w).reshape(h, w)
        out, _ = rotate_sample(img, [], 90)
        for y in range(h):
            for x in range(w):
                assert out[w - 1 - x, y] == img[y, x]

    def test_180_twice_identity(self):
        img = np.random.default_rng(0).random((2, 7, 9))
        boxes = [(1, 2, 4, 6), (0, 0, 9, 7)]
        a, ab = rotate_sample(img, boxes, 180)
        b, bb = rotate_sample(a, ab, 180)
        assert np.array_equal(b, img) and bb.tolist() == np.array(boxes, float).tolist()

    @given(image_and_boxes())
    @settings(max_examples=60, deadline=None)
    def test_four_quarter_turns_identity(self, sample):
        img, boxes = sample
        out, ob = img, boxes
        for _ in range(4):
            out, ob = rotate_sample(out, ob, 90)
        assert out.dtype == img.dtype and np.array_equal(out, img)
        assert np.array_equal(ob, boxes)

    @given(image_and_boxes(), st.sampled_from([90, 180, 270]), st.sampled_from([90, 180, 270]))
    @settings(max_examples=60, deadline=None)
    def test_group_law_area_bounds(self, sample, a, b):
        img, boxes = sample
        h, w = img.shape[-2:]
        ia, ba = rotate_sample(img, boxes, a)
        iab, bab = rotate_sample(ia, ba, b)
        total = (a + b) % 360
        if total == 0:
            direct, dboxes = img, boxes
        else:
            direct, dboxes = rotate_sample(img, boxes, total)
        assert np.array_equal(iab, direct) and np.array_equal(bab, dboxes)
        area = lambda bx: (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
        assert np.array_equal(area(ba), area(boxes))
        hh, ww = ia.shape[-2:]
        assert (hh, ww) == ((w, h) if a in (90, 270) else (h, w))
        assert np.all((0 <= ba[:, 0]) & (ba[:, 0] < ba[:, 2]) & (ba[:, 2] <= ww))
        assert np.all((0 <= ba[:, 1]) & (ba[:, 1] < ba[:, 3]) & (ba[:, 3] <= hh))
        for orig, rot in zip(boxes, ba):
            assert tuple(rot) == corner_oracle(tuple(orig), w, h, a)

    def test_box_marks_same_pixels(self):
        # the set of pixels covered by a box moves with the image
        img = np.zeros((6, 8), dtype=np.uint8)
        img[1:4, 2:7] = 1
        out, boxes = rotate_sample(img, [(2, 1, 7, 4)], 270)
        x1, y1, x2, y2 = boxes[0].astype(int)
        assert out[y1:y2, x1:x2].all() and out.sum() == img.sum()

    def test_out_of_bounds_box(self):
        with pytest.raises(ValueError, match="box 1"):
            rotate_sample(np.zeros((4, 4)), [(0, 0, 2, 2), (1, 1, 5, 3)], 90)

    def test_bad_angle(self):
        with pytest.raises(ValueError):
            rotate_sample(np.zeros((4, 4)), [], 45)
        assert rotate_boxes([(0, 0, 1, 1)], 4, 0).tolist() == [[0, 0, 1, 1]]


class TestNoise:
    def test_tiny_variance(self):
        img = np.random.default_rng(1).random((16, 16))
        assert np.abs(add_noise(img, 1e-12, seed=3) - img).max() < 1e-4

    def test_field_moments(self):
        field = noise_field((1, 100, 1000), 0.1, seed=7)
        assert abs(field.mean()) < 0.01
        assert abs(field.var() - 0.1) < 0.01

    def test_add_noise_uses_field(self):
        img = np.full((1, 100, 1000), 0.5)
        out = add_noise(img, 0.1, seed=7)
        expected = np.clip(img + noise_field(img.shape, 0.1, seed=7), 0, 1)
        assert np.array_equal(out, expected)
        assert out.min() >= 0 and out.max() <= 1

    def test_seeded(self):
        img = np.full((8, 8), 0.3, dtype=np.float32)
        assert np.array_equal(add_noise(img, 0.1, 5), add_noise(img, 0.1, 5))
        assert not np.array_equal(add_noise(img, 0.1, 5), add_noise(img, 0.1, 6))
        assert add_noise(img, 0.1, 5).dtype == np.float32

    def test_range_precondition(self):
        with pytest.raises(ValueError):
            add_noise(np.array([1.5]), 0.1)


class TestReplicate:
    def test_copy(self):
        s = Sample("a", np.arange(6.0).reshape(2, 3), np.array([[0, 0, 1, 1.0]]))
        r = replicate(s, "a_copy")
        assert r.image_id != s.image_id
        assert r.image.tobytes() == s.image.tobytes() and np.array_equal(r.boxes, s.boxes)
        assert r.image is not s.image
        assert r.provenance == ("a",)
        assert replicate(r, "a_copy2").provenance == ("a_copy", "a")

    def test_same_id_rejected(self):
        with pytest.raises(ValueError):
            replicate(Sample("a", np.zeros(1), np.zeros((0, 4))), "a")


def fixture_manifest(root, n_off, n_in, rgb_index=None):
    """Tiny on-disk manifest: distinct random images, one box each."""
    rng = np.random.default_rng(0)
    images, boxes = [], []
    for i in range(n_off + n_in):
        scene = "offshore" if i < n_off else "inshore"
        h, w = 6 + i % 3, 9
        shape = (h, w, 3) if i == rgb_index else (h, w)
        write_pixels(root / "img" / f"s{i}.png", rng.integers(0, 256, size=shape, dtype=np.uint8))
        images.append(ImageRecord(f"s{i}", f"img/s{i}.png", w, h, "train", scene))
        boxes.append(BoxRecord(f"s{i}", 1, 2, 5, 4))
    return DatasetManifest(images, boxes, root)


def minority(manifest):
    return [r.image_id for r in manifest.images if r.scene == "inshore"]


class TestApplyBalance:
    def test_empty_plan(self, tmp_path):
        m = fixture_manifest(tmp_path, 3, 3)
        out = apply_balance(m, plan_balance((3, 3), minority(m), ALL_OPS))
        assert out.images == m.images and out.boxes == m.boxes

    def test_replicate_counts_and_bytes(self, tmp_path):
        m = fixture_manifest(tmp_path, 40, 8)
        plan = plan_balance((40, 8), minority(m), AugmentationPolicy())
        out = apply_balance(m, plan)
        assert len(out.images) == 80
        assert out.scene_counts()["inshore"] == 40 and out.scene_counts()["offshore"] == 40
        check_parity(out, plan.n_sources)
        ids_ = out.by_id()
        for d in plan.directives:
            rec = ids_[d.new_id]
            assert rec.source_id == d.source_id and rec.op == "replicate"
            assert out.image_path(rec).read_bytes() == m.image_path(ids_[d.source_id]).read_bytes()
        assert len(m.images) == 48  # input untouched

    def test_mixed_ops_round_trip(self, tmp_path):
        m = fixture_manifest(tmp_path, 10, 3, rgb_index=11)
        plan = plan_balance((10, 3), minority(m), ALL_OPS)
        out = apply_balance(m, plan)
        out.validate()
        assert abs(out.scene_counts()["inshore"] - 10) < 3
        by = out.by_id()
        bb = out.boxes_by_image()
        for d in plan.directives:
            rec = by[d.new_id]
            px = read_pixels(out.image_path(rec))
            assert px.shape[:2] == (rec.height, rec.width)
            src_px = read_pixels(m.image_path(by[d.source_id]))
            assert px.ndim == src_px.ndim
            for b in bb[d.new_id]:
                assert 0 <= b.x1 < b.x2 <= rec.width and 0 <= b.y1 < b.y2 <= rec.height
            if d.op == "rotate":
                k = d.param_dict["angle"] // 90
                assert np.array_equal(px, np.rot90(src_px, k, axes=(0, 1)))
            if d.op == "noise":
                assert [b.as_tuple() for b in bb[d.new_id]] == [b.as_tuple() for b in bb[d.source_id]]

    def test_deterministic(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            root = tmp_path / name
            m = fixture_manifest(root, 9, 2)
            out = apply_balance(m, plan_balance((9, 2), minority(m), ALL_OPS))
            out.save(root)
            blobs = [out.image_path(r).read_bytes() for r in out.images]
            outs.append(((root / "images.csv").read_bytes(), (root / "boxes.csv").read_bytes(), blobs))
        assert outs[0] == outs[1]

    def test_io_failure_lists_written(self, tmp_path):
        m = fixture_manifest(tmp_path, 6, 2)
        plan = plan_balance((6, 2), minority(m), AugmentationPolicy())
        (tmp_path / m.by_id()["s7"].path).unlink()
        with pytest.raises(BalanceError) as info:
            apply_balance(m, plan)
        assert [p.name for p in info.value.written] == ["s6_bal00000_rep.png"]
        assert len(m.images) == 8

    def test_unknown_source(self, tmp_path):
        m = fixture_manifest(tmp_path, 3, 1)
        plan = plan_balance((3, 1), ["ghost"], AugmentationPolicy())
        with pytest.raises(BalanceError, match="ghost"):
            apply_balance(m, plan)

    def test_parity_violation_detected(self, tmp_path):
        m = fixture_manifest(tmp_path, 6, 2)
        with pytest.raises(BalanceError):
            check_parity(m, 2)
