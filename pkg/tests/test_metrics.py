import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from residiff.metrics import dice, evaluate_cases, hd95, volumetric_similarity, write_metrics_csv


# ---------------------------------------------------------------------------
# brute-force reference oracles (set enumeration / all-pairs loops)


def dice_oracle(a, b):
    A = set(map(tuple, np.argwhere(a == 1)))
    B = set(map(tuple, np.argwhere(b == 1)))
    if not A and not B:
        return 1.0
    return 2.0 * len(A & B) / (len(A) + len(B))


def vs_oracle(a, b):
    na, nb = int(np.sum(a == 1)), int(np.sum(b == 1))
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def boundary_oracle(m):
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not m[ni, nj]:
                    pts.append((i, j))
                    break
    return pts


def hd95_oracle(a, b, spacing=(1.0, 1.0)):
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return None
    pa, pb = boundary_oracle(a), boundary_oracle(b)
    sy, sx = spacing

    def nearest(p, pts):
        return min(math.sqrt((p[0] * sy - q[0] * sy) ** 2 + (p[1] * sx - q[1] * sx) ** 2) for q in pts)

    pooled = sorted([nearest(p, pb) for p in pa] + [nearest(q, pa) for q in pb])
    return pooled[math.ceil(0.95 * len(pooled)) - 1]


def random_mask_pair(rng, hw=16):
    return (rng.random((hw, hw)) < 0.35).astype(np.float32), (rng.random((hw, hw)) < 0.35).astype(np.float32)


# ---------------------------------------------------------------------------


def test_dice_cases():
    a = np.zeros((8, 8)); a[2:5, 2:5] = 1
    assert dice(a, a) == 1.0
    b = np.zeros((8, 8)); b[6:8, 6:8] = 1
    assert dice(a, b) == 0.0
    # |A|=4, |B|=4, |A.B|=2
    a = np.zeros((4, 4)); a[0, :4] = 1
    b = np.zeros((4, 4)); b[0, 2:4] = 1; b[1, 0:2] = 1
    assert dice(a, b) == 0.5


def test_vs_cases():
    a = np.zeros((6, 6)); a[0, :3] = 1
    b = np.zeros((6, 6)); b[5, :3] = 1
    assert volumetric_similarity(a, b) == 1.0
    b2 = np.zeros((6, 6)); b2[0, 0] = 1
    assert volumetric_similarity(a, b2) == 0.5
    assert volumetric_similarity(a, np.zeros((6, 6))) == 0.0


def test_hd95_hand_geometry():
    a = np.zeros((8, 8)); a[4, 1] = 1
    b = np.zeros((8, 8)); b[4, 4] = 1
    assert hd95(a, b) == 3.0
    assert hd95(a, a) == 0.0


def test_empty_mask_conventions():
    e = np.zeros((5, 5))
    f = np.zeros((5, 5)); f[2, 2] = 1
    assert dice(e, e) == 1.0
    assert volumetric_similarity(e, e) == 1.0
    assert hd95(e, e) == 0.0
    assert dice(e, f) == 0.0
    assert hd95(e, f) is None
    assert hd95(f, e) is None


def test_rejects_bad_masks():
    a = np.zeros((4, 4))
    with pytest.raises(ValueError):
        dice(a, np.zeros((5, 5)))
    with pytest.raises(ValueError):
        dice(a, np.full((4, 4), 0.5))
    with pytest.raises(ValueError):
        hd95(a, a, spacing=(0.0, 1.0))


def test_oracle_equivalence_random_pairs():
    rng = np.random.default_rng(404)
    for _ in range(40):
        a, b = random_mask_pair(rng)
        assert dice(a, b) == dice_oracle(a, b)
        assert volumetric_similarity(a, b) == vs_oracle(a, b)
        assert hd95(a, b) == hd95_oracle(a, b)


def test_spacing_scaling():
    rng = np.random.default_rng(77)
    for s in (0.5, 2.0, 3.25):
        for _ in range(10):
            a, b = random_mask_pair(rng)
            base = hd95(a, b)
            scaled = hd95(a, b, spacing=(s, s))
            if base is None:
                assert scaled is None
            else:
                assert scaled == pytest.approx(s * base, rel=1e-12)
            assert dice(a, b) == dice_oracle(a, b)
            assert volumetric_similarity(a, b) == vs_oracle(a, b)


mask_strategy = arrays(np.int8, (12, 12), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(a=mask_strategy, b=mask_strategy)
def test_symmetry_and_identity(a, b):
    a = a.astype(np.float32)
    b = b.astype(np.float32)
    assert dice(a, b) == dice(b, a)
    assert volumetric_similarity(a, b) == volumetric_similarity(b, a)
    assert hd95(a, b) == hd95(b, a)
    if a.any():
        assert dice(a, a) == 1.0
        assert hd95(a, a) == 0.0
        assert volumetric_similarity(a, a) == 1.0


def test_evaluate_cases_aggregation(tmp_path):
    rng = np.random.default_rng(3)
    gt = [random_mask_pair(rng)[0] for _ in range(4)]
    report = evaluate_cases(gt, gt)
    assert report.dsc_mean == 1.0 and report.hd95_mean == 0.0 and report.vs_mean == 1.0
    assert report.n_hd95_excluded == 0

    # single-case aggregate equals the case
    a, b = random_mask_pair(rng)
    rep1 = evaluate_cases([a], [b], ids=["only"])
    _, m = rep1.per_case[0]
    assert rep1.dsc_mean == m.dsc and rep1.hd95_mean == m.hd95 and rep1.vs_mean == m.vs

    # empty-mask exclusion is counted
    empty = np.zeros((16, 16), dtype=np.float32)
    rep2 = evaluate_cases([a, empty], [b, b])
    assert rep2.n_hd95_excluded == 1
    assert rep2.hd95_mean == rep1.hd95_mean

    with pytest.raises(ValueError):
        evaluate_cases([a], [b, b])

    path = tmp_path / "metrics.csv"
    write_metrics_csv(rep2, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "case_id,dsc,hd95,vs"
    assert lines[-1].startswith("mean,")
    assert len(lines) == 4
