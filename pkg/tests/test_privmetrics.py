import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clpu import numkern as nk
from clpu.privmetrics import (AccuracyMatrix, AuditGroup, AuditReport, compute_acc_fm,
                              compute_ijsd_ajsd, eval_accuracy, irr, js_ratio, output_distribution)


def js_distance_by_hand(p, q):
    """Plain-Python Jensen-Shannon distance with natural log."""
    div = 0.0
    for a, b in zip(p, q):
        m = 0.5 * (a + b)
        if a > 0:
            div += 0.5 * a * math.log(a / m)
        if b > 0:
            div += 0.5 * b * math.log(b / m)
    return math.sqrt(div)


class TestAccuracy:
    def test_zero_net_ties_to_lowest(self):
        p = nk.NetParams([np.zeros((2, 3), np.float32)], [np.zeros(2, np.float32)])
        x = np.ones((4, 3))
        assert eval_accuracy(p, x, [0, 1, 0, 1]) == 0.5

    def test_mask_restricts_argmax(self):
        p = nk.NetParams([np.zeros((4, 1), np.float32)], [np.array([0, 0, 5, 1], np.float32)])
        assert eval_accuracy(p, np.ones((2, 1)), [3, 3], mask=[0, 3]) == 1.0
        assert eval_accuracy(p, np.ones((2, 1)), [2, 2]) == 1.0

    def test_empty(self):
        p = nk.NetParams([np.zeros((2, 3), np.float32)], [np.zeros(2, np.float32)])
        with pytest.raises(ValueError):
            eval_accuracy(p, np.zeros((0, 3)), [])

    def test_untrained_net_near_chance(self):
        from clpu.detrng import derive_stream
        from clpu.taskgen import gen_blob_base
        ds = gen_blob_base(10, 32, 1000, 500, 0.6, derive_stream(0, ["b"]))
        accs = [eval_accuracy(nk.init_params([32, 100, 100, 10], derive_stream(s, ["init"])),
                              ds.x_test, ds.y_test) for s in range(20)]
        assert abs(np.mean(accs) - 0.1) < 0.05

    def test_output_distribution_masked(self):
        p = nk.NetParams([np.zeros((4, 2), np.float32)], [np.array([0, 1, 2, 3], np.float32)])
        out = output_distribution(p, np.zeros((3, 2)), mask=(1, 3))
        assert out.shape == (3, 2)
        np.testing.assert_allclose(out[0], [1 / (1 + math.e ** 2), math.e ** 2 / (1 + math.e ** 2)])


class TestAccFm:
    def make(self):
        m = AccuracyMatrix()
        m.record(1, {1: 0.95})
        m.record(2, {1: 0.93, 4: 0.80})
        m.record(3, {1: 0.90, 4: 0.80})
        return m

    def test_acc(self):
        m = self.make()
        acc, fm = compute_acc_fm(m, [1, 4])
        assert acc == pytest.approx(0.85, abs=1e-12)
        # (0.95 - 0.90 + 0) / 2
        assert fm == pytest.approx(0.025, abs=1e-12)

    def test_never_degrades(self):
        m = AccuracyMatrix()
        m.record(1, {1: 0.5})
        m.record(2, {1: 0.7})
        assert compute_acc_fm(m, [1])[1] <= 0

    def test_missing(self):
        m = self.make()
        with pytest.raises(ValueError):
            compute_acc_fm(m, [2])
        with pytest.raises(ValueError):
            compute_acc_fm(m, [])

    def test_sentinel_and_csv(self):
        m = self.make()
        m.record(4, {4: 0.7})
        assert math.isnan(m.get(4, 1))
        text = m.to_csv()
        assert text.splitlines()[0] == "t,s,accuracy"
        assert "4,1,NA" in text
        back = AccuracyMatrix.from_csv(text)
        assert back.rows == m.rows and back.first_seen == m.first_seen


def two_seed_groups():
    full = [np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]]), np.array([[0.6, 0.4], [0.3, 0.7], [1.0, 0.0]])]
    retain = [np.array([[0.5, 0.5], [0.1, 0.9], [0.7, 0.3]]), np.array([[0.8, 0.2], [0.4, 0.6], [0.0, 1.0]])]
    return full, retain


class TestAudit:
    def test_hand_oracle_two_seeds(self):
        full, retain = two_seed_groups()

        def mean_d(a, b):
            return sum(js_distance_by_hand(a[k], b[k]) for k in range(3)) / 3

        ijsd, ajsd = compute_ijsd_ajsd([AuditGroup(6, 2, full, retain)])
        assert len(ijsd) == 1 and len(ajsd) == 4
        assert ijsd[0] == pytest.approx(mean_d(retain[0], retain[1]), abs=1e-9)
        want = [mean_d(full[i], retain[j]) for i in range(2) for j in range(2)]
        np.testing.assert_allclose(ajsd, want, atol=1e-9, rtol=0)

    def test_average_over_forget_requests(self):
        full, retain = two_seed_groups()
        g1 = AuditGroup(6, 2, full, retain)
        g2 = AuditGroup(8, 5, retain, full)
        i1, a1 = compute_ijsd_ajsd([g1])
        i2, a2 = compute_ijsd_ajsd([g2])
        i, a = compute_ijsd_ajsd([g1, g2])
        np.testing.assert_allclose(i, (np.array(i1) + i2) / 2, atol=1e-15)
        np.testing.assert_allclose(a, (np.array(a1) + a2) / 2, atol=1e-15)

    def test_pair_counts(self):
        rng = np.random.default_rng(0)
        outs = [nk.softmax(rng.normal(size=(4, 3))) for _ in range(10)]
        ijsd, ajsd = compute_ijsd_ajsd([AuditGroup(1, 1, outs[:5], outs[5:])])
        assert len(ijsd) == 10 and len(ajsd) == 25

    def test_point_masses_disagreeing(self):
        a = np.array([[1.0, 0.0]] * 3)
        b = np.array([[0.0, 1.0]] * 3)
        _, ajsd = compute_ijsd_ajsd([AuditGroup(1, 1, [a, a], [b, b])])
        np.testing.assert_allclose(ajsd, math.sqrt(math.log(2)), atol=1e-12)

    def test_identical_groups(self):
        rng = np.random.default_rng(1)
        outs = [nk.softmax(rng.normal(size=(5, 3))) for _ in range(4)]
        rep = AuditReport.from_groups([AuditGroup(1, 1, outs, outs)])
        # the diagonal of AJSD is zero and the rest repeats IJSD
        assert rep.irr == 1.0
        assert rep.js_ratio == pytest.approx(1 / 4)

    def test_nothing_to_audit(self):
        with pytest.raises(ValueError, match="nothing to audit"):
            compute_ijsd_ajsd([])

    def test_group_size(self):
        a = np.array([[1.0, 0.0]])
        with pytest.raises(ValueError):
            AuditGroup(1, 1, [a], [a])
        with pytest.raises(ValueError):
            AuditGroup(1, 1, [a, a], [a])


class TestRatios:
    def test_all_equal(self):
        assert js_ratio([0.1] * 3, [0.1] * 9) == pytest.approx(0.0, abs=1e-15)
        assert irr([0.1] * 3, [0.1] * 9) == 1.0

    def test_ratio_four(self):
        assert js_ratio([0.1, 0.1], [0.5, 0.5, 0.5, 0.5]) == pytest.approx(4.0, abs=1e-6)

    def test_irr_half(self):
        assert irr([0.1, 0.05], [0.05, 0.2]) == pytest.approx(0.5, abs=1e-6)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate in-group"):
            js_ratio([0.0], [0.1])

    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=10),
           st.lists(st.floats(0.0, 1.0), min_size=1, max_size=25),
           st.floats(0.01, 100.0))
    @settings(max_examples=80, deadline=None)
    def test_scale_invariance_and_ranges(self, ijsd, ajsd, k):
        r = js_ratio(ijsd, ajsd)
        assert r >= 0
        assert js_ratio([k * d for d in ijsd], [k * d for d in ajsd]) == pytest.approx(r, rel=1e-9, abs=1e-12)
        assert 0.0 <= irr(ijsd, ajsd) <= 1.0
