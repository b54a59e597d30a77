from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_assignment, brute_clarke
from stfs_auction import equilibria, mechanisms as m, valuation
from stfs_auction.errors import DomainError, ShapeError, ValidationError
from stfs_auction.mechanisms import AuctionInstance, Mechanism, MsaaConfig

FIG2 = valuation.ValuationParams()

value_matrices = st.integers(1, 5).flatmap(lambda K: st.integers(1, 5).flatmap(
    lambda N: arrays(float, (K, N), elements=st.floats(0, 10, allow_subnormal=False))))


def _check_outcome(o, K, N):
    C = o.indicator
    assert C.shape == (K, N)
    assert m.is_feasible(C)
    assert o.revenue == pytest.approx(o.payments.sum(), abs=1e-12)
    losers = ~C.any(axis=1)
    assert np.all(o.payments[losers] == 0) and np.all(o.surplus[losers] == 0)
    assert np.all(o.payments >= 0)


class TestInstance:
    def test_column_promotion(self):
        inst = AuctionInstance([1.0, 2.0])
        assert (inst.K, inst.N) == (2, 1)

    @pytest.mark.parametrize("bad", [[[-1.0]], [[np.nan]], [[np.inf]], np.zeros((0, 2))])
    def test_invalid(self, bad):
        with pytest.raises(ValidationError):
            AuctionInstance(bad)

    def test_mechanism_parse(self):
        assert Mechanism.parse("msaa") is Mechanism.MSAA
        assert Mechanism.parse("vcg") is Mechanism.VCG
        with pytest.raises(ValidationError):
            Mechanism.parse("dutch")


class TestRisk:
    def test_identity(self):
        V = np.array([[1.0, 0.3], [0.2, 0.7]])
        np.testing.assert_array_equal(m.apply_risk(V, 0), V)

    def test_examples(self):
        np.testing.assert_allclose(m.apply_risk([[1.0], [0.5]], 4), [[0.96], [0.46]])
        np.testing.assert_allclose(m.apply_risk([[0.02], [1.0]], 4), [[0.0], [0.96]])

    def test_overbidding(self):
        np.testing.assert_allclose(m.apply_risk([[1.0], [0.5]], -4), [[1.04], [0.54]])


class TestSealedBid:
    def test_fpsb_example(self):
        inst = AuctionInstance([1.2, 0.8, 0.4])
        o = m.run_fpsb(inst, [0.9, 0.5, 0.3])
        assert o.allocation == [(0, 0)]
        assert o.payments[0] == 0.9 and o.revenue == 0.9
        assert o.surplus[0] == pytest.approx(0.3)
        _check_outcome(o, 3, 1)

    def test_tie_lottery_recorded(self):
        inst = AuctionInstance([1.0, 1.0])
        o = m.run_fpsb(inst, [0.5, 0.5], seed=3)
        assert len(o.tie_lottery_draws) == 1
        d = o.tie_lottery_draws[0]
        assert d.candidates == (0, 1) and o.allocation == [(d.chosen, 0)]
        assert m.run_fpsb(inst, [0.5, 0.5], seed=3).allocation == o.allocation
        winners = {m.run_fpsb(inst, [0.5, 0.5], seed=s).allocation[0][0] for s in range(40)}
        assert winners == {0, 1}

    def test_fpsb_equilibrium_surplus_positive(self):
        draws = valuation.sample(FIG2, 5, 2000, seed=7)
        surplus = []
        for i in range(draws.I):
            v = draws.v[:, i]
            bids = equilibria.fpsb_bne_curve(FIG2, 5, v)
            o = m.run_fpsb(AuctionInstance(v), bids, seed=i)
            surplus.append(o.surplus.sum())
        assert np.mean(surplus) > 0

    def test_spsb_examples(self):
        o = m.run_spsb(AuctionInstance([1.0, 0.6, 0.3]), [0.9, 0.5, 0.3])
        assert o.allocation == [(0, 0)] and o.payments[0] == 0.5
        o = m.run_spsb(AuctionInstance([1.0, 0.4]), [1.0, 0.4])
        assert o.surplus[0] == pytest.approx(0.6)
        o = m.run_spsb(AuctionInstance([0.7]), [0.7])
        assert o.payments[0] == 0.0 and o.surplus[0] == 0.7

    def test_errors(self):
        inst = AuctionInstance([1.0, 0.5])
        with pytest.raises(DomainError):
            m.run_fpsb(inst, [])
        with pytest.raises(ShapeError):
            m.run_spsb(inst, [1.0])
        with pytest.raises(ValidationError):
            m.run_spsb(inst, [1.0, -0.5])
        with pytest.raises(IndexError):
            m.run_fpsb(inst, [1.0, 0.5], slot=1)

    def test_spsb_dominance(self):
        rng = np.random.default_rng(0)
        grid = np.linspace(0, 2, 21)
        for _ in range(200):
            v = rng.random(4)
            opp = rng.random(4)
            truthful = opp.copy()
            truthful[0] = v[0]
            base = m.run_spsb(AuctionInstance(v), truthful, seed=1).surplus[0]
            for dev in grid:
                bids = opp.copy()
                bids[0] = dev
                assert m.run_spsb(AuctionInstance(v), bids, seed=1).surplus[0] <= base + 1e-12

    def test_sequential_excludes_winners(self):
        V = np.array([[5.0, 5.0, 5.0], [4.0, 1.0, 1.0], [1.0, 3.0, 1.0], [0.5, 0.5, 2.0]])
        o = m.run_sequential(AuctionInstance(V), "SPSB")
        # slot 0: node 0 beats 4.0; slot 1 among {1,2,3}: node 2 pays 1.0;
        # slot 2 among {1,3}: node 3 pays 1.0
        assert o.allocation == [(0, 0), (2, 1), (3, 2)]
        np.testing.assert_allclose(o.payments, [4.0, 0.0, 1.0, 1.0])
        _check_outcome(o, 4, 3)


class TestHungarianVcg:
    def test_examples(self):
        assert sorted(m.hungarian([[1, 2], [3, 5]])) == [(0, 0), (1, 1)]
        assert m.assignment_value([[1, 2], [3, 5]], m.hungarian([[1, 2], [3, 5]])) == 6
        D = np.diag([9.0, 9.0, 9.0])
        assert sorted(m.hungarian(D)) == [(0, 0), (1, 1), (2, 2)]

    def test_random_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            V = rng.random((6, 6))
            assert m.assignment_value(V, m.hungarian(V)) == brute_assignment(V)[0]

    @pytest.mark.parametrize("shape", [(2, 5), (5, 2), (1, 4), (4, 1)])
    def test_rectangular(self, shape):
        V = np.random.default_rng(2).random(shape)
        pairs = m.hungarian(V)
        assert len(pairs) == min(shape)
        assert m.assignment_value(V, pairs) == brute_assignment(V)[0]

    def test_vcg_examples(self):
        o = m.run_vcg(AuctionInstance([[0.9], [0.5]]))
        assert o.allocation == [(0, 0)] and o.payments[0] == 0.5
        o = m.run_vcg(AuctionInstance([[4, 1], [3, 2]]))
        assert o.allocation == [(0, 0), (1, 1)]
        np.testing.assert_array_equal(o.payments, [1.0, 0.0])
        o = m.run_vcg(AuctionInstance([[3, 1], [2, 2]]))
        assert m.assignment_value([[3, 1], [2, 2]], o.allocation) == 5
        np.testing.assert_array_equal(o.payments, [0.0, 0.0])

    def test_clarke_against_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            K, N = rng.integers(1, 6, size=2)
            V = rng.random((K, N))
            o = m.run_vcg(AuctionInstance(V))
            np.testing.assert_array_equal(o.payments, brute_clarke(V, o.allocation))
            _check_outcome(o, K, N)

    @settings(max_examples=80, deadline=None)
    @given(value_matrices)
    def test_vcg_properties(self, V):
        o = m.run_vcg(AuctionInstance(V))
        _check_outcome(o, *V.shape)
        assert np.all(o.surplus >= -1e-9)  # individually rational at reports
        assert m.assignment_value(V, o.allocation) == pytest.approx(brute_assignment(V)[0])

    def test_pivotality(self):
        # node 2 has no effect on what the others can achieve
        V = np.array([[5.0, 0.0], [0.0, 5.0], [1.0, 1.0]])
        o = m.run_vcg(AuctionInstance(V))
        assert o.payments[2] == 0.0

    def test_truthfulness_small(self):
        rng = np.random.default_rng(4)
        grid = np.linspace(0, 2, 21)
        for _ in range(40):
            V = rng.random((4, 3))
            base = m.run_vcg(AuctionInstance(V)).surplus
            for k in range(4):
                for t in grid:
                    R = V.copy()
                    R[k] *= t
                    o = m.run_vcg(AuctionInstance(R))
                    true_k = (o.indicator[k] * V[k]).sum() - o.payments[k]
                    assert true_k <= base[k] + 1e-9


class TestMsaa:
    def test_single_node_hand_trace(self):
        o, tr = m.run_msaa(AuctionInstance([[1.0]]), MsaaConfig(0.2, 0.1))
        assert o.allocation == [(0, 0)]
        assert o.payments[0] == pytest.approx(0.3)
        assert tr.iterations == 1 and tr.terminated_by == "no_active_losers"

    def test_no_auction(self):
        o, tr = m.run_msaa(AuctionInstance([[0.1, 0.2], [0.3, 0.1]]), MsaaConfig(0.5, 0.1))
        assert tr.terminated_by == "no_auction"
        assert o.message == m.NO_AUCTION_MESSAGE
        assert o.indicator.sum() == 0 and o.revenue == 0

    def test_fig5_scale(self):
        V = valuation.sample(FIG2, 5, 3, seed=3).v
        o, tr = m.run_msaa(AuctionInstance(V), seed=3)
        assert tr.terminated_by == "no_active_losers"
        assert 10 <= tr.iterations < tr.iteration_cap
        _check_outcome(o, 5, 3)
        assert np.all(o.surplus[o.winners] >= 0)

    def test_trace_invariants(self):
        rng = np.random.default_rng(5)
        for s in range(30):
            V = rng.random((6, 3))
            o, tr = m.run_msaa(AuctionInstance(V), seed=s)
            prev = None
            for rec in tr.records:
                w, lo = set(rec.winners), set(rec.losers)
                assert not (w & lo)
                assert set(range(6)) - set(rec.dropped) <= w | lo
                if prev is not None:
                    assert np.all(rec.prices >= prev)
                prev = rec.prices
            assert len(tr.records) == tr.iterations

    def test_iteration_cap(self):
        V = np.random.default_rng(6).random((6, 2)) + 1
        o, tr = m.run_msaa(AuctionInstance(V), MsaaConfig(0.0, 0.001, 5))
        assert tr.terminated_by == "iteration_cap" and tr.iterations == 5
        _check_outcome(o, 6, 2)

    def test_swaps_counted(self):
        V = valuation.sample(FIG2, 5, 3, seed=3).v
        _, tr = m.run_msaa(AuctionInstance(V), seed=3)
        freq = tr.transition_frequencies()
        assert freq and sum(freq.values()) == pytest.approx(1.0)

    def test_reservation_vector(self):
        cfg = MsaaConfig([0.1, 0.2])
        np.testing.assert_array_equal(cfg.reservation_vector(2), [0.1, 0.2])
        with pytest.raises(ShapeError):
            cfg.reservation_vector(3)
        with pytest.raises(ValidationError):
            MsaaConfig(epsilon=0.0)
        with pytest.raises(ValidationError):
            MsaaConfig(max_iterations=0)

    def test_close_to_vcg_allocation(self):
        # with a small increment the ascending prices settle near the efficient matching
        rng = np.random.default_rng(7)
        gaps = []
        for s in range(20):
            V = rng.random((5, 3)) * 3
            o, _ = m.run_msaa(AuctionInstance(V), MsaaConfig(0.0, 0.01), seed=s)
            best = brute_assignment(V)[0]
            gaps.append(best - m.assignment_value(V, o.allocation))
        assert max(gaps) <= 3 * 0.01 * 3 + 1e-9


class TestUtilities:
    def test_zero_payments(self):
        V = np.array([[3.0, 1.0], [2.0, 2.0]])
        o = m.run_vcg(AuctionInstance(V))
        s, r = m.utilities(o, V)
        np.testing.assert_array_equal(s, [3.0, 2.0])
        assert r == 0.0

    def test_spsb_consistency(self):
        V = np.array([1.0, 0.4])
        o = m.run_spsb(AuctionInstance(V), V)
        s, r = m.utilities(o, V)
        np.testing.assert_allclose(s, [0.6, 0.0])
        assert r == 0.4

    def test_shape_mismatch(self):
        o = m.run_vcg(AuctionInstance([[1.0, 2.0]]))
        with pytest.raises(ShapeError):
            m.utilities(o, np.zeros((2, 2)))

    def test_shading_shifts_vcg_payments(self):
        # uniform shading by c lowers each Clarke payment by exactly c when K > N
        # and no entry hits the zero floor; the allocation is unchanged
        rng = np.random.default_rng(8)
        for _ in range(200):
            V = 0.5 + rng.random((5, 3))
            c = V.max() * 0.04
            truthful = m.run_vcg(AuctionInstance(V))
            shaded = m.run_vcg(AuctionInstance(m.apply_risk(V, 4)))
            assert shaded.allocation == truthful.allocation
            np.testing.assert_allclose(shaded.payments[truthful.winners],
                                       np.maximum(truthful.payments[truthful.winners] - c, 0),
                                       atol=1e-12)

    @pytest.mark.xfail(strict=True, reason="shading lowers Clarke payments, so true-value "
                                           "surplus rises; see the shading-shift test above")
    def test_shaded_vcg_surplus_not_above_truthful(self):
        truthful, shaded = [], []
        for s in range(1000):
            V = valuation.sample(FIG2, 4, 3, seed=s).v
            o0 = m.run_vcg(AuctionInstance(V))
            o4 = m.run_vcg(AuctionInstance(m.apply_risk(V, 4)))
            truthful.append(m.utilities(o0, V)[0].sum())
            shaded.append(m.utilities(o4, V)[0].sum())
        assert np.mean(shaded) <= np.mean(truthful)


class TestSerialisation:
    def test_outcome_round_trip(self):
        o = m.run_fpsb(AuctionInstance([1.0, 1.0, 0.2]), [0.5, 0.5, 0.1], seed=2)
        back = m.AuctionOutcome.from_text(o.to_text())
        np.testing.assert_array_equal(back.indicator, o.indicator)
        np.testing.assert_array_equal(back.payments, o.payments)
        assert back.revenue == o.revenue and back.tie_lottery_draws == o.tie_lottery_draws
        assert back.to_text() == o.to_text()

    def test_no_auction_message_round_trip(self):
        o, _ = m.run_msaa(AuctionInstance([[0.1]]), MsaaConfig(0.5))
        assert m.AuctionOutcome.from_text(o.to_text()).message == m.NO_AUCTION_MESSAGE

    def test_trace_round_trip(self):
        V = valuation.sample(FIG2, 5, 3, seed=3).v
        _, tr = m.run_msaa(AuctionInstance(V), seed=3)
        back = m.MsaaTrace.from_text(tr.to_text())
        assert back.to_text() == tr.to_text()
        assert back.iterations == tr.iterations and back.transitions == tr.transitions


def test_run_mechanism_dispatch():
    V = np.array([[4.0, 1.0], [3.0, 2.0], [1.0, 1.5]])
    inst = AuctionInstance(V)
    for mech in Mechanism:
        o = m.run_mechanism(mech, inst, seed=1)
        _check_outcome(o, 3, 2)
    assert m.run_mechanism("vcg", inst).allocation == m.run_vcg(inst).allocation
