import numpy as np
import pytest

import msshadow as ms
from msshadow import analysis
from msshadow.errors import ShadowingError


@pytest.fixture(scope="module")
def lorenz_dense(lorenz28):
    u0 = ms.advance(lorenz28, np.ones(3), -10.0, 0.0, 0.002)
    traj = ms.integrate(lorenz28, u0, 0.0, 3.0, 0.002, stride=300)
    led = ms.CostLedger()
    a = analysis.dense_constraint_matrix(traj, led)
    b = ms.assemble_rhs(traj, led)
    return traj, a, b


class TestDenseAssembly:
    def test_block_structure(self, lorenz28):
        u0 = ms.advance(lorenz28, np.ones(3), -5.0, 0.0, 0.002)
        traj = ms.integrate(lorenz28, u0, 0.0, 1.0, 0.002, stride=250)
        assert traj.n_segments == 2
        led = ms.CostLedger()
        a = analysis.dense_constraint_matrix(traj, led)
        assert a.shape == (6, 9)
        # identity blocks above the propagator blocks
        np.testing.assert_array_equal(a[0:3, 3:6], np.eye(3))
        np.testing.assert_array_equal(a[3:6, 6:9], np.eye(3))
        assert led.forward == 9 * 2  # one propagation per column per segment

    def test_matches_matrix_free_action(self, lorenz_dense):
        traj, a, _ = lorenz_dense
        led = ms.CostLedger()
        rng = np.random.default_rng(0)
        k, n = traj.n_segments, 3
        v = rng.standard_normal((k + 1, n))
        lhs = a @ v.reshape(-1)
        rhs = ms.constraint_apply(traj, led, v).reshape(-1)
        assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)

    def test_normal_matrix_symmetric(self, lorenz_dense):
        _, a, _ = lorenz_dense
        s = a @ a.T
        assert np.abs(s - s.T).max() <= 1e-12 * np.abs(s).max()

    def test_singular_values_square_to_eigenvalues(self, lorenz_dense):
        _, a, _ = lorenz_dense
        sv = np.linalg.svd(a, compute_uv=False)
        mu = np.linalg.eigvalsh(a @ a.T)
        np.testing.assert_allclose(np.sort(sv**2), mu,
                                   rtol=1e-8, atol=1e-12 * mu[-1])

    def test_cap_enforced(self, lorenz_dense):
        traj, _, _ = lorenz_dense
        led = ms.CostLedger()
        with pytest.raises(ShadowingError):
            analysis.dense_constraint_matrix(traj, led, cap=5)


class TestTruncatedSVD:
    def test_zero_rank(self, lorenz_dense):
        _, a, b = lorenz_dense
        v = analysis.truncated_svd_solution(a, b, 0)
        assert np.array_equal(v, np.zeros_like(v))

    def test_full_rank_matches_cg(self, lorenz_dense):
        traj, a, b = lorenz_dense
        led = ms.CostLedger()
        cfg = ms.SolveConfig(tol=1e-12, max_iter=3000, gamma=0.0, mode="none")
        w, rep = ms.cg_solve(lambda z: ms.schur_apply(traj, led, z), b, cfg)
        assert rep.converged
        v_cg = ms.recover_checkpoints(traj, led, w)
        v_svd = analysis.truncated_svd_solution(a, b, a.shape[0])
        assert (np.linalg.norm(v_svd - v_cg)
                <= 1e-6 * np.linalg.norm(v_cg))

    def test_rank_bounds(self, lorenz_dense):
        _, a, b = lorenz_dense
        with pytest.raises(ValueError):
            analysis.truncated_svd_solution(a, b, a.shape[0] + 1)

    def test_sensitivity_vs_rank_runs(self, lorenz_dense):
        traj, a, b = lorenz_dense
        out = analysis.sensitivity_vs_rank(traj, ms.LorenzZ(), a, b,
                                           [1, 5, a.shape[0]])
        assert [r for r, _ in out] == [1, 5, a.shape[0]]
        assert all(np.isfinite(s) for _, s in out)


class TestPicard:
    def test_constructed_rhs_concentrates(self, lorenz_dense):
        _, a, _ = lorenz_dense
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        b = (u[:, 0] * s[0]).reshape(-1, 3)
        table = analysis.picard_data(a, b)
        assert table.projections[0] == pytest.approx(s[0], rel=1e-12)
        assert table.coefficients[0] == pytest.approx(1.0, rel=1e-12)
        assert np.abs(table.projections[1:]).max() <= 1e-10 * s[0]

    def test_sigma_descending_and_rows(self, lorenz_dense):
        _, a, b = lorenz_dense
        table = analysis.picard_data(a, b)
        assert (np.diff(table.sigma) <= 0).all()
        rows = list(table.rows())
        assert len(rows) == a.shape[0]
        assert rows[0][0] == 1

    def test_csv(self, lorenz_dense, tmp_path):
        _, a, b = lorenz_dense
        table = analysis.picard_data(a, b)
        path = tmp_path / "picard.csv"
        table.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "index,sigma,projection,coefficient"


class TestSpectrum:
    def test_identity(self):
        rep = analysis.spectrum(np.eye(7), 7, mode="dense", label="eye")
        assert rep.kappa == 1.0
        np.testing.assert_array_equal(rep.eigenvalues, np.ones(7))

    def test_callable_operator(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        mat = q @ np.diag(np.arange(1.0, 7.0)) @ q.T
        rep = analysis.spectrum(lambda x: mat @ x, 6, mode="dense")
        np.testing.assert_allclose(rep.eigenvalues, np.arange(1.0, 7.0),
                                   rtol=1e-12)
        assert rep.kappa == pytest.approx(6.0, rel=1e-12)

    def test_lanczos_extremes(self):
        rng = np.random.default_rng(2)
        q, _ = np.linalg.qr(rng.standard_normal((40, 40)))
        vals = np.geomspace(0.01, 10.0, 40)
        mat = q @ np.diag(vals) @ q.T
        rep = analysis.spectrum(mat, 40, mode="lanczos-extremes")
        assert rep.converged
        assert rep.eigenvalues[0] == pytest.approx(0.01, rel=1e-5)
        assert rep.eigenvalues[-1] == pytest.approx(10.0, rel=1e-5)
        assert rep.kappa == pytest.approx(1000.0, rel=1e-4)

    def test_dense_cap(self):
        with pytest.raises(ShadowingError):
            analysis.spectrum(np.eye(10), 10, mode="dense", cap=5)

    def test_shift_is_exact(self, lorenz_dense):
        traj, a, _ = lorenz_dense
        s_mat = a @ a.T
        led = ms.CostLedger()
        pc = ms.build_preconditioner(traj, led, 1, 2,
                                     rng=np.random.default_rng(3))
        gamma = 0.37
        base = analysis.preconditioned_spectrum(s_mat, pc)
        shifted = analysis.preconditioned_spectrum(s_mat, pc, gamma=gamma)
        np.testing.assert_array_equal(shifted.eigenvalues,
                                      base.eigenvalues + gamma)


class TestCsvWriters:
    def test_deterministic_bytes(self, tmp_path):
        rows = [(1, 0.1), (2, 0.25)]
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        analysis.write_csv(p1, ["i", "v"], rows)
        analysis.write_csv(p2, ["i", "v"], rows)
        assert p1.read_bytes() == p2.read_bytes()

    def test_labeled_triples(self, tmp_path):
        path = tmp_path / "spec.csv"
        analysis.write_labeled_csv(path, "raw", [2.0, 3.0])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "label,index,value"
        assert lines[1].startswith("raw,1,")


@pytest.mark.slow
class TestSegmentSpectrumGap:
    def test_longer_segments_track_global_singular_values_better(self):
        # the union of leading per-segment singular values tracks the
        # top of the global spectrum more closely for longer segments
        gaps = {}
        for stride, dt in ((250, 0.5), (500, 1.0)):
            per_rho = []
            for rho in (40.0, 60.0, 80.0):
                system = ms.Lorenz(rho=rho)
                rng = np.random.default_rng(20)
                u0 = ms.advance(system,
                                np.ones(3) + 1e-3 * rng.standard_normal(3),
                                -50.0, 0.0, 0.002)
                traj = ms.integrate(system, u0, 0.0, 50.0, 0.002, stride=stride)
                led = ms.CostLedger()
                a = analysis.dense_constraint_matrix(traj, led)
                sv = np.linalg.svd(a, compute_uv=False)
                k = traj.n_segments
                tops = np.sort([
                    np.linalg.svd(
                        analysis.dense_segment_propagator(traj, led, i),
                        compute_uv=False)[0]
                    for i in range(k)
                ])[::-1]
                rel_gap = np.abs(tops - sv[:k]) / sv[:k]
                per_rho.append(rel_gap.mean())
            gaps[dt] = np.mean(per_rho)
        assert gaps[1.0] < gaps[0.5]
