import numpy as np
import pytest
import scipy.sparse as sp

from coxforge.errors import ConfigError, NumericError
from coxforge.gmrf import (
    ConstrainedGaussian,
    besag_precision,
    log_gen_det,
    sample_constrained,
)
from coxforge.grids import GridSpec


def dense_log_gen_det(Q):
    """Eigendecomposition oracle: sum of logs of the nonzero eigenvalues."""
    w = np.linalg.eigvalsh(np.asarray(Q.todense()))
    nonzero = w[w > 1e-9 * max(1.0, w.max())]
    return float(np.sum(np.log(nonzero)))


class TestBesagPrecision:
    def test_rows_sum_to_zero(self):
        Q = besag_precision(GridSpec.synthetic(5, 7))
        assert np.allclose(np.asarray(Q.sum(axis=1)).ravel(), 0.0)

    def test_degree_counts(self):
        Q = besag_precision(GridSpec.synthetic(4, 3)).toarray()
        deg = np.diag(Q).reshape(3, 4)
        assert deg[0, 0] == 3  # corner
        assert deg[0, 1] == 5  # edge
        assert deg[1, 1] == 8  # interior

    def test_symmetric_and_psd(self):
        Q = besag_precision(GridSpec.synthetic(4, 4)).toarray()
        assert np.array_equal(Q, Q.T)
        w = np.linalg.eigvalsh(Q)
        assert w.min() > -1e-10
        # exactly one zero eigenvalue (connected lattice)
        assert (np.abs(w) < 1e-9).sum() == 1

    def test_diagonal_adjacency_present(self):
        Q = besag_precision(GridSpec.synthetic(3, 3)).toarray()
        # cell (0,0) index 0 and cell (1,1) index 4 are queen neighbors
        assert Q[0, 4] == -1

    def test_invalid_dims(self):
        with pytest.raises(ConfigError):
            besag_precision(GridSpec.synthetic(0, 3))


class TestLogGenDet:
    def test_two_cell_lattice(self):
        # K2 Laplacian [[1,-1],[-1,1]]: nonzero eigenvalue 2
        Q = besag_precision(GridSpec.synthetic(2, 1))
        assert log_gen_det(Q) == pytest.approx(np.log(2.0))

    def test_2x2_queen_is_complete_graph(self):
        # K4: nonzero eigenvalues are 4,4,4 -> product 64
        Q = besag_precision(GridSpec.synthetic(2, 2))
        assert log_gen_det(Q) == pytest.approx(np.log(64.0))

    def test_single_cell_empty_product(self):
        assert log_gen_det(besag_precision(GridSpec.synthetic(1, 1))) == 0.0

    @pytest.mark.parametrize("nx,ny", [(3, 2), (4, 4), (5, 3), (7, 7), (10, 10)])
    def test_matches_dense_eigendecomposition(self, nx, ny):
        Q = besag_precision(GridSpec.synthetic(nx, ny))
        got = log_gen_det(Q)
        want = dense_log_gen_det(Q)
        assert got == pytest.approx(want, rel=1e-8)

    def test_disconnected_graph_rejected(self):
        block = besag_precision(GridSpec.synthetic(2, 2))
        Q = sp.block_diag([block, block]).tocsc()
        with pytest.raises(NumericError):
            log_gen_det(Q)


class TestSampling:
    def test_draws_sum_to_zero(self):
        g = ConstrainedGaussian(4, 5, tau=2.0)
        x = sample_constrained(g, rng=0, size=50)
        assert x.shape == (50, 20)
        assert np.allclose(x.sum(axis=1), 0.0, atol=1e-10)

    def test_deterministic_given_seed(self):
        g = ConstrainedGaussian(3, 3, tau=1.0)
        a = sample_constrained(g, rng=42, size=5)
        b = sample_constrained(g, rng=42, size=5)
        assert np.array_equal(a, b)

    def test_precision_scaling(self):
        # doubling tau shrinks draws by sqrt(2) exactly (same normal deviates)
        a = sample_constrained(ConstrainedGaussian(3, 4, tau=1.0), rng=7, size=4)
        b = sample_constrained(ConstrainedGaussian(3, 4, tau=2.0), rng=7, size=4)
        assert np.allclose(a / np.sqrt(2.0), b, atol=1e-12)

    @pytest.mark.parametrize("nx,ny", [(2, 2), (3, 2), (4, 4)])
    def test_empirical_covariance_matches_pinv(self, nx, ny):
        tau = 3.0
        g = ConstrainedGaussian(nx, ny, tau=tau)
        x = sample_constrained(g, rng=11, size=100_000)
        emp = x.T @ x / x.shape[0]
        want = np.linalg.pinv(besag_precision(GridSpec.synthetic(nx, ny)).toarray()) / tau
        scale = np.abs(want).max()
        assert np.abs(emp - want).max() < 0.05 * scale

    def test_bad_tau_rejected(self):
        with pytest.raises(ConfigError):
            ConstrainedGaussian(3, 3, tau=0.0)

    def test_precision_property(self):
        g = ConstrainedGaussian(3, 2, tau=2.5)
        want = 2.5 * besag_precision(GridSpec.synthetic(3, 2)).toarray()
        assert np.allclose(g.precision.toarray(), want)
