import numpy as np
import pytest

from nsf_rom.constitutive import MaterialLaw
from nsf_rom.exceptions import OutOfDomainError
from nsf_rom.mpm import (
    BoxRegion,
    Grid,
    HalfSpace,
    ParticleSystem,
    SimConfig,
    angular_momentum,
    bspline_weights,
    check_cfl,
    compact_stencil,
    default_mass_epsilon,
    g2p,
    grid_forces,
    grid_update,
    p2g,
    step,
)


def blob(rng, n=200, lo=0.35, hi=0.65, v_scale=1.0, C_scale=0.0):
    X = rng.uniform(lo, hi, size=(n, 3))
    ps = ParticleSystem.create(X, mass=rng.uniform(0.5, 2.0, n), volume0=1e-4, mu=10.0, lam=10.0)
    ps.v = rng.normal(scale=v_scale, size=(n, 3))
    ps.C = rng.normal(scale=C_scale, size=(n, 3, 3))
    return ps


def unit_grid(dx=1 / 16, boundaries=()):
    n = int(round(1 / dx)) + 1
    return Grid(np.zeros(3), dx, (n, n, n), list(boundaries))


class TestStencil:
    def test_partition_of_unity_and_gradient(self, rng):
        grid = unit_grid()
        st = bspline_weights(rng.uniform(0.2, 0.8, size=(1000, 3)), grid)
        np.testing.assert_allclose(st.w.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(st.dw.sum(axis=1), 0.0, atol=1e-12)
        assert st.flat.shape == (1000, 27)

    def test_node_centered_weights(self):
        grid = unit_grid()
        st = bspline_weights(np.array([[0.5, 0.5, 0.5]]), grid)
        w = np.sort(st.w[0])[::-1]
        assert w[0] == pytest.approx(0.75**3)
        assert np.count_nonzero(st.w[0] > 0) == 27

    def test_linear_reproduction(self, rng):
        # sum_i w_ip (x_i - x_p) = 0 for quadratic B-splines
        grid = unit_grid()
        st = bspline_weights(rng.uniform(0.2, 0.8, size=(100, 3)), grid)
        np.testing.assert_allclose(np.einsum("pi,pia->pa", st.w, st.dpos), 0.0, atol=1e-14)

    def test_out_of_domain(self):
        grid = unit_grid()
        with pytest.raises(OutOfDomainError) as info:
            bspline_weights(np.array([[0.5, 0.5, 0.5], [0.01, 0.5, 0.5]]), grid)
        assert list(info.value.indices) == [1]


class TestTransfers:
    def test_p2g_conserves_mass_and_momentum(self, rng):
        grid = unit_grid()
        cfg = SimConfig(dt=1e-3, gravity=np.zeros(3))
        ps = blob(rng, C_scale=1.0)
        gs = p2g(ps, grid, cfg)
        assert gs.mass.sum() == pytest.approx(ps.mass.sum(), rel=1e-12)
        np.testing.assert_allclose(gs.momentum.sum(axis=0), (ps.mass[:, None] * ps.v).sum(axis=0), rtol=1e-12, atol=1e-12)

    def test_compact_matches_full_grid(self, rng):
        grid = unit_grid()
        cfg = SimConfig(dt=1e-3)
        ps = blob(rng, C_scale=0.5)
        ps.tau = rng.normal(size=(len(ps), 3, 3))
        st = bspline_weights(ps.x, grid)
        cst, nodes = compact_stencil(st, grid.n_nodes)
        full, comp = p2g(ps, grid, cfg, st), p2g(ps, grid, cfg, cst, nodes)
        np.testing.assert_array_equal(full.mass[nodes], comp.mass)
        np.testing.assert_array_equal(grid_forces(ps, grid, st)[nodes], grid_forces(ps, grid, cst, nodes))

    def test_affine_field_reproduced(self, rng):
        # particles sampling v(x) = A x + b come back with C = A after P2G/G2P
        grid = unit_grid(1 / 32)
        cfg = SimConfig(dt=1e-6, gravity=np.zeros(3), material=MaterialLaw())
        pts = np.stack(np.meshgrid(*[np.arange(0.3, 0.7, 1 / 64)] * 3, indexing="ij"), -1).reshape(-1, 3)
        A = rng.normal(size=(3, 3))
        b = rng.normal(size=3)
        ps = ParticleSystem.create(pts, mass=1.0, volume0=1e-5, mu=0.0, lam=0.0)
        ps.v = pts @ A.T + b
        ps.C = np.broadcast_to(A, (len(ps), 3, 3)).copy()
        gs = p2g(ps, grid, cfg)
        out = g2p(gs, ps, grid, cfg, update_material=False)
        np.testing.assert_allclose(out.v, ps.v, atol=1e-10)
        np.testing.assert_allclose(out.C, ps.C, atol=1e-9)

    def test_apic_conserves_angular_momentum(self, rng):
        grid = unit_grid()
        cfg = SimConfig(dt=1e-3, gravity=np.zeros(3), material=MaterialLaw())
        ps = blob(rng, C_scale=2.0)
        L0 = angular_momentum(ps, grid)
        out = step(ps, grid, cfg)
        L1 = angular_momentum(out, grid)
        assert np.linalg.norm(L1 - L0) / np.linalg.norm(L0) < 1e-8

    def test_pic_dissipates_more(self, rng):
        grid = unit_grid()
        ps = blob(rng, C_scale=0.0)
        apic = SimConfig(dt=1e-3, gravity=np.zeros(3), transfer="apic")
        pic = SimConfig(dt=1e-3, gravity=np.zeros(3), transfer="pic")
        L0 = angular_momentum(ps, grid, "apic")
        la = np.linalg.norm(angular_momentum(step(ps, grid, apic), grid, "apic") - L0)
        lp = np.linalg.norm(angular_momentum(step(ps, grid, pic), grid, "pic") - L0)
        assert lp >= la

    def test_gravity_free_fall(self, rng):
        grid = unit_grid()
        cfg = SimConfig(dt=1e-3)
        ps = blob(rng, v_scale=0.0)
        out = step(ps, grid, cfg)
        np.testing.assert_allclose(out.v, np.broadcast_to(cfg.dt * cfg.gravity, out.v.shape), atol=1e-12)


class TestBoundaries:
    def test_sticky_floor(self, rng):
        grid = unit_grid(boundaries=[HalfSpace((0, 0.5, 0), (0, 1, 0), "sticky")])
        cfg = SimConfig(dt=1e-3, gravity=np.zeros(3))
        ps = ParticleSystem.create(np.array([[0.5, 0.45, 0.5]]), mass=1.0, volume0=1e-4, mu=0, lam=0, v=(1.0, -1.0, 0.0))
        gs = grid_update(p2g(ps, grid, cfg), np.zeros((grid.n_nodes, 3)), grid, cfg)
        pos = grid.node_positions(gs.active)
        below = pos[:, 1] < 0.5
        np.testing.assert_array_equal(gs.velocity[gs.active[below]], 0.0)

    def test_slip_keeps_tangential(self):
        grid = unit_grid(boundaries=[HalfSpace((0, 0.5, 0), (0, 1, 0), "slip")])
        cfg = SimConfig(dt=1e-3, gravity=np.zeros(3))
        ps = ParticleSystem.create(np.array([[0.5, 0.45, 0.5]]), mass=1.0, volume0=1e-4, mu=0, lam=0, v=(1.0, -1.0, 0.0))
        gs = grid_update(p2g(ps, grid, cfg), np.zeros((grid.n_nodes, 3)), grid, cfg)
        below = grid.node_positions(gs.active)[:, 1] < 0.5
        v = gs.velocity[gs.active[below]]
        np.testing.assert_allclose(v[:, 0], 1.0)
        np.testing.assert_allclose(v[:, 1], 0.0)

    def test_dirichlet_box(self):
        box = BoxRegion((0.4, 0.4, 0.4), (0.6, 0.6, 0.6), (0.0, 2.0, 0.0))
        grid = unit_grid(boundaries=[box])
        cfg = SimConfig(dt=1e-3, gravity=np.zeros(3))
        ps = ParticleSystem.create(np.array([[0.5, 0.5, 0.5]]), mass=1.0, volume0=1e-4, mu=0, lam=0)
        out = step(ps, grid, cfg)
        np.testing.assert_allclose(out.v, [[0.0, 2.0, 0.0]], atol=1e-12)

    def test_moving_half_space(self):
        h = HalfSpace((0, 0.2, 0), (0, 1, 0), "sticky", velocity=(0, 1.0, 0), start=0.0, stop=0.1)
        np.testing.assert_allclose(h.offset(0.05), [0, 0.25, 0])
        np.testing.assert_allclose(h.offset(1.0), [0, 0.3, 0])
        np.testing.assert_allclose(h.current_velocity(0.2), 0.0)


def test_cfl_warning():
    grid = unit_grid()
    cfg = SimConfig(dt=0.1)
    ps = ParticleSystem.create(np.array([[0.5, 0.5, 0.5]]), mass=1.0, volume0=1e-4, mu=0, lam=0, v=(10.0, 0, 0))
    with pytest.warns(RuntimeWarning):
        assert not check_cfl(ps, grid, cfg)


def test_mass_epsilon():
    grid = unit_grid()
    assert default_mass_epsilon(2.0, grid) == pytest.approx(2e-12 / grid.n_nodes)


def test_elastic_rest_state_stays_at_rest(rng):
    grid = unit_grid()
    cfg = SimConfig(dt=1e-3, gravity=np.zeros(3))
    X = np.stack(np.meshgrid(*[np.arange(0.4, 0.6, 1 / 32)] * 3, indexing="ij"), -1).reshape(-1, 3)
    ps = ParticleSystem.create(X, mass=1.0, volume0=1e-4, mu=10.0, lam=10.0)
    out = step(ps, grid, cfg)
    np.testing.assert_allclose(out.x, ps.x, atol=1e-15)
    np.testing.assert_allclose(out.tau, 0.0, atol=1e-12)
