"""Local problems, basis functions, projection and the coarse system."""
import numpy as np
import pytest
import scipy.sparse as sps

from nlmc_poro.assembly import assemble_system, roller_constraints
from nlmc_poro.coefficients import MaterialParams
from nlmc_poro.geometry import build_coarse_grid, build_fine_mesh, coarse_vertex_weights, embed_fractures
from nlmc_poro.nlmc import (BasisError, NLMCBuilder, X, Y, assemble_projection, basis_decay,
                            build_flow_constraints, build_projection, coarse_mass, compute_bases,
                            solve_displacement_basis, solve_pressure_basis, upscale)


def integral_operator(mesh, fr, cg):
    """Rows: matrix integral per coarse cell, then fracture integral per continuum."""
    n = cg.num_cells
    G_m = sps.csr_matrix((mesh.areas, (cg.fine_to_coarse, np.arange(mesh.num_cells))),
                         shape=(n, mesh.num_cells))
    offs = cg.fracture_offsets()
    rows = offs[cg.seg_to_coarse] + cg.seg_continuum
    G_f = sps.csr_matrix((fr.seg_length, (rows, np.arange(fr.num_segments))),
                         shape=(offs[-1], fr.num_segments))
    return sps.block_diag([G_m, G_f]).tocsr()


@pytest.fixture(scope="module")
def projections(small):
    return {s: build_projection(small.builder, s, small.system.offsets) for s in (1, 2)}


def test_single_cell_region_has_one_area_row(small_unfractured):
    lp = small_unfractured.builder.local_problem(5, 0)
    C_m, C_f = build_flow_constraints(lp)
    assert C_m.shape == (1, 72) and C_f.shape[0] == 0
    assert np.allclose(C_m.data, small_unfractured.mesh.areas[0])


@pytest.mark.parametrize("i, s", [(0, 1), (5, 1), (10, 2), (15, 3)])
def test_constraint_rows_integrate_constants_to_cell_areas(small, i, s):
    lp = small.builder.local_problem(i, s)
    C_m, C_f = build_flow_constraints(lp)
    assert np.allclose(C_m @ np.ones(C_m.shape[1]), small.cg.cell_area[lp.region], rtol=1e-13)
    lengths = np.array([small.cg.continuum_length[k][l] for (k, l) in lp.continuum_rows])
    assert np.allclose(C_f @ np.ones(C_f.shape[1]), lengths, rtol=1e-13)


def test_interior_region_row_count():
    m = build_fine_mesh(12, 12)
    fr = embed_fractures(m, [])
    cg = build_coarse_grid(m, fr, 6, 6)
    op = assemble_system(m, fr, cg, MaterialParams()).operator
    b = NLMCBuilder(m, fr, cg, op, roller_constraints(m)[0])
    lp = b.local_problem(int(cg.index(2, 2)), 2)
    assert lp.C_flow.shape[0] == 25
    assert lp.S_disp.shape[0] == 50


def test_local_operators_are_principal_submatrices(small):
    lp = small.builder.local_problem(6, 1)
    full = small.builder.flow
    assert abs(lp.A_flow - full[lp.flow_dofs][:, lp.flow_dofs]).max() == 0.0


@pytest.mark.parametrize("i", range(16))
def test_raw_bases_reproduce_constraints(small, i):
    lp = small.builder.local_problem(i, 1)
    targets = list(range(1 + len(small.cg.continua[i])))
    psi = solve_pressure_basis(lp, targets)
    want = np.zeros((lp.C_flow.shape[0], len(targets)))
    want[lp.home_position, 0] = 1.0
    for t in targets[1:]:
        want[lp.continuum_rows[(i, t - 1)], t] = 1.0
    assert abs(lp.C_flow @ psi - want).max() <= 1e-9
    phi = solve_displacement_basis(lp, (X, Y))
    want = np.zeros((lp.S_disp.shape[0], 2))
    want[lp.home_position, 0] = want[lp.n_coarse + lp.home_position, 1] = 1.0
    assert abs(lp.S_disp @ phi - want).max() <= 1e-9


@pytest.mark.parametrize("s", [1, 2])
def test_projection_reproduces_constraints(small, projections, s):
    P = projections[s]
    fo = P.fine_offsets
    G = integral_operator(small.mesh, small.fr, small.cg)
    W = coarse_vertex_weights(small.mesh, small.cg)
    R = P.R
    pressure = (G @ R[: P.offsets[2], : fo[2]].T).toarray() / P.scale[: P.offsets[2]]
    assert abs(pressure - np.eye(P.offsets[2])).max() <= 1e-9
    n = small.cg.num_cells
    ux = (W @ R[P.offsets[2]:, fo[2]:fo[3]].T).toarray() / P.scale[P.offsets[2]:]
    uy = (W @ R[P.offsets[2]:, fo[3]:].T).toarray() / P.scale[P.offsets[2]:]
    assert abs(ux - np.hstack([np.eye(n), np.zeros((n, n))])).max() <= 1e-9
    assert abs(uy - np.hstack([np.zeros((n, n)), np.eye(n)])).max() <= 1e-9


def test_pressure_bases_form_partition_of_unity(small, projections):
    P = projections[2]
    n_p = P.fine_offsets[2]
    total = np.asarray(P.R[: P.offsets[2], :n_p].sum(axis=0)).ravel()
    assert np.allclose(total, 1.0, atol=1e-12)


def test_raw_projection_matches_constraints_without_correction(small):
    bases = compute_bases(small.builder, 1)
    P = assemble_projection(small.cg, bases, small.system.offsets, small.mesh, 1,
                            partition_of_unity=False)
    G = integral_operator(small.mesh, small.fr, small.cg)
    k = P.offsets[2]
    pressure = (G @ P.R[:k, : P.fine_offsets[2]].T).toarray() / P.scale[:k]
    assert abs(pressure - np.eye(k)).max() <= 1e-9


def swap_vertices(mesh):
    n1 = mesh.nx + 1
    v = np.arange(mesh.num_vertices)
    return (v % n1) * n1 + v // n1


def test_displacement_basis_reflection_symmetry(small_unfractured):
    sm = small_unfractured
    nv = sm.mesh.num_vertices
    i = int(sm.cg.index(1, 1))
    lp = sm.builder.local_problem(i, 1)
    phi = solve_displacement_basis(lp, (X, Y))
    g = np.zeros((2 * nv, 2))
    g[lp.disp_dofs] = phi
    sw = swap_vertices(sm.mesh)
    x_ux, x_uy = g[:nv, 0], g[nv:, 0]
    y_ux, y_uy = g[:nv, 1], g[nv:, 1]
    scale = abs(g).max()
    assert abs(y_uy - x_ux[sw]).max() <= 1e-9 * scale
    assert abs(y_ux - x_uy[sw]).max() <= 1e-9 * scale


def test_fracture_free_projection_layout(small_unfractured):
    sm = small_unfractured
    P = build_projection(sm.builder, 1, sm.system.offsets)
    n = sm.cg.num_cells
    assert P.R.shape == (3 * n, sm.system.size)
    blocks = P.blocks()
    assert blocks["R_mf"].shape[1] == 0 and blocks["R_fm"].shape[0] == 0
    # X bases carry a u_y component and vice versa
    assert blocks["R_xy"].nnz > 0 and blocks["R_yx"].nnz > 0
    assert list(np.unique(P.dof_kind)) == ["m", "x", "y"]


@pytest.mark.parametrize("s", [1, 2])
def test_row_support_inside_region(small, projections, s):
    P = projections[s]
    assert P.R.shape == (small.cg.dof_count, small.system.size)
    assert np.all(basis_decay(P, small.cg, small.mesh, layers=s) == 0.0)
    assert np.any(basis_decay(P, small.cg, small.mesh, layers=s - 1) > 0.0)


def test_cross_blocks_are_filled(small, projections):
    b = projections[1].blocks()
    assert b["R_mf"].nnz > 0 and b["R_fm"].nnz > 0


def test_coarse_mass_on_20x20_grid():
    m = build_fine_mesh(20, 20)
    fr = embed_fractures(m, [])
    cg = build_coarse_grid(m, fr, 20, 20)
    mp = MaterialParams()
    M = coarse_mass(cg, mp)
    assert M.size == 1200
    assert np.allclose(M[:400], mp.a_m * 0.0025, rtol=1e-12)
    assert np.all(M[400:] == 0.0)


def test_coarse_system(small, projections):
    P = projections[2]
    mp = small.mp
    cs = upscale(small.system, P, small.cg, mp)
    o = cs.offsets
    assert cs.size == small.cg.dof_count == sum(3 + len(c) for c in small.cg.continua)
    lengths = np.concatenate(small.cg.continuum_length)
    assert np.allclose(cs.mass[o[1]:o[2]], mp.a_f * lengths, rtol=1e-14)
    assert np.all(cs.mass[: o[2]] > 0) and np.all(cs.mass[o[2]:] == 0)
    const = np.r_[np.ones(o[2]), np.zeros(o[4] - o[2])]
    flow = cs.A[: o[2]]
    assert abs(flow @ const).max() <= 1e-9 * abs(flow[:, : o[2]]).max()
    assert np.allclose(cs.source, P.R @ small.system.source, rtol=0, atol=1e-18)


@pytest.mark.parametrize("s", [1, 2])
def test_coarse_operator_is_nonlocal(small, projections, s):
    cg = small.cg
    I = np.arange(cg.num_cells) % cg.Nx
    J = np.arange(cg.num_cells) // cg.Nx
    A = upscale(small.system, projections[s], cg, small.mp).A[: cg.num_cells, : cg.num_cells].tocoo()
    dist = np.maximum(abs(I[A.row] - I[A.col]), abs(J[A.row] - J[A.col]))[A.data != 0]
    assert dist.max() >= 2
    assert dist.max() <= 2 * s + 1


def test_parallel_build_is_bitwise_identical(small):
    a = build_projection(small.builder, 1, small.system.offsets, workers=1).R
    b = build_projection(small.builder, 1, small.system.offsets, workers=3).R
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.data, b.data)


def test_missing_basis_is_reported(small):
    bases = compute_bases(small.builder, 0)
    with pytest.raises(BasisError):
        assemble_projection(small.cg, bases[:-1], small.system.offsets, small.mesh)
    lp = small.builder.local_problem(0, 0)
    with pytest.raises(BasisError):
        solve_pressure_basis(lp, [1 + len(small.cg.continua[0])])
