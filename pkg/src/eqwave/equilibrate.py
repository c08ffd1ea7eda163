"""Vertex-patch flux equilibration in RT_{p+1} and elementwise estimator contributions.

Each patch problem is a divergence-constrained least-squares problem whose
matrix depends only on the mesh and the coefficients; the time step enters
through the right-hand side alone. :class:`FluxReconstructor` therefore
factorizes every patch once and sums the patch solution operators into one
sparse matrix acting on the step data ``z = [u, D2u, Du, f_p, g_p]``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import ElementQuadrature, LoadAssembler, MaterialData, edge_lagrange_basis
from .mesh import Patch, PatchClass, build_patches
from .spaces import (
    LagrangeSpace,
    RTSpace,
    edge_points,
    edge_quadrature,
    lagrange_edge_dofs,
    lagrange_eval,
    legendre01,
    polynomial_basis,
    polynomial_dim,
    quadrature,
    rt_eval,
)


class PatchSolveError(np.linalg.LinAlgError):
    pass


class _Reference:
    """Element-independent integrals on the reference triangle for Lagrange degree p."""

    def __init__(self, p: int):
        q = p + 1
        self.p, self.q = p, q
        rule = quadrature(2 * q + 2)
        x, w = rule.points, rule.weights
        tau, div = rt_eval(q, x)
        phi, dphi = lagrange_eval(p, x)
        lam, _ = lagrange_eval(1, x)
        poly = polynomial_basis(q, x)
        self.mass = np.einsum("n,nia,njb->ijab", w, tau, tau)  # (nrt, nrt, 2, 2)
        self.div = np.einsum("n,nm,ni->mi", w, poly, div)  # (npol, nrt)
        self.hat_grad = np.einsum("n,nk,nia,nla->kil", w, lam, tau, dphi)  # (3, nrt, nlag)
        self.hat2 = w[:, None] * lam**2  # weights for (psi_a^2 ., .)
        self.dphi = dphi
        self.hat_value = np.einsum("n,ni,nl,nm->ilm", w, lam, phi, poly)  # (3, nlag, npol)
        self.grad_poly = np.einsum("n,nlc,nm->lmc", w, dphi, poly)  # (nlag, npol, 2)
        self.poly_mass = np.einsum("n,nm,nk->mk", w, poly, poly)
        er = edge_quadrature(2 * q + 2)
        self.edge = np.empty((3, 3, len(phi[0]), q + 1))  # (edge k, hat i, lag l, moment j)
        L = np.array([legendre01(j, er.points) for j in range(q + 1)])
        for k in range(3):
            xe = edge_points(k, er.points)
            ph, _ = lagrange_eval(p, xe)
            la, _ = lagrange_eval(1, xe)
            self.edge[k] = np.einsum("n,ni,nl,jn->ilj", er.weights, la, ph, L)


@dataclass
class PatchProblem:
    """Dense data of one patch problem, dofs in global RT numbering.

    ``z_index`` lists the global step-data entries the patch reads; the
    ``*_map`` matrices act on that local slice.
    """

    patch: Patch
    dofs: np.ndarray
    fixed: np.ndarray  # bool over dofs
    mass: np.ndarray  # (A^-1 tau_i, tau_j)
    div: np.ndarray  # (div tau_j, q_m), all multiplier rows
    keep: np.ndarray  # bool over multiplier rows actually imposed
    grad: np.ndarray  # (tau_i, psi_a grad phi_l), columns = lag_dofs
    stiffness: np.ndarray  # (A psi_a grad phi_l, psi_a grad phi_k) on the patch
    lag_dofs: np.ndarray
    z_index: np.ndarray
    u_map: np.ndarray  # selects u from the local step data
    div_map: np.ndarray  # step data -> (d^a, q_m)
    prescribed_map: np.ndarray  # step data -> fixed dof values

    @property
    def n_dofs(self) -> int:
        return len(self.dofs)

    @property
    def compatible_required(self) -> bool:
        return not self.keep.all()

    @cached_property
    def _kkt(self):
        free = ~self.fixed
        Mf = self.mass[np.ix_(free, free)]
        Bf = self.div[self.keep][:, free]
        nf, nk = Mf.shape[0], Bf.shape[0]
        K = np.zeros((nf + nk, nf + nk))
        K[:nf, :nf] = Mf
        K[nf:, :nf] = Bf
        K[:nf, nf:] = Bf.T
        lu = sla.lu_factor(K, check_finite=False)
        piv = np.abs(np.diag(lu[0]))
        if piv.min() <= 1e-13 * piv.max():
            raise PatchSolveError(f"singular local problem at vertex {self.patch.vertex}")
        return lu, nf

    def solve(self, linear: np.ndarray, div_rhs: np.ndarray, prescribed: np.ndarray) -> np.ndarray:
        """Minimize 1/2 t.M.t + linear.t subject to div rows and fixed dofs.

        Works column-wise when the right-hand sides are matrices.
        """
        lu, nf = self._kkt
        free = ~self.fixed
        lin = np.asarray(linear, dtype=float)
        top = -lin[free] - self.mass[np.ix_(free, self.fixed)] @ prescribed
        bot = div_rhs[self.keep] - self.div[self.keep][:, self.fixed] @ prescribed
        sol = sla.lu_solve(lu, np.concatenate([top, bot]), check_finite=False)
        out = np.empty((self.n_dofs,) + sol.shape[1:])
        out[free] = sol[:nf]
        out[self.fixed] = prescribed
        return out

    def operator(self) -> np.ndarray:
        """Dense map from the local step data to the patch flux coefficients."""
        return self.solve(self.grad @ self.u_map, self.div_map, self.prescribed_map)

    def objective(self, tau: np.ndarray, u_local: np.ndarray) -> float:
        """||A^-1 tau + psi_a grad u||^2_{A, patch}."""
        return float(tau @ self.mass @ tau + 2.0 * tau @ self.grad @ u_local + u_local @ self.stiffness @ u_local)


@dataclass(frozen=True)
class PatchResidualData:
    div_moments: np.ndarray  # (d^a, q_m) for every multiplier row
    boundary: np.ndarray  # values of the fixed dofs: moments of b^a, zero elsewhere
    volume_integral: float  # (d^a, 1) over the patch
    boundary_integral: float  # (b^a, 1) over the absorbing part


@dataclass(frozen=True)
class LocalFlux:
    vertex: int
    dofs: np.ndarray
    coefficients: np.ndarray


class FluxReconstructor:
    """Equilibrated flux and estimator for a Lagrange space of degree p on a fixed mesh."""

    def __init__(self, space: LagrangeSpace, materials: MaterialData, loads: LoadAssembler | None = None,
                 threads: int = 1):
        mesh = space.mesh
        p = space.p
        q = p + 1
        self.space = space
        self.materials = materials
        self.loads = loads or LoadAssembler(space, materials)
        self.rt = RTSpace(mesh, q)
        self.ref = _Reference(p)
        self.patches = build_patches(mesh)
        self.threads = max(1, int(threads))
        ne = mesh.n_elements
        nl = space.n_local
        self.npol = polynomial_dim(q)

        self.mu = materials.element_mu(mesh)
        self.A = materials.element_A(mesh)
        self.Ainv = np.linalg.inv(self.A)
        J, det, Jinv = mesh.jacobians, mesh.dets, mesh.inverse_jacobians
        s = self.rt.signs
        G = np.einsum("kca,kcd,kdb->kab", J, self.Ainv, J) / det[:, None, None]
        self.el_mass = np.einsum("kab,ijab->kij", G, self.ref.mass) * s[:, :, None] * s[:, None, :]
        self.el_div = self.ref.div[None] * s[:, None, :]
        # (tau_i, psi_a grad phi_l)_K for each local hat function a
        self.el_grad = self.ref.hat_grad[None] * s[:, None, :, None]
        # (A psi_a grad phi_l, psi_a grad phi_k)_K, only needed to evaluate objectives
        pg = np.einsum("kji,qlj->kqli", Jinv, self.ref.dphi)
        self.el_stiff = np.einsum("k,qn,kqia,kab,kqjb->knij", det, self.ref.hat2, pg, self.A, pg)
        # hat gradients g_i = J^-T grad(lambda_i); w_i = J^-1 A g_i
        dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        g = np.einsum("kji,nj->kni", Jinv, dlam)
        w = np.einsum("kij,kjl,knl->kni", Jinv, self.A, g)
        self.hat_grads = g
        # (mu lambda_i phi_l, q_m)_K and (A g_i . grad phi_l, q_m)_K as (ne, 3, npol, nlag)
        self.el_hat_value = (self.mu * det)[:, None, None, None] * self.ref.hat_value.transpose(0, 2, 1)[None]
        self.el_hat_grad = det[:, None, None, None] * np.einsum("knc,lmc->knml", w, self.ref.grad_poly)

        faces = self.loads.faces
        self.face_of_edge = -np.ones(mesh.n_edges, dtype=np.int64)
        self.face_of_edge[faces.edges] = np.arange(len(faces.edges))
        self.face_gamma = self.loads.gamma
        n_lag = space.n_dofs
        self.z_offsets = {
            "u": 0,
            "a": n_lag,
            "v": 2 * n_lag,
            "f": 3 * n_lag,
            "g": 3 * n_lag + ne * nl,
        }
        self.n_z = 3 * n_lag + ne * nl + len(faces.edges) * (p + 1)
        self.operator = self._build_operator()
        self._quadrature_maps()

    # --- patch problems -----------------------------------------------------

    def patch_problem(self, patch: Patch) -> PatchProblem:
        mesh, space = self.space.mesh, self.space
        p, q, nl, npol = space.p, self.rt.q, space.n_local, self.npol
        a = patch.vertex
        els = patch.elements
        nel = len(els)
        hat = np.array([int(np.flatnonzero(mesh.elements[k] == a)[0]) for k in els])
        rt_el = self.rt.element_dofs[els]
        dofs = np.unique(rt_el)
        loc = np.searchsorted(dofs, rt_el)
        lag_el = space.element_dofs[els]
        lag = np.unique(lag_el)
        lloc = np.searchsorted(lag, lag_el)
        nd, nlg = len(dofs), len(lag)

        M = np.zeros((nd, nd))
        C = np.zeros((nd, nlg))
        Kst = np.zeros((nlg, nlg))
        B = np.zeros((nel * npol, nd))
        for r, k in enumerate(els):
            M[np.ix_(loc[r], loc[r])] += self.el_mass[k]
            C[np.ix_(loc[r], lloc[r])] += self.el_grad[k, hat[r]]
            Kst[np.ix_(lloc[r], lloc[r])] += self.el_stiff[k, hat[r]]
            B[r * npol:(r + 1) * npol, loc[r]] = self.el_div[k]

        # local step data: u, a, v on lag dofs, f on patch elements, g on patch absorbing faces
        my_faces = [int(self.face_of_edge[e]) for e in patch.absorbing_edges]
        off = self.z_offsets
        z_index = np.concatenate([
            off["u"] + lag, off["a"] + lag, off["v"] + lag,
            (off["f"] + els[:, None] * nl + np.arange(nl)[None, :]).reshape(-1),
            (off["g"] + np.array(my_faces, dtype=np.int64)[:, None] * (p + 1) + np.arange(p + 1)[None, :]).reshape(-1),
        ])
        nz = len(z_index)
        zu, za, zv, zf = 0, nlg, 2 * nlg, 3 * nlg
        zg = zf + nel * nl
        u_map = np.zeros((nlg, nz))
        u_map[:, zu:zu + nlg] = np.eye(nlg)

        R = np.zeros((nel * npol, nz))
        for r, k in enumerate(els):
            rows = slice(r * npol, (r + 1) * npol)
            hv = self.el_hat_value[k, hat[r]]
            R[rows, zf + r * nl: zf + (r + 1) * nl] += hv
            R[np.ix_(np.arange(rows.start, rows.stop), za + lloc[r])] -= hv
            R[np.ix_(np.arange(rows.start, rows.stop), zu + lloc[r])] -= self.el_hat_grad[k, hat[r]]

        fixed = np.zeros(nd, dtype=bool)
        interior_vertex = patch.cls is PatchClass.INTERIOR
        zero_edges = [patch.outer_edges]
        if interior_vertex:
            zero_edges.append(patch.dirichlet_edges)
        for e in np.concatenate(zero_edges + [patch.absorbing_edges]).astype(np.int64):
            fixed[np.searchsorted(dofs, self.rt.edge_dofs(e))] = True
        P = np.zeros((nd, nz))
        ref_edge = self.ref.edge
        for fi, e in enumerate(patch.absorbing_edges):
            f = my_faces[fi]
            k = int(self.loads.faces.elements[f])
            kl = int(self.loads.faces.local[f])
            r = int(np.flatnonzero(els == k)[0])
            i = hat[r]
            scale = self.face_gamma[f] * mesh.edge_lengths[e]
            sg = self.rt.signs[k, kl * (q + 1):(kl + 1) * (q + 1)]
            rows = np.searchsorted(dofs, self.rt.edge_dofs(e))
            E = ref_edge[kl, i].T * (scale * sg)[:, None]  # (q+1, nlag)
            # b^a = psi_a gamma (Du - g), the sign for which the patch data are compatible
            P[np.ix_(rows, zv + lloc[r])] += E
            P[np.ix_(rows, zg + fi * (p + 1) + np.arange(p + 1))] -= E[:, lagrange_edge_dofs(p, kl)]
        P = P[fixed]

        keep = np.ones(nel * npol, dtype=bool)
        has_free_boundary = (not interior_vertex) and len(patch.dirichlet_edges) > 0
        if not has_free_boundary:
            keep[0] = False
        return PatchProblem(patch, dofs, fixed, M, B, keep, C, Kst, lag, z_index, u_map, R, P)

    def _patch_block(self, patch: Patch):
        prob = self.patch_problem(patch)
        op = prob.operator()
        rows = np.repeat(prob.dofs, len(prob.z_index))
        cols = np.tile(prob.z_index, len(prob.dofs))
        return rows, cols, op.reshape(-1)

    def _build_operator(self) -> sp.csr_matrix:
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                blocks = list(pool.map(self._patch_block, self.patches))
        else:
            blocks = [self._patch_block(pt) for pt in self.patches]
        rows = np.concatenate([b[0] for b in blocks])
        cols = np.concatenate([b[1] for b in blocks])
        data = np.concatenate([b[2] for b in blocks])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.rt.n_dofs, self.n_z))

    # --- step data ----------------------------------------------------------

    def step_data(self, u, a, v, f_loc, g_loc) -> np.ndarray:
        return np.concatenate([u, a, v, np.asarray(f_loc).reshape(-1), np.asarray(g_loc).reshape(-1)])

    def reconstruct(self, u, a, v, f_loc, g_loc) -> np.ndarray:
        """Global RT coefficients of the equilibrated flux for one time step."""
        return self.operator @ self.step_data(u, a, v, f_loc, g_loc)

    def residual_data(self, problem: PatchProblem, z: np.ndarray) -> PatchResidualData:
        """Right-hand sides of one patch problem for global step data ``z``."""
        zl = z[problem.z_index]
        moments = problem.div_map @ zl
        presc = problem.prescribed_map @ zl
        # the first multiplier function and the first edge moment are both the constant 1
        vol = float(moments[:: self.npol].sum())
        fixed_dofs = problem.dofs[problem.fixed]
        bnd = 0.0
        q = self.rt.q
        for e in problem.patch.absorbing_edges:
            f = int(self.face_of_edge[e])
            k, kl = int(self.loads.faces.elements[f]), int(self.loads.faces.local[f])
            sign = self.rt.signs[k, kl * (q + 1)]
            bnd += float(sign * presc[np.searchsorted(fixed_dofs, self.rt.edge_dofs(e)[0])])
        return PatchResidualData(moments, presc, vol, bnd)

    def solve_patch(self, problem: PatchProblem, data: PatchResidualData, u_local: np.ndarray) -> LocalFlux:
        tau = problem.solve(problem.grad @ u_local, data.div_moments, data.boundary)
        return LocalFlux(problem.patch.vertex, problem.dofs, tau)

    def assemble_flux(self, local_fluxes) -> np.ndarray:
        sigma = np.zeros(self.rt.n_dofs)
        for lf in sorted(local_fluxes, key=lambda x: x.vertex):
            np.add.at(sigma, lf.dofs, lf.coefficients)
        return sigma

    # --- evaluation ---------------------------------------------------------

    def _quadrature_maps(self):
        mesh = self.space.mesh
        q = self.rt.q
        self.eq = ElementQuadrature(self.space, 2 * q + 2)
        tau, div = rt_eval(q, self.eq.rule.points)
        ne, nq, nrt = mesh.n_elements, self.eq.n_points, self.rt.n_local
        s = self.rt.signs
        phys = np.einsum("kab,nib->knia", mesh.jacobians, tau) / mesh.dets[:, None, None, None]
        phys = phys * s[:, None, :, None]
        rows = np.repeat(np.arange(ne * nq * 2), nrt)
        cols = np.broadcast_to(self.rt.element_dofs[:, None, None, :], (ne, nq, 2, nrt)).reshape(-1)
        self.flux_map = sp.csr_matrix((phys.transpose(0, 1, 3, 2).reshape(-1), (rows, cols)),
                                      shape=(ne * nq * 2, self.rt.n_dofs))
        pdiv = div[None] * s[:, None, :] / mesh.dets[:, None, None]
        rows = np.repeat(np.arange(ne * nq), nrt)
        cols = np.broadcast_to(self.rt.element_dofs[:, None, :], (ne, nq, nrt)).reshape(-1)
        self.div_map = sp.csr_matrix((pdiv.reshape(-1), (rows, cols)), shape=(ne * nq, self.rt.n_dofs))

    def eta_elements(self, sigma: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Elementwise ||A^-1 sigma + grad u||_{A,K}."""
        ne, nq = self.space.mesh.n_elements, self.eq.n_points
        sq = (self.flux_map @ sigma).reshape(ne, nq, 2)
        gq = (self.eq.gradient_map @ u).reshape(ne, nq, 2)
        w = np.einsum("kab,kqb->kqa", self.Ainv, sq) + gq
        e2 = np.einsum("kq,kqa,kab,kqb->k", self.eq.weights, w, self.A, w)
        return np.sqrt(np.maximum(e2, 0.0))

    def divergence_defects(self, sigma: np.ndarray, a: np.ndarray, f_loc: np.ndarray) -> tuple[np.ndarray, float]:
        """Per-element ||div sigma - mu (f_p - a)||_K and the global ||mu (f_p - a)||."""
        ne, nq = self.space.mesh.n_elements, self.eq.n_points
        dq = (self.div_map @ sigma).reshape(ne, nq)
        fq = np.asarray(f_loc) @ self.eq.values.T
        aq = (self.eq.value_map @ a).reshape(ne, nq)
        target = self.mu[:, None] * (fq - aq)
        err = np.sqrt(np.einsum("kq,kq->k", self.eq.weights, (dq - target) ** 2))
        ref = float(np.sqrt(np.einsum("kq,kq->", self.eq.weights, target**2)))
        return err, ref

    @cached_property
    def _face_eval(self):
        faces = self.loads.faces
        q = self.rt.q
        er = edge_quadrature(2 * q + 2)
        tau_vals, phi_vals = [], []
        for k, kl in zip(faces.elements, faces.local):
            x = edge_points(kl, er.points)
            tv, _ = rt_eval(q, x)
            ph, _ = lagrange_eval(self.space.p, x)
            tau_vals.append(tv)
            phi_vals.append(ph)
        return er, np.array(tau_vals), np.array(phi_vals), edge_lagrange_basis(self.space.p, er.points)

    def boundary_defects(self, sigma: np.ndarray, v: np.ndarray, g_loc: np.ndarray) -> tuple[np.ndarray, float]:
        """Per absorbing face ||sigma.n - gamma (Du - g_p)||_F and the global reference norm."""
        faces = self.loads.faces
        if len(faces.edges) == 0:
            return np.zeros(0), 0.0
        mesh = self.space.mesh
        er, tau_vals, phi_vals, phi_e = self._face_eval
        els = faces.elements
        J, det = mesh.jacobians[els], mesh.dets[els]
        coeffs = sigma[self.rt.element_dofs[els]] * self.rt.signs[els]
        vals = np.einsum("fab,fnib,fi->fna", J, tau_vals, coeffs) / det[:, None, None]
        sn = np.einsum("fna,fa->fn", vals, faces.normals)
        vq = np.einsum("fnl,fl->fn", phi_vals, v[self.space.element_dofs[els]])
        gq = np.asarray(g_loc) @ phi_e.T
        target = self.face_gamma[:, None] * (vq - gq)
        wts = mesh.edge_lengths[faces.edges][:, None] * er.weights[None, :]
        err = np.sqrt(np.einsum("fn,fn->f", wts, (sn - target) ** 2))
        ref = float(np.sqrt(np.einsum("fn,fn->", wts, target**2)))
        return err, ref

    def compatibility_defects(self, u, a, v, f_loc, g_loc) -> tuple[np.ndarray, np.ndarray]:
        """Per-vertex |(d^a, 1) - (b^a, 1)_A| and the L1 scale ||d^a||_1 + ||b^a||_1."""
        mesh, space = self.space.mesh, self.space
        ne, nq = mesh.n_elements, self.eq.n_points
        lam, _ = lagrange_eval(1, self.eq.rule.points)
        fq = np.asarray(f_loc) @ self.eq.values.T
        aq = (self.eq.value_map @ a).reshape(ne, nq)
        gu = (self.eq.gradient_map @ u).reshape(ne, nq, 2)
        Ag = np.einsum("kab,knb->kna", self.A, self.hat_grads)
        d = (self.mu[:, None, None] * lam.T[None] * (fq - aq)[:, None, :]
             - np.einsum("kna,kqa->knq", Ag, gu))
        d_int = np.einsum("kq,knq->kn", self.eq.weights, d)
        d_abs = np.einsum("kq,knq->kn", self.eq.weights, np.abs(d))
        verts = mesh.elements.reshape(-1)
        vol = np.bincount(verts, d_int.reshape(-1), minlength=mesh.n_vertices)
        scale = np.bincount(verts, d_abs.reshape(-1), minlength=mesh.n_vertices)
        faces = self.loads.faces
        bnd = np.zeros(mesh.n_vertices)
        if len(faces.edges):
            er, _, phi_vals, phi_e = self._face_eval
            els = faces.elements
            vq = np.einsum("fnl,fl->fn", phi_vals, v[space.element_dofs[els]])
            gq = np.asarray(g_loc) @ phi_e.T
            b = self.face_gamma[:, None] * (vq - gq)
            L = mesh.edge_lengths[faces.edges]
            for end, s_weight in ((0, 1.0 - er.points), (1, er.points)):
                # endpoints of the local edge parametrization, mapped to global vertices
                loc_vertex = np.array([lv for lv in np.asarray([[1, 2], [0, 2], [0, 1]])[faces.local][:, end]])
                verts_f = mesh.elements[els, loc_vertex]
                hat_b = b * s_weight[None, :]
                bnd += np.bincount(verts_f, L * (hat_b @ er.weights), minlength=mesh.n_vertices)
                scale += np.bincount(verts_f, L * (np.abs(hat_b) @ er.weights), minlength=mesh.n_vertices)
        return np.abs(vol - bnd), scale

    @cached_property
    def compatibility_required(self) -> np.ndarray:
        """Vertices whose patch problem drops one divergence constraint."""
        out = np.zeros(self.space.mesh.n_vertices, dtype=bool)
        for pt in self.patches:
            out[pt.vertex] = pt.cls is PatchClass.INTERIOR or len(pt.dirichlet_edges) == 0
        return out


def null_space_oracle(problem: PatchProblem, linear: np.ndarray, div_rhs: np.ndarray,
                      prescribed: np.ndarray) -> np.ndarray:
    """Reference minimizer by explicit elimination of all constraints.

    Stacks the fixed-dof rows with every divergence row, takes a least-squares
    particular solution and an SVD null-space basis, then minimizes the
    quadratic over that null space.
    """
    nd = problem.n_dofs
    fixed_rows = np.eye(nd)[problem.fixed]
    Cmat = np.vstack([fixed_rows, problem.div])
    rhs = np.concatenate([prescribed, div_rhs])
    t0, *_ = np.linalg.lstsq(Cmat, rhs, rcond=None)
    Z = sla.null_space(Cmat)
    H = Z.T @ problem.mass @ Z
    y = np.linalg.solve(H, -Z.T @ (problem.mass @ t0 + linear))
    return t0 + Z @ y
