"""Deterministic equivalents of the per-AP Gram-matrix resolvent.

For one AP the composite channel is H = G ThetaHat F and the Gram matrix
is B = Wh^H H^H H Wh. The expected weighted resolvent trace

    (1/T_t) E Tr( Xi (z I - B)^-1 )

is computed without sampling by embedding B in a structured (T_t + L_AR +
R + L_AR) block matrix whose deterministic part carries the channel means
and whose random part is summarized by the one-sided correlation maps of
the scattered components. The four diagonal blocks of

        [ Ups    0       0       -Wh^H Fb^H ]
    M = [ 0      Gam     -Th^H Gb^H   I     ]
        [ 0      -Gb Th  Gamt    0          ]
        [ -Fb Wh I       0       Upst       ]

inverse reproduce the resolvent blocks; (Ups, Gam, Gamt, Upst) solve a
fixed point in which each block is rebuilt from correlation maps applied
to the diagonal blocks of M^-1. The (1,1) block of M^-1 is the
deterministic equivalent Bt(z) of (zI - B)^-1.

The same linearization yields the derivative of Bt with respect to any
conjugated phase entry: differentiating the fixed point gives a linear
system with the identical structure, solved either per element (forward)
or for all elements at once through one transposed solve (adjoint).

All solves take place at real z = -sigma^2 < 0 where every block is
Hermitian; a relative imaginary shift of z is available as a fallback if
an inverse degenerates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import map_left, map_right, mean_stacked, theta_hat
from .scenario import StatisticalCsi


class SolverError(RuntimeError):
    """Fixed-point iteration failed to converge or hit a singular matrix."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass
class SolverConfig:
    tol: float = 1e-10          # relative max-norm change across all blocks
    max_iters: int = 2000
    damping: float = 0.5        # Picard mixing, halved when the residual grows
    min_damping: float = 1.0 / 64.0
    imag_shift: float = 1e-9    # relative imaginary z-shift fallback


@dataclass
class CauchySolution:
    """Converged fixed point of one AP at evaluation point z."""

    z: complex
    upsilon: np.ndarray        # (T_t, T_t)
    gamma: np.ndarray          # (L_AR, L_AR)
    gamma_tilde: np.ndarray    # (R, R)
    upsilon_tilde: np.ndarray  # (L_AR, L_AR)
    g_x1: np.ndarray           # (T_t, T_t) = Bt(z)
    g_x2k: list                # k -> (L_k, L_k); leading R-block is pinned to zero
    g_x3: np.ndarray           # (R, R)
    g_x40: np.ndarray          # (R, R)
    g_x4k: list                # k -> (L_k, L_k)
    b_tilde: np.ndarray        # alias of g_x1
    residual: float
    iters: int
    residual_trace: np.ndarray
    shifted: bool              # True if the imaginary-shift fallback was used
    w_hat: np.ndarray = field(repr=False, default=None)
    th_hat: np.ndarray = field(repr=False, default=None)
    m_inv: np.ndarray = field(repr=False, default=None)


class CauchySolver:
    """Per-AP solver; precomputes stacked means and link maps for AP ``l``."""

    def __init__(self, csi: StatisticalCsi, l: int, cfg: SolverConfig | None = None):
        self.csi = csi
        self.l = l
        self.cfg = cfg or SolverConfig()
        c = csi.cfg
        self.N, self.K, self.R, self.T = c.N, c.K, c.R, c.T
        self.Tt, self.LAR = c.T_t, c.L_AR
        self.L_k = c.L_k
        self.n = self.Tt + 2 * self.LAR + self.R
        Fb, Gb = mean_stacked(csi)
        self.Fbar = Fb[l]
        self.Gbar = Gb[l]
        self.i1 = slice(0, self.Tt)
        self.i2 = slice(self.Tt, self.Tt + self.LAR)
        self.i3 = slice(self.Tt + self.LAR, self.Tt + self.LAR + self.R)
        self.i4 = slice(self.Tt + self.LAR + self.R, self.n)
        off = [self.R]
        for lk in self.L_k:
            off.append(off[-1] + lk)
        self.off = off                       # sub-block offsets inside L_AR
        self.f0_links = [csi.f0[(n, l)] for n in range(self.N)]
        self.f_links = [[csi.f[(n, k)] for n in range(self.N)] for k in range(self.K)]
        self.g_links = [csi.g[(k, l)] for k in range(self.K)]

    # -- correlation-map aggregates ---------------------------------------
    def _zeta0(self, Z0):
        T, Tt = self.T, self.Tt
        out = np.zeros((Tt, Tt), dtype=complex)
        for n in range(self.N):
            out[n * T:(n + 1) * T, n * T:(n + 1) * T] = map_left(self.f0_links[n], Z0)
        return out

    def _zeta_k(self, k, Z):
        T, Tt = self.T, self.Tt
        out = np.zeros((Tt, Tt), dtype=complex)
        for n in range(self.N):
            out[n * T:(n + 1) * T, n * T:(n + 1) * T] = map_left(self.f_links[k][n], Z)
        return out

    def _zeta0_t(self, Zt):
        T = self.T
        out = np.zeros((self.R, self.R), dtype=complex)
        for n in range(self.N):
            out += map_right(self.f0_links[n], Zt[n * T:(n + 1) * T, n * T:(n + 1) * T])
        return out

    def _zeta_k_t(self, k, Zt):
        T = self.T
        out = np.zeros((self.L_k[k], self.L_k[k]), dtype=complex)
        for n in range(self.N):
            out += map_right(self.f_links[k][n], Zt[n * T:(n + 1) * T, n * T:(n + 1) * T])
        return out

    def _assemble(self, Wh, th, in1, in2_list, in3, in40, in4_list):
        """Map-application core shared by the fixed point, its derivative and
        the transposed (adjoint) iteration.

        Consumes resolvent-type blocks and produces the matching self-energy
        contributions: the 4-blocks feed the T_t block, the 3-block feeds the
        RIS diagonal, the 2-blocks feed the R block, the 1-block feeds the
        stacked (R, L_1..L_K) diagonal.
        """
        R = self.R
        ups_c = self._zeta0(in40)
        for k in range(self.K):
            ups_c += self._zeta_k(k, in4_list[k])
        ups_c = -Wh.conj().T @ ups_c @ Wh

        gam_blocks = []
        gamt_c = np.zeros((R, R), dtype=complex)
        for k in range(self.K):
            th_k = th[self.off[k]:self.off[k + 1]]
            blk = map_left(self.g_links[k], in3)
            gam_blocks.append(-(th_k.conj()[:, None] * blk) * th_k[None, :])
            gamt_c -= map_right(self.g_links[k], (th_k[:, None] * in2_list[k]) * th_k.conj()[None, :])

        WXW = Wh @ in1 @ Wh.conj().T
        upst0 = -self._zeta0_t(WXW)
        upst_list = [-self._zeta_k_t(k, WXW) for k in range(self.K)]
        return ups_c, gam_blocks, gamt_c, upst0, upst_list

    # -- block embedding helpers ------------------------------------------
    def _embed_lar(self, block0, blocks):
        out = np.zeros((self.LAR, self.LAR), dtype=complex)
        if block0 is not None:
            out[:self.R, :self.R] = block0
        for k in range(self.K):
            sl = slice(self.off[k], self.off[k + 1])
            out[sl, sl] = blocks[k]
        return out

    def _extract(self, Minv):
        g1 = Minv[self.i1, self.i1]
        g3 = Minv[self.i3, self.i3]
        b2 = self.Tt
        b4 = self.Tt + self.LAR + self.R
        g2 = [Minv[b2 + self.off[k]:b2 + self.off[k + 1],
                   b2 + self.off[k]:b2 + self.off[k + 1]] for k in range(self.K)]
        g40 = Minv[b4:b4 + self.R, b4:b4 + self.R]
        g4 = [Minv[b4 + self.off[k]:b4 + self.off[k + 1],
                   b4 + self.off[k]:b4 + self.off[k + 1]] for k in range(self.K)]
        return g1, g2, g3, g40, g4

    def _coupling(self, Wh, th):
        """Constant off-diagonal part: M = diag(S) - C."""
        C = np.zeros((self.n, self.n), dtype=complex)
        FW = self.Fbar @ Wh
        GT = self.Gbar * th[None, :]
        C[self.i1, self.i4] = FW.conj().T
        C[self.i2, self.i3] = GT.conj().T
        C[self.i2, self.i4] = -np.eye(self.LAR)
        C[self.i3, self.i2] = GT
        C[self.i4, self.i1] = FW
        C[self.i4, self.i2] = -np.eye(self.LAR)
        return C

    def _build_m(self, C, S):
        M = -C.copy()
        M[self.i1, self.i1] += S[0]
        M[self.i2, self.i2] += S[1]
        M[self.i3, self.i3] += S[2]
        M[self.i4, self.i4] += S[3]
        return M

    # -- fixed point --------------------------------------------------------
    def solve(self, W_hat: np.ndarray, theta: np.ndarray, z: complex,
              warm: CauchySolution | None = None) -> CauchySolution:
        """Iterate the subordination fixed point to the configured tolerance."""
        try:
            return self._solve(W_hat, theta, complex(z), warm, shifted=False)
        except np.linalg.LinAlgError:
            zs = z + 1j * self.cfg.imag_shift * max(abs(z), 1.0)
            return self._solve(W_hat, theta, zs, warm, shifted=True)

    def _solve(self, Wh, theta, z, warm, shifted):
        cfg = self.cfg
        th = theta_hat(self.csi.cfg, theta)
        hermitian = (z.imag == 0.0)
        C = self._coupling(Wh, th)

        if warm is not None:
            S = [warm.upsilon.copy(), warm.gamma.copy(),
                 warm.gamma_tilde.copy(), warm.upsilon_tilde.copy()]
        else:
            # -I/2 rather than -I: the identity couplings of the linearization
            # cancel an exact -I start when all scattering vanishes, making the
            # very first joint matrix singular
            gam0 = self._embed_lar(None, [-1e-3 * np.eye(lk) for lk in self.L_k])
            S = [z * np.eye(self.Tt, dtype=complex), gam0,
                 np.eye(self.R, dtype=complex),
                 -0.5 * np.eye(self.LAR, dtype=complex)]

        rho = cfg.damping
        prev_res = np.inf
        trace = []
        res = np.inf
        # per-block scales remember their history so a block whose target is
        # exactly zero still registers as converged once its change is
        # negligible against the scale it started from
        hist = [max(np.abs(b).max(), 1e-300) for b in S]
        for it in range(1, cfg.max_iters + 1):
            M = self._build_m(C, S)
            Minv = np.linalg.inv(M)
            g1, g2, g3, g40, g4 = self._extract(Minv)
            if hermitian:
                g1 = 0.5 * (g1 + g1.conj().T)
                g3 = 0.5 * (g3 + g3.conj().T)
                g40 = 0.5 * (g40 + g40.conj().T)
                g2 = [0.5 * (x + x.conj().T) for x in g2]
                g4 = [0.5 * (x + x.conj().T) for x in g4]
            ups_c, gam_b, gamt_c, upst0, upst_b = self._assemble(Wh, th, g1, g2, g3, g40, g4)
            S_new = [z * np.eye(self.Tt) + ups_c,
                     self._embed_lar(None, gam_b),
                     np.eye(self.R) + gamt_c,
                     self._embed_lar(upst0, upst_b)]
            res = 0.0
            for i, (old, new) in enumerate(zip(S, S_new)):
                hist[i] = max(hist[i], np.abs(new).max())
                res = max(res, np.abs(new - old).max() / hist[i])
            trace.append(res)
            if res > prev_res:
                rho = max(rho / 2.0, cfg.min_damping)
            else:
                # the iteration is strongly contractive near the fixed point;
                # recover toward undamped Picard while the residual shrinks
                rho = min(1.25 * rho, 1.0)
            prev_res = res
            if res < cfg.tol:
                # return the last exact application, not the damped mix: it
                # satisfies the fixed-point equations to higher accuracy and
                # drops the geometric tail of the arbitrary start
                S = S_new
                break
            if it == 1 and warm is None:
                # the start point only guarantees an invertible first sweep;
                # one undamped application moves every block onto its
                # physical scale before mixing begins
                S = S_new
                hist = [max(np.abs(b).max(), 1e-300) for b in S]
                prev_res = np.inf
            else:
                S = [(1.0 - rho) * old + rho * new for old, new in zip(S, S_new)]
        else:
            raise SolverError(f"fixed point did not converge in {cfg.max_iters} "
                              f"iterations (best residual {min(trace):.3e})",
                              residual=min(trace))

        M = self._build_m(C, S)
        Minv = np.linalg.inv(M)
        g1, g2, g3, g40, g4 = self._extract(Minv)
        if hermitian:
            g1 = 0.5 * (g1 + g1.conj().T)
        return CauchySolution(
            z=z, upsilon=S[0], gamma=S[1], gamma_tilde=S[2], upsilon_tilde=S[3],
            g_x1=g1, g_x2k=g2, g_x3=g3, g_x40=g40, g_x4k=g4, b_tilde=g1,
            residual=res, iters=it, residual_trace=np.array(trace), shifted=shifted,
            w_hat=Wh, th_hat=th, m_inv=Minv)

    # -- derivatives --------------------------------------------------------
    def _element_index(self, k: int, l_k: int):
        j = self.off[k] - self.R + l_k      # flattened phase index
        p = self.R + j                      # position inside L_AR coordinates
        return j, p

    def _explicit_dm(self, sol: CauchySolution, k: int, l_k: int, conjugate: bool):
        """dM/dtheta*_{k,l_k} at frozen resolvent blocks (or dM/dtheta)."""
        j, p = self._element_index(k, l_k)
        th = sol.th_hat
        n_gam = self._embed_lar(None, [map_left(self.g_links[kk], sol.g_x3)
                                       for kk in range(self.K)])
        dM = np.zeros((self.n, self.n), dtype=complex)
        q = l_k
        th_k = th[self.off[k]:self.off[k + 1]]
        if conjugate:
            # conjugated entries live in Th^H: rows of the (2,*) blocks
            dM[self.Tt + p, self.i3] = -self.Gbar.conj().T[p, :]
            dM[self.Tt + p, self.i2] += -(n_gam[p, :] * th)
            D = np.zeros((self.L_k[k], self.L_k[k]), dtype=complex)
            D[:, q] = th_k * sol.g_x2k[k][:, q]
            dM[self.i3, self.i3] += -map_right(self.g_links[k], D)
        else:
            # plain entries live in Th: columns of the (*,2) blocks
            dM[self.i3.start:self.i3.stop, self.Tt + p] = -self.Gbar[:, p]
            dM[self.i2, self.Tt + p] += -(th.conj() * n_gam[:, p])
            D = np.zeros((self.L_k[k], self.L_k[k]), dtype=complex)
            D[q, :] = sol.g_x2k[k][q, :] * th_k.conj()
            dM[self.i3, self.i3] += -map_right(self.g_links[k], D)
        return dM

    def solve_derivative(self, sol: CauchySolution, k: int, l_k: int,
                         conjugate: bool = True, full: bool = False):
        """dBt/dtheta*_{k,l_k} (or dBt/dtheta with conjugate=False).

        Linear fixed point with the same contraction as the base solve;
        intermediates are generically non-Hermitian. With full=True also
        returns the relative residual and iteration count.
        """
        cfg = self.cfg
        Minv, Wh, th = sol.m_inv, sol.w_hat, sol.th_hat
        E = self._explicit_dm(sol, k, l_k, conjugate)
        S1 = np.zeros((self.Tt, self.Tt), dtype=complex)
        S2 = np.zeros((self.LAR, self.LAR), dtype=complex)
        S3 = np.zeros((self.R, self.R), dtype=complex)
        S4 = np.zeros((self.LAR, self.LAR), dtype=complex)
        dMinv = None
        res = np.inf
        for it in range(cfg.max_iters):
            Mp = self._build_m(-E, (S1, S2, S3, S4))
            dMinv = -Minv @ Mp @ Minv
            d1, d2, d3, d40, d4 = self._extract(dMinv)
            ups_c, gam_b, gamt_c, upst0, upst_b = self._assemble(Wh, th, d1, d2, d3, d40, d4)
            news = (ups_c, self._embed_lar(None, gam_b),
                    gamt_c, self._embed_lar(upst0, upst_b))
            res = max(np.abs(new - old).max()
                      for old, new in zip((S1, S2, S3, S4), news))
            S1, S2, S3, S4 = news
            if res <= cfg.tol * max(np.abs(dMinv).max(), 1e-30):
                break
        else:
            raise SolverError("derivative fixed point did not converge")
        Mp = self._build_m(-E, (S1, S2, S3, S4))
        dMinv = -Minv @ Mp @ Minv
        b_prime = dMinv[self.i1, self.i1]
        if full:
            rel = res / max(np.abs(dMinv).max(), 1e-30)
            return b_prime, rel, it + 1
        return b_prime

    def derivative_traces(self, sol: CauchySolution, D: np.ndarray) -> np.ndarray:
        """Tr(D dBt/dtheta*_j) for every phase element j in one adjoint solve."""
        cfg = self.cfg
        Minv, Wh, th = sol.m_inv, sol.w_hat, sol.th_hat
        Dhat = np.zeros((self.n, self.n), dtype=complex)
        Dhat[self.i1, self.i1] = D
        K0 = -Minv @ Dhat @ Minv

        def embed_g(x1, x2, x3, x40, x4):
            Z = np.zeros((self.n, self.n), dtype=complex)
            Z[self.i1, self.i1] = x1
            b2, b4 = self.Tt, self.Tt + self.LAR + self.R
            for k in range(self.K):
                Z[b2 + self.off[k]:b2 + self.off[k + 1],
                  b2 + self.off[k]:b2 + self.off[k + 1]] = x2[k]
            Z[self.i3, self.i3] = x3
            Z[b4:b4 + self.R, b4:b4 + self.R] = x40
            for k in range(self.K):
                Z[b4 + self.off[k]:b4 + self.off[k + 1],
                  b4 + self.off[k]:b4 + self.off[k + 1]] = x4[k]
            return Z

        def tstep(Y):
            x1, x2, x3, x40, x4 = self._assemble(
                Wh, th,
                Y[self.i1, self.i1],
                [Y[self.i2, self.i2][self.off[k]:self.off[k + 1],
                                     self.off[k]:self.off[k + 1]] for k in range(self.K)],
                Y[self.i3, self.i3],
                Y[self.i4, self.i4][:self.R, :self.R],
                [Y[self.i4, self.i4][self.off[k]:self.off[k + 1],
                                     self.off[k]:self.off[k + 1]] for k in range(self.K)])
            return x1, x2, x3, x40, x4

        k1 = tstep(K0)
        w = tuple(np.zeros_like(x) if not isinstance(x, list)
                  else [np.zeros_like(b) for b in x] for x in k1)
        scale = max(np.abs(K0).max(), 1e-300)
        for it in range(cfg.max_iters):
            Yin = -Minv @ embed_g(*w) @ Minv
            t = tstep(Yin)
            new = (k1[0] + t[0],
                   [k1[1][k] + t[1][k] for k in range(self.K)],
                   k1[2] + t[2], k1[3] + t[3],
                   [k1[4][k] + t[4][k] for k in range(self.K)])
            res = max([np.abs(new[0] - w[0]).max(), np.abs(new[2] - w[2]).max(),
                       np.abs(new[3] - w[3]).max()]
                      + [np.abs(new[1][k] - w[1][k]).max() for k in range(self.K)]
                      + [np.abs(new[4][k] - w[4][k]).max() for k in range(self.K)])
            w = new
            if res < cfg.tol * scale:
                break
        else:
            raise SolverError("adjoint fixed point did not converge")

        Z = K0 - Minv @ embed_g(*w) @ Minv
        Z22 = Z[self.i2, self.i2]
        Z32 = Z[self.i3, self.i2]
        Z33 = Z[self.i3, self.i3]
        n_gam = self._embed_lar(None, [map_left(self.g_links[kk], sol.g_x3)
                                       for kk in range(self.K)])
        A1 = np.einsum("ij,j,ji->i", n_gam, th, Z22)          # diag(N Th Z22)
        A3 = np.einsum("ri,ri->i", self.Gbar.conj(), Z32)     # diag(Gb^H Z32)
        out = np.zeros(self.csi.cfg.L_R, dtype=complex)
        for k in range(self.K):
            sl = slice(self.off[k], self.off[k + 1])
            th_k = th[sl]
            A2 = np.einsum("ij,j,ji->i", map_left(self.g_links[k], Z33),
                           th_k, sol.g_x2k[k])
            js = slice(self.off[k] - self.R, self.off[k + 1] - self.R)
            out[js] = -A1[sl] - A3[sl] - A2
        return out


# ---------------------------------------------------------------------------
# module-level conveniences
# ---------------------------------------------------------------------------

def solve_fixed_point(csi: StatisticalCsi, l: int, W_hat, theta, z,
                      solver_cfg: SolverConfig | None = None,
                      warm=None) -> CauchySolution:
    return CauchySolver(csi, l, solver_cfg).solve(W_hat, theta, z, warm=warm)


def cauchy_transform(Xi: np.ndarray, sol: CauchySolution) -> complex:
    """(1/T_t) Tr(Xi Bt(z))."""
    Tt = sol.b_tilde.shape[0]
    return complex(np.trace(Xi @ sol.b_tilde) / Tt)


def solve_derivative(csi: StatisticalCsi, l: int, sol: CauchySolution, k: int,
                     l_k: int, solver_cfg: SolverConfig | None = None,
                     conjugate: bool = True) -> np.ndarray:
    return CauchySolver(csi, l, solver_cfg).solve_derivative(sol, k, l_k, conjugate)


def spectral_range(sol: CauchySolution, sigma2: float):
    """Eigenvalue range of I + sigma^2 Bt(-sigma^2)."""
    M = np.eye(sol.b_tilde.shape[0]) + sigma2 * sol.b_tilde
    ev = np.linalg.eigvalsh(0.5 * (M + M.conj().T))
    return float(ev.min()), float(ev.max())
