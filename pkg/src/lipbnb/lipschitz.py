"""Certified l2 Lipschitz bounds for network objectives.

The tight bound comes from a semidefinite feasibility problem over
``(rho, T)`` with diagonal ``T >= 0``: whenever

    [A_F; B_F]^T [[-2 ab T, (a+b) T], [(a+b) T, -2 T]] [A_F; B_F]
        + C_F^T C_F - rho D_F^T D_F  <=  0

holds, ``sqrt(rho)`` is a Lipschitz constant of ``y -> c^T (A R y + B f(R y))``.
Every certificate returned here has been re-checked with a dense symmetric
eigensolver, independent of whichever optimizer produced ``(rho, T)``.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from .network import ActivationKind, NeuralNetwork, ObjectiveFunction

log = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8


class LipschitzMethod(str, enum.Enum):
    SDP = "sdp"
    NAIVE = "naive"


@dataclass(frozen=True)
class LipschitzCertificate:
    bound: float
    method: LipschitzMethod
    rho: float
    T_diag: Optional[np.ndarray] = None
    feasibility_margin: Optional[float] = None
    warning: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "bound": self.bound,
            "rho": self.rho,
            "feasibility_margin": self.feasibility_margin,
            "T_diag": None if self.T_diag is None else self.T_diag.tolist(),
            "warning": self.warning,
        }


@dataclass(frozen=True, eq=False)
class LmiSystem:
    """Block matrices of the LMI plus the per-neuron sector.

    Neurons whose sector is degenerate (``alpha == beta``) act linearly on
    the region of interest. Their relation ``phi_i = alpha_i v_i`` holds
    exactly for every pair of trajectories, so the quadratic form is only
    required to be negative on the subspace where those relations hold.
    ``basis`` spans that subspace; for a network without degenerate neurons
    it is the identity.
    """

    A_F: np.ndarray
    B_F: np.ndarray
    C_F: np.ndarray
    D_F: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def n_in(self) -> int:
        return self.D_F.shape[0]

    @property
    def n_neurons(self) -> int:
        return self.B_F.shape[0]

    @property
    def degenerate(self) -> np.ndarray:
        return self.alpha == self.beta

    @cached_property
    def basis(self) -> np.ndarray:
        """Map from ``(y, free neurons)`` coordinates to the full ``xi`` vector.

        Rows of ``A_F`` only reference earlier coordinates, so degenerate
        neurons are filled in by forward substitution.
        """
        n0, n = self.n_in, self.n_neurons
        free = np.flatnonzero(~self.degenerate)
        k = np.zeros((n0 + n, n0 + free.size))
        k[:n0, :n0] = np.eye(n0)
        col = dict(zip(free.tolist(), range(n0, n0 + free.size)))
        for i in range(n):
            if i in col:
                k[n0 + i, col[i]] = 1.0
            else:
                k[n0 + i] = self.alpha[i] * (self.A_F[i] @ k)
        return k

    @cached_property
    def orthonormal_basis(self) -> np.ndarray:
        if not self.degenerate.any():
            return np.eye(self.n_in + self.n_neurons)
        q, _ = np.linalg.qr(self.basis)
        return q

    def matrix(self, rho: float, T_diag) -> np.ndarray:
        """Dense LMI matrix at ``(rho, T)`` in full ``xi`` coordinates."""
        t = np.asarray(T_diag, dtype=float)
        return self.sector_part(t) + self.output_part() - rho * (self.D_F.T @ self.D_F)

    def sector_part(self, t: np.ndarray) -> np.ndarray:
        A, B = self.A_F, self.B_F
        m = A.T @ ((-2.0 * self.alpha * self.beta * t)[:, None] * A)
        cross = A.T @ (((self.alpha + self.beta) * t)[:, None] * B)
        m += cross + cross.T
        m += B.T @ ((-2.0 * t)[:, None] * B)
        return m

    def output_part(self) -> np.ndarray:
        return np.outer(self.C_F, self.C_F)


@dataclass(frozen=True)
class PreactivationBounds:
    lower: np.ndarray
    upper: np.ndarray
    layer_sizes: tuple

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise ValueError("pre-activation bounds must satisfy lower <= upper")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("pre-activation bounds must be finite")

    def layer(self, k: int):
        start = sum(self.layer_sizes[:k])
        stop = start + self.layer_sizes[k]
        return self.lower[start:stop], self.upper[start:stop]


def global_sector(network: NeuralNetwork):
    n = network.num_neurons
    return np.full(n, network.activation.alpha), np.full(n, network.activation.beta)


def build_lmi(obj: ObjectiveFunction, sector=None) -> LmiSystem:
    """Assemble ``A_F, B_F, C_F, D_F`` for ``obj``.

    ``sector`` is a pair ``(alpha, beta)`` of per-neuron arrays; the
    activation's global sector is used when omitted.
    """
    net = obj.network
    hidden = net.hidden_sizes
    if not hidden:
        raise ValueError("LMI needs at least one hidden layer")
    n0 = net.input_dim
    n_total = sum(hidden)
    if sector is None:
        sector = global_sector(net)
    alpha = np.asarray(sector[0], dtype=float).reshape(-1)
    beta = np.asarray(sector[1], dtype=float).reshape(-1)
    if alpha.shape != (n_total,) or beta.shape != (n_total,):
        raise ValueError(f"sector must list {n_total} neurons, got {alpha.size}/{beta.size}")

    blocks = [net.weights[0] @ obj.rotation] + list(net.weights[1:-1])
    a_f = np.hstack([block_diag(*blocks), np.zeros((n_total, hidden[-1]))])
    b_f = np.hstack([np.zeros((n_total, n0)), np.eye(n_total)])
    c_f = np.concatenate([
        obj.linear_row,
        np.zeros(n_total - hidden[-1]),
        obj.output_row @ net.weights[-1],
    ])
    d_f = np.hstack([np.eye(n0), np.zeros((n0, n_total))])
    return LmiSystem(a_f, b_f, c_f, d_f, alpha, beta)


def check_lmi_feasible(lmi: LmiSystem, rho: float, T_diag, psd_tolerance: float = PSD_TOLERANCE):
    """Return ``(feasible, lambda_max)`` for the LMI at ``(rho, T)``.

    ``lambda_max`` is taken over the subspace spanned by
    ``lmi.orthonormal_basis``, ignoring coordinates whose row is exactly
    zero at this ``(rho, T)``. Feasibility asks for
    ``lambda_max <= -(psd_tolerance + roundoff)`` where ``roundoff`` is a
    backward-error bound of the symmetric eigensolver.
    """
    t = np.asarray(T_diag, dtype=float)
    if rho < 0 or np.any(t < 0):
        raise ValueError("rho and T must be nonnegative")
    p = lmi.orthonormal_basis
    m = p.T @ lmi.matrix(rho, t) @ p
    m = 0.5 * (m + m.T)
    # an identically zero row leaves the quadratic form untouched, so it cannot violate it
    live = np.any(m != 0.0, axis=1)
    if not live.all():
        m = m[np.ix_(live, live)]
        if not m.size:
            return True, 0.0
    try:
        eigs = np.linalg.eigvalsh(m)
    except np.linalg.LinAlgError:
        return False, math.inf
    lam = float(eigs[-1])
    if not math.isfinite(lam):
        return False, math.inf
    roundoff = 8.0 * m.shape[0] * np.finfo(float).eps * float(np.abs(eigs).max())
    return lam <= -(psd_tolerance + roundoff), lam


def min_rho_for_T(lmi: LmiSystem, T_diag, shift: float) -> float:
    """Smallest ``rho`` with ``LMI(rho, T) <= -shift`` on the feasible subspace.

    In ``(y, free neuron)`` coordinates only the ``y`` block carries
    ``-rho``, so the answer is the top eigenvalue of the Schur complement
    onto that block. Returns ``inf`` when no ``rho`` works for this ``T``.
    """
    n0 = lmi.n_in
    k = lmi.basis
    q = k.T @ (lmi.sector_part(np.asarray(T_diag, dtype=float)) + lmi.output_part()) @ k
    q = 0.5 * (q + q.T) + shift * (k.T @ k)
    q_yy, q_yz, q_zz = q[:n0, :n0], q[:n0, n0:], q[n0:, n0:]
    try:
        if q_zz.size:
            if np.linalg.eigvalsh(q_zz)[-1] >= 0:
                return math.inf
            q_yy = q_yy - q_yz @ np.linalg.solve(q_zz, q_yz.T)
        rho = float(np.linalg.eigvalsh(0.5 * (q_yy + q_yy.T))[-1])
    except np.linalg.LinAlgError:
        return math.inf
    return max(rho, 0.0) if math.isfinite(rho) else math.inf


def spectral_norm(matrix, tol: float = 1e-10, max_iter: int = 10000, seed: int = 0) -> float:
    """Largest singular value via power iteration on ``M^T M``.

    Iteration stops once the eigen-residual falls below ``tol`` relative to
    the Rayleigh quotient; that residual is added before the square root so
    the estimate does not undershoot a converged top eigenvalue.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.size == 0 or not np.any(m):
        return 0.0
    gram = m.T @ m
    rng = np.random.default_rng(seed)
    v = rng.normal(size=gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = math.inf
    for _ in range(max_iter):
        w = gram @ v
        lam = float(v @ w)
        residual = float(np.linalg.norm(w - lam * v))
        if residual <= tol * max(lam, 1e-300):
            break
        nw = np.linalg.norm(w)
        if nw == 0.0:
            v = rng.normal(size=gram.shape[0])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
    return math.sqrt(max(lam, 0.0) + residual)


def lipschitz_naive(obj: ObjectiveFunction) -> LipschitzCertificate:
    """Triangle inequality plus the product of layer spectral norms."""
    net = obj.network
    linear = spectral_norm(obj.linear_row)
    out = spectral_norm(obj.output_row @ net.weights[-1])
    prod = 1.0
    for w in net.weights[:-1]:
        prod *= spectral_norm(w)
    beta_pow = net.activation.beta ** len(net.hidden_sizes)
    bound = linear + out * beta_pow * prod * spectral_norm(obj.rotation)
    return LipschitzCertificate(bound=float(bound), method=LipschitzMethod.NAIVE, rho=float(bound) ** 2)


def preactivation_intervals(network: NeuralNetwork, box, rotation=None) -> PreactivationBounds:
    """Interval propagation of ``{R y : y in box}`` through the hidden layers.

    ``box`` is anything with ``lower``/``upper`` attributes or a
    ``(lower, upper)`` pair.
    """
    lo, hi = _box_arrays(box)
    if np.any(lo > hi):
        raise ValueError("empty box")
    rot = np.eye(lo.size) if rotation is None else np.asarray(rotation, dtype=float)
    mid = rot @ (0.5 * (lo + hi))
    rad = np.abs(rot) @ (0.5 * (hi - lo))
    lowers, uppers = [], []
    for w, b in zip(network.weights[:-1], network.biases[:-1]):
        z_mid = w @ mid + b
        z_rad = np.abs(w) @ rad
        z_lo, z_hi = z_mid - z_rad, z_mid + z_rad
        lowers.append(z_lo)
        uppers.append(z_hi)
        a_lo, a_hi = network.activation(z_lo), network.activation(z_hi)
        mid, rad = 0.5 * (a_lo + a_hi), 0.5 * (a_hi - a_lo)
    return PreactivationBounds(
        np.concatenate(lowers) if lowers else np.zeros(0),
        np.concatenate(uppers) if uppers else np.zeros(0),
        tuple(network.hidden_sizes),
    )


def sector_localize(bounds: PreactivationBounds, kind=ActivationKind.RELU):
    """Per-neuron ReLU sectors: (1,1) if always active, (0,0) if always off, else (0,1)."""
    if ActivationKind(kind) is not ActivationKind.RELU:
        raise NotImplementedError("sector localization is only implemented for ReLU")
    alpha = np.zeros(bounds.lower.size)
    beta = np.ones(bounds.lower.size)
    active = bounds.lower >= 0
    dead = (bounds.upper <= 0) & ~active
    alpha[active] = 1.0
    beta[dead] = 0.0
    return alpha, beta


def lipschitz_sdp(
    obj: ObjectiveFunction,
    bounds: Optional[PreactivationBounds] = None,
    solver: Optional[str] = None,
    psd_tolerance: float = PSD_TOLERANCE,
) -> LipschitzCertificate:
    """Tightest certificate found for ``obj``, never worse than the naive bound.

    With ``bounds`` given (ReLU networks) each neuron gets its localized
    sector. ``solver="bisection"`` skips the conic solver and uses the
    grid search over ``T = lambda I`` with coordinate refinement.
    """
    naive = lipschitz_naive(obj)
    net = obj.network
    if not net.hidden_sizes:
        return naive
    sector = None
    if bounds is not None and net.activation.kind is ActivationKind.RELU:
        sector = sector_localize(bounds)
    lmi = build_lmi(obj, sector)
    # work in units of naive^2 so rho lands in [0, 1]
    scale = max(naive.bound ** 2, 1e-12)
    shift = 2.0 * psd_tolerance

    warning = None
    t_best, rho_best = None, math.inf
    if solver != "bisection":
        try:
            t_sol = _solve_conic(lmi, scale, solver)
            t_best, rho_best = _refine(lmi, t_sol, min_rho_for_T(lmi, t_sol, shift), shift, scale)
        except Exception as exc:  # solver-specific failures all end in the fallback
            warning = f"conic solver failed ({type(exc).__name__}: {exc}); used fallback"
            log.warning(warning)
    if not math.isfinite(rho_best):
        t_fb, rho_fb = _grid_search(lmi, scale, shift)
        if rho_fb < rho_best:
            t_best, rho_best = t_fb, rho_fb

    cert = _certify(lmi, t_best, rho_best, psd_tolerance) if t_best is not None else None
    if cert is None or cert.bound > naive.bound:
        if cert is None and warning is None:
            warning = "no feasible LMI point found"
        if warning is not None:
            warnings.warn(f"lipschitz_sdp: {warning}; returning naive bound", RuntimeWarning, stacklevel=2)
        return LipschitzCertificate(
            bound=naive.bound, method=LipschitzMethod.NAIVE, rho=naive.rho, warning=warning
        )
    if warning is not None:
        cert = LipschitzCertificate(**{**cert.__dict__, "warning": warning})
    return cert


def _box_arrays(box):
    if hasattr(box, "lower"):
        lo, hi = box.lower, box.upper
    else:
        lo, hi = box
    return np.asarray(lo, dtype=float).reshape(-1), np.asarray(hi, dtype=float).reshape(-1)


def _certify(lmi: LmiSystem, t: np.ndarray, rho: float, psd_tolerance: float):
    if not math.isfinite(rho):
        return None
    bump = 1e-12 * max(rho, 1.0)
    for _ in range(40):
        ok, lam = check_lmi_feasible(lmi, rho, t, psd_tolerance)
        if ok:
            return LipschitzCertificate(
                bound=math.sqrt(rho), method=LipschitzMethod.SDP, rho=rho,
                T_diag=np.array(t), feasibility_margin=lam,
            )
        if not math.isfinite(lam):
            return None
        rho += max(bump, 2.0 * (lam + psd_tolerance))
        bump *= 4.0
    return None


def _solve_conic(lmi: LmiSystem, scale: float, solver: Optional[str]) -> np.ndarray:
    import cvxpy as cp

    n = lmi.n_neurons
    free = np.flatnonzero(~lmi.degenerate)
    t = np.zeros(n)
    k = lmi.basis
    if free.size == 0:
        return t
    kd = lmi.D_F @ k
    # each free neuron contributes t_i * (its sector quadratic form); stack them as columns
    a_rows, b_rows = (lmi.A_F @ k)[free], (lmi.B_F @ k)[free]
    ab, apb = (lmi.alpha * lmi.beta)[free], (lmi.alpha + lmi.beta)[free]
    forms = (
        -2.0 * ab[:, None, None] * a_rows[:, :, None] * a_rows[:, None, :]
        + apb[:, None, None] * (a_rows[:, :, None] * b_rows[:, None, :] + b_rows[:, :, None] * a_rows[:, None, :])
        - 2.0 * b_rows[:, :, None] * b_rows[:, None, :]
    )
    dim = k.shape[1]
    stack = forms.reshape(free.size, dim * dim).T
    const = k.T @ lmi.output_part() @ k / scale
    rho = cp.Variable(nonneg=True)
    tau = cp.Variable(free.size, nonneg=True)
    m = cp.reshape(stack @ tau, (dim, dim), order="C") + const - rho * (kd.T @ kd)
    prob = cp.Problem(cp.Minimize(rho), [m << -1e-9 * (k.T @ k), tau >= 1e-9])
    if solver is None:
        installed = cp.installed_solvers()
        solver = next((s for s in ("CVXOPT", "CLARABEL", "SCS") if s in installed), None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        prob.solve(solver=solver)
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or tau.value is None:
        raise RuntimeError(f"status {prob.status}")
    t[free] = np.maximum(np.asarray(tau.value, dtype=float), 1e-9) * scale
    return t


def _grid_search(lmi: LmiSystem, scale: float, shift: float, sweeps: int = 3):
    free = ~lmi.degenerate
    best_t, best_rho = None, math.inf
    for lam in np.logspace(-3, 3, 16):
        t = np.where(free, lam * scale, 0.0)
        rho = min_rho_for_T(lmi, t, shift)
        if rho < best_rho:
            best_t, best_rho = t, rho
    if best_t is None:
        return None, math.inf
    return _refine(lmi, best_t, best_rho, shift, scale, sweeps)


def _refine(lmi: LmiSystem, t: np.ndarray, rho: float, shift: float, scale: float, sweeps: int = 2):
    """Greedy improvement of ``T``: global rescaling, then per-neuron factors."""
    best_t, best_rho = t, rho
    t_cap = 1e6 * scale
    for direction in (2.0, 0.5):
        while best_t.max(initial=0.0) * direction <= t_cap:
            trial = best_t * direction
            r = min_rho_for_T(lmi, trial, shift)
            if not r < best_rho * (1.0 - 1e-12):
                break
            best_t, best_rho = trial, r
    free = np.flatnonzero(~lmi.degenerate)
    for _ in range(sweeps):
        improved = False
        for i in free:
            for f in (0.5, 2.0, 0.8, 1.25):
                if best_t[i] * f > t_cap:
                    continue
                trial = best_t.copy()
                trial[i] *= f
                r = min_rho_for_T(lmi, trial, shift)
                if r < best_rho * (1.0 - 1e-12):
                    best_t, best_rho, improved = trial, r, True
        if not improved:
            break
    return best_t, best_rho
