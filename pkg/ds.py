import json
import logging
import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp
from sklearn.mixture import GaussianMixture

from planner import WaypointPath

logger = logging.getLogger(__name__)

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

EPS_STAB = 0.1             # 1/s, stability margin
N_COMPONENTS = 4           # K per path segment
DEMO_RATE_HZ = 50.0        # demo logging rate; spacing = speed / rate

LOG_TINY = math.log(np.finfo(float).tiny)


class DegeneratePath(ValueError):
    pass


class InvalidData(ValueError):
    pass


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(frozen=True)
class LinearSubsystem:
    A: np.ndarray   # (2, 2)
    b: np.ndarray   # (2,)

    def max_symmetric_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.A + self.A.T).max())


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """
    Convex mixture of K linear subsystems, f(xi) = sum_k gamma_k(xi) (A_k xi + b_k).

    Arrays are stacked over components: A (K, 2, 2), b (K, 2), means (K, 2),
    covariances (K, 2, 2), priors (K,).
    """
    A: np.ndarray
    b: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    priors: np.ndarray
    attractor: np.ndarray
    eps_stab: float = EPS_STAB

    def __post_init__(self):
        K = len(self.A)
        if K < 1:
            raise ValueError("mixture needs at least one component")
        for name, arr, shape in (("A", self.A, (K, 2, 2)), ("b", self.b, (K, 2)),
                                 ("means", self.means, (K, 2)), ("covariances", self.covariances, (K, 2, 2)),
                                 ("priors", self.priors, (K,)), ("attractor", self.attractor, (2,))):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(self.priors < 0) or abs(float(self.priors.sum()) - 1.0) > 1e-9:
            raise ValueError(f"priors must be a probability vector, got {self.priors}")

    @property
    def K(self) -> int:
        return len(self.A)

    @property
    def components(self) -> List[LinearSubsystem]:
        return [LinearSubsystem(self.A[k], self.b[k]) for k in range(self.K)]

    def stability_margin(self) -> float:
        """Largest eigenvalue of A_k + A_k^T over all components (<= -eps_stab when stable)."""
        return max(c.max_symmetric_eig() for c in self.components)


@dataclass(frozen=True, eq=False)
class DemoDataset:
    positions: np.ndarray    # (N, 2)
    velocities: np.ndarray   # (N, 2)
    rate: float              # Hz

    def __post_init__(self):
        if len(self.positions) == 0:
            raise InvalidData("demo dataset is empty")
        if self.positions.shape != self.velocities.shape or self.positions.shape[1:] != (2,):
            raise InvalidData(f"positions {self.positions.shape} and velocities {self.velocities.shape} mismatch")

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class FitConfig:
    reg_covar: float = 1e-3            # m^2 added to EM covariances
    covariance_floor: float = 1e-5     # smallest allowed covariance eigenvalue, m^2
    min_cluster_samples: float = 2.0   # prior * N below this prunes the component
    em_max_iter: int = 100
    random_state: int = 0
    max_iter: int = 500                # gradient-descent iterations
    grad_tol: float = 1e-9
    init_gain: float = 1.0             # cold start A = -init_gain * I
    armijo: float = 1e-4


class Responsibilities(NamedTuple):
    weights: np.ndarray     # (K,) or (N, K)
    fallback: np.ndarray    # bool, () or (N,); nearest-mean one-hot was used


# ------------------------------------------------------------
# Field evaluation
# ------------------------------------------------------------

def _linear_part(A: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # elementwise so a row's value never depends on the batch it is evaluated in
    return (A[None, :, :, 0] * pts[:, None, None, 0]
            + A[None, :, :, 1] * pts[:, None, None, 1])      # (N, K, 2)


def _log_weighted_densities(model: MixtureModel, pts: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - model.means[None]                # (N, K, 2)
    prec = np.linalg.inv(model.covariances)
    maha = np.einsum("nki,kij,nkj->nk", diff, prec, diff)
    _, logdet = np.linalg.slogdet(model.covariances)
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.priors)
    return log_pi[None] - 0.5 * maha - 0.5 * logdet[None] - math.log(2 * math.pi)


def responsibilities(model: MixtureModel, xi) -> Responsibilities:
    xi = np.asarray(xi, dtype=float)
    pts = np.atleast_2d(xi)
    lw = _log_weighted_densities(model, pts)
    underflow = lw.max(axis=1) < LOG_TINY

    weights = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
    if underflow.any():
        logger.debug("responsibilities: %d point(s) fell back to nearest mean", int(underflow.sum()))
        d2 = np.sum((pts[underflow, None, :] - model.means[None]) ** 2, axis=2)
        weights[underflow] = 0.0
        weights[np.flatnonzero(underflow), np.argmin(d2, axis=1)] = 1.0

    if xi.ndim == 1:
        return Responsibilities(weights[0], underflow[0])
    return Responsibilities(weights, underflow)


def evaluate(model: MixtureModel, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    pts = np.atleast_2d(xi)
    gamma = responsibilities(model, pts).weights
    lin = _linear_part(model.A, pts) + model.b[None]
    out = np.einsum("nk,nki->ni", gamma, lin)
    return out[0] if xi.ndim == 1 else out


def shift_attractor(model: MixtureModel, x_i) -> MixtureModel:
    x_i = np.asarray(x_i, dtype=float).copy()
    b = -_linear_part(model.A, x_i[None])[0]
    return replace(model, b=b, attractor=x_i)


def hold_model(position, gain: float = 1.0, eps_stab: float = EPS_STAB) -> MixtureModel:
    """Single-component model whose attractor is position; used before any path exists."""
    A = -max(gain, eps_stab) * np.eye(2)[None]
    model = MixtureModel(A, np.zeros((1, 2)), np.asarray(position, dtype=float)[None].copy(),
                         np.eye(2)[None].copy(), np.ones(1), np.zeros(2), eps_stab)
    return shift_attractor(model, position)


# ------------------------------------------------------------
# Demonstration synthesis
# ------------------------------------------------------------

def synthesize_demo(path: WaypointPath, nominal_speed: float, sample_spacing: float) -> DemoDataset:
    """
    Natural cubic spline through the waypoints (chord-length parameter), resampled at
    equal arclength; velocities are unit tangents times nominal_speed, zero at the end.
    """
    if nominal_speed <= 0:
        raise ValueError(f"nominal_speed must be > 0, got {nominal_speed}")
    if sample_spacing <= 0:
        raise ValueError(f"sample_spacing must be > 0, got {sample_spacing}")
    pts = np.asarray(path.waypoints, dtype=float)
    if len(pts) < 2:
        raise DegeneratePath(f"path has {len(pts)} waypoint(s), need at least 2")

    keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12])
    pts = pts[keep]
    if len(pts) < 2:
        raise DegeneratePath("all waypoints coincide")

    t = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    spline = CubicSpline(t, pts, bc_type="natural")

    n_dense = max(200, int(20 * t[-1] / sample_spacing))
    tt = np.linspace(0.0, t[-1], n_dense)
    speed = np.linalg.norm(spline(tt, 1), axis=1)
    s_dense = cumulative_trapezoid(speed, tt, initial=0.0)
    total = s_dense[-1]

    s = np.arange(0.0, total, sample_spacing)
    s = s[s < total - 1e-9 * max(total, 1.0)]
    s = np.append(s, total)
    t_s = np.interp(s, s_dense, tt)

    positions = spline(t_s)
    tangents = spline(t_s, 1)
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    velocities = np.where(norms > 0, tangents / np.where(norms > 0, norms, 1.0), 0.0) * nominal_speed
    velocities[-1] = 0.0
    return DemoDataset(positions, velocities, nominal_speed / sample_spacing)


# ------------------------------------------------------------
# Stable parameterization: A = S - (L L^T + eps I)
# ------------------------------------------------------------

def params_to_matrices(theta: np.ndarray, eps_stab: float):
    """theta (K, 4) rows [s, l11, l21, l22] -> (A, L) each (K, 2, 2)."""
    theta = np.asarray(theta, dtype=float).reshape(-1, 4)
    K = len(theta)
    S = np.zeros((K, 2, 2))
    S[:, 0, 1] = theta[:, 0]
    S[:, 1, 0] = -theta[:, 0]
    L = np.zeros((K, 2, 2))
    L[:, 0, 0] = theta[:, 1]
    L[:, 1, 0] = theta[:, 2]
    L[:, 1, 1] = theta[:, 3]
    A = S - (L @ np.transpose(L, (0, 2, 1)) + eps_stab * np.eye(2)[None])
    return A, L


def matrices_to_params(A: np.ndarray, eps_stab: float) -> np.ndarray:
    """Inverse of params_to_matrices for a stable A (symmetric part <= -eps I)."""
    theta = np.zeros((len(A), 4))
    for k, Ak in enumerate(A):
        P = -0.5 * (Ak + Ak.T) - eps_stab * np.eye(2)
        w, V = np.linalg.eigh(0.5 * (P + P.T))
        P = (V * np.clip(w, 1e-12, None)) @ V.T
        L = np.linalg.cholesky(P)
        theta[k] = [0.5 * (Ak[0, 1] - Ak[1, 0]), L[0, 0], L[1, 0], L[1, 1]]
    return theta


def objective_and_gradient(theta, gamma, d, v, eps_stab):
    """
    Mean squared velocity residual of f(xi) = sum_k gamma_k A_k (xi - attractor)
    and its gradient with respect to theta.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 4)
    A, L = params_to_matrices(theta, eps_stab)
    N = len(d)
    pred = np.einsum("nk,kij,nj->ni", gamma, A, d)
    r = v - pred
    J = float(np.sum(r * r)) / N

    G = -2.0 / N * np.einsum("nk,ni,nj->kij", gamma, r, d)
    dL = -(G + np.transpose(G, (0, 2, 1))) @ L
    grad = np.empty_like(theta)
    grad[:, 0] = G[:, 0, 1] - G[:, 1, 0]
    grad[:, 1] = dL[:, 0, 0]
    grad[:, 2] = dL[:, 1, 0]
    grad[:, 3] = dL[:, 1, 1]
    return J, grad


def _descend(theta, gamma, d, v, eps_stab, config: FitConfig):
    J, g = objective_and_gradient(theta, gamma, d, v, eps_stab)
    step = 1.0
    for it in range(config.max_iter):
        gg = float(np.sum(g * g))
        if math.sqrt(gg) < config.grad_tol:
            break
        while True:
            trial = theta - step * g
            J_trial, g_trial = objective_and_gradient(trial, gamma, d, v, eps_stab)
            if J_trial <= J - config.armijo * step * gg:
                break
            step *= 0.5
            if step < 1e-16:
                return theta, J
        theta, J, g = trial, J_trial, g_trial
        step *= 2.0
    return theta, J


# ------------------------------------------------------------
# Fitting
# ------------------------------------------------------------

def _em_responsibility_params(X: np.ndarray, K: int, config: FitConfig):
    gmm = GaussianMixture(n_components=K, covariance_type="full", reg_covar=config.reg_covar,
                          max_iter=config.em_max_iter, random_state=config.random_state)
    gmm.fit(X)
    means, covs, priors = gmm.means_, gmm.covariances_, gmm.weights_

    floor_ok = np.array([np.linalg.eigvalsh(c).min() >= config.covariance_floor for c in covs])
    support_ok = priors * len(X) >= config.min_cluster_samples
    keep = floor_ok & support_ok
    if not keep.all():
        if not keep.any():
            keep[np.argmax(priors)] = True
        logger.warning("EM pruned %d degenerate component(s); K reduced to %d",
                       int((~keep).sum()), int(keep.sum()))
    priors = priors[keep] / priors[keep].sum()
    return means[keep], covs[keep], priors


def _fit_arrays(X, V, attractor, K, eps_stab, config: FitConfig,
                warm_start: Optional[MixtureModel]) -> MixtureModel:
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(V))):
        raise InvalidData("demo data contains non-finite values")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if len(X) < 4 * K:
        raise InvalidData(f"{len(X)} samples is fewer than 4*K = {4 * K}")
    if eps_stab <= 0:
        raise ValueError(f"eps_stab must be > 0, got {eps_stab}")

    means, covs, priors = _em_responsibility_params(X, K, config)
    K = len(priors)
    # A and b are placeholders here; only the responsibility parameters matter
    scaffold = MixtureModel(np.zeros((K, 2, 2)), np.zeros((K, 2)), means, covs, priors,
                            np.asarray(attractor, dtype=float), eps_stab)
    gamma = responsibilities(scaffold, X).weights
    d = X - attractor

    if warm_start is not None and warm_start.K == K:
        theta0 = matrices_to_params(warm_start.A, eps_stab)
    else:
        theta0 = matrices_to_params(np.repeat((-max(config.init_gain, eps_stab + 1e-6) * np.eye(2))[None], K, axis=0),
                                    eps_stab)
    theta, J = _descend(theta0, gamma, d, V, eps_stab, config)
    A, _ = params_to_matrices(theta, eps_stab)
    logger.debug("fit: K=%d, N=%d, residual %.3e", K, len(X), J)
    return shift_attractor(replace(scaffold, A=A), attractor)


def fit(data: DemoDataset, K: int = N_COMPONENTS, eps_stab: float = EPS_STAB,
        config: FitConfig = FitConfig(), warm_start: Optional[MixtureModel] = None) -> MixtureModel:
    X = np.asarray(data.positions, dtype=float)
    V = np.asarray(data.velocities, dtype=float)
    return _fit_arrays(X, V, X[-1].copy(), K, eps_stab, config, warm_start)


def fit_batch(datasets: Sequence[DemoDataset], K: int = N_COMPONENTS, eps_stab: float = EPS_STAB,
              config: FitConfig = FitConfig()) -> MixtureModel:
    """
    Offline fit over many demos, each expressed relative to its own final position.
    The returned model has its attractor at the origin; shift_attractor places it.
    """
    if not datasets:
        raise InvalidData("no demos to fit")
    X = np.vstack([ds.positions - ds.positions[-1] for ds in datasets])
    V = np.vstack([ds.velocities for ds in datasets])
    return _fit_arrays(X, V, np.zeros(2), K, eps_stab, config, None)


def mean_squared_residual(model: MixtureModel, data: DemoDataset) -> float:
    r = data.velocities - evaluate(model, data.positions)
    return float(np.mean(np.sum(r * r, axis=1)))


# ------------------------------------------------------------
# Serialization
# ------------------------------------------------------------

def model_to_dict(model: MixtureModel) -> dict:
    return {
        "K": model.K,
        "eps_stab": float(model.eps_stab),
        "attractor": [float(v) for v in model.attractor],
        "components": [
            {
                "A": [float(v) for v in model.A[k].ravel()],
                "b": [float(v) for v in model.b[k]],
                "mu": [float(v) for v in model.means[k]],
                "sigma": [float(v) for v in model.covariances[k].ravel()],
                "pi": float(model.priors[k]),
            }
            for k in range(model.K)
        ],
    }


def model_from_dict(data: dict) -> MixtureModel:
    comps = data["components"]
    if len(comps) != data["K"]:
        raise ValueError(f"K={data['K']} but {len(comps)} components listed")
    return MixtureModel(
        A=np.array([c["A"] for c in comps], dtype=float).reshape(-1, 2, 2),
        b=np.array([c["b"] for c in comps], dtype=float).reshape(-1, 2),
        means=np.array([c["mu"] for c in comps], dtype=float).reshape(-1, 2),
        covariances=np.array([c["sigma"] for c in comps], dtype=float).reshape(-1, 2, 2),
        priors=np.array([c["pi"] for c in comps], dtype=float),
        attractor=np.array(data["attractor"], dtype=float),
        eps_stab=float(data["eps_stab"]),
    )


def save_model(model: MixtureModel, filename) -> None:
    with open(filename, "w") as f:
        json.dump(model_to_dict(model), f, indent=2)
        f.write("\n")


def load_model(filename) -> MixtureModel:
    with open(filename, "r") as f:
        return model_from_dict(json.load(f))
