"""Metric localization against a keyframe's map points.

Pose convention throughout: the estimated pose maps map-point coordinates
(keyframe camera frame) into the live camera frame.  Increments are 6-vectors
``(rotation, translation)``; the rotation part goes through the exponential map
and the increment is left-multiplied onto the current estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (Pose, StereoCameraModel, Z_MIN, project_points, skew, so3_exp, so3_log,
                       so3_left_jacobian_inv)
from .sim import ObservationSet


class LocalizationError(RuntimeError):
    pass


class InsufficientCorrespondencesError(LocalizationError):
    pass


class NoConsensusError(LocalizationError):
    pass


class SingularInformationError(LocalizationError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(eq=False)
class MapPointSet:
    ids: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("map point ids must be unique")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("map points must be finite")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (isinstance(other, MapPointSet) and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.points, other.points))


@dataclass(eq=False)
class Prior:
    pose: Pose
    cov: np.ndarray  # 6x6, rotation block first

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (6, 6) or not np.allclose(self.cov, self.cov.T):
            raise ValueError("prior covariance must be a symmetric 6x6 matrix")
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("prior covariance is not positive definite") from exc

    @classmethod
    def isotropic(cls, pose: Pose, rot_std: float, trans_std: float):
        return cls(pose, np.diag([rot_std**2] * 3 + [trans_std**2] * 3))


@dataclass(frozen=True, eq=False)
class ReprojectionNoise:
    cov: np.ndarray

    @classmethod
    def isotropic(cls, pixel_std: float):
        return cls(np.eye(3) * pixel_std**2)

    @property
    def sqrt_info(self):
        # L with L^T L = cov^-1, whitens a residual as L r
        return np.linalg.cholesky(np.linalg.inv(self.cov)).T


@dataclass(eq=False)
class Correspondences:
    ids: np.ndarray
    pixels: np.ndarray   # measured (uL, vL, uR)
    points: np.ndarray   # map points, keyframe camera frame

    def __len__(self):
        return len(self.ids)

    def subset(self, mask):
        return Correspondences(self.ids[mask], self.pixels[mask], self.points[mask])

    def duplicated(self, times=2):
        return Correspondences(np.tile(self.ids, times), np.tile(self.pixels, (times, 1)),
                               np.tile(self.points, (times, 1)))


@dataclass(eq=False)
class PoseEstimate:
    pose: Pose
    cov: np.ndarray
    entropy: float
    inlier_ids: np.ndarray
    iterations: int
    converged: bool
    cost: float

    @property
    def n_inliers(self):
        return len(self.inlier_ids)


def negative_entropy(cov) -> float:
    """``-log det cov`` in nats, via the Cholesky factor."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, rtol=1e-10, atol=0):
        raise NotPositiveDefiniteError("covariance must be a symmetric square matrix")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("covariance is not positive definite") from exc
    return float(-2.0 * np.sum(np.log(np.diag(L))))


def retract(pose: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    dR = so3_exp(delta[:3])
    return Pose.from_rt(dR @ pose.R, dR @ pose.t + delta[3:], pose.frame_to, pose.frame_from)


# -- residuals and Jacobians -------------------------------------------------

def reprojection_residuals(pose: Pose, points, pixels, camera: StereoCameraModel):
    """Measured minus predicted stereo pixels, shape (N, 3)."""
    pc = pose.transform(points)
    z = pc[:, 2]
    pred = np.stack([camera.fx * pc[:, 0] / z + camera.cx,
                     camera.fy * pc[:, 1] / z + camera.cy,
                     camera.fx * (pc[:, 0] - camera.baseline) / z + camera.cx], axis=1)
    return np.asarray(pixels, dtype=float) - pred


def reprojection_jacobian(pose: Pose, points, camera: StereoCameraModel):
    """d(residual)/d(increment), shape (N, 3, 6)."""
    pc = pose.transform(points)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    n = len(pc)
    iz = 1.0 / z
    iz2 = iz * iz
    dproj = np.zeros((n, 3, 3))
    dproj[:, 0, 0] = camera.fx * iz
    dproj[:, 0, 2] = -camera.fx * x * iz2
    dproj[:, 1, 1] = camera.fy * iz
    dproj[:, 1, 2] = -camera.fy * y * iz2
    dproj[:, 2, 0] = camera.fx * iz
    dproj[:, 2, 2] = -camera.fx * (x - camera.baseline) * iz2
    # d(pc)/d(omega) = -[pc]x, d(pc)/d(v) = I
    dp = np.zeros((n, 3, 6))
    dp[:, 0, 1], dp[:, 0, 2] = z, -y
    dp[:, 1, 0], dp[:, 1, 2] = -z, x
    dp[:, 2, 0], dp[:, 2, 1] = y, -x
    dp[:, :, 3:] = np.eye(3)
    return -np.matmul(dproj, dp)


def prior_residual(pose: Pose, prior_pose: Pose):
    dR = pose.R @ prior_pose.R.T
    dt = pose.t - dR @ prior_pose.t
    return np.concatenate([so3_log(dR), dt])


def prior_jacobian(pose: Pose, prior_pose: Pose):
    dR = pose.R @ prior_pose.R.T
    dt = pose.t - dR @ prior_pose.t
    J = np.zeros((6, 6))
    J[:3, :3] = so3_left_jacobian_inv(so3_log(dR))
    J[3:, :3] = -skew(dt)
    J[3:, 3:] = np.eye(3)
    return J


def huber_rho(s, delta):
    """Huber loss on squared normalised error ``s``."""
    e = np.sqrt(s)
    return np.where(e <= delta, s, 2.0 * delta * e - delta * delta)


def huber_weight(s, delta):
    e = np.sqrt(s)
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


def total_cost(pose: Pose, corr: Correspondences, camera: StereoCameraModel,
               noise: ReprojectionNoise, prior: Optional[Prior], huber: Optional[float] = 2.5):
    """Half the robust reprojection cost plus half the prior Mahalanobis term."""
    L = noise.sqrt_info
    cost = 0.0
    if len(corr):
        r = reprojection_residuals(pose, corr.points, corr.pixels, camera) @ L.T
        s = np.sum(r * r, axis=1)
        cost += 0.5 * float(np.sum(huber_rho(s, huber) if huber else s))
    if prior is not None:
        rp = prior_residual(pose, prior.pose)
        cost += 0.5 * float(rp @ np.linalg.solve(prior.cov, rp))
    return cost


def _normal_equations(pose, corr, camera, L, prior_info, prior, huber, hard=False):
    H = np.zeros((6, 6))
    g = np.zeros(6)
    if len(corr):
        r = reprojection_residuals(pose, corr.points, corr.pixels, camera) @ L.T
        J = np.matmul(L, reprojection_jacobian(pose, corr.points, camera))
        s = np.sum(r * r, axis=1)
        if not huber:
            w = np.ones(len(s))
        elif hard:
            w = (s <= huber * huber).astype(float)   # outliers carry no information
        else:
            w = huber_weight(s, huber)
        Jf = J.reshape(-1, 6)
        wf = np.repeat(w, 3)
        H += (Jf * wf[:, None]).T @ Jf
        g += Jf.T @ (wf * r.reshape(-1))
    if prior is not None:
        Jp = prior_jacobian(pose, prior.pose)
        rp = prior_residual(pose, prior.pose)
        H += Jp.T @ prior_info @ Jp
        g += Jp.T @ prior_info @ rp
    return H, g


def information_matrix(pose: Pose, corr: Correspondences, camera: StereoCameraModel,
                       noise: ReprojectionNoise, prior: Optional[Prior], huber: Optional[float] = 2.5):
    """Gauss-Newton information at ``pose`` from the prior and the residuals
    inside the Huber threshold; residuals beyond it are treated as outliers."""
    prior_info = np.linalg.inv(prior.cov) if prior is not None else None
    H, _ = _normal_equations(pose, corr, camera, noise.sqrt_info, prior_info, prior, huber, hard=True)
    return 0.5 * (H + H.T)


def refine_pose(initial: Pose, corr: Correspondences, camera: StereoCameraModel,
                noise: ReprojectionNoise, prior: Optional[Prior], tol: float = 1e-8,
                max_iter: int = 20, huber: Optional[float] = 2.5) -> PoseEstimate:
    """Damped Gauss-Newton on reprojection + prior residuals.

    Steps that raise the cost are rejected and retried with Levenberg damping,
    so the accepted cost sequence is non-increasing.  The returned covariance is
    the inverse of the inlier information matrix at the solution.
    """
    if prior is not None and (prior.pose.frame_to, prior.pose.frame_from) != (
            initial.frame_to, initial.frame_from):
        raise ValueError("prior and initial pose must share frame labels")
    L = noise.sqrt_info
    prior_info = np.linalg.inv(prior.cov) if prior is not None else None
    pose = initial
    cost = total_cost(pose, corr, camera, noise, prior, huber)
    lam = 0.0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        H, g = _normal_equations(pose, corr, camera, L, prior_info, prior, huber)
        accepted = False
        for _ in range(12):
            A = H + lam * np.diag(np.diag(H))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                if np.linalg.norm(delta) < tol:
                    converged = True
                    break
                candidate = retract(pose, delta)
                if np.all(candidate.transform(corr.points)[:, 2] > Z_MIN) if len(corr) else True:
                    new_cost = total_cost(candidate, corr, camera, noise, prior, huber)
                    if new_cost <= cost:
                        pose, cost = candidate, new_cost
                        lam = lam * 0.1 if lam > 1e-9 else 0.0
                        accepted = True
                        break
            lam = max(lam * 10.0, 1e-6)
        if converged:
            break
        if not accepted:
            # no descent direction left at this damping; we are at a minimum
            converged = True
            break
        if np.linalg.norm(delta) < tol:
            converged = True
            break

    H = information_matrix(pose, corr, camera, noise, prior, huber)
    try:
        Lh = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError("information matrix is rank deficient") from exc
    if np.min(np.diag(Lh)) ** 2 < 1e-12 * np.max(np.diag(H)):
        raise SingularInformationError("information matrix is numerically singular")
    Linv = np.linalg.inv(Lh)
    cov = Linv.T @ Linv
    cov = 0.5 * (cov + cov.T)
    if len(corr):
        r = reprojection_residuals(pose, corr.points, corr.pixels, camera) @ L.T
        e = np.sqrt(np.sum(r * r, axis=1))
        inliers = corr.ids[e <= (huber if huber else np.inf)]
    else:
        inliers = corr.ids
    return PoseEstimate(pose, cov, negative_entropy(cov), np.asarray(inliers), it, converged, cost)


# -- data association ------------------------------------------------------

def match(observations: ObservationSet, map_points: MapPointSet, prior: Optional[Prior],
          camera: StereoCameraModel, gate_radius: float = 20.0, confusion_rate: float = 0.0,
          rng: Optional[np.random.Generator] = None) -> Correspondences:
    """Pair measurements with map points by landmark id, gated by the prior.

    A confused match (probability ``confusion_rate``) swaps in the map point
    whose predicted pixel lies closest to the measurement.
    """
    _, oi, mi = np.intersect1d(observations.ids, map_points.ids, assume_unique=True,
                               return_indices=True)
    ids = observations.ids[oi]
    pixels = observations.pixels[oi]
    points = map_points.points[mi]
    if len(ids) == 0:
        return Correspondences(ids, pixels.reshape(0, 3), points.reshape(0, 3))
    if prior is None:
        return Correspondences(ids, pixels, points)
    pred_all, valid_all = project_points(camera, prior.pose.transform(map_points.points))
    if confusion_rate > 0 and len(map_points) > 1:
        rng = rng if rng is not None else np.random.default_rng(0)
        confused = rng.random(len(ids)) < confusion_rate
        points = points.copy()
        for j in np.flatnonzero(confused):
            d = np.linalg.norm(pred_all[:, :2] - pixels[j, :2], axis=1)
            d[~valid_all] = np.inf
            d[mi[j]] = np.inf
            k = int(np.argmin(d))
            if np.isfinite(d[k]):
                points[j] = map_points.points[k]
    pc = prior.pose.transform(points)
    ok = pc[:, 2] > Z_MIN
    pred = np.zeros_like(pixels)
    if ok.any():
        pred[ok] = pixels[ok] - reprojection_residuals(prior.pose, points[ok], pixels[ok], camera)
    dist = np.linalg.norm(pixels - pred, axis=1)
    keep = ok & (dist <= gate_radius)
    return Correspondences(ids[keep], pixels[keep], points[keep])


# -- RANSAC PnP ---------------------------------------------------------------

MIN_SAMPLE_DISPARITY = 1.0  # px
LOOSE_FACTOR = 3.0
LO_CANDIDATES = 3

def kabsch(src, dst, weights=None):
    """Rotation R and translation t minimising sum w |R src + t - dst|^2."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    ms, md = w @ src, w @ dst
    C = ((src - ms) * w[:, None]).T @ (dst - md)
    U, _, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, md - R @ ms


def _batched_kabsch(src, dst):
    ms = src.mean(axis=1, keepdims=True)
    md = dst.mean(axis=1, keepdims=True)
    C = np.einsum("hni,hnj->hij", src - ms, dst - md)
    U, _, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(np.einsum("hji,hkj->hik", Vt, U)))
    D = np.zeros((len(src), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("hji,hjk,hlk->hil", Vt, D, U)
    t = md[:, 0, :] - np.einsum("hij,hj->hi", R, ms[:, 0, :])
    return R, t


def _reproj_error(R, t, points, pixels, camera):
    pc = points @ np.swapaxes(R, -1, -2) + t[..., None, :]
    z = pc[..., 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    pred = np.stack([camera.fx * pc[..., 0] / zs + camera.cx,
                     camera.fy * pc[..., 1] / zs + camera.cy,
                     camera.fx * (pc[..., 0] - camera.baseline) / zs + camera.cx], axis=-1)
    err = np.linalg.norm(pred - pixels, axis=-1)
    return np.where(z > Z_MIN, err, np.inf)


def ransac_pnp(corr: Correspondences, camera: StereoCameraModel, iterations: int = 200,
               inlier_threshold_px: float = 2.0, seed: int = 0,
               frame_to: str = "C", frame_from: str = "K"):
    """Three-point 3D-3D alignment hypotheses scored by stereo reprojection.

    Returns ``(pose, inlier_mask)``.  Hypotheses are ranked with a loose
    threshold; the best few get two rounds of Gauss-Newton on reprojection
    error over their inliers and the one with the largest final consensus wins.
    """
    n = len(corr)
    if n < 4:
        raise InsufficientCorrespondencesError(f"need >= 4 correspondences, got {n}")
    disp = corr.pixels[:, 0] - corr.pixels[:, 2]
    usable = np.flatnonzero(disp > 0.05)
    if len(usable) < 3:
        raise NoConsensusError("fewer than 3 triangulable measurements")
    live = np.zeros((n, 3))
    z = camera.fx * camera.baseline / np.where(disp > 0.05, disp, 1.0)
    live[:, 0] = (corr.pixels[:, 0] - camera.cx) * z / camera.fx
    live[:, 1] = (corr.pixels[:, 1] - camera.cy) * z / camera.fy
    live[:, 2] = z

    # far points have useless stereo depth; keep them out of minimal samples if possible
    pool = np.flatnonzero(disp > MIN_SAMPLE_DISPARITY)
    if len(pool) < 3:
        pool = usable
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.choice(pool, 3, replace=False) for _ in range(iterations)])
    src, dst = corr.points[idx], live[idx]
    area = np.linalg.norm(np.cross(src[:, 1] - src[:, 0], src[:, 2] - src[:, 0]), axis=1)
    good = area > 1e-6
    if not good.any():
        raise NoConsensusError("all minimal samples degenerate")
    R, t = _batched_kabsch(src[good], dst[good])
    loose = LOOSE_FACTOR * inlier_threshold_px
    err = _reproj_error(R, t, corr.points, corr.pixels, camera)
    counts = np.sum(err < loose, axis=1)
    order = np.argsort(-counts, kind="stable")[:LO_CANDIDATES]

    unit = ReprojectionNoise(np.eye(3))
    best_pose, best_inl = None, None
    for h in order:
        pose = Pose.from_rt(R[h], t[h], frame_to, frame_from)
        e = err[h]
        for thr in (loose, inlier_threshold_px):
            sel = e < thr
            if sel.sum() < 4:
                break
            try:
                pose = refine_pose(pose, corr.subset(sel), camera, unit, None,
                                   tol=1e-10, max_iter=10, huber=None).pose
            except SingularInformationError:
                break
            e = _reproj_error(pose.R, pose.t, corr.points, corr.pixels, camera)
        inl = e < inlier_threshold_px
        if best_inl is None or inl.sum() > best_inl.sum():
            best_pose, best_inl = pose, inl
    if best_inl.sum() < 4 or best_inl.sum() < 0.3 * n:
        raise NoConsensusError(f"best consensus {int(best_inl.sum())}/{n}")
    return best_pose, best_inl
