"""SO(3) helpers: quaternions, rotation vectors, and the left Jacobian."""

from __future__ import annotations

import numpy as np

_SMALL = 1e-6


def hat(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def _coeffs(theta2: float) -> tuple[float, float, float]:
    """sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 as functions of t^2."""
    if theta2 < _SMALL ** 2:
        return (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    t = np.sqrt(theta2)
    return np.sin(t) / t, (1.0 - np.cos(t)) / theta2, (t - np.sin(t)) / (theta2 * t)


def exp_so3(w) -> np.ndarray:
    """Rodrigues: rotation vector -> rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    a, b, _ = _coeffs(float(w @ w))
    k = hat(w)
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> rotation vector with angle in [0, pi]."""
    return quat_to_rotvec(matrix_to_quat(r))


def left_jacobian(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    _, b, c = _coeffs(float(w @ w))
    k = hat(w)
    return np.eye(3) + b * k + c * (k @ k)


def left_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    k = hat(w)
    if theta2 < _SMALL ** 2:
        d = 1.0 / 12.0 + theta2 / 720.0
    else:
        t = np.sqrt(theta2)
        d = (1.0 - t * np.sin(t) / (2.0 * (1.0 - np.cos(t)))) / theta2
    return np.eye(3) - 0.5 * k + d * (k @ k)


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> rotation matrix; ``q`` is normalised first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_rotvec(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v / max(w, 1e-300)
    angle = 2.0 * np.arctan2(s, w)
    return v * (angle / s)


def rotvec_to_quat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        q = np.concatenate([[1.0], 0.5 * w])
        return q / np.linalg.norm(q)
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * w / theta])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))
