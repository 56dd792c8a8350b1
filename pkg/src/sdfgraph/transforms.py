"""Rigid transforms: SE(3) matrices, the gravity-aligned R^3 x SO(2) pose
parameterization, and the SE(3) exponential/logarithm with their Jacobians.

Conventions: ``T_BA`` maps points from frame A into frame B, transforms are
4x4 homogeneous matrices and compose as ``T_AC = T_AB @ T_BC``.  Lie algebra
vectors are ordered ``(rho, phi)``: translational part first.
"""

import math

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-5


def wrap_angle(a):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def yaw_matrix(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_matrix_derivative(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def make_transform(R=None, t=None):
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def translation(x, y=0.0, z=0.0):
    return make_transform(t=(x, y, z))


def pose_to_matrix(q):
    """(x, y, z, yaw) -> 4x4 gravity-aligned transform."""
    q = np.asarray(q, dtype=float)
    return make_transform(yaw_matrix(q[3]), q[:3])


def matrix_to_pose(T):
    """4x4 transform -> (x, y, z, yaw), discarding any roll/pitch."""
    T = np.asarray(T)
    yaw = math.atan2(T[1, 0], T[0, 0])
    return np.array([T[0, 3], T[1, 3], T[2, 3], wrap_angle(yaw)])


def yaw_of(T):
    # Heading of the body x-axis projected on the horizontal plane; robust to
    # roll/pitch, unlike reading R[1,0] and R[0,0] directly.
    return math.atan2(T[1, 0], T[0, 0])


def gravity_aligned(T):
    """Keep the translation and heading of ``T`` but zero its roll/pitch."""
    T = np.asarray(T, dtype=float)
    R = Rotation.from_matrix(T[:3, :3])
    yaw = R.as_euler("ZYX")[0]
    return make_transform(yaw_matrix(yaw), T[:3, 3])


def inverse(T):
    T = np.asarray(T, dtype=float)
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def transform_points(T, points):
    points = np.asarray(points, dtype=float)
    return points @ T[:3, :3].T + T[:3, 3]


def hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(phi):
    return Rotation.from_rotvec(phi).as_matrix()


def so3_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def so3_left_jacobian(phi):
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - math.cos(theta)) / theta**2
    b = (theta - math.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * K @ K


def so3_left_jacobian_inv(phi):
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    c = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + c * K @ K


def se3_exp(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return make_transform(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(T):
    """SE(3) logarithm as a 6-vector (rho, phi)."""
    T = np.asarray(T, dtype=float)
    phi = so3_log(T[:3, :3])
    rho = so3_left_jacobian_inv(phi) @ T[:3, 3]
    return np.concatenate([rho, phi])


def _se3_q_matrix(rho, phi):
    theta = float(np.linalg.norm(phi))
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 / 6.0 - t2 / 120.0
        b = 1.0 / 24.0 - t2 / 720.0
        c = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, co = math.sin(theta), math.cos(theta)
        a = (theta - s) / theta**3
        b = (theta**2 + 2.0 * co - 2.0) / (2.0 * theta**4)
        c = (2.0 * theta - 3.0 * s + theta * co) / (2.0 * theta**5)
    return (
        0.5 * Rh
        + a * (PR + RP + PRP)
        + b * (P @ PR + RP @ P - 3.0 * PRP)
        + c * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_q_matrix(rho, phi)
    return out


def se3_right_jacobian(xi):
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def adjoint(T):
    """6x6 adjoint for (rho, phi) ordering: Ad(T) xi = (T xi^ T^-1)^vee."""
    R = T[:3, :3]
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = hat(T[:3, 3]) @ R
    return out


def pose_local_twists(q):
    """Right-perturbation twists of the 4 pose parameters.

    Column k holds ``(T^-1 dT/dq_k)^vee`` for ``T = pose_to_matrix(q)``.
    """
    R = yaw_matrix(q[3])
    out = np.zeros((6, 4))
    out[:3, :3] = R.T
    out[5, 3] = 1.0
    return out


def quat_wxyz_to_matrix(qw, qx, qy, qz):
    return Rotation.from_quat([qx, qy, qz, qw]).as_matrix()


def matrix_to_quat_wxyz(R):
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    return np.array([w, x, y, z])


def transform_to_row(T):
    """4x4 -> (tx, ty, tz, qw, qx, qy, qz)."""
    return np.concatenate([T[:3, 3], matrix_to_quat_wxyz(T[:3, :3])])


def row_to_transform(row):
    row = np.asarray(row, dtype=float)
    return make_transform(quat_wxyz_to_matrix(*row[3:7]), row[:3])
