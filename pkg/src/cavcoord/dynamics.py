"""Bicycle kinematics: exact step, noise injection, analytic linearization.

State is [x, y, theta, v] (rear-axle position, heading positive CCW,
speed); input is [a, delta] (longitudinal acceleration, steering angle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NX = 4
NU = 2


def wrap_angle(theta: float) -> float:
    """Normalize to (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    @staticmethod
    def from_array(arr) -> "VehicleState":
        x, y, th, v = (float(a) for a in arr)
        return VehicleState(x, y, th, v)


@dataclass(frozen=True)
class ControlInput:
    a: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta])

    @staticmethod
    def from_array(arr) -> "ControlInput":
        return ControlInput(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class LinearizedDynamics:
    A: np.ndarray  # 4x4
    B: np.ndarray  # 4x2
    r: np.ndarray  # 4


@dataclass(frozen=True)
class NoiseSpec:
    G: np.ndarray  # 4x4 process noise matrix, body frame
    C: np.ndarray  # nz x 4 measurement matrix
    D: np.ndarray  # nz x nz measurement noise matrix, invertible

    def __post_init__(self):
        for M in (self.G, self.C, self.D):
            if not np.all(np.isfinite(M)):
                raise ValueError("noise matrices must be finite")
        if self.D.shape[0] != self.D.shape[1] or abs(np.linalg.det(self.D)) < 1e-300:
            raise ValueError("D must be square and invertible")

    @property
    def nz(self) -> int:
        return self.C.shape[0]


def f_step(x: np.ndarray, u: np.ndarray, tau: float, wheelbase: float) -> np.ndarray:
    """Raw bicycle map, no heading normalization; broadcasts over leading dims."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    th, v = x[..., 2], x[..., 3]
    out = np.empty_like(x)
    out[..., 0] = x[..., 0] + tau * v * np.cos(th)
    out[..., 1] = x[..., 1] + tau * v * np.sin(th)
    out[..., 2] = th + tau * (v / wheelbase) * np.tan(u[..., 1])
    out[..., 3] = v + tau * u[..., 0]
    return out


def step(s: VehicleState, u: ControlInput, tau: float, wheelbase: float) -> VehicleState:
    nxt = f_step(s.as_array(), u.as_array(), tau, wheelbase)
    return VehicleState(float(nxt[0]), float(nxt[1]), wrap_angle(float(nxt[2])), float(nxt[3]))


def step_noisy(s: VehicleState, u: ControlInput, tau: float, wheelbase: float,
               G_rotated: np.ndarray, w: np.ndarray) -> VehicleState:
    nxt = f_step(s.as_array(), u.as_array(), tau, wheelbase) + G_rotated @ np.asarray(w, float)
    return VehicleState(float(nxt[0]), float(nxt[1]), wrap_angle(float(nxt[2])), float(nxt[3]))


def rotate_noise(G_base: np.ndarray, theta: float) -> np.ndarray:
    """Conjugate the 2x2 position block of G by R(theta); other rows unchanged."""
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    out = np.array(G_base, dtype=float, copy=True)
    out[:2, :2] = R @ G_base[:2, :2] @ R.T
    return out


def linearize(s_bar: VehicleState, u_bar: ControlInput, tau: float,
              wheelbase: float) -> LinearizedDynamics:
    """Analytic Jacobians at the nominal point plus the exact residual.

    The Jacobian is taken on the raw (pre-normalization) map, so the
    identity F(s,u) = A s + B u + r holds to machine precision.
    """
    th, v, delta = s_bar.theta, s_bar.v, u_bar.delta
    A = np.array([
        [1.0, 0.0, -tau * v * math.sin(th), tau * math.cos(th)],
        [0.0, 1.0, tau * v * math.cos(th), tau * math.sin(th)],
        [0.0, 0.0, 1.0, tau * math.tan(delta) / wheelbase],
        [0.0, 0.0, 0.0, 1.0],
    ])
    B = np.array([
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, tau * v / (wheelbase * math.cos(delta) ** 2)],
        [tau, 0.0],
    ])
    xv = s_bar.as_array()
    uv = u_bar.as_array()
    r = f_step(xv, uv, tau, wheelbase) - A @ xv - B @ uv
    return LinearizedDynamics(A=A, B=B, r=r)


def linearize_arr(x_bar: np.ndarray, u_bar: np.ndarray, tau: float,
                  wheelbase: float) -> LinearizedDynamics:
    return linearize(VehicleState.from_array(x_bar), ControlInput.from_array(u_bar),
                     tau, wheelbase)
