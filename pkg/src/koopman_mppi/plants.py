"""Simulated plants: torque-limited pendulum, twin-thruster surface vehicle,
and a planar quadruped base model, behind one controller-facing interface.

Every plant also declares a "model space": the sub-state a Koopman surrogate
is trained on, plus hooks to carry any remaining kinematic state through
surrogate rollouts (the boat integrates its pose from decoded velocities).
All step/cost functions are pure and accept single states (n,) or batches
(N, n).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .koopman import TransitionDataset
from .numerics import wrap_angle

log = logging.getLogger(__name__)


class Plant:
    """Common interface: dynamics, costs, bounds, model-space hooks."""

    name: str
    state_dim: int
    input_dim: int
    input_low: np.ndarray
    input_high: np.ndarray
    state_low: np.ndarray
    state_high: np.ndarray

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stage_cost(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def terminal_cost(self, x: np.ndarray) -> np.ndarray:
        return self.stage_cost(x)

    # -- model space (what the Koopman surrogate is trained on) --
    @property
    def model_dim(self) -> int:
        return self.state_dim

    @property
    def model_low(self) -> np.ndarray:
        return self.state_low

    @property
    def model_high(self) -> np.ndarray:
        return self.state_high

    @property
    def aux_dim(self) -> int:
        return 0

    def model_state(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def aux_init(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(x).shape[:-1] + (0,))

    def aux_step(self, aux: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        return aux

    def model_stage_cost(self, s: np.ndarray, aux: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def model_terminal_cost(self, s: np.ndarray, aux: np.ndarray) -> np.ndarray:
        return self.model_stage_cost(s, aux)

    def canonicalize_model_tuple(self, s: np.ndarray, s_next: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pick per-tuple coordinate representatives for recorded transitions.

        Plants with angular coordinates shift successor angles to the
        representative nearest the predecessor, so recorded tuples never jump
        by 2*pi when a trajectory crosses the wrap boundary.
        """
        return s, s_next

    # -- episode helpers --
    def sample_reset_state(self, rng: np.random.Generator) -> np.ndarray:
        """Initial state for a data-collection episode."""
        raise NotImplementedError

    def default_initial_state(self, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def episode_success(self, states: np.ndarray) -> bool:
        """Task-specific success flag for a closed-loop state history."""
        raise NotImplementedError

    def final_error(self, x: np.ndarray) -> float:
        """Scalar goal-distance metric evaluated at one state."""
        return float(self.stage_cost(np.asarray(x, dtype=np.float64)))


@dataclass
class PendulumParams:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_speed: float = 8.0
    max_torque: float = 2.0
    clamp_speed: bool = True
    wrap_theta: bool = True


class Pendulum(Plant):
    """Torque-limited rod pendulum; state (theta, theta_dot), theta = 0 upright.

    Semi-implicit Euler: the velocity is updated first and the new velocity
    advances the angle. Velocity saturates at +/- max_speed and the angle
    wraps to [-pi, pi).
    """

    name = "pendulum"
    state_dim = 2
    input_dim = 1

    def __init__(self, params: PendulumParams | None = None):
        self.params = params or PendulumParams()
        p = self.params
        self.input_low = np.array([-p.max_torque])
        self.input_high = np.array([p.max_torque])
        # without wrapping the angle drifts during exploration episodes, so
        # the declared (dataset) bounds widen while resets stay physical
        theta_bound = np.pi if p.wrap_theta else 1e6
        self.state_low = np.array([-theta_bound, -p.max_speed])
        self.state_high = np.array([theta_bound, p.max_speed])
        self._reset_low = np.array([-np.pi, -p.max_speed])
        self._reset_high = np.array([np.pi, p.max_speed])

    def step(self, x, u):
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        u = np.clip(np.asarray(u, dtype=np.float64), -p.max_torque, p.max_torque)
        theta, theta_dot = x[..., 0], x[..., 1]
        torque = u[..., 0] if u.ndim == x.ndim else u
        accel = (-3.0 * p.gravity * np.sin(theta + np.pi) / (2.0 * p.length)
                 + 3.0 * torque / (p.mass * p.length ** 2))
        new_dot = theta_dot + accel * p.dt
        if p.clamp_speed:
            new_dot = np.clip(new_dot, -p.max_speed, p.max_speed)
        new_theta = theta + new_dot * p.dt
        if p.wrap_theta:
            new_theta = wrap_angle(new_theta)
        return np.stack([new_theta, new_dot], axis=-1)

    def stage_cost(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x[..., 0] ** 2 + 0.1 * x[..., 1] ** 2

    def model_stage_cost(self, s, aux):
        return self.stage_cost(s)

    @property
    def model_low(self):
        # successor angles of canonicalized tuples extend one step past the box
        pad = self.params.max_speed * self.params.dt
        return np.array([-np.pi - pad, -self.params.max_speed])

    @property
    def model_high(self):
        pad = self.params.max_speed * self.params.dt
        return np.array([np.pi + pad, self.params.max_speed])

    def canonicalize_model_tuple(self, s, s_next):
        theta = wrap_angle(s[0])
        return (np.array([theta, s[1]]),
                np.array([theta + wrap_angle(s_next[0] - s[0]), s_next[1]]))

    def sample_reset_state(self, rng):
        return rng.uniform(self._reset_low, self._reset_high)

    def default_initial_state(self, rng=None):
        if rng is None:
            return np.array([np.pi, 0.1])
        return rng.uniform([-np.pi, -1.0], [np.pi, 1.0])

    def episode_success(self, states, hold_steps: int = 20,
                        theta_tol: float = 0.2, speed_tol: float = 0.5) -> bool:
        """Upright and slow for the final hold_steps states."""
        tail = np.asarray(states)[-hold_steps:]
        return bool(len(tail) >= hold_steps
                    and np.all(np.abs(tail[:, 0]) <= theta_tol)
                    and np.all(np.abs(tail[:, 1]) <= speed_tol))

    def mechanical_energy(self, x):
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        inertia = p.mass * p.length ** 2 / 3.0
        return (0.5 * inertia * x[..., 1] ** 2
                + 0.5 * p.mass * p.gravity * p.length * np.cos(x[..., 0]))


def boat_features(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """22-term hydrodynamic feature vector for the surface vehicle.

    Ordering: body velocities, pairwise products, squares, signed |.|
    products, then the four actuator slots with the rudder entries pinned
    to zero.
    """
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    vx, vy, wz = s[..., 0], s[..., 1], s[..., 2]
    ul, ur = u[..., 0], u[..., 1]
    zero = np.zeros_like(vx)
    return np.stack([
        vx, vy, wz,
        vx * vy, vx * wz, vy * wz,
        vx ** 2, vy ** 2, wz ** 2,
        vx * np.abs(vx), vx * np.abs(vy), vx * np.abs(wz),
        vy * np.abs(vx), vy * np.abs(vy), vy * np.abs(wz),
        wz * np.abs(vx), wz * np.abs(vy), wz * np.abs(wz),
        ul, zero, ur, zero,
    ], axis=-1)


def default_boat_matrix(thrust_gain: float = 1.0, yaw_gain: float = 0.8,
                        linear_damping=(0.5, 0.8, 0.6), quad_damping: float = 0.1) -> np.ndarray:
    """Surrogate 3x22 hydrodynamic matrix with a documented physical structure.

    Surge force is (u_left + u_right) * thrust_gain, yaw moment is
    (u_right - u_left) * yaw_gain; velocities see linear damping plus
    quadratic |v|v drag on the self-terms. Any alternative matrix can be
    substituted through the config file.
    """
    M = np.zeros((3, 22))
    M[0, 0] = -linear_damping[0]
    M[1, 1] = -linear_damping[1]
    M[2, 2] = -linear_damping[2]
    M[0, 9] = -quad_damping
    M[1, 13] = -quad_damping
    M[2, 17] = -quad_damping
    M[0, 18] = thrust_gain
    M[0, 20] = thrust_gain
    M[2, 18] = -yaw_gain
    M[2, 20] = yaw_gain
    return M


@dataclass
class BoatParams:
    hydro_matrix: np.ndarray = field(default_factory=default_boat_matrix)
    dt: float = 0.1
    goal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0]))
    velocity_low: np.ndarray = field(default_factory=lambda: np.array([-4.0, -2.0, -3.0]))
    velocity_high: np.ndarray = field(default_factory=lambda: np.array([4.0, 2.0, 3.0]))
    position_success_tol: float = 1.0

    def __post_init__(self):
        self.hydro_matrix = np.asarray(self.hydro_matrix, dtype=np.float64)
        if self.hydro_matrix.shape != (3, 22):
            raise ValueError("hydrodynamic matrix must be 3x22")


class Boat(Plant):
    """Twin-thruster surface vehicle.

    Full state (x, y, phi, v_x, v_y, phi_dot); the acceleration model acts on
    the body-frame velocities and the pose follows by rotating the *updated*
    velocities through the current yaw. The surrogate model space is the
    velocity triple only; pose is carried as rollout aux state.
    """

    name = "boat"
    state_dim = 6
    input_dim = 2

    def __init__(self, params: BoatParams | None = None):
        self.params = params or BoatParams()
        self.input_low = np.array([-1.0, -1.0])
        self.input_high = np.array([1.0, 1.0])
        big = 1e6
        self.state_low = np.concatenate([[-big, -big, -big], self.params.velocity_low])
        self.state_high = np.concatenate([[big, big, big], self.params.velocity_high])

    @property
    def model_dim(self) -> int:
        return 3

    @property
    def model_low(self):
        return self.params.velocity_low

    @property
    def model_high(self):
        return self.params.velocity_high

    @property
    def aux_dim(self) -> int:
        return 3

    def model_state(self, x):
        return np.asarray(x, dtype=np.float64)[..., 3:]

    def aux_init(self, x):
        return np.asarray(x, dtype=np.float64)[..., :3]

    def aux_step(self, aux, s_next):
        return self._advance_pose(aux, s_next)

    def _advance_pose(self, pose, vel):
        phi = pose[..., 2]
        c, s = np.cos(phi), np.sin(phi)
        vx, vy, wz = vel[..., 0], vel[..., 1], vel[..., 2]
        pdot = np.stack([c * vx - s * vy, s * vx + c * vy, wz], axis=-1)
        return pose + pdot * self.params.dt

    def velocity_step(self, s, u):
        u = np.clip(np.asarray(u, dtype=np.float64), self.input_low, self.input_high)
        sdot = boat_features(s, u) @ self.params.hydro_matrix.T
        return np.asarray(s, dtype=np.float64) + sdot * self.params.dt

    def step(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        s_next = self.velocity_step(x[..., 3:], u)
        if x.ndim == 1 and not np.all(np.isfinite(s_next)):
            # closed-loop use; batched rollouts handle bad rows via +inf cost
            raise FloatingPointError("surface-vehicle simulation diverged")
        p_next = self._advance_pose(x[..., :3], s_next)
        return np.concatenate([p_next, s_next], axis=-1)

    def stage_cost(self, x):
        d = np.asarray(x, dtype=np.float64) - self.params.goal
        return np.sum(d * d, axis=-1)

    def model_stage_cost(self, s, aux):
        return self.stage_cost(np.concatenate([aux, s], axis=-1))

    def sample_reset_state(self, rng):
        pose = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-np.pi, np.pi)])
        vel = rng.uniform(0.5 * self.params.velocity_low, 0.5 * self.params.velocity_high)
        return np.concatenate([pose, vel])

    def default_initial_state(self, rng=None):
        return np.array([20.0, 10.0, np.pi / 3, 0.0, 0.0, 0.0])

    def position_error(self, x) -> float:
        d = np.asarray(x, dtype=np.float64)[:2] - self.params.goal[:2]
        return float(np.hypot(d[0], d[1]))

    def episode_success(self, states) -> bool:
        return self.position_error(np.asarray(states)[-1]) <= self.params.position_success_tol


@dataclass
class QuadrupedParams:
    mass: float = 12.0
    inertia_zz: float = 0.9
    com_height: float = 0.3
    dt: float = 0.05
    goal: np.ndarray = field(default_factory=lambda: np.array([1.5, 0.0, 0.0]))
    success_tol: float = 0.05
    success_steps: int = 200


class Quadruped(Plant):
    """Planar centroidal base model of a quadruped.

    State (x, y, theta, v_x, v_y, theta_dot, l_x, l_y, w_m): global pose,
    body-frame velocities, and centroidal momenta. Inputs are commanded
    body-frame forward/lateral accelerations and yaw angular acceleration.
    The surrogate model space is the 8-dim goal-relative task state.
    """

    name = "quadruped"
    state_dim = 9
    input_dim = 3

    def __init__(self, params: QuadrupedParams | None = None):
        self.params = params or QuadrupedParams()
        p = self.params
        self.input_low = np.array([-1.0, -1.0, -1.0])
        self.input_high = np.array([1.0, 1.0, 1.0])
        big = 1e6
        vmax, wmax = 4.0, 4.0
        self.state_low = np.array([-big, -big, -np.pi, -vmax, -vmax, -wmax,
                                   -p.mass * vmax, -p.mass * vmax, -p.inertia_zz * wmax])
        self.state_high = -self.state_low.copy()
        self.state_high[2] = np.pi
        dtheta_bound = np.pi + wmax * p.dt  # canonicalized successors overhang the circle
        self._task_low = np.array([-12.0, -12.0, -dtheta_bound, -1.0, -1.0, -vmax, -vmax, -wmax])
        self._task_high = np.array([12.0, 12.0, dtheta_bound, 1.0, 1.0, vmax, vmax, wmax])

    def step(self, x, u):
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        u = np.clip(np.asarray(u, dtype=np.float64), self.input_low, self.input_high)
        theta = x[..., 2]
        h = x[..., 6:9]
        c, s = np.cos(theta), np.sin(theta)
        a_fwd, a_lat, a_yaw = u[..., 0], u[..., 1], u[..., 2]
        hdot = np.stack([p.mass * (c * a_fwd - s * a_lat),
                         p.mass * (s * a_fwd + c * a_lat),
                         p.inertia_zz * a_yaw], axis=-1)
        h_next = h + hdot * p.dt
        xdot_w = h_next[..., 0] / p.mass
        ydot_w = h_next[..., 1] / p.mass
        theta_dot = h_next[..., 2] / p.inertia_zz
        pos_x = x[..., 0] + xdot_w * p.dt
        pos_y = x[..., 1] + ydot_w * p.dt
        theta_next = wrap_angle(theta + theta_dot * p.dt)
        c2, s2 = np.cos(theta_next), np.sin(theta_next)
        v_x = c2 * xdot_w + s2 * ydot_w
        v_y = -s2 * xdot_w + c2 * ydot_w
        return np.stack([pos_x, pos_y, theta_next, v_x, v_y, theta_dot,
                         h_next[..., 0], h_next[..., 1], h_next[..., 2]], axis=-1)

    def task_state(self, x):
        """Goal-relative 8-dim state (dx, dy, dtheta, cos, sin, v_x, v_y, theta_dot)."""
        p = self.params
        x = np.asarray(x, dtype=np.float64)
        theta = x[..., 2]
        return np.stack([
            x[..., 0] - p.goal[0],
            x[..., 1] - p.goal[1],
            wrap_angle(theta - p.goal[2]),
            np.cos(theta), np.sin(theta),
            x[..., 3], x[..., 4], x[..., 5],
        ], axis=-1)

    def task_cost(self, s):
        s = np.asarray(s, dtype=np.float64)
        return 6.0 * s[..., 0] ** 2 + 20.0 * s[..., 1] ** 2 + 4.5 * s[..., 2] ** 2

    def task_success(self, s):
        s = np.asarray(s, dtype=np.float64)
        return s[..., 0] ** 2 + s[..., 1] ** 2 + s[..., 2] ** 2 <= self.params.success_tol

    def stage_cost(self, x):
        return self.task_cost(self.task_state(x))

    def model_stage_cost(self, s, aux):
        return self.task_cost(s)

    @property
    def model_dim(self) -> int:
        return 8

    @property
    def model_low(self):
        return self._task_low

    @property
    def model_high(self):
        return self._task_high

    def model_state(self, x):
        return self.task_state(x)

    def canonicalize_model_tuple(self, s, s_next):
        s_next = s_next.copy()
        s_next[2] = s[2] + wrap_angle(s_next[2] - s[2])
        return s, s_next

    def state_from_pose_velocity(self, pose, body_vel) -> np.ndarray:
        """Build the 9-dim state from (x, y, theta) and body (v_x, v_y, theta_dot)."""
        p = self.params
        x, y, theta = pose
        vx, vy, w = body_vel
        xdot = np.cos(theta) * vx - np.sin(theta) * vy
        ydot = np.sin(theta) * vx + np.cos(theta) * vy
        return np.array([x, y, wrap_angle(theta), vx, vy, w,
                         p.mass * xdot, p.mass * ydot, p.inertia_zz * w])

    def sample_reset_state(self, rng):
        pose = np.array([rng.uniform(-1.5, 3.0), rng.uniform(-2.0, 2.0), rng.uniform(-np.pi, np.pi)])
        vel = rng.uniform([-0.75, -0.75, -0.75], [0.75, 0.75, 0.75])
        return self.state_from_pose_velocity(pose, vel)

    def default_initial_state(self, rng=None):
        base = np.array([-0.5, 0.4, 0.3])
        if rng is not None:
            base = base + rng.uniform([-0.5, -0.5, -0.4], [0.5, 0.5, 0.4])
        return self.state_from_pose_velocity(base, np.zeros(3))

    def episode_success(self, states) -> bool:
        window = np.asarray(states)[: self.params.success_steps + 1]
        return bool(np.any(self.task_success(self.task_state(window))))

    def final_error(self, x) -> float:
        s = self.task_state(np.asarray(x, dtype=np.float64))
        return float(s[0] ** 2 + s[1] ** 2 + s[2] ** 2)


PLANTS = {"pendulum": Pendulum, "boat": Boat, "quadruped": Quadruped}


def make_plant(name: str, params=None) -> Plant:
    try:
        cls = PLANTS[name]
    except KeyError:
        raise ValueError(f"unknown plant {name!r}; expected one of {sorted(PLANTS)}") from None
    return cls(params) if params is not None else cls()


def collect_dataset(plant: Plant, num_samples: int, seed: int,
                    episode_length: int = 50) -> TransitionDataset:
    """Uniform-random exploration tuples in the plant's model space.

    Episodes reset to a sampled in-bounds state every episode_length steps;
    inputs are uniform over the input box; the recorded input is exactly the
    applied one. Deterministic per seed. Diverging episodes are resampled
    with a warning.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    states = np.empty((num_samples, plant.model_dim))
    inputs = np.empty((num_samples, plant.input_dim))
    next_states = np.empty((num_samples, plant.model_dim))
    i = 0
    x = plant.sample_reset_state(rng)
    steps_in_episode = 0
    while i < num_samples:
        if steps_in_episode >= episode_length:
            x = plant.sample_reset_state(rng)
            steps_in_episode = 0
        u = rng.uniform(plant.input_low, plant.input_high)
        try:
            x_next = plant.step(x, u)
        except FloatingPointError:
            log.warning("plant diverged during collection; resampling episode")
            x = plant.sample_reset_state(rng)
            steps_in_episode = 0
            continue
        s, s_next = plant.canonicalize_model_tuple(plant.model_state(x), plant.model_state(x_next))
        states[i] = s
        inputs[i] = u
        next_states[i] = s_next
        x = x_next
        steps_in_episode += 1
        i += 1
    return TransitionDataset(states, inputs, next_states,
                             plant.model_low, plant.model_high,
                             plant.input_low, plant.input_high)
