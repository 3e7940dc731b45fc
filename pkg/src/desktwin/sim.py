"""Deterministic rigid-body world model: gravity, SDF ground contact with
Coulomb friction, and a rate-limited kinematic gripper with weld attachment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import SceneModel, sample_sdf
from .errors import ExplosionDetected, UnassembledScene
from .geometry import SceneBounds
from .poses import Pose, quat_exp, quat_mul, slerp


@dataclass
class SimConfig:
    dt: float = 0.05
    substeps: int = 10
    max_lin_rate: float = 0.5      # m/s gripper translation limit
    max_ang_rate: float = 2.0      # rad/s gripper rotation limit
    attach_radius: float = 0.02
    jitter: float = 0.005
    explosion_speed: float = 10.0
    max_mesh_samples: int = 200
    workspace: SceneBounds = field(
        default_factory=lambda: SceneBounds([-2.0, -2.0, -0.5], [2.0, 2.0, 2.0])
    )
    home: Pose = field(default_factory=Pose.identity)

    @property
    def sub_dt(self) -> float:
        return self.dt / self.substeps


@dataclass
class RigidBodyState:
    pose: Pose
    lin_vel: np.ndarray
    ang_vel: np.ndarray
    attached: bool = False

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(
            self.pose.copy(), self.lin_vel.copy(), self.ang_vel.copy(), self.attached
        )


@dataclass
class GripperState:
    pose: Pose
    closed: bool = False
    held_object: str | None = None

    def copy(self) -> "GripperState":
        return GripperState(self.pose.copy(), self.closed, self.held_object)


@dataclass
class Command:
    target: Pose
    close_gripper: bool


@dataclass
class StepInfo:
    contacts: list = field(default_factory=list)        # (name, penetration depth)
    attach_events: list = field(default_factory=list)   # (name, "attach"|"release")
    feasible: bool = True
    reason: str = ""


@dataclass
class WorldState:
    step_index: int
    bodies: dict
    gripper: GripperState
    world: "World"
    attach_rel: dict = field(default_factory=dict)  # name -> gripper->object Pose
    last_target: Pose | None = None  # most recent feasible commanded pose

    def copy(self) -> "WorldState":
        return WorldState(
            self.step_index,
            {k: v.copy() for k, v in self.bodies.items()},
            self.gripper.copy(),
            self.world,
            {k: v.copy() for k, v in self.attach_rel.items()},
            self.last_target.copy() if self.last_target is not None else None,
        )


def _aabb_samples(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """26 AABB points: corners, edge midpoints, face centers."""
    levels = [np.array([lo[i], 0.5 * (lo[i] + hi[i]), hi[i]]) for i in range(3)]
    pts = np.array(
        [
            [x, y, z]
            for x in levels[0]
            for y in levels[1]
            for z in levels[2]
        ]
    )
    center = 0.5 * (lo + hi)
    keep = ~np.all(np.isclose(pts, center), axis=1)
    return pts[keep]


class World:
    """Owns the immutable scene, config, and per-body contact sample caches."""

    def __init__(self, scene: SceneModel, cfg: SimConfig | None = None):
        if not scene.assembled:
            raise UnassembledScene("scene must be collision-optimized before simulation")
        self.scene = scene
        self.cfg = cfg or SimConfig()
        self.samples = {}
        self.inv_mass = {}
        for obj in scene.objects:
            verts = obj.mesh.vertices
            lo = verts.min(axis=0)
            hi = verts.max(axis=0)
            pts = _aabb_samples(lo, hi)
            if len(verts) > self.cfg.max_mesh_samples:
                stride = int(np.ceil(len(verts) / self.cfg.max_mesh_samples))
                verts = verts[::stride]
            self.samples[obj.name] = np.vstack([pts, verts])
            self.inv_mass[obj.name] = 1.0 / obj.properties.mass
        self._objects = {o.name: o for o in self.scene.objects}
        # +x, -x, +y, -y, +z, -z central-difference stencil directions
        self._grad_offsets = np.array(
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
            dtype=np.float64,
        )

    def reset(self, seed: int = 0, jitter: bool = True) -> WorldState:
        rng = np.random.Generator(np.random.PCG64(seed))
        bodies = {}
        for obj in self.scene.objects:
            p = obj.initial_pose.p.copy()
            if jitter and self.cfg.jitter > 0:
                p = p + rng.uniform(-self.cfg.jitter, self.cfg.jitter, 3)
            bodies[obj.name] = RigidBodyState(
                Pose(p, obj.initial_pose.q.copy()), np.zeros(3), np.zeros(3)
            )
        gripper = GripperState(self.cfg.home.copy(), closed=False)
        return WorldState(0, bodies, gripper, self)

    def _body_aabb_world(self, name: str, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
        obj = self._objects[name]
        world = pose.transform(obj.mesh.vertices)
        return world.min(axis=0), world.max(axis=0)

    def step(self, state: WorldState, cmd: Command) -> tuple[WorldState, StepInfo]:
        cfg = self.cfg
        s = state.copy()
        info = StepInfo()
        grid = self.scene.background_sdf
        gravity = self.scene.gravity
        dt = cfg.sub_dt
        props = {o.name: o.properties for o in self.scene.objects}

        feasible, reason = self.check_feasible(state, cmd)
        info.feasible = feasible
        info.reason = reason
        # infeasible commands are replaced by the last feasible one for execution
        if feasible:
            target = cmd.target
            s.last_target = cmd.target.copy()
        else:
            target = state.last_target if state.last_target is not None else state.gripper.pose

        for _ in range(cfg.substeps):
            # (a) gripper: rate-limited first-order move toward the command
            g = s.gripper
            prev_p = g.pose.p.copy()
            delta = target.p - g.pose.p
            dist = float(np.sqrt(delta @ delta))
            max_move = cfg.max_lin_rate * dt
            if dist > 1e-15:
                move = min(dist, max_move)
                g.pose = Pose(g.pose.p + delta / dist * move, g.pose.q)
            dot = float(np.clip(abs(g.pose.q @ target.q), -1.0, 1.0))
            angle = 2.0 * np.arccos(dot)
            max_turn = cfg.max_ang_rate * dt
            if angle > 1e-12:
                frac = min(1.0, max_turn / angle)
                g.pose = Pose(g.pose.p, slerp(g.pose.q, target.q, frac))
            grip_vel = (g.pose.p - prev_p) / dt

            # (b) attachment transitions
            if cmd.close_gripper and g.held_object is None:
                for name, body in s.bodies.items():
                    lo, hi = self._body_aabb_world(name, body.pose)
                    nearest = np.clip(g.pose.p, lo, hi)
                    if np.linalg.norm(nearest - g.pose.p) < cfg.attach_radius:
                        g.held_object = name
                        body.attached = True
                        body.lin_vel = np.zeros(3)
                        body.ang_vel = np.zeros(3)
                        s.attach_rel[name] = g.pose.inverse().compose(body.pose)
                        info.attach_events.append((name, "attach"))
                        break
            elif not cmd.close_gripper and g.held_object is not None:
                name = g.held_object
                s.bodies[name].attached = False
                s.bodies[name].lin_vel = grip_vel.copy()
                s.attach_rel.pop(name, None)
                g.held_object = None
                info.attach_events.append((name, "release"))
            g.closed = cmd.close_gripper

            for name, body in s.bodies.items():
                if body.attached:
                    # kinematic weld at the captured relative transform
                    body.pose = g.pose.compose(s.attach_rel[name])
                    body.lin_vel = grip_vel.copy()
                    continue
                # (c) semi-implicit Euler
                body.lin_vel = body.lin_vel + gravity * dt
                body.pose = Pose(body.pose.p + body.lin_vel * dt, body.pose.q)
                w = body.ang_vel
                if w @ w > 0:
                    body.pose = Pose(body.pose.p, quat_mul(quat_exp(w * dt), body.pose.q))

                # (d) SDF ground contact with projection + Coulomb friction
                pts = body.pose.transform(self.samples[name])
                phi = sample_sdf(grid, pts)
                i_min = int(np.argmin(phi))
                depth = -float(phi[i_min])
                if depth > 0:
                    pdeep = pts[i_min]
                    h = 0.5 * grid.voxel_size
                    stencil = sample_sdf(grid, pdeep + self._grad_offsets * h)
                    grad = (stencil[0::2] - stencil[1::2]) / (2 * h)
                    n_hat = grad / max(float(np.sqrt(grad @ grad)), 1e-12)
                    body.pose = Pose(body.pose.p + depth * n_hat, body.pose.q)
                    vn = float(body.lin_vel @ n_hat)
                    if vn < 0:
                        e = props[name].restitution
                        body.lin_vel = body.lin_vel - (1.0 + e) * vn * n_hat
                        vt = body.lin_vel - (body.lin_vel @ n_hat) * n_hat
                        vt_mag = np.linalg.norm(vt)
                        if vt_mag > 1e-15:
                            max_dv = props[name].friction * (1.0 + e) * (-vn)
                            body.lin_vel = body.lin_vel - vt / vt_mag * min(vt_mag, max_dv)
                    info.contacts.append((name, depth))

        for name, body in s.bodies.items():
            if np.linalg.norm(body.lin_vel) > cfg.explosion_speed:
                raise ExplosionDetected(f"body {name} exceeded the velocity guard")

        s.step_index = state.step_index + 1
        return s, info

    def check_feasible(self, state: WorldState, cmd: Command) -> tuple[bool, str]:
        """Workspace, reachability, and ground-collision screen for a command."""
        cfg = self.cfg
        p = cmd.target.p
        if not cfg.workspace.contains(p)[0]:
            return False, "workspace"
        if np.linalg.norm(p - state.gripper.pose.p) > cfg.max_lin_rate * cfg.dt * 4:
            return False, "rate-limit"
        if sample_sdf(self.scene.background_sdf, p) < 0:
            return False, "collision"
        return True, ""

    def kinetic_energy(self, state: WorldState) -> float:
        total = 0.0
        for obj in self.scene.objects:
            body = state.bodies[obj.name]
            total += 0.5 * obj.properties.mass * float(body.lin_vel @ body.lin_vel)
            lo, hi = obj.mesh.aabb()
            ext = hi - lo
            m = obj.properties.mass
            inertia = m / 12.0 * np.array(
                [ext[1] ** 2 + ext[2] ** 2, ext[0] ** 2 + ext[2] ** 2, ext[0] ** 2 + ext[1] ** 2]
            )
            total += 0.5 * float(inertia @ (body.ang_vel**2))
        return total


def reset(scene: SceneModel, seed: int = 0, cfg: SimConfig | None = None, jitter: bool = True) -> WorldState:
    return World(scene, cfg).reset(seed, jitter=jitter)


def step(state: WorldState, cmd: Command) -> tuple[WorldState, StepInfo]:
    return state.world.step(state, cmd)


def check_feasible(state: WorldState, cmd: Command) -> tuple[bool, str]:
    return state.world.check_feasible(state, cmd)
