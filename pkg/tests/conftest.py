"""Shared fixtures: synthetic scenes, meshes, and pick-and-place tasks."""

import numpy as np
import pytest

from desktwin import assembly, depth, geometry, poses, rl, sim

CUBE_TRIANGLES = [
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
    [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
    [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
]


def cube_mesh(half: float = 0.02, center=(0.0, 0.0, 0.0)) -> geometry.TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    v = np.array(
        [[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)]
    ) + c
    return geometry.TriangleMesh(v, CUBE_TRIANGLES)


_BACKGROUND_CACHE = {}


def _flat_background(seed: int):
    """Memoized tabletop mesh + SDF (the expensive part of scene construction)."""
    if seed not in _BACKGROUND_CACHE:
        rng = np.random.default_rng(seed)
        cloud = depth.PointCloud(rng.uniform(-0.6, 0.6, (3000, 3)) * [1, 1, 0])
        bg = geometry.heightmap_mesh(cloud, 0.05)
        grid = assembly.voxelize_sdf(bg, 0.01, padding=0.12)
        _BACKGROUND_CACHE[seed] = (bg, grid)
    return _BACKGROUND_CACHE[seed]


def flat_scene(cube_half: float = 0.0125, start=(0.0, 0.0), seed: int = 1) -> assembly.SceneModel:
    """Flat tabletop at z=0 with one cube resting on it."""
    bg, grid = _flat_background(seed)
    mesh = cube_mesh(cube_half)
    props = assembly.PhysicalProperties(0.2, 0.5, 0.0)
    p0 = np.array([start[0], start[1], cube_half])
    obj = assembly.SceneObject("cube", "box", mesh, props, poses.Pose(p0, [1, 0, 0, 0]))
    return assembly.SceneModel(bg, grid, [obj], assembled=True)


def pick_place_trajectory(
    scene, frames: int = 40, dx: float = 0.25, lift: float = 0.1, yaw: float = np.pi / 4
):
    """Object rises, translates +x while yawing, and sets down at the same height."""
    start = scene.objects[0].initial_pose
    fr = []
    for i in range(frames):
        s = i / (frames - 1)
        z = start.p[2] + lift * np.sin(np.pi * min(1.0, s))
        x = start.p[0] + dx * s
        half = 0.5 * yaw * s
        q = poses.quat_mul([np.cos(half), 0.0, 0.0, np.sin(half)], start.q)
        fr.append((i, poses.Pose([x, start.p[1], z], q)))
    return poses.PoseTrajectory(fr)


def make_task(grasp_offset=(0, 0, 0), mode="residual", weights=None, cube_half=0.0125):
    """(env_factory, plan, target, weights) for a cube pick-and-place task.

    grasp_offset shifts the proposed grasp point, injecting a baseline error
    the residual policy must correct.
    """
    scene = flat_scene(cube_half=cube_half)
    target = pick_place_trajectory(scene)
    obj = scene.objects[0]
    grasp, d_pre = poses.propose_grasp(obj.mesh, obj.initial_pose)
    grasp = poses.Pose(grasp.p + np.asarray(grasp_offset, dtype=np.float64), grasp.q)
    plan = poses.make_baseline(grasp, d_pre, target)
    cfg = sim.SimConfig(home=plan.planned[0].copy())

    def factory():
        return rl.ResidualEnv(sim.World(scene, cfg), target, plan, weights or rl.RewardWeights(), mode=mode)

    return factory, plan, target, weights or rl.RewardWeights()


@pytest.fixture(scope="session")
def perfect_task():
    return make_task()


@pytest.fixture(scope="session")
def offset_task():
    return make_task(grasp_offset=(0.04, 0.0, 0.0))


@pytest.fixture(scope="session")
def resting_scene():
    return flat_scene()
