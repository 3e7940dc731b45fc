"""File-based pipeline stages: calibrate, build-scene, train, evaluate.

Each stage reads and writes artifacts on disk so runs are resumable and
independently testable. All randomness derives from the manifest seed through
named per-stage substreams.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import assembly, depth, geometry, poses, rl, sim
from .errors import ManifestError


def stage_seed(base_seed: int, stage: str) -> int:
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(zlib.crc32(stage.encode()),))
    return int(ss.generate_state(1)[0])


@dataclass
class PipelineManifest:
    depth_sequence: list
    reference_depth: str
    scene_config: str
    trajectory: str
    output_dir: str
    seed: int = 0
    train: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        data = json.loads(path.read_text())
        base = path.parent
        m = cls(
            depth_sequence=data["depth_sequence"],
            reference_depth=data["reference_depth"],
            scene_config=data["scene_config"],
            trajectory=data["trajectory"],
            output_dir=data.get("output_dir", "out"),
            seed=int(data.get("seed", 0)),
            train=data.get("train", {}),
            base_dir=base,
        )
        for rel in [*m.depth_sequence, m.reference_depth, m.scene_config, m.trajectory]:
            p = m.resolve(rel)
            if not p.exists():
                raise ManifestError(f"manifest references missing file: {p}")
        return m

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)


def _load_scene_config(manifest: PipelineManifest) -> dict:
    return json.loads(manifest.resolve(manifest.scene_config).read_text())


def cmd_calibrate(manifest: PipelineManifest) -> dict:
    """Fits scale/shift on frame 0 against the metric reference and applies it
    to the whole sequence."""
    out = manifest.out / "calibrated"
    out.mkdir(parents=True, exist_ok=True)
    seq = [depth.load_depth(manifest.resolve(p)) for p in manifest.depth_sequence]
    ref = depth.load_depth(manifest.resolve(manifest.reference_depth))
    calib = depth.fit_scale_shift(seq[0], ref)
    calibrated = depth.apply_calibration(seq, calib)
    for src, dm in zip(manifest.depth_sequence, calibrated):
        depth.save_depth(out / Path(src).name, dm)
    report = {
        "alpha": calib.alpha,
        "beta": calib.beta,
        "inlier_count": calib.inlier_count,
        "final_residual": calib.final_residual,
        "frames": len(seq),
    }
    (out / "calibration.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _world_transform(cfg: dict, plane_cam: geometry.Plane):
    """Camera -> gravity-aligned world map built from the config camera pose
    and the fitted ground normal; ground lands on z = 0."""
    cam = cfg.get("camera_pose")
    if cam is not None:
        cam_pose = poses.Pose(np.array(cam["p"]), np.array(cam["q"]))
        r_cw = poses.quat_to_matrix(cam_pose.q)
        t_cw = cam_pose.p
    else:
        r_cw = np.eye(3)
        t_cw = np.zeros(3)
    n_wg = r_cw @ plane_cam.normal
    r_g = geometry.gravity_rotation(n_wg)
    d_final = plane_cam.offset + float(n_wg @ t_cw)

    def apply(points):
        pts = np.asarray(points).reshape(-1, 3)
        return (pts @ r_cw.T + t_cw) @ r_g.T - np.array([0.0, 0.0, d_final])

    return apply, geometry.rotation_angle(r_g)


def cmd_build_scene(manifest: PipelineManifest) -> dict:
    """Plane fit, gravity alignment, background completion and meshing, SDF
    voxelization, object registration, and collision-free placement."""
    cfg = _load_scene_config(manifest)
    out = manifest.out / "scene"
    (out / "objects").mkdir(parents=True, exist_ok=True)

    calib_dir = manifest.out / "calibrated"
    frame0_name = Path(manifest.depth_sequence[0]).name
    frame0_path = calib_dir / frame0_name
    if not frame0_path.exists():
        frame0_path = manifest.resolve(manifest.depth_sequence[0])
    dm = depth.load_depth(frame0_path)
    intr = depth.CameraIntrinsics(**cfg["intrinsics"])
    cloud = depth.unproject(dm, intr)

    obj_mask = np.zeros(len(cloud), dtype=bool)
    segments = {}
    for obj_cfg in cfg.get("objects", []):
        idx = np.loadtxt(manifest.resolve(obj_cfg["segment"]), dtype=int).reshape(-1)
        segments[obj_cfg["name"]] = idx
        obj_mask[idx] = True

    bg_cloud = depth.PointCloud(cloud.points[~obj_mask])
    plane = geometry.fit_ground_plane(
        bg_cloud,
        iterations=int(cfg.get("ransac_iterations", geometry.RANSAC_ITERATIONS)),
        inlier_threshold=float(cfg.get("ransac_threshold", geometry.RANSAC_THRESHOLD)),
        seed=stage_seed(manifest.seed, "plane"),
    )

    if "bounds" in cfg:
        bounds = geometry.SceneBounds(cfg["bounds"]["lo"], cfg["bounds"]["hi"])
    else:
        bounds = geometry.SceneBounds.from_cloud(cloud, inflate=0.1)
    completed, dropped = geometry.complete_background(cloud, obj_mask, plane, bounds, intr)

    to_world, angle = _world_transform(cfg, plane)
    bg_world = depth.PointCloud(to_world(completed.points))
    cell = float(cfg.get("heightmap_cell_size", geometry.DEFAULT_CELL_SIZE))
    bg_mesh = geometry.heightmap_mesh(bg_world, cell)

    voxel = float(cfg.get("sdf_voxel_size", assembly.DEFAULT_VOXEL_SIZE))
    grid = assembly.voxelize_sdf(bg_mesh, voxel, padding=float(cfg.get("sdf_padding", 0.05)))

    table_path = cfg.get("property_table")
    table = assembly.load_property_table(
        manifest.resolve(table_path) if table_path else None
    )

    clearance = float(cfg.get("clearance", assembly.DEFAULT_CLEARANCE))
    objects = []
    reg_reports = []
    for obj_cfg in cfg.get("objects", []):
        mesh = geometry.load_obj(manifest.resolve(obj_cfg["mesh"]))
        observed = depth.PointCloud(to_world(cloud.points[segments[obj_cfg["name"]]]))
        xform = assembly.register_mesh(mesh, observed)
        scaled = geometry.TriangleMesh(xform.scale * mesh.vertices, mesh.triangles, mesh.colors)
        pose = poses.Pose(xform.translation, poses.matrix_to_quat(xform.rotation))
        props, defaulted = assembly.lookup_physical_properties(obj_cfg["category"], table)
        objects.append(
            assembly.SceneObject(obj_cfg["name"], obj_cfg["category"], scaled, props, pose, defaulted)
        )
        reg_reports.append({"name": obj_cfg["name"], "scale": xform.scale})

    taus = []
    placement_loss = 0.0
    placement_steps = 0
    if objects:
        placement = assembly.optimize_placement(
            [(o.mesh, o.initial_pose) for o in objects], grid, clearance
        )
        taus = placement.offsets.tolist()
        placement_loss = placement.final_loss
        placement_steps = placement.steps
        for o, tau in zip(objects, placement.offsets):
            o.initial_pose = poses.Pose(
                o.initial_pose.p + np.array([0.0, 0.0, tau]), o.initial_pose.q
            )

    scene = assembly.SceneModel(
        bg_mesh,
        grid,
        objects,
        gravity=np.array(cfg.get("gravity", [0.0, 0.0, -9.81])),
        assembled=True,
    )
    if objects:
        scene.validate_assembled(eps=max(assembly.PENETRATION_EPS, 2e-3))

    geometry.save_obj(out / "background.obj", bg_mesh)
    assembly.save_sdf(out / "background.pwsd", grid)
    model = {
        "background_mesh": "background.obj",
        "background_sdf": "background.pwsd",
        "gravity": scene.gravity.tolist(),
        "assembled": True,
        "objects": [],
    }
    for o in objects:
        rel = f"objects/{o.name}.obj"
        geometry.save_obj(out / rel, o.mesh)
        model["objects"].append(
            {
                "name": o.name,
                "category": o.category,
                "mesh": rel,
                "properties": {
                    "mass": o.properties.mass,
                    "friction": o.properties.friction,
                    "restitution": o.properties.restitution,
                },
                "defaulted": o.defaulted_properties,
                "initial_pose": assembly.pose_to_dict(o.initial_pose),
            }
        )
    (out / "scene_model.json").write_text(json.dumps(model, indent=2) + "\n")

    report = {
        "plane_inliers": int(len(plane.inlier_indices)),
        "rotation_angle_rad": angle,
        "rotation_angle_deg": float(np.degrees(angle)),
        "dropped_rays": dropped,
        "objects": reg_reports,
        "tau": taus,
        "placement_loss": placement_loss,
        "placement_steps": placement_steps,
        "clearance": clearance,
    }
    (out / "build_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def load_scene_model(scene_dir: str | Path) -> assembly.SceneModel:
    scene_dir = Path(scene_dir)
    model = json.loads((scene_dir / "scene_model.json").read_text())
    bg_mesh = geometry.load_obj(scene_dir / model["background_mesh"])
    grid = assembly.load_sdf(scene_dir / model["background_sdf"])
    objects = []
    for o in model["objects"]:
        mesh = geometry.load_obj(scene_dir / o["mesh"])
        props = assembly.PhysicalProperties(**o["properties"])
        objects.append(
            assembly.SceneObject(
                o["name"],
                o["category"],
                mesh,
                props,
                assembly.pose_from_dict(o["initial_pose"]),
                o.get("defaulted", False),
            )
        )
    return assembly.SceneModel(
        bg_mesh, grid, objects, gravity=np.array(model["gravity"]), assembled=model["assembled"]
    )


def build_training_setup(
    manifest: PipelineManifest,
    scene: assembly.SceneModel | None = None,
    mode: str = "residual",
):
    """Grasp proposal, baseline plan, and environment factory for a manifest."""
    if scene is None:
        scene = load_scene_model(manifest.out / "scene")
    if not scene.objects:
        raise ManifestError("training requires at least one scene object")
    target = poses.load_trajectory(manifest.resolve(manifest.trajectory))

    tcfg = manifest.train
    obj = scene.objects[0]
    grasp, d_pre = poses.propose_grasp(obj.mesh, obj.initial_pose)
    offset = np.array(tcfg.get("grasp_offset", [0.0, 0.0, 0.0]), dtype=np.float64)
    grasp = poses.Pose(grasp.p + offset, grasp.q)
    plan = poses.make_baseline(
        grasp,
        d_pre,
        target,
        steps_approach=int(tcfg.get("steps_approach", 20)),
        steps_descend=int(tcfg.get("steps_descend", 10)),
        steps_hold=int(tcfg.get("steps_hold", 10)),
    )
    sim_cfg = sim.SimConfig(home=plan.planned[0].copy())
    weights = rl.RewardWeights(**tcfg.get("reward_weights", {}))

    def env_factory():
        return rl.ResidualEnv(sim.World(scene, sim_cfg), target, plan, weights, mode=mode)

    return env_factory, plan, target, weights


def cmd_train(manifest: PipelineManifest) -> dict:
    tcfg = manifest.train
    env_factory, plan, target, weights = build_training_setup(
        manifest, mode=tcfg.get("mode", "residual")
    )
    ppo_kwargs = dict(tcfg.get("ppo", {}))
    ppo_kwargs.setdefault("seed", stage_seed(manifest.seed, "train"))
    ppo_kwargs.setdefault("rollout_steps", len(plan))
    cfg = rl.PpoConfig(**ppo_kwargs)
    if "iterations" in tcfg:
        cfg.iterations = int(tcfg["iterations"])

    out = manifest.out / "policy"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.iterations == 0:
        env = env_factory()
        obs_dim = len(env.reset(0, jitter=False))
        policy = rl.PolicyParameters.init(cfg.seed, obs_dim, zero=True)
        curve = []
    else:
        policy, curve = rl.ppo_train(env_factory, cfg)
    rl.save_checkpoint(out / "policy.pwpl", policy, cfg, weights)
    rl.save_curve_csv(out / "curve.csv", curve)
    final_return = curve[-1].mean_return if curve else 0.0
    report = {"iterations": cfg.iterations, "final_mean_return": final_return}
    (out / "train_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_evaluate(manifest: PipelineManifest, checkpoint: str | Path | None = None, episodes: int = 10) -> dict:
    if checkpoint is None:
        checkpoint = manifest.out / "policy" / "policy.pwpl"
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise ManifestError(f"checkpoint not found: {checkpoint}")
    policy, _, _ = rl.load_checkpoint(checkpoint)
    env_factory, _, _, _ = build_training_setup(manifest)
    env = env_factory()
    out = manifest.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report = rl.evaluate(
        policy,
        env,
        episodes=episodes,
        seed=stage_seed(manifest.seed, "evaluate"),
        log_dir=out,
    )
    result = {
        "success_rate": report.success_rate,
        "mean_final_pos_err": report.mean_final_pos_err,
        "mean_final_ori_err": report.mean_final_ori_err,
        "mean_episode_reward": report.mean_episode_reward,
        "episodes": report.episodes,
    }
    (out / "success_report.json").write_text(json.dumps(result, indent=2) + "\n")
    lines = ["metric,value"] + [f"{k},{v}" for k, v in result.items()]
    (out / "success_report.csv").write_text("\n".join(lines) + "\n")
    return result
