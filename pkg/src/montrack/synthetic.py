"""Synthetic monocular sequences with exact ground truth.

A motion script drives the skeleton pose and a rest-space cloth displacement
field per frame; the ground-truth surface is the skinning of the displaced
rest shape, so both stages of the tracker have an exactly attainable target.
Color frames are rendered from the per-vertex template colors, masks from
the same rasterizer used at solve time, and joint/landmark detections are
the true projections plus controllable Gaussian noise and dropout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, save_calibration
from .pose_stage import FrameDetections, save_detections
from .rasterizer import render_attributes
from .skinning import PoseParams, forward_kinematics, save_pose_trajectory, skin_points
from .template import Actor, save_actor


@dataclass
class Wave:
    """One sinusoidal channel: amplitude * sin(2*pi*frame/period + phase)."""
    target: str        # "theta", "root_rotation", or "root_translation"
    index: int
    amplitude: float
    period: float
    phase: float = 0.0
    offset: float = 0.0

    def value(self, frame: int) -> float:
        return self.offset + self.amplitude * np.sin(
            2.0 * np.pi * frame / self.period + self.phase)


@dataclass
class ClothScript:
    """Rest-space sway of one material class, strongest at the far hem."""
    material_class: int = 1
    axis: int = 0
    amplitude: float = 0.06
    period: float = 20.0
    phase: float = 0.0
    ramp_axis: int = 1     # displacement scales with rest extent along this axis

    def displacement(self, mesh, frame: int) -> np.ndarray:
        d = np.zeros_like(mesh.rest_vertices)
        sel = mesh.vertex_labels == self.material_class
        if not np.any(sel):
            return d
        coord = mesh.rest_vertices[sel, self.ramp_axis]
        span = coord.max() - coord.min()
        ramp = (coord - coord.min()) / span if span > 1e-12 else np.ones_like(coord)
        s = np.sin(2.0 * np.pi * frame / self.period + self.phase)
        d[sel, self.axis] = self.amplitude * s * ramp
        return d


@dataclass
class NoiseParams:
    sigma2d: float = 1.0
    sigma3d: float = 0.008
    dropout2d: float = 0.0
    dropout3d: float = 0.0
    image_noise: float = 0.0
    seed: int = 0


@dataclass
class MotionScript:
    n_frames: int = 30
    waves: list = field(default_factory=list)
    cloth: ClothScript | None = None
    noise: NoiseParams = field(default_factory=NoiseParams)

    def pose_at(self, frame: int) -> PoseParams:
        pose = PoseParams.zero()
        for w in self.waves:
            v = w.value(frame)
            if w.target == "theta":
                pose.theta[w.index] += v
            elif w.target == "root_rotation":
                pose.root_rotation[w.index] += v
            elif w.target == "root_translation":
                pose.root_translation[w.index] += v
            else:
                raise ValueError(f"unknown wave target {w.target!r}")
        return pose

    def displacement_at(self, mesh, frame: int) -> np.ndarray:
        if self.cloth is None:
            return np.zeros_like(mesh.rest_vertices)
        return self.cloth.displacement(mesh, frame)

    def to_json(self) -> str:
        rec = {
            "n_frames": self.n_frames,
            "waves": [asdict(w) for w in self.waves],
            "cloth": None if self.cloth is None else asdict(self.cloth),
            "noise": asdict(self.noise),
        }
        return json.dumps(rec, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MotionScript":
        rec = json.loads(text)
        return cls(
            n_frames=rec["n_frames"],
            waves=[Wave(**w) for w in rec.get("waves", [])],
            cloth=None if rec.get("cloth") is None else ClothScript(**rec["cloth"]),
            noise=NoiseParams(**rec.get("noise", {})),
        )


def default_script(n_frames: int = 30, with_cloth: bool = True,
                   noise: NoiseParams | None = None,
                   theta_names: dict | None = None) -> MotionScript:
    """Gentle full-body motion presets; indices follow the default skeleton."""
    names = theta_names or {}

    def dof(name, fallback):
        return names.get(name, fallback)

    waves = [
        Wave("theta", dof("l_shoulder_z", 10), 0.35, 24.0, 0.0),
        Wave("theta", dof("r_shoulder_z", 15), -0.35, 24.0, np.pi),
        Wave("theta", dof("l_elbow_y", 11), 0.30, 18.0, 0.7, offset=0.35),
        Wave("theta", dof("r_elbow_y", 16), -0.30, 18.0, 0.7, offset=-0.35),
        Wave("theta", dof("spine_x", 0), 0.08, 30.0, 0.3),
        Wave("theta", dof("chest_z", 3), 0.10, 26.0, 1.1),
        Wave("theta", dof("head_y", 7), 0.25, 22.0, 0.5),
        Wave("theta", dof("l_hip_x", 19), 0.18, 20.0, 0.0),
        Wave("theta", dof("r_hip_x", 23), 0.18, 20.0, np.pi),
        Wave("theta", dof("l_knee_x", 21), 0.22, 20.0, np.pi, offset=0.25),
        Wave("theta", dof("r_knee_x", 25), 0.22, 20.0, 0.0, offset=0.25),
        Wave("root_rotation", 1, 0.10, 40.0, 0.2),
        Wave("root_translation", 0, 0.05, 35.0, 0.0),
    ]
    cloth = ClothScript() if with_cloth else None
    return MotionScript(n_frames=n_frames, waves=waves, cloth=cloth,
                        noise=noise or NoiseParams())


@dataclass
class SyntheticFrame:
    index: int
    pose: PoseParams
    displacement: np.ndarray     # (N,3) rest-space
    gt_vertices: np.ndarray      # (N,3) camera-space surface
    gt_joints: np.ndarray        # (J,3)
    gt_markers: np.ndarray       # (4,3)
    image: np.ndarray            # (H,W,3) in [0,1]
    mask: np.ndarray             # (H,W) bool
    detections: FrameDetections


@dataclass
class SyntheticSequence:
    actor: Actor
    camera: CameraIntrinsics
    script: MotionScript
    frames: list


def generate_synthetic_sequence(actor: Actor, camera: CameraIntrinsics,
                                script: MotionScript) -> SyntheticSequence:
    rng = np.random.default_rng(script.noise.seed)
    mesh, skeleton, skinning = actor.mesh, actor.skeleton, actor.skinning
    nz = script.noise
    frames = []
    for f in range(script.n_frames):
        pose = script.pose_at(f)
        pose.theta = skeleton.clamp_theta(pose.theta)
        fk = forward_kinematics(skeleton, pose)
        disp = script.displacement_at(mesh, f)
        skinned = skin_points(mesh.rest_vertices + disp, skinning, fk.joint_dqs)
        verts = skinned.positions

        image, zbuf = render_attributes(camera, verts, mesh.triangles,
                                        mesh.vertex_colors, background=0.0)
        mask = np.isfinite(zbuf)
        if nz.image_noise > 0.0:
            image = np.clip(image + rng.normal(0.0, nz.image_noise, image.shape),
                            0.0, 1.0)

        pts2d = np.vstack([fk.positions, fk.marker_positions])
        pix, valid = camera.project_points(pts2d)
        joints2d = pix + rng.normal(0.0, nz.sigma2d, pix.shape)
        valid2d = valid & (rng.random(len(pts2d)) >= nz.dropout2d)
        rel = fk.positions - fk.positions[0]
        joints3d = rel + rng.normal(0.0, nz.sigma3d, rel.shape)
        valid3d = rng.random(len(rel)) >= nz.dropout3d
        valid3d[0] = True
        det = FrameDetections(joints2d, joints3d, valid2d, valid3d)

        frames.append(SyntheticFrame(f, pose, disp, verts, fk.positions,
                                     fk.marker_positions, image, mask, det))
    return SyntheticSequence(actor, camera, script, frames)


def save_synthetic_sequence(out_dir, seq: SyntheticSequence) -> None:
    from .imageproc import save_color, save_mask

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    save_actor(out, seq.actor, "actor")
    save_calibration(out / "camera.txt", seq.camera)
    (out / "script.json").write_text(seq.script.to_json() + "\n")
    save_pose_trajectory(out / "poses_gt.txt", [f.pose for f in seq.frames])
    save_detections(out / "detections.jsonl", [f.detections for f in seq.frames])
    np.savez_compressed(out / "gt_surfaces.npz",
                        vertices=np.stack([f.gt_vertices for f in seq.frames]),
                        joints=np.stack([f.gt_joints for f in seq.frames]),
                        displacements=np.stack([f.displacement for f in seq.frames]))
    for f in seq.frames:
        save_color(out / "frames" / f"frame_{f.index:04d}_color.png", f.image)
        save_mask(out / "frames" / f"frame_{f.index:04d}_mask.png", f.mask)


def load_ground_truth(seq_dir):
    """(gt_vertices (F,N,3), gt_joints (F,J,3)) saved by save_synthetic_sequence."""
    data = np.load(Path(seq_dir) / "gt_surfaces.npz")
    return data["vertices"], data["joints"]
