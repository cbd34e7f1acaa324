"""Per-frame tracking recursion and the three-stage frame pipeline.

Each frame passes through preprocessing (distance field, blur pyramid),
detection conditioning (bone-length rescaling), and the two-stage solve.
`run_sequence` executes those stages either sequentially or overlapped in a
slot-synchronized software pipeline: in slot s, preprocessing works on frame
s while conditioning works on frame s-1 and the solver on frame s-2, with
bounded handoff queues between the stages. Both schedules execute the same
functions on the same inputs, so their outputs are bit-identical; the
pipelined schedule emits every frame exactly two slots after its ingest.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, load_calibration
from .imageproc import DistanceField, gaussian_pyramid, load_color, load_mask
from .nonrigid_stage import (NonrigidHyperparams, NonrigidProblem,
                             build_body_part_mask, snap_vertices,
                             solve_nonrigid, visible_vertices)
from .pose_stage import (FrameDetections, PoseHyperparams, PoseProblem,
                         extrapolate_pose, extract_contour_vertices,
                         load_detections, outer_rim_mask, rescale_detections,
                         solve_pose)
from .rasterizer import render_depth
from .skinning import (PoseParams, blend_rotations, forward_kinematics,
                       quat_conj, quat_rotate, save_pose_trajectory, skin_points)
from .template import Actor, class_weight, load_actor

MODES = ("full", "pose_only", "detections_only")

# Minimum material rigidity for a contour vertex to steer the pose stage.
# Loose cloth moves relative to the body, so its image boundary says nothing
# about where the skeleton is; chasing it bends whatever pose DoFs the joint
# detections leave soft (twists especially). Everything but the flowing
# classes (dress, coat, skirt) passes.
POSE_CONTOUR_MIN_RIGIDITY = 2.0


@dataclass
class SequenceConfig:
    mode: str = "full"                 # full | pose_only | detections_only
    directional: bool = True
    enable_warping: bool = True
    enable_part_mask: bool = True
    enable_snapping: bool = True
    smooth_output: bool = True
    smoothing_stencil: tuple = (0.15, 0.7, 0.15)
    uniform_material_weight: float | None = None
    frame0_rounds: int = 3
    frame0_iteration_scale: int = 2
    pose: PoseHyperparams = field(default_factory=PoseHyperparams)
    nonrigid: NonrigidHyperparams = field(default_factory=NonrigidHyperparams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, rec: dict) -> "SequenceConfig":
        rec = dict(rec)
        known = {f.name for f in fields(cls)}
        unknown = set(rec) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "pose" in rec and isinstance(rec["pose"], dict):
            rec["pose"] = PoseHyperparams(**rec["pose"])
        if "nonrigid" in rec and isinstance(rec["nonrigid"], dict):
            rec["nonrigid"] = NonrigidHyperparams(**rec["nonrigid"])
        if "smoothing_stencil" in rec:
            rec["smoothing_stencil"] = tuple(rec["smoothing_stencil"])
        if "nonrigid" in rec and isinstance(rec["nonrigid"], NonrigidHyperparams):
            rec["nonrigid"].pyramid_kernels = tuple(rec["nonrigid"].pyramid_kernels)
        return cls(**rec)


@dataclass
class SequenceInputs:
    actor: Actor
    camera: CameraIntrinsics
    images: list                    # (H,W,3) float arrays
    masks: list                     # (H,W) bool arrays
    detections: list                # FrameDetections

    @property
    def n_frames(self) -> int:
        return len(self.images)


def load_sequence_inputs(seq_dir) -> SequenceInputs:
    """Read the directory layout written by the synthetic generator."""
    d = Path(seq_dir)
    actor = load_actor(d / "actor_template.obj", d / "actor_skeleton.txt",
                       d / "actor_skinning.txt")
    camera = load_calibration(d / "camera.txt")
    detections = load_detections(d / "detections.jsonl")
    images, masks = [], []
    for f in range(len(detections)):
        images.append(load_color(d / "frames" / f"frame_{f:04d}_color.png"))
        masks.append(load_mask(d / "frames" / f"frame_{f:04d}_mask.png"))
    return SequenceInputs(actor, camera, images, masks, detections)


# ---------------------------------------------------------------------------
# pipeline stages

@dataclass
class PreprocessedFrame:
    index: int
    image: np.ndarray
    mask: np.ndarray
    dt_field: DistanceField | None
    pyramid: list


@dataclass
class ConditionedFrame:
    pre: PreprocessedFrame
    detections: FrameDetections
    rescale_fallbacks: int


@dataclass
class TrackState:
    pose_prev: PoseParams | None = None
    pose_prev2: PoseParams | None = None
    joints_prev: np.ndarray | None = None
    disp_rest: np.ndarray | None = None    # (N,3) carried displacement
    v_prev: np.ndarray | None = None
    v_prev2: np.ndarray | None = None


@dataclass
class FrameResult:
    index: int
    pose: PoseParams
    vertices: np.ndarray
    skinned: np.ndarray
    pose_report: object
    nonrigid_report: object | None
    timings: dict


def preprocess_frame(index: int, image: np.ndarray, mask: np.ndarray,
                     config: SequenceConfig) -> PreprocessedFrame:
    dt_field = None
    if np.any(mask):
        dt_field = DistanceField(mask)
    pyramid = gaussian_pyramid(image, config.nonrigid.pyramid_kernels)
    return PreprocessedFrame(index, image, mask, dt_field, pyramid)


def condition_detections(pre: PreprocessedFrame, det: FrameDetections,
                         actor: Actor) -> ConditionedFrame:
    rescaled, fallback = rescale_detections(det.joints3d, actor.skeleton,
                                            det.valid3d)
    out = FrameDetections(det.joints2d, rescaled, det.valid2d, det.valid3d)
    return ConditionedFrame(pre, out, len(fallback))


def _solve_stage1(cond: ConditionedFrame, actor: Actor, camera, config,
                  state: TrackState, displaced_rest: np.ndarray):
    skeleton, skinning = actor.skeleton, actor.skinning
    mesh = actor.mesh
    hyper = config.pose
    if config.mode == "detections_only":
        hyper = replace(hyper, lambda_sil=0.0)
    frame0 = state.pose_prev is None

    if frame0:
        # Cold start: capture in phases of increasing sensitivity. The 3D
        # term alone has no depth-flip ambiguity, so it lands the limbs on
        # the right side of the body; the 2D term then pins image alignment
        # (it dominates the normal equations by orders of magnitude, and
        # joining it too early drives the solve into 2D-perfect, 3D-flipped
        # tangles); the silhouette term joins last because its rows only
        # point the right way within a few pixels of the observed contour.
        init = PoseParams.zero()
        overrides = [{"lambda_2d": 0.0, "lambda_sil": 0.0},
                     {"lambda_sil": 0.0}]
        overrides += [{}] * max(1, config.frame0_rounds - len(overrides))
        hyper = replace(hyper,
                        gn_iterations=hyper.gn_iterations * config.frame0_iteration_scale)
        prev_positions = None
    else:
        init = extrapolate_pose(state.pose_prev, state.pose_prev2, skeleton)
        overrides = [{}]
        prev_positions = state.joints_prev

    rigidity = np.array([class_weight(c) for c in mesh.vertex_labels])
    pose, report = init, None
    for over in overrides:
        round_hyper = replace(hyper, **over) if over else hyper
        fk = forward_kinematics(skeleton, pose)
        model = skin_points(displaced_rest, skinning, fk.joint_dqs).positions
        zbuf = render_depth(camera, model, mesh.triangles)
        contour = extract_contour_vertices(model, mesh, camera, zbuf)
        rim = outer_rim_mask(model, contour.indices, camera, zbuf)
        rim &= rigidity[contour.indices] >= POSE_CONTOUR_MIN_RIGIDITY
        problem = PoseProblem(
            skeleton, skinning, camera, cond.detections, cond.pre.dt_field,
            contour, displaced_rest[contour.indices], round_hyper,
            prev_positions=prev_positions, directional=config.directional,
            contour_enabled=rim)
        pose, rnd_report = solve_pose(problem, pose)
        if report is None:
            report = rnd_report
        else:
            report.iterations.extend(rnd_report.iterations)
            report.behind_camera += rnd_report.behind_camera
            report.gimbal = report.gimbal or rnd_report.gimbal
    return pose, report


def _solve_stage2(cond: ConditionedFrame, actor: Actor, camera, config,
                  state: TrackState, pose: PoseParams,
                  displaced_rest: np.ndarray):
    mesh, skeleton, skinning = actor.mesh, actor.skeleton, actor.skinning
    fk = forward_kinematics(skeleton, pose)
    skinned = skin_points(mesh.rest_vertices, skinning, fk.joint_dqs)
    v_skinned = skinned.positions
    v_init = skin_points(displaced_rest, skinning, fk.joint_dqs).positions

    zbuf = render_depth(camera, v_init, mesh.triangles)
    visible = np.flatnonzero(visible_vertices(v_init, mesh, camera, zbuf))
    boundary = extract_contour_vertices(v_init, mesh, camera, zbuf)
    enabled = outer_rim_mask(v_init, boundary.indices, camera, zbuf,
                             min_thickness=0.0)
    if config.enable_part_mask and len(boundary.indices):
        labels, vertex_parts = build_body_part_mask(
            v_init, mesh, skinning, skeleton, camera,
            config.nonrigid.part_dilation)
        pix, valid = camera.project_points(v_init[boundary.indices])
        xi = np.clip(np.round(pix[:, 0]).astype(int), 0, camera.width - 1)
        yi = np.clip(np.round(pix[:, 1]).astype(int), 0, camera.height - 1)
        at = labels[yi, xi]
        enabled &= valid & ((at == 0) | (at == vertex_parts[boundary.indices]))

    problem = NonrigidProblem(
        mesh, camera, config.nonrigid, v_skinned, cond.pre.pyramid,
        cond.pre.dt_field, visible, boundary, enabled,
        prev=state.v_prev, prev2=state.v_prev2,
        directional=config.directional)
    v, report = solve_nonrigid(problem, v_init)
    if config.enable_snapping:
        v, snap_info = snap_vertices(v, problem)
        report.snap = snap_info
    return v, v_skinned, skinned.rotations, report


def solve_frame(cond: ConditionedFrame, actor: Actor, camera: CameraIntrinsics,
                config: SequenceConfig, state: TrackState):
    """Stage I + Stage II for one frame; returns (result, new_state)."""
    mesh = actor.mesh
    n = mesh.n_vertices
    disp = state.disp_rest if state.disp_rest is not None else np.zeros((n, 3))
    displaced_rest = mesh.rest_vertices + disp
    timings = {}

    t0 = time.perf_counter()
    pose, pose_report = _solve_stage1(cond, actor, camera, config, state,
                                      displaced_rest)
    timings["pose"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if config.mode == "full":
        v, v_skinned, rot_blend, nr_report = _solve_stage2(
            cond, actor, camera, config, state, pose, displaced_rest)
        delta = v - v_skinned
        if config.enable_warping:
            new_disp = quat_rotate(quat_conj(rot_blend), delta)
        else:
            new_disp = delta
    else:
        fk = forward_kinematics(actor.skeleton, pose)
        v_skinned = skin_points(mesh.rest_vertices, actor.skinning,
                                fk.joint_dqs).positions
        v = v_skinned
        new_disp = np.zeros((n, 3))
        nr_report = None
    timings["nonrigid"] = time.perf_counter() - t0

    fk = forward_kinematics(actor.skeleton, pose)
    new_state = TrackState(
        pose_prev=pose, pose_prev2=state.pose_prev,
        joints_prev=fk.positions, disp_rest=new_disp,
        v_prev=v, v_prev2=state.v_prev)
    result = FrameResult(cond.pre.index, pose, v, v_skinned, pose_report,
                         nr_report, timings)
    return result, new_state


# ---------------------------------------------------------------------------
# trajectory smoothing

def smooth_trajectory(values: np.ndarray, stencil=(0.15, 0.7, 0.15)) -> np.ndarray:
    """Centered weighted average along axis 0, truncated and renormalized at
    the ends so every output is a convex combination of available frames."""
    arr = np.asarray(values, dtype=np.float64)
    stencil = np.asarray(stencil, dtype=np.float64)
    if len(stencil) % 2 != 1:
        raise ValueError("stencil length must be odd")
    half = len(stencil) // 2
    f = arr.shape[0]
    out = np.zeros_like(arr)
    norm = np.zeros(f)
    for k, w in enumerate(stencil):
        off = k - half
        lo = max(0, -off)
        hi = min(f, f - off)
        out[lo:hi] += w * arr[lo + off:hi + off]
        norm[lo:hi] += w
    return out / norm.reshape((f,) + (1,) * (arr.ndim - 1))


# ---------------------------------------------------------------------------
# sequence drivers

@dataclass
class SequenceResult:
    config: SequenceConfig
    frames: list                      # FrameResult
    poses: np.ndarray                 # (F,36) raw
    vertices: np.ndarray              # (F,N,3) raw
    poses_smoothed: np.ndarray
    vertices_smoothed: np.ndarray
    events: list                      # slot-ordered ingest/emit records
    timings: dict
    pipelined: bool

    @property
    def fps(self) -> float:
        total = self.timings.get("total", 0.0)
        return len(self.frames) / total if total > 0 else float("inf")


def _prepare_actor(actor: Actor, config: SequenceConfig) -> Actor:
    if config.uniform_material_weight is None:
        return actor
    mesh = replace(actor.mesh)
    s = float(config.uniform_material_weight)
    mesh.edge_weights = np.full(len(mesh.edges), s)
    mesh.directed_weights = np.full(len(mesh.edge_src), s)
    return Actor(mesh, actor.skeleton, actor.skinning)


def _finalize(inputs, config, results, events, t_total, pipelined):
    poses = np.stack([r.pose.to_vector() for r in results])
    vertices = np.stack([r.vertices for r in results])
    if config.smooth_output and len(results) > 1:
        poses_s = smooth_trajectory(poses, config.smoothing_stencil)
        vertices_s = smooth_trajectory(vertices, config.smoothing_stencil)
    else:
        poses_s = poses.copy()
        vertices_s = vertices.copy()
    stage_sums = {"preprocess": 0.0, "condition": 0.0, "pose": 0.0,
                  "nonrigid": 0.0}
    for r in results:
        for k, v in r.timings.items():
            stage_sums[k] = stage_sums.get(k, 0.0) + v
    stage_sums["total"] = t_total
    return SequenceResult(config, results, poses, vertices, poses_s,
                          vertices_s, events, stage_sums, pipelined)


def run_sequence_sequential(inputs: SequenceInputs,
                            config: SequenceConfig) -> SequenceResult:
    actor = _prepare_actor(inputs.actor, config)
    state = TrackState()
    results, events = [], []
    t_start = time.perf_counter()
    for f in range(inputs.n_frames):
        events.append({"slot": f, "event": "ingest", "frame": f})
        t0 = time.perf_counter()
        pre = preprocess_frame(f, inputs.images[f], inputs.masks[f], config)
        t1 = time.perf_counter()
        cond = condition_detections(pre, inputs.detections[f], actor)
        t2 = time.perf_counter()
        result, state = solve_frame(cond, actor, inputs.camera, config, state)
        result.timings["preprocess"] = t1 - t0
        result.timings["condition"] = t2 - t1
        results.append(result)
        events.append({"slot": f, "event": "emit", "frame": f})
    return _finalize(inputs, config, results, events,
                     time.perf_counter() - t_start, pipelined=False)


class _StageWorker(threading.Thread):
    """Runs one closure per slot; exceptions surface at join time."""

    def __init__(self):
        super().__init__(daemon=True)
        self.work = queue.Queue()
        self.done = queue.Queue()
        self.start()

    def run(self):
        while True:
            fn = self.work.get()
            if fn is None:
                return
            try:
                fn()
                self.done.put(None)
            except BaseException as exc:  # noqa: BLE001 - reraised at join
                self.done.put(exc)

    def run_slot(self, fn):
        self.work.put(fn)

    def wait(self):
        exc = self.done.get()
        if exc is not None:
            raise exc

    def stop(self):
        self.work.put(None)


def run_sequence_pipelined(inputs: SequenceInputs,
                           config: SequenceConfig) -> SequenceResult:
    """Slot-synchronized overlap of the three stages on worker threads.

    Frame f is preprocessed in slot f, conditioned in slot f+1, and solved in
    slot f+2; handoffs ride bounded queues of capacity two, and ingest/emit
    events are recorded on the driver thread so the schedule is deterministic.
    """
    actor = _prepare_actor(inputs.actor, config)
    n = inputs.n_frames
    q_ab = queue.Queue(maxsize=2)
    q_bc = queue.Queue(maxsize=2)
    workers = [_StageWorker() for _ in range(3)]
    state = TrackState()
    results, events = [], []
    solved = {}

    def stage_a(f):
        def run():
            t0 = time.perf_counter()
            pre = preprocess_frame(f, inputs.images[f], inputs.masks[f], config)
            pre.elapsed = time.perf_counter() - t0
            q_ab.put(pre)
        return run

    def stage_b():
        def run():
            pre = q_ab.get()
            t0 = time.perf_counter()
            cond = condition_detections(pre, inputs.detections[pre.index], actor)
            cond.elapsed = time.perf_counter() - t0
            q_bc.put(cond)
        return run

    def stage_c():
        def run():
            nonlocal state
            cond = q_bc.get()
            result, state = solve_frame(cond, actor, inputs.camera, config, state)
            result.timings["preprocess"] = cond.pre.elapsed
            result.timings["condition"] = cond.elapsed
            solved[result.index] = result
        return run

    t_start = time.perf_counter()
    try:
        for slot in range(n + 2):
            active = []
            if slot < n:
                events.append({"slot": slot, "event": "ingest", "frame": slot})
                workers[0].run_slot(stage_a(slot))
                active.append(workers[0])
            if 0 <= slot - 1 < n:
                workers[1].run_slot(stage_b())
                active.append(workers[1])
            if 0 <= slot - 2 < n:
                workers[2].run_slot(stage_c())
                active.append(workers[2])
            for w in active:
                w.wait()
            if 0 <= slot - 2 < n:
                events.append({"slot": slot, "event": "emit", "frame": slot - 2})
                results.append(solved.pop(slot - 2))
    finally:
        for w in workers:
            w.stop()
    return _finalize(inputs, config, results, events,
                     time.perf_counter() - t_start, pipelined=True)


def run_sequence(inputs: SequenceInputs, config: SequenceConfig | None = None,
                 pipelined: bool = False) -> SequenceResult:
    config = config or SequenceConfig()
    if pipelined:
        return run_sequence_pipelined(inputs, config)
    return run_sequence_sequential(inputs, config)


def frame_latencies(events: list) -> dict:
    """Frame index -> emit slot minus ingest slot."""
    ingest, emit = {}, {}
    for e in events:
        (ingest if e["event"] == "ingest" else emit)[e["frame"]] = e["slot"]
    return {f: emit[f] - ingest[f] for f in sorted(emit)}


def save_results(out_dir, result: SequenceResult,
                 inputs: SequenceInputs | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pose_trajectory(out / "poses.txt",
                         [PoseParams.from_vector(p) for p in result.poses])
    save_pose_trajectory(out / "poses_smoothed.txt",
                         [PoseParams.from_vector(p) for p in result.poses_smoothed])
    np.savez_compressed(out / "surfaces.npz", vertices=result.vertices,
                        vertices_smoothed=result.vertices_smoothed)
    report = {
        "n_frames": len(result.frames),
        "pipelined": result.pipelined,
        "fps": result.fps,
        "timings": result.timings,
        "events": result.events,
        "latencies": frame_latencies(result.events),
        "config": _jsonable(result.config.to_dict()),
        "frames": [{
            "index": r.index,
            "pose_energy": r.pose_report.final_energy,
            "pose_iterations": len(r.pose_report.iterations),
            "nonrigid_energy": (r.nonrigid_report.iterations[-1].energy_after
                                if r.nonrigid_report and r.nonrigid_report.iterations
                                else None),
            "timings": r.timings,
        } for r in result.frames],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
