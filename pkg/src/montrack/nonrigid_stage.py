"""Stage II: dense non-rigid surface registration over the vertex positions.

Three Gauss-Newton steps per frame, one per blur level (coarse to fine).
Each step assembles a 3x3-block sparse normal system whose off-diagonal
pattern is the mesh one-ring, runs four block-Jacobi preconditioned CG
iterations, and applies the update under the same step-halving guard as the
pose stage. Data terms are photometric color constancy (with a color-pruning
gate) and silhouette alignment on boundary vertices weighted by the
contour-side sign, or disabled entirely when the vertex projects onto a
different body part than its own. Regularizers are edge-difference
smoothness against the skinned shape, isometric edge-length preservation
against the rest mesh (both scaled by per-edge material weights), and
velocity / acceleration damping against the two previous frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics
from .imageproc import DistanceField, _edt_squared, sample_bilinear
from .pose_stage import ContourVertexSet, contour_side_signs
from .rasterizer import render_depth, render_vertex_ids
from .solvers import BlockSparseSystem, pcg_solve
from .template import Skeleton, SkinningWeights, TemplateMesh

TORSO_PART = 1
HEAD_PART = 2


@dataclass
class NonrigidHyperparams:
    w_photo: float = 10000.0
    w_sil: float = 600.0
    w_smooth: float = 10.0
    w_edge: float = 30.0
    w_velocity: float = 0.25
    w_acceleration: float = 0.1
    tau_color: float = 0.3
    gn_iterations: int = 3
    pcg_iterations: int = 4
    max_halvings: int = 3
    pyramid_kernels: tuple = (15, 9, 3)
    part_dilation: int = 10
    snap_step: float = 0.5
    snap_max_steps: int = 30
    snap_band: float = 0.25


# ---------------------------------------------------------------------------
# body parts and visibility

def body_parts(skeleton: Skeleton) -> np.ndarray:
    """Coarse part id per joint: torso 1, head 2, then one id per limb."""
    j = skeleton.n_joints
    parts = np.full(j, TORSO_PART, dtype=np.int64)
    head = skeleton.head_index

    def mark_subtree(root, pid):
        stack = [root]
        while stack:
            k = stack.pop()
            parts[k] = pid
            stack.extend(skeleton.children[k])

    mark_subtree(head, HEAD_PART)
    next_id = HEAD_PART + 1
    head_chain = {k for k in range(j) if skeleton.ancestor_of[k, head]}
    for i in range(j):
        p = skeleton.parents[i]
        if p < 0 or parts[i] != TORSO_PART:
            continue
        # a limb starts where the chain leaves the torso/head trunk
        if i not in head_chain and skeleton.temporal_groups[i] in ("shoulder",):
            mark_subtree(i, next_id)
            next_id += 1
    for i in range(j):
        if parts[i] == TORSO_PART and skeleton.temporal_groups[i] == "knee":
            rootj = skeleton.parents[i]
            mark_subtree(rootj if parts[rootj] == TORSO_PART else i, next_id)
            next_id += 1
    return parts


def visible_vertices(verts: np.ndarray, mesh: TemplateMesh,
                     camera: CameraIntrinsics,
                     zbuf: np.ndarray | None = None) -> np.ndarray:
    """Depth-buffer visibility with a 1%-of-depth tolerance."""
    if zbuf is None:
        zbuf = render_depth(camera, verts, mesh.triangles)
    pix, valid = camera.project_points(verts)
    xi = np.clip(np.round(pix[:, 0]).astype(int), 0, camera.width - 1)
    yi = np.clip(np.round(pix[:, 1]).astype(int), 0, camera.height - 1)
    in_img = ((pix[:, 0] >= -0.5) & (pix[:, 0] <= camera.width - 0.5)
              & (pix[:, 1] >= -0.5) & (pix[:, 1] <= camera.height - 0.5))
    z = verts[:, 2]
    return valid & in_img & (z <= zbuf[yi, xi] + 0.01 * z)


def build_body_part_mask(verts: np.ndarray, mesh: TemplateMesh,
                         skinning: SkinningWeights, skeleton: Skeleton,
                         camera: CameraIntrinsics, dilation: int = 10):
    """Rasterized per-pixel part labels, gap-closed by bounded dilation.

    Each part region grows by up to `dilation` pixels into the background;
    the torso overwrites other parts' growth (not their actual pixels).
    Returns (labels (H,W), vertex_parts (N,)).
    """
    joint_parts = body_parts(skeleton)
    vertex_parts = joint_parts[skinning.dominant]
    ibuf, _ = render_vertex_ids(camera, verts, mesh.triangles, vertex_parts,
                                background=0)
    out = ibuf.copy()
    bg = ibuf == 0
    present = [p for p in np.unique(ibuf) if p > 0]
    dists = {p: np.sqrt(_edt_squared(ibuf == p)) for p in present}
    if present:
        stack = np.stack([dists[p] for p in present])
        nearest = np.argmin(stack, axis=0)
        within = stack.min(axis=0) <= dilation
        grow = bg & within
        out[grow] = np.array(present)[nearest[grow]]
        if TORSO_PART in dists:
            torso_grow = bg & (dists[TORSO_PART] <= dilation)
            out[torso_grow] = TORSO_PART
    return out, vertex_parts


# ---------------------------------------------------------------------------
# residual assembly

@dataclass
class NonrigidEval:
    """Residual blocks with enough structure to build J^T J directly."""
    photo_r: np.ndarray      # (P,3) weighted residuals
    photo_j: np.ndarray      # (P,3,3) weighted d r / d V_i
    sil_r: np.ndarray        # (B,)
    sil_g: np.ndarray        # (B,3) weighted, sign-carrying Jacobian rows
    smooth_r: np.ndarray     # (2E,3)
    smooth_c: np.ndarray     # (2E,)
    edge_r: np.ndarray       # (2E,)
    edge_dir: np.ndarray     # (2E,3)
    edge_c: np.ndarray       # (2E,)
    vel_r: np.ndarray | None
    acc_r: np.ndarray | None
    vel_c: float
    acc_c: float
    energies: dict
    pruned: int
    degenerate_edges: int
    behind_camera: int

    @property
    def energy(self) -> float:
        return float(sum(self.energies.values()))


@dataclass
class NonrigidProblem:
    """Per-frame data for Stage II, fixed across its Gauss-Newton steps."""
    mesh: TemplateMesh
    camera: CameraIntrinsics
    hyper: NonrigidHyperparams
    skinned: np.ndarray                  # (N,3) Stage I result V^S
    pyramid: list                        # blurred color images, coarse first
    dt_field: DistanceField | None
    visible: np.ndarray                  # (P,) indices
    boundary: ContourVertexSet
    boundary_enabled: np.ndarray         # (B,) bool, False on part mismatch
    prev: np.ndarray | None = None       # (N,3) previous solved surface
    prev2: np.ndarray | None = None
    directional: bool = True
    enable_photo: bool = True
    enable_sil: bool = True

    def __post_init__(self):
        mesh = self.mesh
        self.rest_lengths = mesh.rest_edge_lengths()
        e = len(mesh.edges)
        self.dir_rest = np.concatenate([self.rest_lengths, self.rest_lengths])
        self.rev = np.concatenate([np.arange(e, 2 * e), np.arange(0, e)])
        deg_src = mesh.degrees[mesh.edge_src].astype(np.float64)
        self.smooth_coef = np.sqrt(self.hyper.w_smooth * mesh.directed_weights / deg_src)
        self.edge_coef = np.sqrt(self.hyper.w_edge * mesh.directed_weights / deg_src)
        self.skinned_diff = self.skinned[mesh.edge_src] - self.skinned[mesh.edge_dst]

    def evaluate(self, v: np.ndarray, level: int) -> NonrigidEval:
        mesh = self.mesh
        hp = self.hyper
        cam = self.camera
        energies = {}
        behind = 0

        # photometric
        p = len(self.visible)
        photo_r = np.zeros((p, 3))
        photo_j = np.zeros((p, 3, 3))
        pruned = 0
        if p and self.enable_photo:
            pos = v[self.visible]
            pix, valid = cam.project_points(pos)
            behind += int(np.sum(~valid))
            val, grad, clamped = sample_bilinear(self.pyramid[level], pix)
            diff = val - mesh.vertex_colors[self.visible]
            prune = np.linalg.norm(diff, axis=1) > hp.tau_color
            pruned = int(np.sum(prune & valid & ~clamped))
            w = np.sqrt(hp.w_photo) * (valid & ~clamped & ~prune)
            photo_r = diff * w[:, None]
            dpi, _ = cam.projection_jacobians(pos)
            photo_j = np.einsum("pcd,pdk->pck", grad, dpi) * w[:, None, None]
        energies["photo"] = float(np.sum(photo_r ** 2))

        # silhouette
        b = len(self.boundary.indices)
        sil_r = np.zeros(b)
        sil_g = np.zeros((b, 3))
        if b and self.enable_sil and self.dt_field is not None:
            pos = v[self.boundary.indices]
            pix, valid = cam.project_points(pos)
            behind += int(np.sum(~valid))
            val, grad, clamped = self.dt_field.sample_residual(pix)
            w = np.sqrt(hp.w_sil) * (valid & ~clamped & self.boundary_enabled)
            sil_r = val * w
            if self.directional:
                sign = contour_side_signs(self.dt_field,
                                          self.boundary.normals2d, pix)
            else:
                sign = 1.0
            dpi, _ = cam.projection_jacobians(pos)
            sil_g = np.einsum("bd,bdk->bk", grad, dpi) * (w * sign)[:, None]
        energies["silhouette"] = float(np.sum(sil_r ** 2))

        # smoothness of edge differences vs. the skinned shape
        d = (v[mesh.edge_src] - v[mesh.edge_dst]) - self.skinned_diff
        smooth_r = d * self.smooth_coef[:, None]
        energies["smooth"] = float(np.sum(smooth_r ** 2))

        # isometric edge lengths vs. the rest mesh
        e_vec = v[mesh.edge_src] - v[mesh.edge_dst]
        lengths = np.linalg.norm(e_vec, axis=1)
        degenerate = lengths < 1e-9
        n_degenerate = int(np.sum(degenerate))
        rest_dir = (mesh.rest_vertices[mesh.edge_src]
                    - mesh.rest_vertices[mesh.edge_dst])
        rest_norm = np.linalg.norm(rest_dir, axis=1)
        edge_dir = np.where(degenerate[:, None],
                            rest_dir / rest_norm[:, None],
                            e_vec / np.maximum(lengths, 1e-300)[:, None])
        edge_r = (lengths - self.dir_rest) * self.edge_coef
        energies["edge"] = float(np.sum(edge_r ** 2))

        # temporal damping
        vel_r = acc_r = None
        vel_c = np.sqrt(hp.w_velocity)
        acc_c = np.sqrt(hp.w_acceleration)
        if self.prev is not None:
            vel_r = (v - self.prev) * vel_c
            energies["velocity"] = float(np.sum(vel_r ** 2))
            prev2 = self.prev if self.prev2 is None else self.prev2
            acc_r = (v - 2.0 * self.prev + prev2) * acc_c
            energies["acceleration"] = float(np.sum(acc_r ** 2))

        return NonrigidEval(photo_r, photo_j, sil_r, sil_g, smooth_r,
                            self.smooth_coef, edge_r, edge_dir, self.edge_coef,
                            vel_r, acc_r, vel_c, acc_c, energies, pruned,
                            n_degenerate, behind)

    def normal_system(self, ev: NonrigidEval) -> BlockSparseSystem:
        mesh = self.mesh
        n = mesh.n_vertices
        diag = np.zeros((n, 3, 3))
        rhs = np.zeros((n, 3))

        if len(self.visible):
            np.add.at(diag, self.visible,
                      np.einsum("pci,pcj->pij", ev.photo_j, ev.photo_j))
            np.add.at(rhs, self.visible,
                      -np.einsum("pci,pc->pi", ev.photo_j, ev.photo_r))
        if len(self.boundary.indices):
            np.add.at(diag, self.boundary.indices,
                      np.einsum("bi,bj->bij", ev.sil_g, ev.sil_g))
            np.add.at(rhs, self.boundary.indices, -ev.sil_g * ev.sil_r[:, None])

        src, dst = mesh.edge_src, mesh.edge_dst
        c2s = ev.smooth_c ** 2
        c2e = ev.edge_c ** 2
        eye = np.eye(3)
        outer = np.einsum("mi,mj->mij", ev.edge_dir, ev.edge_dir)
        np.add.at(diag, src, c2s[:, None, None] * eye + c2e[:, None, None] * outer)
        np.add.at(diag, dst, c2s[:, None, None] * eye + c2e[:, None, None] * outer)
        off = -((c2s + c2s[self.rev])[:, None, None] * eye
                + (c2e[:, None, None] * outer
                   + (c2e[self.rev])[:, None, None] * outer[self.rev]))
        jts = np.einsum("m,mi->mi", ev.smooth_c, ev.smooth_r)
        jte = ev.edge_dir * (ev.edge_c * ev.edge_r)[:, None]
        np.add.at(rhs, src, -(jts + jte))
        np.add.at(rhs, dst, jts + jte)

        if ev.vel_r is not None:
            diag += (ev.vel_c ** 2 + ev.acc_c ** 2) * eye
            rhs -= ev.vel_c * ev.vel_r + ev.acc_c * ev.acc_r
        return BlockSparseSystem(diag, off, src, dst, rhs)


def residual_vector(problem: NonrigidProblem, ev: NonrigidEval) -> np.ndarray:
    """Fixed-layout stacked residuals: photo, silhouette, smooth, edge,
    velocity, acceleration. Pruned/disabled rows stay as structural zeros."""
    parts = [ev.photo_r.ravel(), ev.sil_r, ev.smooth_r.ravel(), ev.edge_r]
    if ev.vel_r is not None:
        parts.extend([ev.vel_r.ravel(), ev.acc_r.ravel()])
    return np.concatenate(parts)


def dense_jacobian(problem: NonrigidProblem, ev: NonrigidEval) -> np.ndarray:
    """Explicit Jacobian matching residual_vector; for checks on small meshes."""
    mesh = problem.mesh
    n = mesh.n_vertices
    rows = []

    p = len(problem.visible)
    jp = np.zeros((3 * p, 3 * n))
    for k, vi in enumerate(problem.visible):
        jp[3 * k:3 * k + 3, 3 * vi:3 * vi + 3] = ev.photo_j[k]
    rows.append(jp)

    b = len(problem.boundary.indices)
    js = np.zeros((b, 3 * n))
    for k, vi in enumerate(problem.boundary.indices):
        js[k, 3 * vi:3 * vi + 3] = ev.sil_g[k]
    rows.append(js)

    m = len(mesh.edge_src)
    jsm = np.zeros((3 * m, 3 * n))
    jed = np.zeros((m, 3 * n))
    eye = np.eye(3)
    for d in range(m):
        i, j = mesh.edge_src[d], mesh.edge_dst[d]
        jsm[3 * d:3 * d + 3, 3 * i:3 * i + 3] = ev.smooth_c[d] * eye
        jsm[3 * d:3 * d + 3, 3 * j:3 * j + 3] = -ev.smooth_c[d] * eye
        jed[d, 3 * i:3 * i + 3] = ev.edge_c[d] * ev.edge_dir[d]
        jed[d, 3 * j:3 * j + 3] = -ev.edge_c[d] * ev.edge_dir[d]
    rows.extend([jsm, jed])

    if ev.vel_r is not None:
        rows.append(ev.vel_c * np.eye(3 * n))
        rows.append(ev.acc_c * np.eye(3 * n))
    return np.vstack(rows)


@dataclass
class NonrigidIterationLog:
    level: int
    energy_before: float
    energy_after: float
    terms: dict
    halvings: int
    rejected: bool
    pcg_breakdown: bool


@dataclass
class NonrigidStageReport:
    iterations: list = field(default_factory=list)
    pruned: int = 0
    degenerate_edges: int = 0
    behind_camera: int = 0
    snap: "SnapInfo | None" = None


def solve_nonrigid(problem: NonrigidProblem, v0: np.ndarray):
    """Coarse-to-fine Gauss-Newton with a fixed PCG budget per step."""
    hp = problem.hyper
    v = v0.copy()
    report = NonrigidStageReport()
    levels = min(hp.gn_iterations, len(problem.pyramid))
    for it in range(hp.gn_iterations):
        level = min(it, levels - 1)
        ev = problem.evaluate(v, level)
        report.pruned += ev.pruned
        report.degenerate_edges += ev.degenerate_edges
        report.behind_camera += ev.behind_camera
        system = problem.normal_system(ev)
        delta, pinfo = pcg_solve(system, hp.pcg_iterations)
        e0 = ev.energy
        halvings = 0
        rejected = False
        step = delta
        while True:
            e1 = problem.evaluate(v + step, level).energy
            if e1 <= e0:
                v = v + step
                break
            if halvings >= hp.max_halvings:
                rejected = True
                e1 = e0
                break
            step = 0.5 * step
            halvings += 1
        report.iterations.append(NonrigidIterationLog(
            level, e0, e1, ev.energies, halvings, rejected, pinfo.breakdown))
    return v, report


# ---------------------------------------------------------------------------
# silhouette snapping

@dataclass
class SnapInfo:
    walked: int = 0
    reached: int = 0
    stuck: int = 0
    moved_vertices: np.ndarray | None = None


def snap_vertices(v: np.ndarray, problem: NonrigidProblem) -> tuple:
    """Pull enabled boundary vertices onto the silhouette interface.

    Projections walk against the distance field in sub-pixel steps, only ever
    accepting steps that decrease |distance|; landed positions back-project
    at the vertex's original depth. Interior vertices near a snapped one
    receive the offset diffused by two uniform-Laplacian iterations (the
    boundary itself is held fixed).
    """
    hp = problem.hyper
    dt = problem.dt_field
    cam = problem.camera
    idx = problem.boundary.indices
    info = SnapInfo()
    if dt is None or len(idx) == 0:
        return v.copy(), info

    enabled = problem.boundary_enabled.copy()
    pix, valid = cam.project_points(v[idx])
    enabled &= valid
    sign = contour_side_signs(dt, problem.boundary.normals2d, pix)
    val, _ = dt.sample_interface(pix)

    pos = pix.copy()
    active = enabled & (val > hp.snap_band)
    info.walked = int(np.sum(enabled))
    stuck = np.zeros(len(idx), dtype=bool)
    for _ in range(hp.snap_max_steps):
        if not active.any():
            break
        ai = np.flatnonzero(active)
        g, _ = dt.sample_gradient(pos[ai])
        gn = np.linalg.norm(g, axis=1)
        ok = gn > 1e-9
        direction = -sign[ai, None] * g / np.maximum(gn, 1e-300)[:, None]
        step = hp.snap_step
        cur = val[ai]
        new_pos = pos[ai].copy()
        new_val = cur.copy()
        pending = ok.copy()
        for _ in range(3):  # halve sub-steps that would increase |distance|
            if not pending.any():
                break
            trial = pos[ai] + step * direction
            tval, _ = dt.sample_interface(trial)
            better = pending & (tval < cur)
            new_pos[better] = trial[better]
            new_val[better] = tval[better]
            pending = pending & ~better
            step *= 0.5
        moved = ~pending & ok
        pos[ai[moved]] = new_pos[moved]
        val[ai[moved]] = new_val[moved]
        newly_stuck = ai[pending | ~ok]
        stuck[newly_stuck] = True
        active[newly_stuck] = False
        active[ai] &= val[ai] > hp.snap_band
    info.reached = int(np.sum(enabled & (val <= hp.snap_band)))
    info.stuck = int(np.sum(stuck & enabled))

    out = v.copy()
    offsets = np.zeros_like(v)
    snapped = np.flatnonzero(enabled)
    depth = v[idx[snapped], 2]
    landed = np.stack([
        (pos[snapped, 0] - cam.cx) * depth / cam.fx,
        (pos[snapped, 1] - cam.cy) * depth / cam.fy,
        depth,
    ], axis=1)
    offsets[idx[snapped]] = landed - v[idx[snapped]]

    # two-iteration uniform-Laplacian diffusion, boundary rows held
    mesh = problem.mesh
    hold = np.zeros(len(v), dtype=bool)
    hold[idx] = True
    o = offsets
    for _ in range(2):
        acc = np.zeros_like(o)
        np.add.at(acc, mesh.edge_src, o[mesh.edge_dst])
        acc /= mesh.degrees[:, None]
        o = np.where(hold[:, None], o, acc)
    out += o
    info.moved_vertices = np.flatnonzero(np.any(o != 0.0, axis=1))
    return out, info
