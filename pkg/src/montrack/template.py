"""Actor template: mesh, skeleton, skinning weights and material classes.

File formats (all plain text):

* mesh: Wavefront OBJ (v/f lines) with a sidecar `<mesh>.attrs` holding one
  `r g b class_id` row per vertex.
* skeleton: line-oriented, `joint <name> <parent|-> <ox> <oy> <oz> <group>`
  rows first (the root's offset is its rest position; `group` feeds the
  per-joint temporal weights), then `dof <joint> <ax> <ay> <az> <min> <max>`
  rows whose order defines the joint-angle indexing, then four
  `marker <name> <ox> <oy> <oz>` rows with offsets in the head joint frame.
  Detections follow the joint order of the file, then the marker order.
* skinning: `vertex_index joint_name weight` rows, at most 4 per vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# non-rigidity class -> rigidity weight
MATERIAL_CLASS_WEIGHTS = {
    1: 1.0,    # loose cloth: dress, coat, jumpsuit, skirt, background
    2: 2.0,    # upper clothes
    3: 2.5,    # pants
    4: 3.0,    # scarf
    5: 50.0,   # exposed skin: arms, legs, socks
    6: 100.0,  # hat, gloves, shoes
    7: 200.0,  # hair, face, sunglasses
}

FALLBACK_CLASS = 5

# 20-label human-parsing vocabulary -> non-rigidity class; editable per actor
DEFAULT_PARSING_TO_CLASS = {
    1: 1,   # background
    2: 6,   # hat
    3: 7,   # hair
    4: 6,   # glove
    5: 7,   # sunglasses
    6: 2,   # upper clothes
    7: 1,   # dress
    8: 1,   # coat
    9: 5,   # socks
    10: 3,  # pants
    11: 1,  # jumpsuit
    12: 4,  # scarf
    13: 1,  # skirt
    14: 7,  # face
    15: 5,  # left arm
    16: 5,  # right arm
    17: 5,  # left leg
    18: 5,  # right leg
    19: 6,  # left shoe
    20: 6,  # right shoe
}


def class_weight(class_id: int) -> float:
    try:
        return MATERIAL_CLASS_WEIGHTS[int(class_id)]
    except KeyError:
        raise ValueError(f"unknown non-rigidity class {class_id}") from None


@dataclass
class TemplateMesh:
    rest_vertices: np.ndarray   # (N,3)
    triangles: np.ndarray       # (T,3) int
    vertex_colors: np.ndarray   # (N,3) in [0,1]
    vertex_labels: np.ndarray   # (N,) non-rigidity class ids

    # derived connectivity, filled by __post_init__
    edges: np.ndarray = field(init=False)            # (E,2) undirected, i<j
    edge_src: np.ndarray = field(init=False)         # (2E,) directed
    edge_dst: np.ndarray = field(init=False)
    degrees: np.ndarray = field(init=False)          # (N,)
    one_ring: list = field(init=False)
    edge_weights: np.ndarray = field(init=False)     # (E,) material weights
    directed_weights: np.ndarray = field(init=False)  # (2E,) aligned to edge_src

    def __post_init__(self):
        v = np.asarray(self.rest_vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        n = v.shape[0]
        if t.size and (t.min() < 0 or t.max() >= n):
            raise ValueError("triangle index out of range")
        labels = np.asarray(self.vertex_labels, dtype=np.int64)
        bad = ~np.isin(labels, list(MATERIAL_CLASS_WEIGHTS))
        if bad.any():
            raise ValueError(f"vertex {int(np.argmax(bad))} has invalid class "
                             f"{int(labels[np.argmax(bad)])}")
        self.rest_vertices = v
        self.triangles = t
        self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64)
        self.vertex_labels = labels

        pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        pairs.sort(axis=1)
        edges = np.unique(pairs, axis=0)
        self.edges = edges
        self.edge_src = np.concatenate([edges[:, 0], edges[:, 1]])
        self.edge_dst = np.concatenate([edges[:, 1], edges[:, 0]])
        self.degrees = np.bincount(self.edge_src, minlength=n)
        if (self.degrees < 2).any():
            raise ValueError(f"vertex {int(np.argmin(self.degrees))} has fewer "
                             "than 2 neighbors")
        ring = [[] for _ in range(n)]
        for a, b in edges:
            ring[a].append(b)
            ring[b].append(a)
        self.one_ring = [np.array(sorted(r), dtype=np.int64) for r in ring]

        # up to two incident triangles per edge, -1 for open boundaries
        edge_id = {(a, b): i for i, (a, b) in enumerate(edges)}
        self.edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        for ti, tri in enumerate(t):
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                e = edge_id[(a, b) if a < b else (b, a)]
                slot = 0 if self.edge_tris[e, 0] < 0 else 1
                self.edge_tris[e, slot] = ti
        self.refresh_edge_weights()

    def refresh_edge_weights(self):
        w = np.vectorize(class_weight)(self.vertex_labels)
        self.edge_weights = 0.5 * (w[self.edges[:, 0]] + w[self.edges[:, 1]])
        self.directed_weights = np.concatenate([self.edge_weights, self.edge_weights])

    def edge_weight(self, i: int, j: int) -> float:
        """Material weight s_ij of an edge, symmetric in its endpoints."""
        wi = class_weight(self.vertex_labels[i])
        wj = class_weight(self.vertex_labels[j])
        return 0.5 * (wi + wj)

    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    def rest_edge_lengths(self) -> np.ndarray:
        d = self.rest_vertices[self.edges[:, 0]] - self.rest_vertices[self.edges[:, 1]]
        return np.linalg.norm(d, axis=1)


@dataclass
class Skeleton:
    joint_names: list
    parents: np.ndarray        # (J,) int, -1 for the root
    local_offsets: np.ndarray  # (J,3)
    dof_joint: np.ndarray      # (D,) joint index per angle
    dof_axes: np.ndarray       # (D,3) unit local axes
    theta_min: np.ndarray      # (D,)
    theta_max: np.ndarray      # (D,)
    marker_names: list
    marker_offsets: np.ndarray  # (4,3) in the head joint frame
    temporal_groups: list       # (J,) group tag per joint

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.local_offsets = np.asarray(self.local_offsets, dtype=np.float64)
        self.dof_joint = np.asarray(self.dof_joint, dtype=np.int64)
        self.dof_axes = np.asarray(self.dof_axes, dtype=np.float64)
        self.theta_min = np.asarray(self.theta_min, dtype=np.float64)
        self.theta_max = np.asarray(self.theta_max, dtype=np.float64)
        self.marker_offsets = np.asarray(self.marker_offsets, dtype=np.float64)
        j = len(self.joint_names)
        if (self.parents[0] != -1) or (self.parents[1:] < 0).any():
            raise ValueError("joint 0 must be the single root")
        if (self.parents[1:] >= np.arange(1, j)).any():
            raise ValueError("parents must precede children")
        if self.dof_joint.shape[0] != 27:
            raise ValueError(f"skeleton must expose 27 joint angles, got "
                             f"{self.dof_joint.shape[0]}")
        if (self.theta_min >= self.theta_max).any():
            raise ValueError("joint limits must satisfy min < max")
        norms = np.linalg.norm(self.dof_axes, axis=1)
        if (norms < 1e-9).any():
            raise ValueError("zero-length rotation axis")
        self.dof_axes = self.dof_axes / norms[:, None]
        if self.marker_offsets.shape != (4, 3):
            raise ValueError("exactly 4 face markers required")
        if "head" not in self.joint_names:
            raise ValueError("skeleton needs a joint named 'head' for face markers")
        self.head_index = self.joint_names.index("head")
        self.n_joints = j
        self.children = [[] for _ in range(j)]
        for c in range(1, j):
            self.children[self.parents[c]].append(c)
        # ancestors[i] includes i itself
        anc = np.zeros((j, j), dtype=bool)
        for i in range(j):
            k = i
            while k != -1:
                anc[k, i] = True
                k = self.parents[k]
        self.ancestor_of = anc
        # dof k moves joint positions strictly below its joint, and the
        # frames of its own joint and everything below
        dj = self.dof_joint
        self.dof_moves_position = anc[dj] & ~(np.arange(j)[None, :] == dj[:, None])
        self.dof_moves_frame = anc[dj]

    @property
    def n_dofs(self) -> int:
        return self.dof_joint.shape[0]

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.local_offsets, axis=1)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for i in range(self.n_joints):
            p = self.parents[i]
            pos[i] = self.local_offsets[i] + (pos[p] if p >= 0 else 0.0)
        return pos

    def clamp_theta(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.theta_min, self.theta_max)


@dataclass
class SkinningWeights:
    indices: np.ndarray  # (N,4) joint indices, -1 padding
    weights: np.ndarray  # (N,4) nonnegative, rows sum to 1

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape or self.indices.shape[1] != 4:
            raise ValueError("skinning arrays must be (N,4)")
        if (self.weights < -1e-12).any():
            raise ValueError("negative skinning weight")
        sums = self.weights.sum(axis=1)
        bad = np.abs(sums - 1.0) > 1e-6
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(f"skinning weights of vertex {i} sum to {sums[i]:.6f}, "
                             "expected 1")
        if ((self.indices < 0) & (self.weights > 0)).any():
            raise ValueError("positive weight on padding slot")
        self.dominant = self.indices[np.arange(len(self.indices)),
                                     np.argmax(self.weights, axis=1)]


@dataclass
class Actor:
    mesh: TemplateMesh
    skeleton: Skeleton
    skinning: SkinningWeights

    def __post_init__(self):
        if (self.skinning.indices >= self.skeleton.n_joints).any():
            raise ValueError("skinning references a joint outside the skeleton")
        if self.skinning.indices.shape[0] != self.mesh.n_vertices:
            raise ValueError("skinning rows do not match mesh vertex count")


# ---------------------------------------------------------------------------
# file I/O

def load_mesh(path) -> TemplateMesh:
    path = Path(path)
    verts, tris = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:4]]
            tris.append(idx)
    sidecar = path.with_suffix(path.suffix + ".attrs")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing vertex attribute sidecar {sidecar}")
    attrs = np.loadtxt(sidecar, ndmin=2)
    if attrs.shape != (len(verts), 4):
        raise ValueError(f"sidecar {sidecar} must hold {len(verts)} 'r g b class' rows")
    return TemplateMesh(np.array(verts), np.array(tris, dtype=np.int64),
                        attrs[:, :3], attrs[:, 3].astype(np.int64))


def save_mesh(path, mesh: TemplateMesh) -> None:
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.rest_vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")
    side = np.column_stack([mesh.vertex_colors, mesh.vertex_labels])
    np.savetxt(path.with_suffix(path.suffix + ".attrs"), side, fmt="%.9g %.9g %.9g %d")


def load_skeleton(path) -> Skeleton:
    names, parents, offsets, groups = [], [], [], []
    dof_joint, dof_axes, tmin, tmax = [], [], [], []
    mnames, moffsets = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        kind = parts[0]
        if kind == "joint":
            names.append(parts[1])
            parents.append(-1 if parts[2] == "-" else names.index(parts[2]))
            offsets.append([float(v) for v in parts[3:6]])
            groups.append(parts[6])
        elif kind == "dof":
            dof_joint.append(names.index(parts[1]))
            dof_axes.append([float(v) for v in parts[2:5]])
            tmin.append(float(parts[5]))
            tmax.append(float(parts[6]))
        elif kind == "marker":
            mnames.append(parts[1])
            moffsets.append([float(v) for v in parts[2:5]])
        else:
            raise ValueError(f"unknown skeleton row kind '{kind}'")
    return Skeleton(names, np.array(parents), np.array(offsets),
                    np.array(dof_joint), np.array(dof_axes),
                    np.array(tmin), np.array(tmax),
                    mnames, np.array(moffsets), groups)


def save_skeleton(path, sk: Skeleton) -> None:
    lines = ["# joint <name> <parent|-> <ox> <oy> <oz> <temporal_group>",
             "# dof rows define the joint-angle order; detections follow "
             "joint order then marker order"]
    for i, name in enumerate(sk.joint_names):
        parent = "-" if sk.parents[i] < 0 else sk.joint_names[sk.parents[i]]
        o = sk.local_offsets[i]
        lines.append(f"joint {name} {parent} {o[0]:.9g} {o[1]:.9g} {o[2]:.9g} "
                     f"{sk.temporal_groups[i]}")
    for k in range(sk.n_dofs):
        a = sk.dof_axes[k]
        lines.append(f"dof {sk.joint_names[sk.dof_joint[k]]} "
                     f"{a[0]:.9g} {a[1]:.9g} {a[2]:.9g} "
                     f"{sk.theta_min[k]:.9g} {sk.theta_max[k]:.9g}")
    for name, o in zip(sk.marker_names, sk.marker_offsets):
        lines.append(f"marker {name} {o[0]:.9g} {o[1]:.9g} {o[2]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_skinning(path, skeleton: Skeleton, n_vertices: int) -> SkinningWeights:
    indices = np.full((n_vertices, 4), -1, dtype=np.int64)
    weights = np.zeros((n_vertices, 4))
    counts = np.zeros(n_vertices, dtype=np.int64)
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        v = int(parts[0])
        j = skeleton.joint_names.index(parts[1])
        if counts[v] >= 4:
            raise ValueError(f"vertex {v} has more than 4 skinning influences")
        indices[v, counts[v]] = j
        weights[v, counts[v]] = float(parts[2])
        counts[v] += 1
    return SkinningWeights(indices, weights)


def save_skinning(path, sk: SkinningWeights, skeleton: Skeleton) -> None:
    lines = []
    for v in range(sk.indices.shape[0]):
        for j, w in zip(sk.indices[v], sk.weights[v]):
            if j >= 0 and w > 0:
                lines.append(f"{v} {skeleton.joint_names[j]} {w:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_actor(template_file, skeleton_file, skinning_file) -> Actor:
    mesh = load_mesh(template_file)
    skeleton = load_skeleton(skeleton_file)
    skinning = load_skinning(skinning_file, skeleton, mesh.n_vertices)
    return Actor(mesh, skeleton, skinning)


def save_actor(directory, actor: Actor, stem: str = "actor"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh_path = directory / f"{stem}.obj"
    skel_path = directory / f"{stem}.skel"
    skin_path = directory / f"{stem}.skin"
    save_mesh(mesh_path, actor.mesh)
    save_skeleton(skel_path, actor.skeleton)
    save_skinning(skin_path, actor.skinning, actor.skeleton)
    return mesh_path, skel_path, skin_path


# ---------------------------------------------------------------------------
# multi-view label fusion

@dataclass
class LabelView:
    """A calibrated side view used only for labeling the template."""
    camera: "CameraIntrinsics"
    rotation: np.ndarray     # (3,3) world -> camera
    translation: np.ndarray  # (3,)
    labels: np.ndarray       # (H,W) parsing labels in 1..20


def fuse_vertex_labels(mesh: TemplateMesh, views, parsing_to_class=None):
    """Majority-vote non-rigidity classes over calibrated label views.

    Each view's parsing labels are binned to the 7 classes first, votes are
    restricted to views where the vertex passes a depth-buffer visibility
    test, ties break toward the lower (less rigid) class id, and vertices
    seen in no view fall back to class 5. Returns (labels, unseen_indices).
    """
    from .rasterizer import render_depth

    if parsing_to_class is None:
        parsing_to_class = DEFAULT_PARSING_TO_CLASS
    n = mesh.n_vertices
    votes = np.zeros((n, 8), dtype=np.int64)
    for view in views:
        cam_pts = mesh.rest_vertices @ view.rotation.T + view.translation
        zbuf = render_depth(view.camera, cam_pts, mesh.triangles)
        pix, valid = view.camera.project_points(cam_pts)
        xi = np.clip(np.round(pix[:, 0]).astype(int), 0, view.camera.width - 1)
        yi = np.clip(np.round(pix[:, 1]).astype(int), 0, view.camera.height - 1)
        visible = valid & (cam_pts[:, 2] <= zbuf[yi, xi] + 0.01 * cam_pts[:, 2])
        raw = view.labels[yi, xi]
        classes = np.array([parsing_to_class.get(int(r), FALLBACK_CLASS) for r in raw])
        for c in range(1, 8):
            votes[:, c] += visible & (classes == c)
    seen = votes.sum(axis=1) > 0
    # argmax returns the first maximum, i.e. the lowest class id on ties
    labels = np.argmax(votes[:, 1:], axis=1) + 1
    labels[~seen] = FALLBACK_CLASS
    return labels, np.flatnonzero(~seen)
