"""Procedural humanoid actors for synthetic sequences and tests.

Builds a 17-joint skeleton with 27 joint angles plus a tube-and-sphere body
mesh (optionally with a rigidly-skinned skirt whose real motion must come
from the non-rigid stage). Coordinates follow the camera convention: x right,
y down, z forward; the actor stands facing the camera at about 2.5 m.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics
from .template import Actor, Skeleton, SkinningWeights, TemplateMesh

_J = [
    # name, parent, offset, temporal group
    ("pelvis", None, (0.0, 0.0, 2.5), "torso"),
    ("spine", "pelvis", (0.0, -0.12, 0.0), "torso"),
    ("chest", "spine", (0.0, -0.20, 0.0), "torso"),
    ("neck", "chest", (0.0, -0.15, 0.0), "torso"),
    # slight forward offset so neck-yaw and head-yaw axes are distinct lines
    ("head", "neck", (0.0, -0.10, -0.04), "head"),
    ("l_shoulder", "chest", (0.20, -0.06, 0.0), "shoulder"),
    ("l_elbow", "l_shoulder", (0.27, 0.0, 0.0), "elbow"),
    ("l_wrist", "l_elbow", (0.25, 0.0, 0.0), "hand"),
    ("r_shoulder", "chest", (-0.20, -0.06, 0.0), "shoulder"),
    ("r_elbow", "r_shoulder", (-0.27, 0.0, 0.0), "elbow"),
    ("r_wrist", "r_elbow", (-0.25, 0.0, 0.0), "hand"),
    ("l_hip", "pelvis", (0.10, 0.06, 0.0), "torso"),
    ("l_knee", "l_hip", (0.0, 0.40, 0.0), "knee"),
    ("l_ankle", "l_knee", (0.0, 0.38, 0.0), "foot"),
    ("r_hip", "pelvis", (-0.10, 0.06, 0.0), "torso"),
    ("r_knee", "r_hip", (0.0, 0.40, 0.0), "knee"),
    ("r_ankle", "r_knee", (0.0, 0.38, 0.0), "foot"),
    # end-effector points: give wrist/ankle angles an observed child so
    # detections constrain every joint angle
    ("l_hand", "l_wrist", (0.09, 0.0, 0.0), "hand"),
    ("r_hand", "r_wrist", (-0.09, 0.0, 0.0), "hand"),
    ("l_toe", "l_ankle", (0.0, 0.05, -0.15), "foot"),
    ("r_toe", "r_ankle", (0.0, 0.05, -0.15), "foot"),
]

_X, _Y, _Z = (1, 0, 0), (0, 1, 0), (0, 0, 1)

_DOFS = [
    # joint, axis, min, max  (order defines the joint-angle indexing)
    #
    # Every angle displaces at least one detected joint or face marker, so
    # the detection terms alone determine the pose. Two families are
    # deliberately absent: twist axes running along a limb (shoulder x,
    # hip y) move nothing observable, and full 3-axis blocks on two
    # consecutive single-child joints (neck+head) admit an exact
    # counter-rotation about the child-offset axis that no detection sees.
    ("spine", _X, -0.5, 0.5),
    ("chest", _X, -0.5, 0.5),
    ("chest", _Y, -0.7, 0.7),
    ("chest", _Z, -0.4, 0.4),
    ("neck", _X, -0.5, 0.5),
    ("neck", _Z, -0.5, 0.5),
    ("head", _X, -0.8, 0.8),
    ("head", _Y, -1.2, 1.2),
    ("head", _Z, -0.6, 0.6),
    ("l_shoulder", _Y, -1.5, 1.5),
    ("l_shoulder", _Z, -1.3, 1.3),
    ("l_elbow", _Y, -0.1, 2.4),
    ("l_elbow", _Z, -0.7, 0.7),
    ("l_wrist", _Y, -0.8, 0.8),
    ("r_shoulder", _Y, -1.5, 1.5),
    ("r_shoulder", _Z, -1.3, 1.3),
    ("r_elbow", _Y, -2.4, 0.1),
    ("r_elbow", _Z, -0.7, 0.7),
    ("r_wrist", _Y, -0.8, 0.8),
    ("l_hip", _X, -1.2, 1.2),
    ("l_hip", _Z, -0.8, 0.8),
    ("l_knee", _X, -0.05, 2.2),
    ("l_ankle", _X, -0.6, 0.6),
    ("r_hip", _X, -1.2, 1.2),
    ("r_hip", _Z, -0.8, 0.8),
    ("r_knee", _X, -0.05, 2.2),
    ("r_ankle", _X, -0.6, 0.6),
]

_MARKERS = [
    ("l_eye", (0.04, -0.02, -0.09)),
    ("r_eye", (-0.04, -0.02, -0.09)),
    ("nose", (0.0, 0.01, -0.11)),
    ("chin", (0.0, 0.06, -0.09)),
]


def build_default_skeleton(root_position=(0.0, 0.0, 2.5)) -> Skeleton:
    names = [j[0] for j in _J]
    parents = [-1 if j[1] is None else names.index(j[1]) for j in _J]
    offsets = np.array([j[2] for j in _J], dtype=np.float64)
    offsets[0] = root_position
    groups = [j[3] for j in _J]
    return Skeleton(
        names, np.array(parents), offsets,
        np.array([names.index(d[0]) for d in _DOFS]),
        np.array([d[1] for d in _DOFS], dtype=np.float64),
        np.array([d[2] for d in _DOFS]),
        np.array([d[3] for d in _DOFS]),
        [m[0] for m in _MARKERS],
        np.array([m[1] for m in _MARKERS]),
        groups,
    )


class _MeshBuilder:
    def __init__(self):
        self.verts, self.tris = [], []
        self.colors, self.labels = [], []
        self.weights = []  # list of [(joint, w), ...]

    def add_vertex(self, p, color, label, weights):
        self.verts.append(np.asarray(p, dtype=np.float64))
        self.colors.append(color)
        self.labels.append(label)
        self.weights.append(weights)
        return len(self.verts) - 1

    def add_tri(self, a, b, c):
        self.tris.append((a, b, c))


def _frame_for(axis):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def _tube(mb, p0, p1, r0, r1, rings, segs, label, weight_fn, color_fn,
          squash=1.0, cap=True):
    """Capped tube from p0 to p1; weight_fn/color_fn take the ring fraction t
    and segment angle and return skinning weights / RGB."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    u, v = _frame_for(p1 - p0)
    ring_ids = []
    for ri in range(rings):
        t = ri / (rings - 1) if rings > 1 else 0.5
        center = p0 + (p1 - p0) * t
        radius = r0 + (r1 - r0) * t
        ids = []
        for si in range(segs):
            phi = 2.0 * np.pi * si / segs
            p = center + radius * (np.cos(phi) * u + squash * np.sin(phi) * v)
            ids.append(mb.add_vertex(p, color_fn(t, phi), label, weight_fn(t)))
        ring_ids.append(ids)
    for ri in range(rings - 1):
        a, b = ring_ids[ri], ring_ids[ri + 1]
        for si in range(segs):
            sj = (si + 1) % segs
            mb.add_tri(a[si], a[sj], b[si])
            mb.add_tri(b[si], a[sj], b[sj])
    if cap:
        c0 = mb.add_vertex(p0, color_fn(0.0, 0.0), label, weight_fn(0.0))
        c1 = mb.add_vertex(p1, color_fn(1.0, 0.0), label, weight_fn(1.0))
        for si in range(segs):
            sj = (si + 1) % segs
            mb.add_tri(c0, ring_ids[0][sj], ring_ids[0][si])
            mb.add_tri(c1, ring_ids[-1][si], ring_ids[-1][sj])
    return ring_ids


def _sphere(mb, center, radius, rings, segs, label, weights, color_fn):
    center = np.asarray(center, dtype=np.float64)
    top = mb.add_vertex(center + (0, -radius, 0), color_fn(0.0, 0.0), label, weights)
    ring_ids = []
    for ri in range(1, rings):
        t = np.pi * ri / rings
        ids = []
        for si in range(segs):
            phi = 2.0 * np.pi * si / segs
            p = center + radius * np.array([
                np.sin(t) * np.cos(phi), -np.cos(t), np.sin(t) * np.sin(phi)])
            ids.append(mb.add_vertex(p, color_fn(t / np.pi, phi), label, weights))
        ring_ids.append(ids)
    bot = mb.add_vertex(center + (0, radius, 0), color_fn(1.0, 0.0), label, weights)
    for si in range(segs):
        sj = (si + 1) % segs
        mb.add_tri(top, ring_ids[0][si], ring_ids[0][sj])
        mb.add_tri(bot, ring_ids[-1][sj], ring_ids[-1][si])
    for ri in range(len(ring_ids) - 1):
        a, b = ring_ids[ri], ring_ids[ri + 1]
        for si in range(segs):
            sj = (si + 1) % segs
            mb.add_tri(a[sj], a[si], b[si])
            mb.add_tri(a[sj], b[si], b[sj])


def _bone_blend(ja, jb, start=0.6):
    """Weights sliding from joint ja toward jb over the last part of a tube."""
    def fn(t):
        s = 0.5 * np.clip((t - start) / (1.0 - start), 0.0, 1.0)
        if s <= 0.0:
            return [(ja, 1.0)]
        return [(ja, 1.0 - s), (jb, s)]
    return fn


def _stripe_color(base, alt, period_t=0.0, period_phi=0.0):
    base = np.asarray(base)
    alt = np.asarray(alt)

    def fn(t, phi):
        s = 0.0
        if period_t:
            s += np.sin(2 * np.pi * t / period_t)
        if period_phi:
            s += np.sin(phi * period_phi)
        mix = 0.5 + 0.5 * np.tanh(3.0 * s)
        return tuple(base * (1 - mix) + alt * mix)
    return fn


_PRESETS = {
    # segs, limb rings, torso rings, head (rings, segs), skirt (rings, segs)
    #
    # small/standard keep the circular sagitta r*(1-cos(pi/segs)) under half a
    # pixel at the default camera so rim vertices land on the rasterized
    # outline; tiny trades that for a ~50-vertex mesh used by derivative checks.
    "tiny": dict(segs=6, limb_rings=2, torso_rings=3, head=(3, 6), skirt=(2, 8)),
    "small": dict(segs=16, limb_rings=3, torso_rings=4, head=(8, 16),
                  skirt=(6, 20)),
    "standard": dict(segs=18, limb_rings=7, torso_rings=10, head=(12, 20),
                     skirt=(18, 56)),
}


def build_actor(preset: str = "small", with_skirt: bool = True,
                root_position=(0.0, 0.0, 2.5), with_limbs: bool = True) -> Actor:
    if preset not in _PRESETS:
        raise ValueError(f"unknown preset '{preset}'")
    cfg = _PRESETS[preset]
    skeleton = build_default_skeleton(root_position)
    pos = skeleton.rest_positions()
    jid = {n: i for i, n in enumerate(skeleton.joint_names)}
    mb = _MeshBuilder()
    segs = cfg["segs"]

    skin = _stripe_color((0.85, 0.70, 0.60), (0.75, 0.58, 0.50), period_t=0.9)
    shirt = _stripe_color((0.20, 0.30, 0.70), (0.45, 0.60, 0.85), period_t=0.5)
    pants = _stripe_color((0.25, 0.25, 0.28), (0.45, 0.42, 0.40), period_t=0.7)
    shoe = _stripe_color((0.1, 0.1, 0.1), (0.3, 0.25, 0.2), period_t=1.0)
    skirt_c = _stripe_color((0.85, 0.15, 0.15), (0.95, 0.85, 0.30), period_phi=5.0)

    # torso: one tube through the spine chain, blended across its joints
    def torso_w(t):
        if t < 0.35:
            s = t / 0.35
            return [(jid["pelvis"], 1.0 - s), (jid["spine"], s)]
        if t < 0.7:
            s = (t - 0.35) / 0.35
            return [(jid["spine"], 1.0 - s), (jid["chest"], s)]
        s = (t - 0.7) / 0.3
        return [(jid["chest"], 1.0 - s * 0.5), (jid["neck"], s * 0.5)]

    _tube(mb, pos[jid["pelvis"]] + (0, 0.10, 0), pos[jid["neck"]],
          0.155, 0.11, cfg["torso_rings"], segs, 2, torso_w, shirt, squash=0.62)

    _sphere(mb, pos[jid["head"]] + (0, -0.075, 0), 0.105, *cfg["head"],
            7, [(jid["head"], 1.0)], skin)

    if with_limbs:
        for side in ("l", "r"):
            sh, el, wr = jid[f"{side}_shoulder"], jid[f"{side}_elbow"], jid[f"{side}_wrist"]
            hp, kn, an = jid[f"{side}_hip"], jid[f"{side}_knee"], jid[f"{side}_ankle"]
            _tube(mb, pos[sh], pos[el], 0.050, 0.042, cfg["limb_rings"], segs, 5,
                  _bone_blend(sh, el), skin)
            _tube(mb, pos[el], pos[wr], 0.040, 0.032, cfg["limb_rings"], segs, 5,
                  _bone_blend(el, wr), skin)
            _tube(mb, pos[wr], pos[jid[f"{side}_hand"]], 0.034, 0.02, 2, segs, 5,
                  lambda t: [(wr, 1.0)], skin)
            _tube(mb, pos[hp], pos[kn], 0.078, 0.06, cfg["limb_rings"], segs, 3,
                  _bone_blend(hp, kn), pants)
            _tube(mb, pos[kn], pos[an], 0.058, 0.042, cfg["limb_rings"], segs, 3,
                  _bone_blend(kn, an), pants)
            _tube(mb, pos[an], pos[jid[f"{side}_toe"]], 0.040, 0.03, 2, segs, 6,
                  lambda t: [(an, 1.0)], shoe)

    if with_skirt:
        sr, ss = cfg["skirt"]
        _tube(mb, pos[jid["pelvis"]] + (0, 0.04, 0),
              pos[jid["pelvis"]] + (0, 0.55, 0), 0.17, 0.34, sr, ss, 1,
              lambda t: [(jid["pelvis"], 1.0)], skirt_c, squash=0.85, cap=False)

    n = len(mb.verts)
    indices = np.full((n, 4), -1, dtype=np.int64)
    weights = np.zeros((n, 4))
    for i, infl in enumerate(mb.weights):
        for s, (jidx, w) in enumerate(infl):
            indices[i, s] = jidx
            weights[i, s] = w
        weights[i] /= weights[i].sum()
    mesh = TemplateMesh(np.array(mb.verts), np.array(mb.tris, dtype=np.int64),
                        np.clip(np.array(mb.colors), 0.0, 1.0),
                        np.array(mb.labels, dtype=np.int64))
    return Actor(mesh, skeleton, SkinningWeights(indices, weights))


def suggest_camera(width: int = 256, height: int = 256, depth: float = 2.5,
                   span: float = 2.1) -> CameraIntrinsics:
    """Intrinsics placing a `span`-meter body at `depth` inside the frame."""
    f = 0.78 * height * depth / span
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0,
                            width, height)
