"""Shape ingestion: OFF meshes, binvox files, manifests and a procedural corpus."""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .voxelcore import DTYPE, VoxelGrid

SPLITS = ("train", "test")


class OffParseError(ValueError):
    pass


class BinvoxError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise ValueError("mesh needs at least one face")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")


# --------------------------------------------------------------------------- OFF


def parse_off(data) -> Mesh:
    """Parse an OFF mesh from bytes or text. Polygons are fan-triangulated."""
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(data.splitlines())]
    lines = [(n, ln) for n, ln in lines if ln]
    if not lines:
        raise OffParseError("line 1: empty file, missing OFF magic")
    pos = 0
    lineno, first = lines[pos]
    if not first.startswith("OFF"):
        raise OffParseError(f"line {lineno}: missing OFF magic")
    rest = first[3:].strip()
    pos += 1
    if not rest:
        if pos >= len(lines):
            raise OffParseError(f"line {lineno}: missing counts line")
        lineno, rest = lines[pos]
        pos += 1
    counts = _numbers(rest, lineno, int)
    if len(counts) < 2:
        raise OffParseError(f"line {lineno}: counts line needs V F [E]")
    n_vert, n_face = counts[0], counts[1]
    if n_vert < 0 or n_face < 0:
        raise OffParseError(f"line {lineno}: negative counts")

    if len(lines) - pos < n_vert + n_face:
        raise OffParseError(
            f"line {lines[-1][0]}: expected {n_vert} vertices and {n_face} faces, file ends early"
        )
    verts = np.empty((n_vert, 3), dtype=np.float64)
    for i in range(n_vert):
        lineno, text = lines[pos + i]
        vals = _numbers(text, lineno, float)
        if len(vals) < 3:
            raise OffParseError(f"line {lineno}: vertex needs 3 coordinates")
        verts[i] = vals[:3]
    pos += n_vert

    tris: List[Tuple[int, int, int]] = []
    for i in range(n_face):
        lineno, text = lines[pos + i]
        vals = _numbers(text, lineno, int, allow_float_tail=True)
        k = vals[0] if vals else 0
        if k < 3 or len(vals) < k + 1:
            raise OffParseError(f"line {lineno}: face declares {k} vertices, found {len(vals) - 1}")
        idx = vals[1 : k + 1]
        for j in idx:
            if j < 0 or j >= n_vert:
                raise OffParseError(f"line {lineno}: face index {j} out of range (V={n_vert})")
        for t in range(1, k - 1):
            tris.append((idx[0], idx[t], idx[t + 1]))
    if not tris:
        raise OffParseError(f"line {lineno}: mesh has no faces")
    return Mesh(verts, np.array(tris, dtype=np.int64))


def _numbers(text, lineno, kind, allow_float_tail=False):
    out = []
    for tok in text.split():
        try:
            out.append(kind(tok))
        except ValueError:
            # trailing per-face colour values may be floats
            if allow_float_tail and out:
                break
            raise OffParseError(f"line {lineno}: non-numeric token {tok!r}") from None
    return out


def write_off(mesh: Mesh) -> str:
    buf = io.StringIO()
    buf.write("OFF\n")
    buf.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for v in mesh.vertices:
        buf.write(" ".join(repr(float(c)) for c in v) + "\n")
    for f in mesh.faces:
        buf.write("3 " + " ".join(str(int(i)) for i in f) + "\n")
    return buf.getvalue()


# ------------------------------------------------------------------ voxelization


def voxelize_mesh(mesh: Mesh, resolution: int = 30, solid: bool = True, pad: int = 1) -> VoxelGrid:
    """Binary occupancy of ``mesh`` in a cubic grid.

    The mesh is scaled so its longest axis spans ``resolution - 2 * pad`` voxels
    and centred. A voxel is occupied if any supersampled triangle point falls
    in it (spacing <= 1/4 voxel). With ``solid`` a closed mesh yields the voxels
    whose centres lie inside it; an open mesh keeps its surface voxels and fills
    whatever they enclose.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    v = mesh.vertices
    lo, hi = v.min(axis=0), v.max(axis=0)
    extent = hi - lo
    if extent.max() <= 0:
        raise ValueError("degenerate mesh: zero extent")
    span = resolution - 2 * pad
    scale = span / extent.max()
    offset = (resolution - extent * scale) / 2.0
    pts = np.round((v - lo) * scale + offset, 9)
    box_lo = np.round(offset, 9)
    box_hi = np.round(offset + extent * scale, 9)
    idx_lo = np.floor(box_lo).astype(np.int64)
    idx_hi = np.maximum(np.ceil(box_hi).astype(np.int64) - 1, idx_lo)

    occ = np.zeros((resolution,) * 3, dtype=bool)
    tri = pts[mesh.faces]  # (F, 3 corners, 3 xyz)
    edges = np.stack(
        [tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], tri[:, 2] - tri[:, 1]], axis=1
    )
    longest = np.sqrt((edges ** 2).sum(axis=2)).max(axis=1)
    n_sub = np.maximum(np.ceil(longest * 4.0).astype(np.int64), 1)
    for n in np.unique(n_sub):
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = ii + jj <= n
        a = ii[keep] / n
        b = jj[keep] / n
        bary = np.stack([1.0 - a - b, a, b], axis=1)  # (P, 3)
        group = tri[n_sub == n]
        samples = np.einsum("pk,fkx->fpx", bary, group).reshape(-1, 3)
        cells = np.clip(np.floor(np.round(samples, 9)).astype(np.int64), idx_lo, idx_hi)
        occ[cells[:, 0], cells[:, 1], cells[:, 2]] = True
    if solid:
        if _is_closed(mesh.faces):
            occ = _inside_centres(tri, resolution)
        else:
            occ = ndimage.binary_fill_holes(occ)
    return VoxelGrid(occ.astype(DTYPE))


def _is_closed(faces: np.ndarray) -> bool:
    """True when every edge is shared by exactly two faces."""
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def _inside_centres(tri: np.ndarray, res: int) -> np.ndarray:
    """Voxels whose centre lies inside a closed triangle mesh (parity of ray crossings).

    Rays run along the last axis from each column centre; a tiny fixed offset
    keeps them off shared edges and vertices.
    """
    ox, oy = 0.5 + 1.31e-7, 0.5 + 2.71e-7
    crossings = np.zeros((res, res, res + 1), dtype=np.int64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    for t in range(len(tri)):
        p0, p1, p2 = a[t], b[t], c[t]
        det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if det == 0:
            continue  # triangle is edge-on to the rays
        lo = np.floor(np.minimum(np.minimum(p0, p1), p2)[:2]).astype(np.int64)
        hi = np.ceil(np.maximum(np.maximum(p0, p1), p2)[:2]).astype(np.int64)
        lo, hi = np.clip(lo, 0, res - 1), np.clip(hi, 0, res - 1)
        i, j = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
        px, py = i + ox, j + oy
        u = ((px - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (py - p0[1])) / det
        v = ((p1[0] - p0[0]) * (py - p0[1]) - (px - p0[0]) * (p1[1] - p0[1])) / det
        hit = (u >= 0) & (v >= 0) & (u + v <= 1)
        if not hit.any():
            continue
        zc = p0[2] + u[hit] * (p1[2] - p0[2]) + v[hit] * (p2[2] - p0[2])
        # the crossing lies below every voxel centre k + 0.5 with k >= first
        first = np.clip(np.floor(zc - 0.5).astype(np.int64) + 1, 0, res)
        np.add.at(crossings, (i[hit], j[hit], first), 1)
    return (np.cumsum(crossings, axis=2)[:, :, :res] % 2).astype(bool)


def box_mesh(lo=(0, 0, 0), hi=(1, 1, 1)) -> Mesh:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for q in quads:
        faces += [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
    return Mesh(corners, faces)


def sphere_mesh(radius: float = 1.0, subdivisions: int = 3) -> Mesh:
    """Icosphere with vertices on the sphere of ``radius``."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: Dict[Tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts) * radius, faces)


# ------------------------------------------------------------------------ binvox


def write_binvox(grid: VoxelGrid, translate=(0.0, 0.0, 0.0), scale: float = 1.0) -> bytes:
    """Encode a binary grid; voxels are run-length coded in C order of ``grid.values``."""
    vals = grid.values
    if not np.all((vals == 0) | (vals == 1)):
        raise BinvoxError("binvox stores binary grids only")
    d, h, w = vals.shape
    header = (
        "#binvox 1\n"
        f"dim {d} {h} {w}\n"
        f"translate {translate[0]:g} {translate[1]:g} {translate[2]:g}\n"
        f"scale {scale:g}\n"
        "data\n"
    ).encode("ascii")
    flat = vals.ravel().astype(np.uint8)
    # run boundaries, then split runs longer than 255
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    out = bytearray()
    for s, n in zip(starts, lengths):
        v = int(flat[s])
        while n > 0:
            c = min(int(n), 255)
            out += bytes((v, c))
            n -= c
    return header + bytes(out)


def read_binvox(data: bytes) -> VoxelGrid:
    fp = io.BytesIO(data)
    magic = fp.readline().strip()
    if not magic.startswith(b"#binvox"):
        raise BinvoxError("bad magic: not a binvox file")
    dims = None
    while True:
        line = fp.readline()
        if not line:
            raise BinvoxError("missing data marker")
        line = line.strip()
        if line.startswith(b"dim"):
            try:
                dims = tuple(int(t) for t in line.split()[1:])
            except ValueError:
                raise BinvoxError("malformed dim line") from None
            if len(dims) != 3 or min(dims) < 1:
                raise BinvoxError("malformed dim line")
        elif line == b"data":
            break
    if dims is None:
        raise BinvoxError("missing dim line")
    raw = np.frombuffer(fp.read(), dtype=np.uint8)
    if raw.size % 2:
        raise BinvoxError("odd number of RLE bytes")
    values, counts = raw[::2], raw[1::2]
    if np.any(counts == 0):
        raise BinvoxError("zero run length in RLE stream")
    total = int(counts.sum(dtype=np.int64))
    if total != dims[0] * dims[1] * dims[2]:
        raise BinvoxError(f"RLE total {total} != {dims[0] * dims[1] * dims[2]} voxels")
    flat = np.repeat((values > 0).astype(DTYPE), counts)
    return VoxelGrid(flat.reshape(dims))


# ---------------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    entries: List[Tuple[str, int, str]]
    class_names: List[str]

    def __post_init__(self):
        for path, label, split in self.entries:
            if not 0 <= label < len(self.class_names):
                raise ManifestError(f"{path}: label {label} out of range")
            if split not in SPLITS:
                raise ManifestError(f"{path}: unknown split {split!r}")

    def indices(self, split: str) -> List[int]:
        return [i for i, e in enumerate(self.entries) if e[2] == split]

    def labels(self, split: Optional[str] = None) -> np.ndarray:
        return np.array([e[1] for e in self.entries if split is None or e[2] == split], dtype=np.int64)


def load_manifest(path) -> DatasetManifest:
    """Read ``path<TAB>class<TAB>split`` lines; labels follow sorted class names."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"line {lineno}: expected 3 tab-separated fields")
            if parts[2] not in SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {parts[2]!r} (train|test)")
            rows.append(parts)
    names = sorted({r[1] for r in rows})
    lookup = {n: i for i, n in enumerate(names)}
    return DatasetManifest([(p, lookup[c], s) for p, c, s in rows], names)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p, label, split in manifest.entries:
            fh.write(f"{p}\t{manifest.class_names[label]}\t{split}\n")


def load_grids(manifest: DatasetManifest, root, split: Optional[str] = None,
               resolution: int = 30, solid: bool = True) -> List[VoxelGrid]:
    """Load the grids referenced by ``manifest`` (binvox or OFF) relative to ``root``."""
    grids = []
    for p, label, s in manifest.entries:
        if split is not None and s != split:
            continue
        full = os.path.join(root, p)
        try:
            with open(full, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise ManifestError(f"entry {p!r}: cannot read ({exc.strerror})") from None
        if p.lower().endswith(".off"):
            g = voxelize_mesh(parse_off(data), resolution, solid)
        else:
            g = read_binvox(data)
        g.label = label
        grids.append(g)
    return grids


# ------------------------------------------------------------ synthetic corpus

FAMILIES = ("solid_cube", "hollow_cube", "sphere", "cylinder", "cone", "torus",
            "l_bracket", "table", "chair", "cross")


@dataclass
class SynthSpec:
    """Recipe for the procedural corpus.

    ``class_recipes`` holds ``(name, family, params)``; ``params`` overrides
    the family's default parameter ranges (each a ``(low, high)`` pair).
    """

    class_recipes: List[Tuple[str, str, dict]] = field(default_factory=lambda: default_recipes())
    train_per_class: int = 200
    test_per_class: int = 50
    resolution: int = 30
    seed: int = 0
    flip_noise: float = 0.0

    def __post_init__(self):
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("samples per class must be >= 1")
        for name, family, _ in self.class_recipes:
            if family not in FAMILIES:
                raise ValueError(f"{name}: unknown primitive family {family!r}")


# Overrides that make the designed pairs genuinely hard: a low chair back, a thick
# hollow-cube wall around a small cavity, and a second sub-form (pedestal base or
# flat slab) shared by both members of each pair.
PAIR_OVERRIDES = {
    "chair": {"back": (0.1, 0.35), "alt_form": 0.5},
    "table": {"alt_form": 0.5},
    "solid_cube": {"alt_form": 0.5},
    "hollow_cube": {"shell": (3, 5), "alt_form": 0.5},
}


def default_recipes() -> List[Tuple[str, str, dict]]:
    return [(f, f, dict(PAIR_OVERRIDES.get(f, {}))) for f in FAMILIES]


# the designed look-alike pairs of the default corpus
CONFUSABLE_PAIRS = (("table", "chair"), ("solid_cube", "hollow_cube"))

_DEFAULTS = {
    "size": (0.55, 0.85),  # half-extent of the longest axis, in [-1, 1] units
    "aspect": (0.7, 1.0),
    "jitter": (0, 2),  # voxels of integer translation
    "shell": (2, 3),  # hollow cube wall thickness, voxels
    "back": (0.3, 0.8),  # chair back height above seat, fraction of size
    "tube": (0.25, 0.4),  # torus/cross thickness relative to size
    "alt_form": 0.0,  # probability of the alternate sub-form (pedestal base / flat slab)
}


def _coords(res):
    c = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    return np.meshgrid(c, c, c, indexing="ij")  # z (up), y, x


def _box(z, y, x, cz, cy, cx, hz, hy, hx):
    return (np.abs(z - cz) <= hz) & (np.abs(y - cy) <= hy) & (np.abs(x - cx) <= hx)


def _draw(family: str, rng: np.random.Generator, res: int, p: dict) -> np.ndarray:
    z, y, x = _coords(res)
    u = lambda key: rng.uniform(*p[key])  # noqa: E731
    s = u("size")
    a1, a2 = u("aspect"), u("aspect")
    vox = 2.0 / res
    alt = rng.random() < p["alt_form"]
    if family in ("solid_cube", "hollow_cube"):
        hz, hy, hx = s * a1, s * a2, s
        if alt:  # flat slab sub-form
            hz = max(0.4 * hz, 4 * vox)
        occ = _box(z, y, x, 0, 0, 0, hz, hy, hx)
        if family == "hollow_cube":
            t = int(rng.integers(p["shell"][0], p["shell"][1] + 1)) * vox
            occ &= ~_box(z, y, x, 0, 0, 0, hz - t, hy - t, hx - t)
    elif family == "sphere":
        rz, ry, rx = s * a1, s * a2, s
        occ = (z / rz) ** 2 + (y / ry) ** 2 + (x / rx) ** 2 <= 1.0
    elif family == "cylinder":
        r, hz = s * a1, s
        occ = (y ** 2 + x ** 2 <= r * r) & (np.abs(z) <= hz)
    elif family == "cone":
        r, hz = s * a1, s
        frac = (hz - z) / (2 * hz)  # 1 at the base, 0 at the apex
        occ = (np.abs(z) <= hz) & (np.sqrt(y ** 2 + x ** 2) <= r * frac)
    elif family == "torus":
        tube = max(u("tube") * s, 1.5 * vox)
        big = s - tube
        ring = np.sqrt(y ** 2 + x ** 2) - big
        occ = ring ** 2 + (z / a1) ** 2 <= tube * tube
    elif family == "l_bracket":
        t = max(u("tube") * s, 1.5 * vox)
        occ = _box(z, y, x, 0, 0, -s + t, s, s * a1, t) | _box(z, y, x, -s + t, 0, 0, t, s * a1, s)
    elif family in ("table", "chair"):
        top = max(0.12 * s, 1.0 * vox)
        hy, hx = s * a1, s
        leg = max(0.12 * s, 1.0 * vox)
        seat_z = s * (0.2 if family == "chair" else 0.4) * a2
        occ = _box(z, y, x, seat_z, 0, 0, top, hy, hx)
        cz = (seat_z - s) / 2
        if alt:  # pedestal sub-form: central column on a foot plate
            col = 2 * leg
            occ |= _box(z, y, x, cz, 0, 0, (seat_z + s) / 2, col, col)
            occ |= _box(z, y, x, -s + top / 2, 0, 0, top / 2, hy * 0.6, hx * 0.6)
        else:
            for sy in (-1, 1):
                for sx in (-1, 1):
                    occ |= _box(z, y, x, cz, sy * (hy - leg), sx * (hx - leg), (seat_z + s) / 2, leg, leg)
        if family == "chair":
            back = u("back") * s
            occ |= _box(z, y, x, seat_z + back / 2, 0, -hx + top, back / 2 + top, hy, top)
    elif family == "cross":
        t = max(u("tube") * s * 0.7, 1.5 * vox)
        occ = (_box(z, y, x, 0, 0, 0, s, t, t) | _box(z, y, x, 0, 0, 0, t, s * a1, t)
               | _box(z, y, x, 0, 0, 0, t, t, s))
    else:
        raise ValueError(f"unknown family {family!r}")
    return occ


def _augment(occ: np.ndarray, rng: np.random.Generator, jitter: Tuple[int, int]) -> np.ndarray:
    occ = np.rot90(occ, k=int(rng.integers(4)), axes=(1, 2))
    lim = int(jitter[1])
    if lim > 0:
        shift = rng.integers(-lim, lim + 1, size=3)
        out = np.zeros_like(occ)
        src = [slice(max(0, -s), occ.shape[i] - max(0, s)) for i, s in enumerate(shift)]
        dst = [slice(max(0, s), occ.shape[i] - max(0, -s)) for i, s in enumerate(shift)]
        out[tuple(dst)] = occ[tuple(src)]
        occ = out
    return np.ascontiguousarray(occ)


def generate_synthetic_dataset(spec: SynthSpec) -> Tuple[DatasetManifest, List[VoxelGrid]]:
    """Deterministic labelled corpus; entries are class-major (sorted names), train before test."""
    recipes = sorted(spec.class_recipes, key=lambda r: r[0])
    names = [r[0] for r in recipes]
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    # labels follow sorted class names, as load_manifest assigns them
    root = np.random.SeedSequence(spec.seed)
    class_seqs = root.spawn(len(recipes))
    entries, grids = [], []
    for label, ((name, family, overrides), seq) in enumerate(zip(recipes, class_seqs)):
        params = dict(_DEFAULTS)
        params.update(overrides)
        rng = np.random.default_rng(seq)
        for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            for i in range(count):
                occ = _draw(family, rng, spec.resolution, params)
                occ = _augment(occ, rng, params["jitter"])
                if spec.flip_noise > 0:
                    occ = occ ^ (rng.random(occ.shape) < spec.flip_noise)
                g = VoxelGrid(occ.astype(DTYPE), label=label)
                entries.append((f"{split}/{name}_{i:04d}.binvox", label, split))
                grids.append(g)
    return DatasetManifest(entries, names), grids
