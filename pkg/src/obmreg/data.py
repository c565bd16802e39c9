"""Synthetic partial-overlap scene pairs, ASCII PLY / XYZ I/O and the dataset manifest."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    DEFAULT_OVERLAP_THRESHOLD,
    PointCloud,
    RigidTransform,
    apply_transform,
    axis_angle_matrix,
    overlap_ratio,
)

SHAPES = ("sphere", "cube", "cylinder", "torus", "composite")
CUBE_HALF = 1.0 / np.sqrt(3.0)
CYL_RADIUS, CYL_HALF_HEIGHT = 0.6, 0.8
TORUS_R, TORUS_r = 0.7, 0.3
BISECTION_STEPS = 50
OVERLAP_TOL = 0.05


class GenerationError(RuntimeError):
    pass


# -- analytic surfaces -------------------------------------------------------------


def _unit_vectors(rng, n) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, radius=1.0):
    return radius * _unit_vectors(rng, n)


def _box(rng, n, half):
    """Uniform on the surface of an axis-aligned box with half-extents ``half``."""
    half = np.broadcast_to(np.asarray(half, dtype=np.float64), (3,))
    # face pairs normal to x, y, z
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    side = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = side * half[axis]
    return pts


def _cylinder(rng, n, radius, half_h):
    side_area = 2 * np.pi * radius * 2 * half_h
    cap_area = np.pi * radius**2
    kind = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(kind == 0, rng.uniform(-half_h, half_h, size=n), np.where(kind == 1, half_h, -half_h))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, R, r):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to R + r cos v
        keep = rng.uniform(0, R + r, size=m) < R + r * np.cos(v)
        u, v = u[keep], v[keep]
        pts = np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], axis=1)
        out = np.vstack([out, pts])
    return out[:n]


def _random_rotation(rng) -> np.ndarray:
    return axis_angle_matrix(_unit_vectors(rng, 1)[0], rng.uniform(0, 180))


def _composite(rng, n):
    """3-5 randomly sized, placed and oriented primitives, sampled by area."""
    n_parts = int(rng.integers(3, 6))
    parts = []
    for _ in range(n_parts):
        kind = rng.choice(["box", "cylinder", "sphere"])
        if kind == "box":
            half = rng.uniform(0.1, 0.5, size=3)
            area = 8 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])
            sampler = lambda k, half=half: _box(rng, k, half)
        elif kind == "cylinder":
            rad, hh = rng.uniform(0.08, 0.3), rng.uniform(0.15, 0.5)
            area = 2 * np.pi * rad * 2 * hh + 2 * np.pi * rad**2
            sampler = lambda k, rad=rad, hh=hh: _cylinder(rng, k, rad, hh)
        else:
            rad = rng.uniform(0.1, 0.35)
            area = 4 * np.pi * rad**2
            sampler = lambda k, rad=rad: _sphere(rng, k, rad)
        parts.append((area, sampler, _random_rotation(rng), rng.uniform(-0.6, 0.6, size=3)))
    areas = np.array([a for a, *_ in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = [s(c) @ R.T + off for (_, s, R, off), c in zip(parts, counts) if c > 0]
    pts = np.vstack(pts)
    pts -= 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    return pts / np.linalg.norm(pts, axis=1).max()


def generate_shape(kind: str, n_points: int, rng) -> PointCloud:
    """Uniform surface samples of an analytic shape inside the unit sphere."""
    rng = np.random.default_rng(rng)
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    if kind == "sphere":
        pts = _sphere(rng, n_points)
    elif kind == "cube":
        pts = _box(rng, n_points, CUBE_HALF)
    elif kind == "cylinder":
        pts = _cylinder(rng, n_points, CYL_RADIUS, CYL_HALF_HEIGHT)
    elif kind == "torus":
        pts = _torus(rng, n_points, TORUS_R, TORUS_r)
    elif kind == "composite":
        pts = _composite(rng, n_points)
    else:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPES}")
    return PointCloud(pts)


# -- scene pairs -------------------------------------------------------------------


@dataclass
class ScenePair:
    source: PointCloud
    target: PointCloud
    gt_transform: RigidTransform
    overlap: float
    noise_sigma: float
    seed: int
    shape: str = "composite"


def random_transform(rng, rot_max_deg: float, trans_max: float) -> RigidTransform:
    axis = _unit_vectors(rng, 1)[0]
    angle = rng.uniform(0.0, rot_max_deg)
    t = rng.uniform(-trans_max, trans_max, size=3)
    return RigidTransform(axis_angle_matrix(axis, angle), t)


def _keep_above(proj: np.ndarray, c: float) -> np.ndarray:
    return np.flatnonzero(proj >= c)


def crop_to_overlap(base: np.ndarray, target_overlap: float, rng, threshold=DEFAULT_OVERLAP_THRESHOLD):
    """Half-space crops of one base cloud into source / target index sets.

    The source keeps the (1 + r) / 2 fraction of points furthest along a
    random direction.  The target's plane offset along a second random
    direction is bisected: raising it only removes target points, so the
    measured overlap is monotone in the offset.
    """
    n = len(base)
    if target_overlap >= 1.0:
        idx = np.arange(n)
        return idx, idx, 1.0
    n1, n2 = _unit_vectors(rng, 2)
    keep_frac = min(1.0, 0.5 * (1.0 + target_overlap))
    p1 = base @ n1
    src_idx = np.sort(np.argsort(-p1, kind="stable")[: max(1, int(round(keep_frac * n)))])
    src = base[src_idx]
    p2 = base @ n2

    def overlap_at(c):
        tgt_idx = _keep_above(p2, c)
        if len(tgt_idx) == 0:
            return 0.0, tgt_idx
        return overlap_ratio(src, base[tgt_idx], threshold), tgt_idx

    lo, hi = p2.min() - 1e-9, p2.max() + 1e-9
    best = None
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        ov, tgt_idx = overlap_at(mid)
        if best is None or abs(ov - target_overlap) < abs(best[0] - target_overlap):
            best = (ov, tgt_idx)
        if abs(ov - target_overlap) <= 0.25 * OVERLAP_TOL:
            break
        if ov > target_overlap:
            lo = mid
        else:
            hi = mid
    ov, tgt_idx = best
    if abs(ov - target_overlap) > OVERLAP_TOL or len(tgt_idx) < 16:
        raise GenerationError(
            f"overlap bisection failed: wanted {target_overlap:.3f}, best {ov:.3f} "
            f"with {len(tgt_idx)} target points after {BISECTION_STEPS} steps"
        )
    return src_idx, tgt_idx, ov


def make_pair(
    shape="composite",
    rot_max_deg: float = 45.0,
    trans_max: float = 0.5,
    target_overlap: float = 1.0,
    noise_sigma: float = 0.0,
    rng=0,
    n_points: int = 256,
) -> ScenePair:
    """A source cloud and a transformed, cropped, noisy target sharing one base shape.

    ``shape`` is a kind name or a ready PointCloud; ``rng`` a seed or Generator.
    gt_transform maps source coordinates onto target coordinates.
    """
    if not 0.1 < target_overlap <= 1.0:
        raise ValueError("target_overlap must be in (0.1, 1.0]")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else -1
    rng = np.random.default_rng(rng)
    if isinstance(shape, PointCloud):
        base, kind = shape.points, "custom"
    else:
        base, kind = generate_shape(shape, n_points, rng).points, shape
    gt = random_transform(rng, rot_max_deg, trans_max)
    src_idx, tgt_idx, ov = crop_to_overlap(base, target_overlap, rng)
    src = base[src_idx][rng.permutation(len(src_idx))]
    tgt = gt.apply(base[tgt_idx][rng.permutation(len(tgt_idx))])
    if noise_sigma > 0:
        src = src + rng.normal(scale=noise_sigma, size=src.shape)
        tgt = tgt + rng.normal(scale=noise_sigma, size=tgt.shape)
    return ScenePair(PointCloud(src), PointCloud(tgt), gt, float(ov), float(noise_sigma), seed, kind)


def measured_overlap(pair: ScenePair, threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> float:
    return overlap_ratio(apply_transform(pair.source, pair.gt_transform), pair.target, threshold)


# -- file formats -------------------------------------------------------------------


class CloudFormatError(ValueError):
    """Base class for point-cloud parse failures."""


class HeaderError(CloudFormatError):
    pass


class CountMismatchError(CloudFormatError):
    pass


class NumericParseError(CloudFormatError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    pts = cloud.points
    nrm = cloud.normals
    ext = path.suffix.lower()
    lines = []
    if ext == ".ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
        lines += [f"property double {c}" for c in "xyz"]
        if nrm is not None:
            lines += [f"property double {c}" for c in ("nx", "ny", "nz")]
        lines.append("end_header")
    elif ext != ".xyz":
        raise ValueError(f"unsupported extension {ext!r} (use .ply or .xyz)")
    rows = pts if nrm is None else np.hstack([pts, nrm])
    lines += [" ".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _parse_rows(rows: list[str], ncols: int, where: str) -> np.ndarray:
    out = np.empty((len(rows), ncols))
    for i, row in enumerate(rows):
        toks = row.split()
        if len(toks) < ncols:
            raise CountMismatchError(f"{where}: row {i} has {len(toks)} values, expected {ncols}")
        try:
            out[i] = [float(t) for t in toks[:ncols]]
        except ValueError as exc:
            raise NumericParseError(f"{where}: row {i}: {exc}") from exc
    return out


def _read_ply(text: str, where: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise HeaderError(f"{where}: missing 'ply' magic line")
    n_vertex = None
    props: list[str] = []
    other_elements = False
    current = None
    fmt_ok = False
    end = None
    for i, line in enumerate(lines[1:], 1):
        toks = line.split()
        if not toks or toks[0] in ("comment", "obj_info"):
            continue
        if toks[0] == "format":
            if len(toks) < 2 or toks[1] != "ascii":
                raise HeaderError(f"{where}: only ASCII PLY is supported")
            fmt_ok = True
        elif toks[0] == "element":
            if len(toks) != 3:
                raise HeaderError(f"{where}: malformed element line {line!r}")
            current = toks[1]
            if current == "vertex":
                try:
                    n_vertex = int(toks[2])
                except ValueError as exc:
                    raise HeaderError(f"{where}: bad vertex count {toks[2]!r}") from exc
            else:
                other_elements = True
        elif toks[0] == "property":
            if current == "vertex":
                props.append(toks[-1])
        elif toks[0] == "end_header":
            end = i
            break
        else:
            raise HeaderError(f"{where}: unexpected header line {line!r}")
    if end is None or not fmt_ok or n_vertex is None:
        raise HeaderError(f"{where}: incomplete header")
    if props[:3] != ["x", "y", "z"]:
        raise HeaderError(f"{where}: vertex properties must start with x, y, z")
    body = [l for l in lines[end + 1 :] if l.strip()]
    if len(body) < n_vertex or (not other_elements and len(body) != n_vertex):
        raise CountMismatchError(f"{where}: header declares {n_vertex} vertices, found {len(body)} rows")
    data = _parse_rows(body[:n_vertex], len(props), where)
    normals = None
    if all(c in props for c in ("nx", "ny", "nz")):
        normals = data[:, [props.index(c) for c in ("nx", "ny", "nz")]]
    return PointCloud(data[:, :3], normals)


def _read_xyz(text: str, where: str) -> PointCloud:
    rows = [l for l in text.splitlines() if l.strip() and not l.lstrip().startswith("#")]
    if not rows:
        raise CountMismatchError(f"{where}: no points")
    width = len(rows[0].split())
    if width not in (3, 6):
        raise CountMismatchError(f"{where}: rows must have 3 or 6 values, got {width}")
    data = _parse_rows(rows, width, where)
    return PointCloud(data[:, :3], data[:, 3:] if width == 6 else None)


def read_cloud(path) -> PointCloud:
    path = Path(path)
    ext = path.suffix.lower()
    text = path.read_text()
    if ext == ".ply":
        return _read_ply(text, str(path))
    if ext == ".xyz":
        return _read_xyz(text, str(path))
    raise ValueError(f"unsupported extension {ext!r} (use .ply or .xyz)")


# -- manifest --------------------------------------------------------------------------

MANIFEST_MAGIC = "# obmreg manifest v1"
COLUMNS = ("index", "split", "seed", "shape", "overlap", "noise", "source", "target", "gt")


@dataclass
class ManifestEntry:
    index: int
    split: str
    seed: int
    shape: str
    overlap: float
    noise: float
    source: str
    target: str
    gt: RigidTransform


@dataclass
class DatasetManifest:
    params: dict[str, str] = field(default_factory=dict)
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_pair(self, entry: ManifestEntry) -> ScenePair:
        return ScenePair(
            read_cloud(self.root / entry.source),
            read_cloud(self.root / entry.target),
            entry.gt,
            entry.overlap,
            entry.noise,
            entry.seed,
            entry.shape,
        )

    def pairs(self, split: str) -> list[ScenePair]:
        return [self.load_pair(e) for e in self.split(split)]


def _gt_field(xf: RigidTransform) -> str:
    vals = list(xf.rotation.reshape(-1)) + list(xf.translation)
    return ",".join(_fmt(v) for v in vals)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [MANIFEST_MAGIC]
    lines += [f"{k}={v}" for k, v in manifest.params.items()]
    lines.append("\t".join(COLUMNS))
    for e in manifest.entries:
        lines.append(
            "\t".join(
                [str(e.index), e.split, str(e.seed), e.shape, _fmt(e.overlap), _fmt(e.noise), e.source, e.target, _gt_field(e.gt)]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise CloudFormatError(f"{path}: not an obmreg manifest")
    params: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    in_table = False
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if not in_table:
            if line.split("\t") == list(COLUMNS):
                in_table = True
                continue
            if "=" not in line:
                raise CloudFormatError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            params[k.strip()] = v.strip()
            continue
        f = line.split("\t")
        if len(f) != len(COLUMNS):
            raise CloudFormatError(f"{path}:{n}: expected {len(COLUMNS)} columns")
        try:
            g = np.array([float(x) for x in f[8].split(",")])
            gt = RigidTransform(g[:9].reshape(3, 3), g[9:])
            entries.append(
                ManifestEntry(int(f[0]), f[1], int(f[2]), f[3], float(f[4]), float(f[5]), f[6], f[7], gt)
            )
        except ValueError as exc:
            raise CloudFormatError(f"{path}:{n}: {exc}") from exc
    if not in_table:
        raise CloudFormatError(f"{path}: missing column header")
    return DatasetManifest(params, entries, path.parent)


def pair_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(
    out_dir,
    shapes=("composite",),
    pairs: int = 4,
    test_pairs: int = 0,
    val_pairs: int = 0,
    overlap: float = 1.0,
    noise: float = 0.0,
    seed: int = 0,
    rot_max_deg: float = 45.0,
    trans_max: float = 0.5,
    n_points: int = 256,
) -> Path:
    """Write PLY pairs plus ``manifest.txt`` into ``out_dir``; returns the manifest path.

    Pair i of the run uses seed ``pair_seed(seed, i)`` and shape
    ``shapes[i % len(shapes)]``; splits are train, then val, then test.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shapes = tuple(shapes)
    for s in shapes:
        if s not in SHAPES:
            raise ValueError(f"unknown shape {s!r}")
    params = {
        "shapes": ",".join(shapes),
        "pairs": str(pairs),
        "val_pairs": str(val_pairs),
        "test_pairs": str(test_pairs),
        "overlap": _fmt(overlap),
        "noise": _fmt(noise),
        "seed": str(seed),
        "rot_max_deg": _fmt(rot_max_deg),
        "trans_max": _fmt(trans_max),
        "n_points": str(n_points),
    }
    manifest = DatasetManifest(params, [], out)
    splits = ["train"] * pairs + ["val"] * val_pairs + ["test"] * test_pairs
    for i, split in enumerate(splits):
        s = pair_seed(seed, i)
        kind = shapes[i % len(shapes)]
        pair = make_pair(kind, rot_max_deg, trans_max, overlap, noise, s, n_points)
        src_name, tgt_name = f"pair_{i:05d}_src.ply", f"pair_{i:05d}_tgt.ply"
        write_cloud(pair.source, out / src_name)
        write_cloud(pair.target, out / tgt_name)
        manifest.entries.append(
            ManifestEntry(i, split, s, kind, pair.overlap, noise, src_name, tgt_name, pair.gt_transform)
        )
    path = out / "manifest.txt"
    write_manifest(manifest, path)
    return path
