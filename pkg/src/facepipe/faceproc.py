"""Image ingestion, two-landmark similarity alignment to a square grayscale
crop, mirror augmentation, manifest files, and a synthetic face-world
generator for desk-scale experiments.

Images are float arrays in [0, 1], shaped (h, w), indexed img[y, x].
Coordinates are (x, y) with x along columns. Crops are stored as binary
8-bit P5 graymaps so byte-exact round trips are testable.

The default canonical frame is 100x100 with landmarks at (50, 40) and
(50, 65): a 25-pixel vertical separation, centered.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

CANONICAL_SIZE = 100
CANONICAL_Q1 = (50.0, 40.0)
CANONICAL_Q2 = (50.0, 65.0)


def scaled_canonical(size: int) -> tuple[tuple[float, float], tuple[float, float]]:
    """The default landmark pair scaled to a `size` x `size` frame."""
    f = size / CANONICAL_SIZE
    return ((CANONICAL_Q1[0] * f, CANONICAL_Q1[1] * f),
            (CANONICAL_Q2[0] * f, CANONICAL_Q2[1] * f))


# --------------------------------------------------------------------------
# Records and manifests

@dataclass(frozen=True)
class LandmarkPair:
    p1: tuple[float, float]
    p2: tuple[float, float]

    def __post_init__(self):
        if tuple(self.p1) == tuple(self.p2):
            raise ValueError(f"landmarks coincide at {self.p1}")


@dataclass(frozen=True)
class FaceRecord:
    path: str
    subject_id: str
    landmarks: LandmarkPair
    mirrored: bool = False

    def __post_init__(self):
        if not self.path:
            raise ValueError("record path must be nonempty")
        if not self.subject_id:
            raise ValueError("record subject id must be nonempty")

    def sort_key(self):
        return (self.subject_id, self.path, self.mirrored)


@dataclass
class Manifest:
    """Ordered record collection; order is normalized on construction."""

    records: list[FaceRecord] = field(default_factory=list)
    canonical: tuple[tuple[float, float], tuple[float, float]] = \
        (CANONICAL_Q1, CANONICAL_Q2)

    def __post_init__(self):
        self.records = sorted(self.records, key=FaceRecord.sort_key)

    def __len__(self):
        return len(self.records)


def write_manifest(manifest: Manifest, path) -> None:
    (q1, q2) = manifest.canonical
    lines = ["# facepipe manifest v1",
             "# canonical " + " ".join(repr(float(c))
                                       for c in (*q1, *q2))]
    for r in manifest.records:
        lm = r.landmarks
        coords = [lm.p1[0], lm.p1[1], lm.p2[0], lm.p2[1]]
        lines.append("\t".join([r.path, r.subject_id,
                                *(repr(float(c)) for c in coords),
                                "1" if r.mirrored else "0"]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    manifest, bad = read_manifest_lenient(path)
    if bad:
        lineno, reason = bad[0]
        raise DataError(f"manifest {path} line {lineno}: {reason}")
    return manifest


def read_manifest_lenient(path) -> tuple[Manifest, list[tuple[int, str]]]:
    """Parse a manifest, collecting unusable lines instead of raising."""
    canonical = (CANONICAL_Q1, CANONICAL_Q2)
    records = []
    bad: list[tuple[int, str]] = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#"):
            m = re.match(r"#\s*canonical\s+(\S+)\s+(\S+)\s+(\S+)\s+(\S+)", line)
            if m:
                canonical = ((float(m.group(1)), float(m.group(2))),
                             (float(m.group(3)), float(m.group(4))))
            continue
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            bad.append((lineno, f"expected 7 fields, got {len(parts)}"))
            continue
        try:
            rec = FaceRecord(parts[0], parts[1],
                             LandmarkPair((float(parts[2]), float(parts[3])),
                                          (float(parts[4]), float(parts[5]))),
                             parts[6] == "1")
        except ValueError as exc:
            bad.append((lineno, str(exc)))
            continue
        records.append(rec)
    return Manifest(records, canonical), bad


def mirror_manifest(manifest: Manifest) -> Manifest:
    """Double the record set with mirrored twins; labels preserved."""
    twins = [FaceRecord(r.path, r.subject_id, r.landmarks, mirrored=True)
             for r in manifest.records if not r.mirrored]
    return Manifest(manifest.records + twins, manifest.canonical)


# --------------------------------------------------------------------------
# P5 graymap I/O

def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary P5; values are clipped to [0, 1] then rounded."""
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise DataError(f"{path}: not a binary P5 graymap")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=m.end(), count=-1)
    if pixels.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {pixels.size}")
    return pixels.reshape(h, w).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# Core image operations

def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luminance 0.299 R + 0.587 G + 0.114 B over an (h, w, 3) array."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])


def mirror(img: np.ndarray) -> np.ndarray:
    """Horizontal flip; an exact involution."""
    return np.ascontiguousarray(img[:, ::-1])


def solve_similarity(p1, p2, q1, q2) -> tuple[complex, complex]:
    """The unique 4-DOF similarity T(z) = a*z + b with T(p1)=q1, T(p2)=q2,
    points as complex x + iy."""
    pc1, pc2 = complex(p1[0], p1[1]), complex(p2[0], p2[1])
    qc1, qc2 = complex(q1[0], q1[1]), complex(q2[0], q2[1])
    if pc1 == pc2:
        raise ValueError("landmarks coincide; similarity is underdetermined")
    a = (qc2 - qc1) / (pc2 - pc1)
    return a, qc1 - a * pc1


def apply_similarity(a: complex, b: complex, point) -> tuple[float, float]:
    z = a * complex(point[0], point[1]) + b
    return (float(z.real), float(z.imag))


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample img at real coordinates; anything outside contributes zero."""
    h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=img.dtype)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = np.zeros(xs.shape, dtype=img.dtype)
        vals[ok] = img[yi[ok], xi[ok]]
        out += wgt * vals
    return out


def align(image: np.ndarray, landmarks: LandmarkPair,
          canonical: tuple[tuple[float, float], tuple[float, float]] =
          (CANONICAL_Q1, CANONICAL_Q2),
          size: tuple[int, int] = (CANONICAL_SIZE, CANONICAL_SIZE)) -> np.ndarray:
    """Warp so the landmark pair lands on the canonical pair, bilinearly
    resampled into a size[0] x size[1] crop, zero outside the source."""
    a, b = solve_similarity(landmarks.p1, landmarks.p2, *canonical)
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = (xs + 1j * ys - b) / a
    return bilinear_sample(np.asarray(image, dtype=np.float64),
                           src.real, src.imag)


def downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downscale by an integer factor."""
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} image not divisible by {factor}")
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


# --------------------------------------------------------------------------
# Batch alignment

@dataclass
class AlignReport:
    aligned: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)


def align_manifest(manifest: Manifest, image_root, out_dir, *,
                   size: int = CANONICAL_SIZE, canonical=None,
                   threads: int = 1) -> tuple[Manifest, AlignReport]:
    """Align every record's image into `out_dir` as P5 crops.

    Unreadable images are skipped and reported, never fatal. Re-running
    produces byte-identical outputs. The emitted records carry the canonical
    landmarks (the crop is, by construction, already aligned).
    """
    root = Path(image_root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if canonical is None:
        canonical = scaled_canonical(size)
    report = AlignReport()
    canon_lm = LandmarkPair(*canonical)

    def job(item):
        i, rec = item
        img = read_pgm(root / rec.path)
        crop = align(img, rec.landmarks, canonical, (size, size))
        name = f"{i:06d}_{rec.subject_id}.pgm"
        write_pgm(out / name, crop)
        return FaceRecord(name, rec.subject_id, canon_lm, rec.mirrored)

    items = list(enumerate(manifest.records))
    results: list[FaceRecord | None] = [None] * len(items)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(job, it): it for it in items}
            for fut, it in futures.items():
                try:
                    results[it[0]] = fut.result()
                except DataError as exc:
                    report.skipped.append((it[1].path, str(exc)))
    else:
        for it in items:
            try:
                results[it[0]] = job(it)
            except DataError as exc:
                report.skipped.append((it[1].path, str(exc)))
    kept = [r for r in results if r is not None]
    report.aligned = len(kept)
    return Manifest(kept, canonical), report


# --------------------------------------------------------------------------
# Synthetic face world

@dataclass(frozen=True)
class SubjectPattern:
    """A smooth canonical-frame intensity function unique to one subject:
    a few oriented gratings plus signed Gaussian blobs, soft-squashed."""

    freqs: np.ndarray
    angles: np.ndarray
    phases: np.ndarray
    amps: np.ndarray
    blob_centers: np.ndarray
    blob_sigmas: np.ndarray
    blob_weights: np.ndarray

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        g = np.zeros(np.broadcast(u, v).shape, dtype=np.float64)
        for f, t, p, a in zip(self.freqs, self.angles, self.phases, self.amps):
            g += a * np.cos(2 * np.pi * f * (np.cos(t) * u + np.sin(t) * v) + p)
        for (cu, cv), s, wgt in zip(self.blob_centers, self.blob_sigmas,
                                    self.blob_weights):
            g += wgt * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s * s))
        return 0.5 + 0.5 * np.tanh(0.9 * g)


def subject_pattern(world_seed: int, subject: int, size: int = CANONICAL_SIZE,
                    freq_range: tuple[float, float] = (0.03, 0.07),
                    n_gratings: int = 4, n_blobs: int = 3) -> SubjectPattern:
    rng = np.random.default_rng([world_seed, 1315423911, subject])
    scale = size / CANONICAL_SIZE
    return SubjectPattern(
        freqs=rng.uniform(freq_range[0], freq_range[1], n_gratings) / scale,
        angles=rng.uniform(0, np.pi, n_gratings),
        phases=rng.uniform(0, 2 * np.pi, n_gratings),
        amps=rng.uniform(0.4, 1.0, n_gratings),
        blob_centers=rng.uniform(0.2 * size, 0.8 * size, (n_blobs, 2)),
        blob_sigmas=rng.uniform(0.08 * size, 0.18 * size, n_blobs),
        blob_weights=rng.uniform(0.6, 1.3, n_blobs) * rng.choice([-1.0, 1.0],
                                                                 n_blobs),
    )


@dataclass(frozen=True)
class Pose:
    """Canonical-to-source similarity: rotation, scale, center placement."""

    rotation: float
    scale: float
    center: tuple[float, float]

    def transform(self, size: int) -> tuple[complex, complex]:
        a = self.scale * np.exp(1j * self.rotation)
        c_can = complex(size / 2.0, size / 2.0)
        return a, complex(*self.center) - a * c_can


def render_source(pattern: SubjectPattern, pose: Pose, source_size: int,
                  canonical_size: int, noise: float,
                  rng=None) -> tuple[np.ndarray, LandmarkPair]:
    """Render the subject under a pose into a source image, returning the
    image and where the canonical landmarks ended up."""
    a, b = pose.transform(canonical_size)
    ys, xs = np.mgrid[0:source_size, 0:source_size].astype(np.float64)
    q = (xs + 1j * ys - b) / a
    img = pattern(q.real, q.imag)
    if noise > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        img = img + rng.normal(0.0, noise, img.shape)
    q1, q2 = scaled_canonical(canonical_size)
    lm = LandmarkPair(apply_similarity(a, b, q1), apply_similarity(a, b, q2))
    return np.clip(img, 0.0, 1.0), lm


def synth_world(num_subjects: int, images_per_subject: int, seed: int,
                out_dir, *, size: int = CANONICAL_SIZE, source_size: int = 160,
                noise: float = 0.02,
                freq_range: tuple[float, float] = (0.03, 0.07)) -> Manifest:
    """Generate a deterministic labeled world of source images + landmarks.

    Each subject is a unique pattern rendered under random similarity jitter
    with pixel noise; aligning a record's image by its landmarks recovers the
    subject's canonical pattern.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for s in range(num_subjects):
        pattern = subject_pattern(seed, s, size, freq_range)
        for j in range(images_per_subject):
            rng = np.random.default_rng([seed, 2654435761, s, j])
            pose = Pose(rotation=rng.uniform(-0.35, 0.35),
                        scale=rng.uniform(0.85, 1.15),
                        center=(source_size / 2 + rng.uniform(-8, 8),
                                source_size / 2 + rng.uniform(-8, 8)))
            img, lm = render_source(pattern, pose, source_size, size, noise, rng)
            name = f"s{s:03d}_{j:03d}.pgm"
            write_pgm(out / name, img)
            records.append(FaceRecord(name, f"s{s:03d}", lm))
    return Manifest(records, scaled_canonical(size))
