"""Semi-automatic dataset construction: seed templates per celebrity,
single-face seed augmentation, per-photo tag-constrained face assignment by
maximum-similarity bipartite matching, minimum-image subject filtering, and
edit-distance name deduplication against an external list.

Faces arrive pre-embedded (any engine can plug in, including a trained
network from this package); photos carry the name tags of the celebrities
they are said to contain.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from .faceproc import CANONICAL_Q1, CANONICAL_Q2, FaceRecord, LandmarkPair, \
    Manifest


# --------------------------------------------------------------------------
# Types

@dataclass
class DetectedFace:
    face_id: str
    embedding: np.ndarray
    path: str | None = None
    landmarks: tuple[float, float, float, float] | None = None


@dataclass
class Photo:
    photo_id: str
    faces: list[DetectedFace]
    tags: list[str]

    def __post_init__(self):
        ids = [f.face_id for f in self.faces]
        if len(set(ids)) != len(ids):
            raise ValueError(f"photo {self.photo_id}: duplicate face ids")
        lengths = {f.embedding.shape for f in self.faces}
        if len(lengths) > 1:
            raise ValueError(f"photo {self.photo_id}: embeddings of mixed"
                             f" lengths {lengths}")


@dataclass
class CelebritySeed:
    celeb_id: str
    name: str
    embeddings: list[np.ndarray]

    def __post_init__(self):
        if not self.embeddings:
            raise ValueError(f"celebrity {self.celeb_id} needs at least one"
                             " seed embedding")


@dataclass
class IdentityCluster:
    celeb_id: str
    faces: list[tuple[str, str]] = field(default_factory=list)
    similarities: list[float] = field(default_factory=list)


class CosineEngine:
    """Default engine: cosine similarity over given embeddings."""

    def embed(self, face_image: np.ndarray) -> np.ndarray:
        return np.asarray(face_image, dtype=np.float64).reshape(-1)

    def similarity(self, a: np.ndarray, b: np.ndarray) -> float:
        na = float(np.linalg.norm(a))
        nb = float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(a @ b) / (na * nb)


class NetworkEngine(CosineEngine):
    """Embeds face crops with a trained network; cosine similarity."""

    def __init__(self, net):
        self.net = net

    def embed(self, face_image: np.ndarray) -> np.ndarray:
        img = face_image[:, :, None] if face_image.ndim == 2 else face_image
        embedding, _ = self.net.forward(img)
        return embedding


@dataclass(frozen=True)
class ForgeConfig:
    threshold: float = 0.5
    aggregate: str = "max"  # or "mean" over a celebrity's seeds
    min_images: int = 15
    dedup_names: tuple[str, ...] = ()
    max_distance: int = 0

    def __post_init__(self):
        if self.aggregate not in ("max", "mean"):
            raise ValueError(f"aggregate must be max or mean, got"
                             f" {self.aggregate!r}")
        if self.min_images < 1:
            raise ValueError("min_images must be >= 1")


def seed_similarity(engine, seed: CelebritySeed, embedding: np.ndarray,
                    aggregate: str = "max") -> float:
    sims = [engine.similarity(embedding, s) for s in seed.embeddings]
    return max(sims) if aggregate == "max" else float(np.mean(sims))


# --------------------------------------------------------------------------
# Pipeline stages

@dataclass
class Assignment:
    photo_id: str
    face_id: str
    celeb_id: str
    similarity: float


def augment_seeds(seeds: list[CelebritySeed], photos: list[Photo],
                  engine=None, threshold: float = 0.5,
                  aggregate: str = "max") -> tuple[list[CelebritySeed],
                                                   list[Assignment]]:
    """Grow each celebrity's seed list from photos with exactly one detected
    face and exactly one tag; multi-tag single-face photos are ambiguous and
    skipped. Sequential: faces accepted early count as seeds for later photos.

    Returns (updated seeds, the accepted face assignments).
    """
    engine = engine or CosineEngine()
    by_id = {s.celeb_id: CelebritySeed(s.celeb_id, s.name, list(s.embeddings))
             for s in seeds}
    accepted = []
    for photo in photos:
        if len(photo.faces) != 1 or len(photo.tags) != 1:
            continue
        tag = photo.tags[0]
        if tag not in by_id:
            raise DataError(f"photo {photo.photo_id}: unknown tag {tag!r}")
        face = photo.faces[0]
        sim = seed_similarity(engine, by_id[tag], face.embedding, aggregate)
        if sim > threshold:
            by_id[tag].embeddings.append(face.embedding)
            accepted.append(Assignment(photo.photo_id, face.face_id, tag, sim))
    return [by_id[s.celeb_id] for s in seeds], accepted


def assign_faces(photo: Photo, seeds: list[CelebritySeed], threshold: float,
                 engine=None,
                 aggregate: str = "max") -> tuple[list[Assignment], list[str]]:
    """Match the photo's faces one-to-one against its name tags, maximizing
    total seed similarity (exact assignment); matches below the threshold are
    dropped and surplus faces stay unassigned."""
    engine = engine or CosineEngine()
    by_id = {s.celeb_id: s for s in seeds}
    tags = list(dict.fromkeys(photo.tags))
    for t in tags:
        if t not in by_id:
            raise DataError(f"photo {photo.photo_id}: unknown tag {t!r}")
    if not photo.faces or not tags:
        return [], [f.face_id for f in photo.faces]
    sim = np.array([[seed_similarity(engine, by_id[t], f.embedding, aggregate)
                     for t in tags] for f in photo.faces])
    rows, cols = linear_sum_assignment(-sim)
    assigned = []
    used = set()
    for r, c in zip(rows, cols):
        if sim[r, c] >= threshold:  # only strictly-below matches are dropped
            assigned.append(Assignment(photo.photo_id, photo.faces[r].face_id,
                                       tags[c], float(sim[r, c])))
            used.add(r)
    unassigned = [f.face_id for i, f in enumerate(photo.faces) if i not in used]
    return assigned, unassigned


def filter_subjects(clusters: list[IdentityCluster],
                    min_images: int) -> list[IdentityCluster]:
    """Drop clusters with fewer than `min_images` assigned faces."""
    if min_images < 1:
        raise ValueError("min_images must be >= 1")
    return [c for c in clusters if len(c.faces) >= min_images]


# --------------------------------------------------------------------------
# Name deduplication

def normalize_name(name: str) -> str:
    """Case-fold, collapse whitespace, strip diacritics."""
    folded = unicodedata.normalize("NFKD", name.casefold())
    stripped = "".join(c for c in folded if not unicodedata.combining(c))
    return " ".join(stripped.split())


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert/delete/substitute over
    normalized names."""
    a = normalize_name(a)
    b = normalize_name(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ca != cb))
        prev = cur
    return prev[len(b)]


def dedup_against(names_internal: list[str], names_external: list[str],
                  max_distance: int = 0) -> list[str]:
    """Internal names within `max_distance` of any external name, in input
    order; with the default 0 this is exact match after normalization."""
    if max_distance == 0:
        ext = {normalize_name(n) for n in names_external}
        return [n for n in names_internal if normalize_name(n) in ext]
    out = []
    for n in names_internal:
        if any(edit_distance(n, e) <= max_distance for e in names_external):
            out.append(n)
    return out


# --------------------------------------------------------------------------
# Whole pipeline

@dataclass
class ForgeReport:
    photos: int
    faces_total: int
    faces_assigned: int
    faces_unassigned: int
    subjects_clustered: int
    subjects_after_min_filter: int
    subjects_removed_as_duplicates: list[str]
    low_confidence: list[Assignment]  # worst assignments, for manual review


@dataclass
class ForgeResult:
    clusters: list[IdentityCluster]
    manifest: Manifest
    report: ForgeReport
    seeds: list[CelebritySeed]


def run_pipeline(photos: list[Photo], seeds: list[CelebritySeed],
                 config: ForgeConfig = ForgeConfig(), engine=None,
                 review_count: int = 20) -> ForgeResult:
    """Seed augmentation, per-photo assignment, min-count filtering, then
    name dedup; emits an aligned-faces manifest and a summary report."""
    engine = engine or CosineEngine()
    faces_total = sum(len(p.faces) for p in photos)

    seeds, assignments = augment_seeds(seeds, photos, engine,
                                       config.threshold, config.aggregate)
    consumed = {a.photo_id for a in assignments}
    unassigned = 0
    for photo in photos:
        if len(photo.faces) == 1 and len(photo.tags) == 1:
            if photo.photo_id not in consumed:
                unassigned += len(photo.faces)  # rejected by the seed check
            continue
        got, left = assign_faces(photo, seeds, config.threshold, engine,
                                 config.aggregate)
        assignments.extend(got)
        unassigned += len(left)

    clusters_by_id: dict[str, IdentityCluster] = {}
    for a in assignments:
        c = clusters_by_id.setdefault(a.celeb_id, IdentityCluster(a.celeb_id))
        c.faces.append((a.photo_id, a.face_id))
        c.similarities.append(a.similarity)
    clusters = [clusters_by_id[k] for k in sorted(clusters_by_id)]

    kept = filter_subjects(clusters, config.min_images)
    name_of = {s.celeb_id: s.name for s in seeds}
    dupes = set(dedup_against([name_of[c.celeb_id] for c in kept],
                              list(config.dedup_names), config.max_distance))
    final = [c for c in kept if name_of[c.celeb_id] not in dupes]

    face_lookup = {(p.photo_id, f.face_id): f for p in photos for f in p.faces}
    records = []
    final_ids = {c.celeb_id for c in final}
    for a in assignments:
        if a.celeb_id not in final_ids:
            continue
        face = face_lookup[(a.photo_id, a.face_id)]
        path = face.path or f"{a.photo_id}#{a.face_id}"
        if face.landmarks is not None:
            lm = LandmarkPair((face.landmarks[0], face.landmarks[1]),
                              (face.landmarks[2], face.landmarks[3]))
        else:
            lm = LandmarkPair(CANONICAL_Q1, CANONICAL_Q2)
        records.append(FaceRecord(path, a.celeb_id, lm))

    worst = sorted(assignments, key=lambda a: a.similarity)[:review_count]
    report = ForgeReport(
        photos=len(photos), faces_total=faces_total,
        faces_assigned=len(assignments), faces_unassigned=unassigned,
        subjects_clustered=len(clusters),
        subjects_after_min_filter=len(kept),
        subjects_removed_as_duplicates=sorted(name_of[c.celeb_id]
                                              for c in kept
                                              if name_of[c.celeb_id] in dupes),
        low_confidence=worst)
    return ForgeResult(final, Manifest(records), report, seeds)


# --------------------------------------------------------------------------
# File formats (JSON lines)

def read_photos(path) -> list[Photo]:
    """One JSON object per line: photo_id, tags, faces[{face_id, embedding,
    path?, landmarks?}]."""
    photos = []
    for lineno, line in enumerate(_lines(path), start=1):
        try:
            obj = json.loads(line)
            faces = [DetectedFace(f["face_id"],
                                  np.asarray(f["embedding"], dtype=np.float64),
                                  f.get("path"),
                                  tuple(f["landmarks"]) if f.get("landmarks")
                                  else None)
                     for f in obj["faces"]]
            photos.append(Photo(obj["photo_id"], faces, list(obj["tags"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"photos file {path} line {lineno}: {exc}") from exc
    return photos


def read_seeds(path) -> list[CelebritySeed]:
    """One JSON object per line: celeb_id, name, seeds (list of vectors)."""
    seeds = []
    for lineno, line in enumerate(_lines(path), start=1):
        try:
            obj = json.loads(line)
            seeds.append(CelebritySeed(
                obj["celeb_id"], obj["name"],
                [np.asarray(v, dtype=np.float64) for v in obj["seeds"]]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"seeds file {path} line {lineno}: {exc}") from exc
    return seeds


def write_photos(photos: list[Photo], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in photos:
            obj = {"photo_id": p.photo_id, "tags": p.tags,
                   "faces": [{k: v for k, v in
                              (("face_id", f.face_id),
                               ("embedding", f.embedding.tolist()),
                               ("path", f.path),
                               ("landmarks", list(f.landmarks)
                                if f.landmarks else None)) if v is not None}
                             for f in p.faces]}
            fh.write(json.dumps(obj) + "\n")


def write_seeds(seeds: list[CelebritySeed], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seeds:
            fh.write(json.dumps({"celeb_id": s.celeb_id, "name": s.name,
                                 "seeds": [list(map(float, v))
                                           for v in s.embeddings]}) + "\n")


def _lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [ln for ln in text.splitlines() if ln.strip()]
