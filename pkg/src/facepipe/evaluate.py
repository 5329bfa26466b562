"""Verification and open-set identification metrics plus the post-processing
schemes built on them.

Protocols covered:
  * 10-fold pair verification, reporting mean accuracy and the standard error
    of the mean; the decision threshold for each held-out fold maximizes
    accuracy on the other folds.
  * Verification rate at a false-accept rate (VR@FAR) and open-set
    detection-and-identification rate (DIR@FAR, rank r), aggregated over
    trials as mu - sigma.
  * Video pair scoring: the mean score over the frame cross product.

Threshold conventions: a score equal to the threshold passes, everywhere.
FAR-anchored thresholds (VR, DIR) are the smallest member of the
observed-score set (plus a +inf sentinel) whose impostor/unknown pass-rate is
<= the requested FAR, so the realized FAR never overshoots and the metrics
are invariant under any strictly increasing transformation of the scores.
Accuracy-anchored thresholds (the 10-fold protocol) instead use midpoints
between consecutive training scores, so a clean separation generalizes to
held-out scores inside the gap; those are exactly invariant under positive
affine transformations.

Scheme letters: A scores raw embeddings with cosine; B/C transform with PCA /
Joint Bayes fitted on an external corpus; D/E fit the same transforms on the
protocol's own training split, fold by fold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError, ShapeError


# --------------------------------------------------------------------------
# Scores and basic scorers

@dataclass
class ScoreSet:
    """Labeled similarity scores: (score, genuine) pairs."""

    scores: list[tuple[float, bool]] = field(default_factory=list)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        g = np.array([s for s, ok in self.scores if ok], dtype=np.float64)
        i = np.array([s for s, ok in self.scores if not ok], dtype=np.float64)
        return g, i


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError("cosine operands differ", expected=a.shape,
                         actual=b.shape)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of a zero-norm vector is undefined")
    return float(a @ b) / (na * nb)


def video_pair_score(frames_a, frames_b, scorer) -> float:
    """Mean of `scorer` over the cross product of the two frame sets."""
    if not len(frames_a) or not len(frames_b):
        raise ValueError("video pair scoring needs nonempty frame sets")
    total = 0.0
    for fa in frames_a:
        for fb in frames_b:
            total += scorer(fa, fb)
    return total / (len(frames_a) * len(frames_b))


# --------------------------------------------------------------------------
# Threshold metrics

def _threshold_at_far(pass_scores: np.ndarray, candidates: np.ndarray,
                      far: float) -> float:
    """Smallest candidate whose pass-rate (score >= t) is <= far."""
    srt = np.sort(pass_scores)
    n = srt.size
    passing = n - np.searchsorted(srt, candidates, side="left")
    ok = np.flatnonzero(passing / n <= far)
    return float(candidates[ok[0]])


def vr_at_far(scores: ScoreSet, far: float) -> float:
    """Genuine pass-rate at the most permissive threshold that keeps the
    impostor pass-rate at or below `far`."""
    genuine, impostor = scores.split()
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("vr_at_far needs both genuine and impostor scores")
    candidates = np.append(np.unique(np.concatenate([genuine, impostor])),
                           np.inf)
    thr = _threshold_at_far(impostor, candidates, far)
    return float(np.mean(genuine >= thr))


def dir_at_far(gallery: list[tuple[object, np.ndarray]],
               probes: list[tuple[object, np.ndarray]],
               far: float, rank: int = 1, scorer=cosine) -> float:
    """Open-set identification: the fraction of known probes whose correct
    subject is within the top `rank` gallery subjects (strictly-better
    subjects counted) and whose best score passes the threshold set so that
    at most `far` of the unknown probes pass.
    """
    if not gallery:
        raise ValueError("empty gallery")
    subjects: dict[object, list[np.ndarray]] = {}
    for label, vec in gallery:
        subjects.setdefault(label, []).append(vec)
    subject_ids = list(subjects)

    known = []
    unknown_best = []
    best_all = []
    for label, vec in probes:
        per_subject = np.array([max(scorer(vec, g) for g in subjects[s])
                                for s in subject_ids])
        best = float(per_subject.max())
        best_all.append(best)
        if label in subjects:
            mine = float(per_subject[subject_ids.index(label)])
            better = int(np.sum(per_subject > mine))
            known.append((best, better < rank))
        else:
            unknown_best.append(best)
    if not unknown_best:
        raise ValueError("no unknown-subject probes; threshold undefined")
    if not known:
        raise ValueError("no known-subject probes")
    candidates = np.append(np.unique(np.array(best_all)), np.inf)
    thr = _threshold_at_far(np.array(unknown_best), candidates, far)
    hits = sum(1 for best, in_rank in known if in_rank and best >= thr)
    return hits / len(known)


def _best_threshold(scores: np.ndarray, genuine: np.ndarray) -> float:
    """Accuracy-maximizing threshold for the rule `score >= t -> genuine`.

    Candidates are the midpoints between consecutive distinct scores plus an
    accept-all and a reject-all sentinel, so held-out scores falling between
    the training classes land on the permissive side of a separating gap.
    Ties go to the smallest (most permissive) candidate.
    """
    s = np.unique(scores)
    mids = (s[:-1] + s[1:]) / 2.0
    candidates = np.concatenate([[s[0] - 1.0], mids, [s[-1] + 1.0]])
    pred = scores[None, :] >= candidates[:, None]
    acc = np.mean(pred == genuine[None, :], axis=1)
    return float(candidates[int(np.argmax(acc))])


def fold_accuracies(folds: list[list[tuple[float, bool]]]) -> list[float]:
    """Held-out accuracy per fold, each judged at the threshold maximizing
    accuracy on the concatenation of the other folds."""
    if len(folds) < 2:
        raise ValueError("need at least 2 folds")
    for k, f in enumerate(folds):
        if not f:
            raise ValueError(f"fold {k} is empty")
    accs = []
    for k in range(len(folds)):
        train = [p for j, f in enumerate(folds) if j != k for p in f]
        ts = np.array([s for s, _ in train])
        tg = np.array([g for _, g in train])
        thr = _best_threshold(ts, tg)
        es = np.array([s for s, _ in folds[k]])
        eg = np.array([g for _, g in folds[k]])
        accs.append(float(np.mean((es >= thr) == eg)))
    return accs


def tenfold_accuracy(folds: list[list[tuple[float, bool]]]
                     ) -> tuple[float, float]:
    """Cross-validated verification accuracy over score folds: (mean
    accuracy, standard error of the mean over folds)."""
    arr = np.array(fold_accuracies(folds))
    se = float(arr.std(ddof=1) / np.sqrt(arr.size))
    return float(arr.mean()), se


@dataclass(frozen=True)
class TrialReport:
    values: tuple[float, ...]
    mu: float
    sigma: float
    reported: float  # mu - sigma


def aggregate_trials(values) -> TrialReport:
    vals = tuple(float(v) for v in values)
    if len(vals) < 2:
        raise ValueError("need at least 2 trials")
    arr = np.array(vals)
    mu = float(arr.mean())
    sigma = float(arr.std(ddof=1))
    return TrialReport(vals, mu, sigma, mu - sigma)


# --------------------------------------------------------------------------
# PCA

@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (d, k), orthonormal columns
    retained_dim: int
    explained: np.ndarray


def fit_pca(embeddings: np.ndarray, retained_dim: int | None = None,
            variance: float = 0.95) -> PcaModel:
    """Principal components of the rows of `embeddings` by eigenvalue.

    With `retained_dim` unset, keeps the smallest dimension preserving
    `variance` of the total. Components with eigenvalues at numerical zero
    are always discarded (rank truncation). Each basis column is oriented so
    its largest-magnitude entry is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    keep = evals > max(evals[0], 0.0) * 1e-12
    evals, evecs = evals[keep], evecs[:, keep]
    if retained_dim is None:
        frac = np.cumsum(evals) / np.sum(evals)
        retained_dim = int(np.searchsorted(frac, variance) + 1)
    retained_dim = min(retained_dim, evals.size)
    basis = evecs[:, :retained_dim].copy()
    for j in range(basis.shape[1]):
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] = -basis[:, j]
    return PcaModel(mean, basis, retained_dim, evals[:retained_dim])


def apply_pca(model: PcaModel, v: np.ndarray) -> np.ndarray:
    """Project one vector or a stack of row vectors."""
    return (np.asarray(v, dtype=np.float64) - model.mean) @ model.basis


# --------------------------------------------------------------------------
# Joint Bayes

@dataclass
class JointBayesModel:
    """Gaussian identity/intra-personal decomposition x = mu + eps with
    mu ~ N(0, S_mu), eps ~ N(0, S_eps), plus the precomputed log-likelihood
    ratio matrices for pair scoring."""

    mean: np.ndarray
    s_mu: np.ndarray
    s_eps: np.ndarray
    ratio_a: np.ndarray = field(init=False)
    ratio_g: np.ndarray = field(init=False)
    ratio_const: float = field(init=False)

    def __post_init__(self):
        t = self.s_mu + self.s_eps
        try:
            t_inv = np.linalg.inv(t)
            schur = t - self.s_mu @ t_inv @ self.s_mu
            p = np.linalg.inv(schur)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"total covariance singular: {exc}") from exc
        g = -t_inv @ self.s_mu @ p
        a = p - t_inv
        self.ratio_a = (a + a.T) / 2.0
        self.ratio_g = (g + g.T) / 2.0
        sign_s, logdet_same = np.linalg.slogdet(schur)
        sign_t, logdet_t = np.linalg.slogdet(t)
        if sign_s <= 0 or sign_t <= 0:
            raise NumericalError("covariance log-determinants undefined")
        # logdet Sigma_same = logdet T + logdet Schur; Sigma_diff = 2 logdet T
        self.ratio_const = -0.5 * (logdet_same - logdet_t)


def fit_joint_bayes(embeddings: np.ndarray, labels, regularization: float = 1e-6,
                    max_iter: int = 200, tol: float = 1e-5) -> JointBayesModel:
    """EM estimation of S_mu and S_eps from labeled embeddings.

    The E-step uses the exact posterior over the identity component given
    all of a subject's samples (including its covariance, grouped by sample
    count); the M-step averages the posterior second moments.
    `regularization` is added to the diagonal of S_eps each iteration.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    mean = x.mean(axis=0)
    xc = x - mean
    d = x.shape[1]

    groups: dict[object, np.ndarray] = {}
    for lab in np.unique(labels):
        groups[lab] = xc[labels == lab]
    if len(groups) < 2:
        raise ValueError("joint bayes needs at least 2 subjects")
    if max(len(g) for g in groups.values()) < 2:
        raise ValueError("joint bayes needs some subject with >= 2 samples;"
                         " S_eps is unidentifiable otherwise")

    means = np.stack([g.mean(axis=0) for g in groups.values()])
    s_mu = np.cov(means.T, bias=True).reshape(d, d)
    within = np.concatenate([g - g.mean(axis=0) for g in groups.values()])
    s_eps = (within.T @ within) / within.shape[0] + regularization * np.eye(d)

    by_count: dict[int, list[np.ndarray]] = {}
    for g in groups.values():
        by_count.setdefault(len(g), []).append(g)

    n_total = xc.shape[0]
    n_classes = len(groups)
    for _ in range(max_iter):
        try:
            eps_inv = np.linalg.inv(s_eps)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"S_eps singular despite regularization:"
                                 f" {exc}") from exc
        mu_acc = np.zeros((d, d))
        eps_acc = np.zeros((d, d))
        for m, members in by_count.items():
            # posterior covariance of mu given m samples, via the identity
            # (S_mu^-1 + m S_eps^-1)^-1 = S_mu - S_mu (S_mu + S_eps/m)^-1 S_mu
            try:
                mid = np.linalg.inv(s_mu + s_eps / m)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"S_mu estimate ill-conditioned:"
                                     f" {exc}") from exc
            post_cov = s_mu - s_mu @ mid @ s_mu
            proj = post_cov @ eps_inv
            for g in members:
                mu_hat = proj @ g.sum(axis=0)
                eps_hat = g - mu_hat
                mu_acc += post_cov + np.outer(mu_hat, mu_hat)
                eps_acc += m * post_cov + eps_hat.T @ eps_hat
        new_mu = mu_acc / n_classes
        new_eps = eps_acc / n_total + regularization * np.eye(d)
        change = (np.linalg.norm(new_mu - s_mu) + np.linalg.norm(new_eps - s_eps)) \
            / (np.linalg.norm(s_mu) + np.linalg.norm(s_eps))
        s_mu, s_eps = new_mu, new_eps
        if change < tol:
            break
    return JointBayesModel(mean, s_mu, s_eps)


def jb_score(model: JointBayesModel, x1: np.ndarray, x2: np.ndarray) -> float:
    """Log-likelihood ratio log P(x1,x2|same) - log P(x1,x2|different).

    Evaluated so that swapping the arguments gives the bitwise-identical
    result.
    """
    if x1.shape != x2.shape or x1.shape != model.mean.shape:
        raise ShapeError("jb_score operand shape", expected=model.mean.shape,
                         actual=(x1.shape, x2.shape))
    a = x1 - model.mean
    b = x2 - model.mean
    quad = float(a @ (model.ratio_a @ a)) + float(b @ (model.ratio_a @ b))
    cross = float(a @ (model.ratio_g @ b)) + float(b @ (model.ratio_g @ a))
    return -0.5 * (quad + cross) + model.ratio_const


# --------------------------------------------------------------------------
# Protocols and schemes

@dataclass
class PairProtocol:
    """Verification folds of (id_a, id_b, genuine) over an embedding table.

    `labels` maps ids to subjects and is required by scheme E (and C when the
    fit corpus is the protocol itself). For video protocols, each id keys a
    list of frame embeddings instead of one vector.
    """

    folds: list[list[tuple[str, str, bool]]]
    embeddings: dict[str, np.ndarray]
    labels: dict[str, str] | None = None
    video: bool = False


@dataclass(frozen=True)
class SchemeReport:
    scheme: str
    mean_accuracy: float
    se: float
    fold_accuracies: tuple[float, ...]

    def line(self) -> str:
        return (f"scheme {self.scheme}: accuracy"
                f" {100 * self.mean_accuracy:.2f} +/- {100 * self.se:.2f} %")


def _pair_scorer_for(scheme: str, protocol: PairProtocol, train_ids,
                     fit_embeddings, fit_labels, pca_dim, jb_reg):
    """Build an id-pair scorer for one evaluation fold."""
    emb = protocol.embeddings

    def gather(ids):
        if protocol.video:
            rows, labs = [], []
            for i in ids:
                for frame in emb[i]:
                    rows.append(frame)
                    labs.append(protocol.labels[i] if protocol.labels else None)
            return np.asarray(rows), labs
        rows = np.asarray([emb[i] for i in ids])
        labs = [protocol.labels[i] if protocol.labels else None for i in ids]
        return rows, labs

    def lift(vec_scorer):
        if protocol.video:
            return lambda i, j: video_pair_score(emb[i], emb[j], vec_scorer)
        return lambda i, j: vec_scorer(emb[i], emb[j])

    if scheme == "A":
        return lift(cosine)
    if scheme in ("B", "C"):
        if fit_embeddings is None or (scheme == "C" and fit_labels is None):
            raise DataError(f"scheme {scheme} needs a fit corpus"
                            + (" with labels" if scheme == "C" else ""))
        if scheme == "B":
            model = fit_pca(fit_embeddings, pca_dim)
            return lift(lambda u, v: cosine(apply_pca(model, u),
                                            apply_pca(model, v)))
        jb = fit_joint_bayes(fit_embeddings, fit_labels, jb_reg)
        return lift(lambda u, v: jb_score(jb, u, v))
    if scheme in ("D", "E"):
        rows, labs = gather(sorted(train_ids))
        if scheme == "D":
            model = fit_pca(rows, pca_dim)
            return lift(lambda u, v: cosine(apply_pca(model, u),
                                            apply_pca(model, v)))
        if protocol.labels is None:
            raise DataError("scheme E needs subject labels for the protocol"
                            " training split")
        jb = fit_joint_bayes(rows, labs, jb_reg)
        return lift(lambda u, v: jb_score(jb, u, v))
    raise ValueError(f"unknown scheme {scheme!r}; use A-E")


def run_scheme(scheme: str, protocol: PairProtocol, fit_embeddings=None,
               fit_labels=None, *, pca_dim: int | None = None,
               jb_reg: float = 1e-4) -> SchemeReport:
    """Evaluate one lettered scheme under the 10-fold pair protocol.

    A/B/C build a single scorer (B and C fitted on the external corpus);
    D and E refit on the training folds for every held-out fold.
    """
    per_fold_scores: list[list[tuple[float, bool]]] = []
    global_scorer = None
    if scheme in ("A", "B", "C"):
        global_scorer = _pair_scorer_for(scheme, protocol, None,
                                         fit_embeddings, fit_labels,
                                         pca_dim, jb_reg)
    for k, fold in enumerate(protocol.folds):
        if global_scorer is not None:
            scorer = global_scorer
        else:
            train_ids = {i for j, f in enumerate(protocol.folds) if j != k
                         for (a, b, _) in f for i in (a, b)}
            scorer = _pair_scorer_for(scheme, protocol, train_ids,
                                      fit_embeddings, fit_labels,
                                      pca_dim, jb_reg)
        per_fold_scores.append([(scorer(a, b), genuine)
                                for a, b, genuine in fold])
    accs = fold_accuracies(per_fold_scores)
    mean, se = tenfold_accuracy(per_fold_scores)
    return SchemeReport(scheme, mean, se, tuple(accs))


# --------------------------------------------------------------------------
# Open-set trials (BLUFR-style desk-scale protocol)

@dataclass
class OpenSetTrial:
    test_ids: list[str] = field(default_factory=list)
    gallery_ids: list[str] = field(default_factory=list)
    probe_ids: list[str] = field(default_factory=list)


def run_openset(trials: list[OpenSetTrial], embeddings: dict[str, np.ndarray],
                labels: dict[str, str], *, far_vr: float = 0.001,
                far_dir: float = 0.01, rank: int = 1,
                scorer=cosine) -> tuple[TrialReport, TrialReport]:
    """Per trial: VR@FAR over all test-id pairs and DIR@FAR rank-r over the
    gallery/probe split; both aggregated over trials as mu - sigma."""
    vr_vals, dir_vals = [], []
    for t in trials:
        ids = t.test_ids
        scores = ScoreSet([(scorer(embeddings[a], embeddings[b]),
                            labels[a] == labels[b])
                           for i, a in enumerate(ids) for b in ids[i + 1:]])
        vr_vals.append(vr_at_far(scores, far_vr))
        gallery = [(labels[g], embeddings[g]) for g in t.gallery_ids]
        probes = [(labels[p], embeddings[p]) for p in t.probe_ids]
        dir_vals.append(dir_at_far(gallery, probes, far_dir, rank, scorer))
    return aggregate_trials(vr_vals), aggregate_trials(dir_vals)


# --------------------------------------------------------------------------
# File formats

def write_embeddings(path, rows: list[tuple[str, np.ndarray]]) -> None:
    """One line per vector: id then the values, whitespace-delimited."""
    with open(path, "w", encoding="utf-8") as fh:
        for name, vec in rows:
            fh.write(name + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def read_embeddings(path, video: bool = False):
    """Inverse of write_embeddings; with video=True repeated ids stack into
    frame lists."""
    table: dict[str, list[np.ndarray]] = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path} line {lineno}: expected id + values")
        vec = np.array([float(v) for v in parts[1:]])
        table.setdefault(parts[0], []).append(vec)
    if video:
        return table
    dupes = [k for k, v in table.items() if len(v) > 1]
    if dupes:
        raise DataError(f"{path}: duplicate ids {dupes[:3]}; use the video"
                        " protocol for multi-frame ids")
    return {k: v[0] for k, v in table.items()}


def read_labels(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path} line {lineno}: expected 'id subject'")
        out[parts[0]] = parts[1]
    return out


def read_pair_folds(path) -> list[list[tuple[str, str, bool]]]:
    """Lines of 'fold id_a id_b 0|1'; folds numbered from 0, contiguous."""
    folds: dict[int, list[tuple[str, str, bool]]] = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split()
        if len(parts) != 4 or parts[3] not in ("0", "1"):
            raise DataError(f"{path} line {lineno}: expected"
                            " 'fold id_a id_b 0|1'")
        folds.setdefault(int(parts[0]), []).append(
            (parts[1], parts[2], parts[3] == "1"))
    return [folds[k] for k in sorted(folds)]


def read_openset_trials(path) -> list[OpenSetTrial]:
    """Lines of 'trial role id' with role in test|gallery|probe."""
    trials: dict[int, OpenSetTrial] = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split()
        if len(parts) != 3 or parts[1] not in ("test", "gallery", "probe"):
            raise DataError(f"{path} line {lineno}: expected"
                            " 'trial test|gallery|probe id'")
        t = trials.setdefault(int(parts[0]), OpenSetTrial())
        getattr(t, parts[1] + "_ids").append(parts[2])
    return [trials[k] for k in sorted(trials)]


def _read_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [ln for ln in text.splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
