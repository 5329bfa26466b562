"""Acceptance gate: the eight package-level criteria, each with its stated
tolerance, printing one pass line apiece (run with `pytest -s` to see them;
a failed assert is the fail line).

All expected values here are either fixed architecture constants, computed by
the independent brute-force oracles defined in this file, or statistical
bounds with seeds pinned.
"""

import math
import time

import numpy as np

from facepipe import evaluate as E
from facepipe import faceproc as F
from facepipe import forge
from facepipe import layers as L
from facepipe import network as N
from facepipe import trainer as T
from facepipe.objective import softmax_loss

PARAM_CELLS = {
    "Conv11": "0.28K", "Conv12": "18K", "Conv21": "36K", "Conv22": "72K",
    "Conv31": "108K", "Conv32": "162K", "Conv41": "216K", "Conv42": "288K",
    "Conv51": "360K", "Conv52": "450K", "Fc6": "3305K",
}

OUTPUT_SIZES = {
    "Conv11": (100, 100, 32), "Conv12": (100, 100, 64),
    "Pool1": (50, 50, 64), "Conv21": (50, 50, 64), "Conv22": (50, 50, 128),
    "Pool2": (25, 25, 128), "Conv31": (25, 25, 96), "Conv32": (25, 25, 192),
    "Pool3": (13, 13, 192), "Conv41": (13, 13, 128), "Conv42": (13, 13, 256),
    "Pool4": (7, 7, 256), "Conv51": (7, 7, 160), "Conv52": (7, 7, 320),
    "Pool5": (1, 1, 320), "Dropout": (1, 1, 320), "Fc6": (10575,),
}


def test_criterion_1_architecture_accounting():
    start = time.time()
    spec = N.build_canonical()
    counts, total = N.count_params(spec)
    for name, cell in PARAM_CELLS.items():
        assert N.format_kilo(counts[name]) == cell, name
    assert total == 5_135_328
    assert N.format_kilo(total) == "5015K"
    shapes = dict(spec.activation_shapes())
    for name, want in OUTPUT_SIZES.items():
        assert shapes[name] == want, name
    assert shapes["Pool2"][0] == 25 and shapes["Pool3"][0] == 13
    assert shapes["Pool4"][0] == 7  # both ceil-mode transitions exercised
    elapsed = time.time() - start
    assert elapsed < 1.0
    print(f"\nPASS criterion 1: architecture accounting exact"
          f" (total 5,135,328 scalars) in {elapsed:.3f}s")


def test_criterion_2_gradient_correctness():
    start = time.time()
    cases = [
        ("conv same-pad", lambda r: (L.Convolution(3, 3, 1, 2, 2), (5, 5, 2))),
        ("conv strided", lambda r: (L.Convolution(3, 3, 2, 1, 3,
                                                  same_padding=False),
                                    (6, 6, 1))),
        ("maxpool", lambda r: (L.MaxPool(2, 2), (5, 5, 2))),
        ("avgpool", lambda r: (L.AvgPool(2, 2), (4, 4, 2))),
        ("relu", lambda r: (L.ReLU(), (4, 4, 2))),
        ("dropout", lambda r: (L.Dropout(0.3), (4, 4, 2))),
        ("fc", lambda r: (L.FullyConnected(6, 4), (6,))),
    ]
    worst_overall = 0.0
    for label, make in cases:
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            kind, shape = make(rng)
            x = rng.standard_normal(shape)
            ws = L.weight_shape(kind)
            w = rng.standard_normal(ws) if ws else None
            err = L.grad_check(kind, x, 1e-5, weights=w, mode="train",
                               dropout_seed=seed, probe_seed=seed)
            worst = max(worst, err)
        assert worst < 1e-4, f"{label}: {worst}"
        worst_overall = max(worst_overall, worst)

    # end-to-end on a scaled-down network: softmax-loss gradient of every
    # parameter against central differences
    spec = N.build_small(class_count=3, input_size=16, blocks=((4, 6), (6, 8)))
    net = N.init_weights(spec, seed=2)
    net.mode = "train"
    x = np.random.default_rng(3).random((16, 16, 1))
    label = 1

    def loss():
        return softmax_loss(net.forward_full(x, dropout_seed=5).logits,
                            label)[0]

    trace = net.forward_full(x, dropout_seed=5)
    _, glogits = softmax_loss(trace.logits, label)
    net.zero_grad()
    net.backward(trace, glogits)
    e2e_worst = 0.0
    rng = np.random.default_rng(4)
    for name in net.states:
        flat = net.states[name].weights.ravel()
        grad = net.states[name].grad.ravel()
        # epsilon small enough that no ReLU/maxpool gate flips inside the
        # central-difference interval (the loss is smooth there)
        for i in rng.choice(flat.size, size=min(20, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + 1e-6
            hi = loss()
            flat[i] = orig - 1e-6
            lo = loss()
            flat[i] = orig
            num = (hi - lo) / 2e-6
            err = abs(grad[i] - num) / max(abs(grad[i]), abs(num), 1.0)
            e2e_worst = max(e2e_worst, err)
    assert e2e_worst < 1e-3
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"\nPASS criterion 2: per-layer grad checks < 1e-4"
          f" (worst {worst_overall:.2e}), end-to-end {e2e_worst:.2e} < 1e-3,"
          f" in {elapsed:.1f}s")


def test_criterion_3_desk_scale_training(tmp_path):
    start = time.time()
    # 10 subjects x 52 images: the first 40 per subject train, 12 held out
    man = F.synth_world(10, 52, seed=42, out_dir=tmp_path / "src")
    aligned, rep = F.align_manifest(man, tmp_path / "src", tmp_path / "crop")
    assert rep.aligned == 520
    by_subject: dict[str, list] = {}
    for r in aligned.records:
        by_subject.setdefault(r.subject_id, []).append(r)
    train_recs, test_recs = [], []
    for recs in by_subject.values():
        train_recs += recs[:40]
        test_recs += recs[40:]
    train_man = F.Manifest(train_recs, aligned.canonical)

    spec = N.build_small(class_count=10, input_size=25)
    schedule = T.TrainingSchedule(batch_size=16, epochs=30, seed=11,
                                  subjects_per_batch=4)
    assert T.alpha_at(schedule, 0) == 3.2e-4  # the ramp is engaged
    assert T.alpha_at(schedule, 29) == 6.4e-3
    net, log = T.train(train_man, spec, schedule, tmp_path / "run",
                       image_root=tmp_path / "crop")
    final_softmax = log.mean_softmax(schedule.epochs - 1)
    assert final_softmax < math.log(10), final_softmax

    net.mode = "infer"
    loader = T.manifest_loader(tmp_path / "crop", spec.input_shape)
    emb = {r.path: net.forward(loader(r))[0] for r in test_recs}
    label = {r.path: r.subject_id for r in test_recs}
    ids = [r.path for r in test_recs]
    genuine = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]
               if label[a] == label[b]]
    impostor = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]
                if label[a] != label[b]]
    rng = np.random.default_rng(5)
    folds = [[] for _ in range(10)]
    for k, gi in enumerate(rng.choice(len(genuine), 300, replace=False)):
        folds[k % 10].append((*genuine[gi], True))
    for k, ii in enumerate(rng.choice(len(impostor), 300, replace=False)):
        folds[k % 10].append((*impostor[ii], False))
    scored = [[(E.cosine(emb[a], emb[b]), g) for a, b, g in fold]
              for fold in folds]
    mean, se = E.tenfold_accuracy(scored)
    assert mean > 0.90, mean
    elapsed = time.time() - start
    assert elapsed < 900.0
    print(f"\nPASS criterion 3: final softmax {final_softmax:.3f} < ln(10),"
          f" held-out 10-fold accuracy {100 * mean:.2f}% > 90%,"
          f" in {elapsed:.0f}s")


def _vr_oracle(scores, far):
    genuine = [s for s, g in scores if g]
    impostor = [s for s, g in scores if not g]
    for t in sorted({s for s, _ in scores}) + [float("inf")]:
        if sum(1 for s in impostor if s >= t) / len(impostor) <= far:
            return sum(1 for s in genuine if s >= t) / len(genuine)


def _dir_oracle(gallery, probes, far, rank):
    subj: dict = {}
    for lab, v in gallery:
        subj.setdefault(lab, []).append(v)
    ids = list(subj)
    rows = []
    for lab, v in probes:
        ss = [max(E.cosine(v, g) for g in subj[s]) for s in ids]
        rows.append((lab, lab in subj, max(ss), ss))
    unknown = [r[2] for r in rows if not r[1]]
    thr = None
    for t in sorted({r[2] for r in rows}) + [float("inf")]:
        if sum(1 for u in unknown if u >= t) / len(unknown) <= far:
            thr = t
            break
    hits = total = 0
    for lab, known, best, ss in rows:
        if known:
            total += 1
            mine = ss[ids.index(lab)]
            if sum(1 for s in ss if s > mine) < rank and best >= thr:
                hits += 1
    return hits / total


def _tenfold_oracle(folds):
    accs = []
    for k in range(len(folds)):
        train = [p for j, f in enumerate(folds) if j != k for p in f]
        uniq = sorted({s for s, _ in train})
        cands = [uniq[0] - 1.0] + [(a + b) / 2 for a, b in zip(uniq, uniq[1:])] \
            + [uniq[-1] + 1.0]
        best_acc, best_t = -1.0, None
        for t in cands:
            acc = sum(1 for s, g in train if (s >= t) == g) / len(train)
            if acc > best_acc:
                best_acc, best_t = acc, t
        accs.append(sum(1 for s, g in folds[k] if (s >= best_t) == g)
                    / len(folds[k]))
    mean = sum(accs) / len(accs)
    var = sum((a - mean) ** 2 for a in accs) / (len(accs) - 1)
    return mean, (var ** 0.5) / len(accs) ** 0.5


def test_criterion_4_metric_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(2024)
    tol = 1e-12

    for _ in range(110):
        scores = [(float(x), True) for x in rng.normal(1, 1, rng.integers(2, 15))]
        scores += [(float(x), False) for x in rng.normal(0, 1, rng.integers(2, 30))]
        far = float(rng.choice([0.0, 0.01, 0.1, 0.4, 1.0]))
        assert abs(E.vr_at_far(E.ScoreSet(scores), far)
                   - _vr_oracle(scores, far)) <= tol

    done = 0
    while done < 110:
        d, n_subj = 4, int(rng.integers(3, 6))
        gallery = [(s, rng.normal(0, 1, d)) for s in range(n_subj)
                   for _ in range(int(rng.integers(1, 3)))]
        probes = [(int(rng.integers(n_subj)) if rng.random() < 0.5
                   else int(rng.integers(50, 60)), rng.normal(0, 1, d))
                  for _ in range(12)]
        if not any(p[0] >= 50 for p in probes) \
                or not any(p[0] < n_subj for p in probes):
            continue
        far = float(rng.choice([0.0, 0.1, 0.5, 1.0]))
        rank = int(rng.integers(1, 4))
        assert abs(E.dir_at_far(gallery, probes, far, rank)
                   - _dir_oracle(gallery, probes, far, rank)) <= tol
        done += 1

    for _ in range(110):
        folds = [[(float(rng.normal(g, 1)), bool(g))
                  for g in rng.integers(0, 2, int(rng.integers(3, 10)))]
                 for _ in range(int(rng.integers(2, 5)))]
        if any(not f for f in folds):
            continue
        got = E.tenfold_accuracy(folds)
        want = _tenfold_oracle(folds)
        assert abs(got[0] - want[0]) <= tol and abs(got[1] - want[1]) <= tol

    for _ in range(110):
        na, nb = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        a = [rng.normal(0, 1, 4) for _ in range(na)]
        b = [rng.normal(0, 1, 4) for _ in range(nb)]
        want = sum(E.cosine(x, y) for x in a for y in b) / (na * nb)
        assert abs(E.video_pair_score(a, b, E.cosine) - want) <= tol

    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"\nPASS criterion 4: vr/dir/tenfold/video match brute-force"
          f" oracles on 110 instances each (tol 1e-12) in {elapsed:.1f}s")


def test_criterion_5_joint_bayes_recovery():
    start = time.time()
    rng = np.random.default_rng(1234)
    dim, n_subjects, per_subject = 4, 200, 10
    s_mu_true = np.diag([2.0, 1.0, 0.5, 0.25])
    s_eps_true = np.diag([0.3, 0.5, 1.0, 1.5])
    mus = rng.multivariate_normal(np.zeros(dim), s_mu_true, size=n_subjects)
    x = np.repeat(mus, per_subject, axis=0) + rng.multivariate_normal(
        np.zeros(dim), s_eps_true, size=n_subjects * per_subject)
    labels = np.repeat(np.arange(n_subjects), per_subject)
    model = E.fit_joint_bayes(x, labels, regularization=1e-6)
    err_mu = np.linalg.norm(model.s_mu - s_mu_true) / np.linalg.norm(s_mu_true)
    err_eps = np.linalg.norm(model.s_eps - s_eps_true) \
        / np.linalg.norm(s_eps_true)
    assert err_mu < 0.15, err_mu
    assert err_eps < 0.15, err_eps

    # verification AUC on fresh pairs from the same generator
    def auc(pos, neg):
        allv = np.concatenate([pos, neg])
        order = np.argsort(allv)
        ranks = np.empty(allv.size)
        ranks[order] = np.arange(1, allv.size + 1)
        rp = ranks[: pos.size].sum()  # positives occupy the front slots
        return (rp - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size)

    n = 400
    mu_a = rng.multivariate_normal(np.zeros(dim), s_mu_true, size=n)
    mu_b = rng.multivariate_normal(np.zeros(dim), s_mu_true, size=n)
    x1 = mu_a + rng.multivariate_normal(np.zeros(dim), s_eps_true, size=n)
    x2_same = mu_a + rng.multivariate_normal(np.zeros(dim), s_eps_true, size=n)
    x2_diff = mu_b + rng.multivariate_normal(np.zeros(dim), s_eps_true, size=n)
    jb_auc = auc(np.array([E.jb_score(model, a, b)
                           for a, b in zip(x1, x2_same)]),
                 np.array([E.jb_score(model, a, b)
                           for a, b in zip(x1, x2_diff)]))
    cos_auc = auc(np.array([E.cosine(a, b) for a, b in zip(x1, x2_same)]),
                  np.array([E.cosine(a, b) for a, b in zip(x1, x2_diff)]))
    assert jb_auc > cos_auc, (jb_auc, cos_auc)
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"\nPASS criterion 5: covariances recovered"
          f" (S_mu {100 * err_mu:.1f}%, S_eps {100 * err_eps:.1f}% < 15%),"
          f" AUC jb {jb_auc:.3f} > cosine {cos_auc:.3f}, in {elapsed:.1f}s")


def test_criterion_6_forge_pipeline_fidelity():
    start = time.time()
    rng = np.random.default_rng(77)
    dim, n_celebs = 32, 50

    def unit(v):
        return v / np.linalg.norm(v)

    centers = [unit(rng.normal(0, 1, dim)) for _ in range(n_celebs)]
    distractor_centers = [unit(rng.normal(0, 1, dim)) for _ in range(20)]

    def face(center):
        return unit(center + rng.normal(0, 0.07, dim))

    seeds = [forge.CelebritySeed(f"c{i:03d}", f"Celebrity {i}",
                                 [face(centers[i])]) for i in range(n_celebs)]
    photos, truth = [], {}
    pid = 0
    for i in range(n_celebs):
        for _ in range(3):
            photos.append(forge.Photo(f"p{pid:05d}",
                                      [forge.DetectedFace("f0",
                                                          face(centers[i]))],
                                      [f"c{i:03d}"]))
            truth[(f"p{pid:05d}", "f0")] = f"c{i:03d}"
            pid += 1
    for _ in range(350):
        k = int(rng.integers(2, 4))
        chosen = rng.choice(n_celebs, k, replace=False)
        faces = [forge.DetectedFace(f"f{j}", face(centers[c]))
                 for j, c in enumerate(chosen)]
        for j, c in enumerate(chosen):
            truth[(f"p{pid:05d}", f"f{j}")] = f"c{c:03d}"
        if rng.random() < 0.5:  # planted untagged distractor
            faces.append(forge.DetectedFace(
                f"f{k}", face(distractor_centers[int(rng.integers(20))])))
            truth[(f"p{pid:05d}", f"f{k}")] = None
        photos.append(forge.Photo(f"p{pid:05d}", faces,
                                  [f"c{c:03d}" for c in chosen]))
        pid += 1

    res = forge.run_pipeline(photos, seeds, forge.ForgeConfig(min_images=1))
    tags_of = {p.photo_id: set(p.tags) for p in photos}
    seen = set()
    correct = wrong = 0
    for cluster in res.clusters:
        for key in cluster.faces:
            assert key not in seen, "double assignment"
            seen.add(key)
            assert cluster.celeb_id in tags_of[key[0]], "tag violation"
            t = truth[key]
            assert t is not None, "distractor assigned"
            correct += t == cluster.celeb_id
            wrong += t != cluster.celeb_id
    accuracy = correct / (correct + wrong)
    assert accuracy >= 0.99, accuracy

    # boundary behavior of the filtering and dedup stages
    def cluster_of(n):
        c = forge.IdentityCluster("cX")
        c.faces = [(f"p{i}", "f0") for i in range(n)]
        return c

    kept = forge.filter_subjects([cluster_of(14), cluster_of(15)], 15)
    assert len(kept) == 1 and len(kept[0].faces) == 15
    assert forge.dedup_against(["Ann Lee", "Bo Chen"], ["ann lee"], 0) \
        == ["Ann Lee"]
    assert forge.dedup_against(["Ann Lee"], ["Zed Zed"], 0) == []
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"\nPASS criterion 6: assignment accuracy {100 * accuracy:.2f}%"
          f" >= 99%, no violations, boundary filters exact, in {elapsed:.1f}s")


def test_criterion_7_determinism_and_persistence(tmp_path):
    start = time.time()
    man = F.synth_world(4, 6, seed=5, out_dir=tmp_path / "src")
    aligned, _ = F.align_manifest(man, tmp_path / "src", tmp_path / "crop")
    spec = N.build_small(class_count=4, input_size=25)
    sched = T.TrainingSchedule(batch_size=8, epochs=4, seed=13,
                               subjects_per_batch=2, positives_per_batch=2,
                               negatives_per_batch=2, milestones=(2, 3))

    T.train(aligned, spec, sched, tmp_path / "a", image_root=tmp_path / "crop")
    T.train(aligned, spec, sched, tmp_path / "b", image_root=tmp_path / "crop")
    assert (tmp_path / "a" / "train.log").read_bytes() == \
        (tmp_path / "b" / "train.log").read_bytes()
    for e in range(5):
        name = f"checkpoint-{e:05d}.fpck"
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()

    ckpt = tmp_path / "a" / "checkpoint-00004.fpck"
    reloaded = N.load_checkpoint(ckpt)
    resaved = tmp_path / "resaved.fpck"
    N.save_checkpoint(reloaded, resaved)
    assert resaved.read_bytes() == ckpt.read_bytes()

    import dataclasses
    short = dataclasses.replace(sched, epochs=2)
    T.train(aligned, spec, short, tmp_path / "c", image_root=tmp_path / "crop")
    T.train(aligned, spec, sched, tmp_path / "c", image_root=tmp_path / "crop",
            resume=True)
    assert (tmp_path / "c" / "train.log").read_bytes() == \
        (tmp_path / "a" / "train.log").read_bytes()
    assert (tmp_path / "c" / "checkpoint-00004.fpck").read_bytes() == \
        ckpt.read_bytes()
    elapsed = time.time() - start
    print(f"\nPASS criterion 7: bitwise-identical runs, byte-exact checkpoint"
          f" round trip, resume == uninterrupted, in {elapsed:.1f}s")


def test_criterion_8_alignment_contract(tmp_path):
    start = time.time()
    rng = np.random.default_rng(8)
    q1, q2 = F.CANONICAL_Q1, F.CANONICAL_Q2
    checked = 0
    while checked < 1000:
        p1 = tuple(rng.uniform(0, 300, 2))
        p2 = tuple(rng.uniform(0, 300, 2))
        if np.hypot(p1[0] - p2[0], p1[1] - p2[1]) < 1e-6:
            continue
        a, b = F.solve_similarity(p1, p2, q1, q2)
        m1 = F.apply_similarity(a, b, p1)
        m2 = F.apply_similarity(a, b, p2)
        assert np.hypot(m1[0] - q1[0], m1[1] - q1[1]) <= 0.5
        assert np.hypot(m2[0] - q2[0], m2[1] - q2[1]) <= 0.5
        sep = np.hypot(m2[0] - m1[0], m2[1] - m1[1])
        assert abs(sep - 25.0) <= 0.5
        checked += 1

    img = np.random.default_rng(9).random((50, 70))
    np.testing.assert_array_equal(F.mirror(F.mirror(img)), img)
    man = F.synth_world(3, 5, seed=2, out_dir=tmp_path / "w")
    doubled = F.mirror_manifest(man)
    assert len(doubled) == 2 * len(man) == 30
    assert sum(r.mirrored for r in doubled.records) == 15
    elapsed = time.time() - start
    assert elapsed < 60.0
    print(f"\nPASS criterion 8: 1000 landmark configurations within 0.5 px,"
          f" separation 25 +/- 0.5; mirror involution and doubling exact,"
          f" in {elapsed:.1f}s")
