"""Command-line entry point: forge -> align -> train -> extract -> eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluate as E
from . import faceproc, forge, network, trainer
from .errors import DataError, NumericalError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def cmd_forge(args) -> int:
    photos = forge.read_photos(_require(args.photos, "photos file"))
    seeds = forge.read_seeds(_require(args.seeds, "seeds file"))
    dedup = ()
    if args.dedup_names:
        dedup = tuple(ln.strip() for ln in
                      _require(args.dedup_names, "dedup names file")
                      .read_text(encoding="utf-8").splitlines() if ln.strip())
    config = forge.ForgeConfig(threshold=args.threshold,
                               aggregate=args.aggregate,
                               min_images=args.min_images,
                               dedup_names=dedup,
                               max_distance=args.max_distance)
    if not photos:
        print("warning: empty photo set; emitting empty manifest",
              file=sys.stderr)
    result = forge.run_pipeline(photos, seeds, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    faceproc.write_manifest(result.manifest, out / "manifest.tsv")
    r = result.report
    lines = [f"photos {r.photos}",
             f"faces_total {r.faces_total}",
             f"faces_assigned {r.faces_assigned}",
             f"faces_unassigned {r.faces_unassigned}",
             f"subjects_clustered {r.subjects_clustered}",
             f"subjects_after_min_filter {r.subjects_after_min_filter}",
             f"subjects_removed_as_duplicates"
             f" {len(r.subjects_removed_as_duplicates)}",
             "",
             "lowest-confidence assignments (manual review):"]
    lines += [f"  {a.photo_id} {a.face_id} -> {a.celeb_id}"
              f" sim={a.similarity:.4f}" for a in r.low_confidence]
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "removals.txt").write_text(
        "".join(n + "\n" for n in r.subjects_removed_as_duplicates),
        encoding="utf-8")
    print(f"forged {len(result.clusters)} subjects,"
          f" {len(result.manifest)} faces -> {out}")
    return 0


def cmd_align(args) -> int:
    manifest_path = _require(args.manifest, "manifest")
    manifest, bad = faceproc.read_manifest_lenient(manifest_path)
    for lineno, reason in bad:
        print(f"warning: skipped manifest line {lineno}: {reason}",
              file=sys.stderr)
    root = args.image_root or manifest_path.parent
    aligned, report = faceproc.align_manifest(
        manifest, root, args.out_dir, size=args.size, threads=args.threads)
    for path, reason in report.skipped:
        print(f"warning: skipped {path}: {reason}", file=sys.stderr)
    if args.mirror:
        aligned = faceproc.mirror_manifest(aligned)
    faceproc.write_manifest(aligned, Path(args.out_dir) / "manifest.tsv")
    print(f"aligned {report.aligned} records"
          f" ({len(report.skipped) + len(bad)} skipped),"
          f" manifest rows {len(aligned)}")
    return 0


def cmd_train(args) -> int:
    manifest = faceproc.read_manifest(_require(args.manifest, "manifest"))
    spec = network.spec_from_text(
        _require(args.spec, "spec file").read_text(encoding="utf-8"))
    schedule = trainer.schedule_from_text(
        _require(args.schedule, "schedule file").read_text(encoding="utf-8"))
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:  # flags take precedence over the config file
        from dataclasses import replace
        schedule = replace(schedule, **overrides)
    root = args.image_root or Path(args.manifest).parent
    net, log = trainer.train(manifest, spec, schedule, args.out_dir,
                             image_root=root, resume=args.resume)
    last = log.records[-1] if log.records else None
    tail = (f", final total loss {last.total:.4f}" if last else "")
    print(f"trained to epoch {net.epoch}{tail}; checkpoints in {args.out_dir}")
    return 0


def cmd_extract(args) -> int:
    net = network.load_checkpoint(_require(args.checkpoint, "checkpoint"))
    net.mode = "infer"
    manifest_path = _require(args.manifest, "manifest")
    manifest = faceproc.read_manifest(manifest_path)
    root = args.image_root or manifest_path.parent
    loader = trainer.manifest_loader(root, net.spec.input_shape)

    def embed(rec):
        embedding, _ = net.forward(loader(rec))
        return embedding

    recs = manifest.records
    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            vecs = list(pool.map(embed, recs))
    else:
        vecs = [embed(rec) for rec in recs]
    rows = [(rec.path + ("#m" if rec.mirrored else ""), vec)
            for rec, vec in zip(recs, vecs)]
    E.write_embeddings(args.out, rows)
    print(f"wrote {len(rows)} embeddings of dim"
          f" {net.spec.embedding_dim()} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.protocol in ("pairs", "video"):
        emb = E.read_embeddings(_require(args.embeddings, "embeddings file"),
                                video=args.protocol == "video")
        folds = E.read_pair_folds(_require(args.pairs, "pairs file"))
        labels = E.read_labels(_require(args.labels, "labels file")) \
            if args.labels else None
        protocol = E.PairProtocol(folds, emb, labels,
                                  video=args.protocol == "video")
        fit_emb = fit_labels = None
        if args.fit_embeddings:
            table = E.read_embeddings(_require(args.fit_embeddings,
                                               "fit embeddings file"))
            ids = sorted(table)
            fit_emb = np.asarray([table[i] for i in ids])
            if args.fit_labels:
                lab = E.read_labels(_require(args.fit_labels,
                                             "fit labels file"))
                fit_labels = [lab[i] for i in ids]
        report = E.run_scheme(args.scheme, protocol, fit_emb, fit_labels,
                              pca_dim=args.pca_dim, jb_reg=args.jb_reg)
        print(report.line())
        for k, acc in enumerate(report.fold_accuracies):
            print(f"  fold {k}: {100 * acc:.2f} %")
        return 0
    # open-set protocol
    emb = E.read_embeddings(_require(args.embeddings, "embeddings file"))
    labels = E.read_labels(_require(args.labels, "labels file"))
    trials = E.read_openset_trials(_require(args.trials, "trials file"))
    vr, dir_ = E.run_openset(trials, emb, labels, far_vr=args.far_vr,
                             far_dir=args.far_dir, rank=args.rank)
    print(f"VR@FAR={100 * args.far_vr:g}%: {100 * vr.reported:.2f} %"
          f" (mu {100 * vr.mu:.2f}, sigma {100 * vr.sigma:.2f})")
    print(f"DIR@FAR={100 * args.far_dir:g}% rank={args.rank}:"
          f" {100 * dir_.reported:.2f} %"
          f" (mu {100 * dir_.mu:.2f}, sigma {100 * dir_.sigma:.2f})")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="facepipe",
                     description="face representation pipeline toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="cluster tagged photos into identities")
    p.add_argument("--photos", required=True, help="photos JSONL file")
    p.add_argument("--seeds", required=True, help="celebrity seeds JSONL file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.5,
                   help="seed-similarity acceptance threshold")
    p.add_argument("--aggregate", choices=("max", "mean"), default="max")
    p.add_argument("--min-images", type=int, default=15)
    p.add_argument("--dedup-names", help="file of external names, one per line")
    p.add_argument("--max-distance", type=int, default=0,
                   help="edit-distance radius for name dedup")
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("align", help="warp faces to the canonical crop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root", help="defaults to the manifest directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=faceproc.CANONICAL_SIZE)
    p.add_argument("--mirror", action="store_true",
                   help="double the manifest with mirrored twins")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("train", help="train a network on an aligned manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--spec", required=True, help="network spec text file")
    p.add_argument("--schedule", required=True,
                   help="training schedule key=value file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int, help="override the schedule file")
    p.add_argument("--seed", type=int, help="override the schedule file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write embeddings for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-root")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--scheme", choices=tuple("ABCDE"), default="A")
    p.add_argument("--protocol", choices=("pairs", "video", "openset"),
                   default="pairs")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pairs", help="fold/pair list (pairs and video)")
    p.add_argument("--labels", help="id -> subject file")
    p.add_argument("--trials", help="open-set trial file")
    p.add_argument("--fit-embeddings", help="external corpus (schemes B, C)")
    p.add_argument("--fit-labels", help="corpus labels (scheme C)")
    p.add_argument("--pca-dim", type=int)
    p.add_argument("--jb-reg", type=float, default=1e-4)
    p.add_argument("--far-vr", type=float, default=0.001)
    p.add_argument("--far-dir", type=float, default=0.01)
    p.add_argument("--rank", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval":
        if args.protocol in ("pairs", "video") and not args.pairs:
            parser.error("--pairs is required for the pairs/video protocols")
        if args.protocol == "openset" and not (args.trials and args.labels):
            parser.error("--trials and --labels are required for openset")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"facepipe: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"facepipe: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
