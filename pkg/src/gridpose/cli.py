"""Command-line interface.

Subcommands: sample-views, synth, build-db, train-demo, match, evaluate,
bench. Output is line-oriented and tab-separated where it is meant to be
parsed (one match result per line: object_id, template_index, score). Exit
codes: 0 success, 1 usage error, 2 data error. All behavior is controlled by
flags; only the kernel backend honors the GRIDPOSE_BACKEND environment
variable.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import _kernels, iofmt, retrieval, synthlab, trainer, viewsphere
from .errors import GridPoseError, ParameterError
from .grids import FeatureGrid
from .translation import BBox, Intrinsics, estimate_translation
from .viewsphere import Viewpoint


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="gridpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-views", help="emit a viewpoint codebook")
    p.add_argument("--level", type=int, required=True, help="icosphere subdivision level")
    p.add_argument("--min-z", type=float, default=-1.0, help="hemisphere cut (keep z >= this)")
    p.add_argument("--inplane", type=int, default=1, help="in-plane rotations per viewpoint")
    p.add_argument("--out", required=True, help="output pose codebook (.tpdb)")

    p = sub.add_parser("synth", help="generate a synthetic template set and queries")
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--level", type=int, default=2)
    p.add_argument("--min-z", type=float, default=0.0)
    p.add_argument("--inplane", type=int, default=1)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.1, help="query noise scale")
    p.add_argument("--queries", type=int, default=2, help="queries per object")
    p.add_argument("--occlusion", type=float, default=0.0, help="occluded mask fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build-db", help="embed, normalize and index raw templates")
    p.add_argument("--templates", required=True, help="raw template set (.tpdb)")
    p.add_argument("--embedding", default=None, help="embedding checkpoint (.embd)")
    p.add_argument("--out", required=True, help="output database (.tpdb)")

    p = sub.add_parser("train-demo", help="train an embedding on synthetic objects")
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--level", type=int, default=2)
    p.add_argument("--min-z", type=float, default=0.0)
    p.add_argument("--inplane", type=int, default=1)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--cout", type=int, default=16)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output checkpoint (.embd)")

    p = sub.add_parser("match", help="rank templates for one query grid")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True, help="query grid (.fgrd)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--no-occlusion", action="store_true", help="score without the occlusion mask")
    p.add_argument("--embedding", default=None, help="embed the raw query first")
    p.add_argument("--restrict-object", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--with-translation", action="store_true",
                   help="append tx ty tz (mm) per result; needs the query box flags")
    p.add_argument("--query-box", default=None, help="cx,cy,diag of the query box in px")
    p.add_argument("--query-focal", type=float, default=None)
    p.add_argument("--query-pp", default=None, help="principal point u,v in px")

    p = sub.add_parser("evaluate", help="score a query set against ground truth")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True, help="queries.tsv from synth")
    p.add_argument("--embedding", default=None)
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--no-occlusion", action="store_true")
    p.add_argument("--symmetric", default="", help="comma-separated z-symmetric object ids")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("bench", help="measure matching latency and throughput")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--delta", type=float, default=0.2)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--backend", choices=["auto", "numba", "numpy", "both"], default="auto")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _parse_pair(text: str, flag: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise _UsageError(f"{flag} expects two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _load_embedding(path):
    return None if path is None else iofmt.read_embd(path)


def _maybe_embed(grid: FeatureGrid, embedding) -> FeatureGrid:
    return grid if embedding is None else trainer.embed(grid, embedding)


# --------------------------------------------------------------------------
# subcommand bodies


def _cmd_sample_views(args) -> int:
    views = viewsphere.enumerate_viewpoints(args.level, args.min_z, args.inplane)
    rotations = np.stack([viewsphere.viewpoint_to_rotation(v) for v in views])
    iofmt.write_pose_codebook(args.out, views, rotations)
    print(f"{len(views)}\t{args.out}")
    return 0


def _synth_meta(mask) -> np.ndarray:
    rows, cols = np.nonzero(mask.cells)
    h_span = rows.max() - rows.min() + 1
    w_span = cols.max() - cols.min() + 1
    diag = float(np.hypot(h_span, w_span))
    center_r = (rows.max() + rows.min() + 1) / 2.0 - mask.height / 2.0
    center_c = (cols.max() + cols.min() + 1) / 2.0 - mask.width / 2.0
    # Box center is stored relative to the render principal point.
    return np.array([1000.0, diag, 500.0, center_c, center_r])


def _cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    objects = [
        synthlab.SynthObject.create(
            oid, args.height, args.width, args.channels, master_seed=args.seed
        )
        for oid in range(args.objects)
    ]
    views = viewsphere.enumerate_viewpoints(args.level, args.min_z, args.inplane)
    if not views:
        raise ParameterError("codebook is empty; relax --min-z")

    cells = args.height * args.width
    n_total = len(objects) * len(views)
    object_ids = np.empty(n_total, dtype=np.int64)
    vp_rows = np.empty((n_total, 4))
    rot_rows = np.empty((n_total, 3, 3))
    meta_rows = np.empty((n_total, 5))
    mask_rows = np.empty((n_total, cells), dtype=np.uint8)
    feat_rows = np.empty((n_total, cells, args.channels), dtype=np.float32)
    i = 0
    for obj in objects:
        for vp in views:
            grid, mask = synthlab.render_synth(obj, vp, 0.0)
            object_ids[i] = obj.object_id
            vp_rows[i, :3] = vp.direction
            vp_rows[i, 3] = vp.inplane_deg
            rot_rows[i] = viewsphere.viewpoint_to_rotation(vp)
            meta_rows[i] = _synth_meta(mask)
            mask_rows[i] = mask.cells.reshape(-1)
            feat_rows[i] = grid.cells()
            i += 1
    data = iofmt.TpdbData(
        height=args.height,
        width=args.width,
        channels=args.channels,
        object_ids=object_ids,
        viewpoints=vp_rows,
        rotations=rot_rows,
        metas=meta_rows,
        masks=mask_rows,
        features=feat_rows,
    )
    db_path = os.path.join(args.out, "templates.tpdb")
    iofmt.write_tpdb(db_path, data)

    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 17]))
    tsv_lines = []
    q = 0
    for obj in objects:
        for _ in range(args.queries):
            vp = views[int(rng.integers(len(views)))]
            jitter = trainer.perturb_direction(vp.direction, 2.0, rng)
            qvp = Viewpoint.of(jitter, vp.inplane_deg)
            grid, mask = synthlab.render_synth(
                obj, qvp, args.sigma, seed=int(rng.integers(2**63))
            )
            if args.occlusion > 0.0:
                grid = synthlab.apply_occlusion(
                    grid, mask, args.occlusion, seed=int(rng.integers(2**63))
                )
            name = f"query_{q:04d}.fgrd"
            iofmt.write_fgrd(os.path.join(args.out, name), grid)
            d = qvp.direction
            tsv_lines.append(
                f"{name}\t{obj.object_id}\t{d[0]:.17g}\t{d[1]:.17g}\t{d[2]:.17g}"
                f"\t{qvp.inplane_deg:.17g}"
            )
            q += 1
    with open(os.path.join(args.out, "queries.tsv"), "w") as fh:
        fh.write("\n".join(tsv_lines) + ("\n" if tsv_lines else ""))
    print(f"{n_total}\t{db_path}")
    print(f"{q}\t{os.path.join(args.out, 'queries.tsv')}")
    return 0


def _cmd_build_db(args) -> int:
    data = iofmt.read_tpdb(args.templates)
    embedding = _load_embedding(args.embedding)
    db = retrieval.db_from_tpdb(data, embedding=embedding, normalize=True)
    iofmt.write_tpdb(args.out, retrieval.tpdb_from_db(db))
    print(f"{len(db)}\t{args.out}")
    return 0


def _cmd_train_demo(args) -> int:
    objects = [
        synthlab.SynthObject.create(
            oid, args.height, args.width, args.channels, master_seed=args.seed
        )
        for oid in range(args.objects)
    ]
    views = viewsphere.enumerate_viewpoints(args.level, args.min_z, args.inplane)
    config = trainer.TrainConfig(
        batch_pairs=args.batch,
        learning_rate=args.lr,
        steps=args.steps,
        tau=args.tau,
        seed=args.seed,
    )
    result = trainer.train_demo(
        objects, views, config, noise_sigma=args.sigma, c_out=args.cout
    )
    stride = max(1, args.steps // 10)
    for step in range(0, args.steps, stride):
        print(f"step\t{step}\tloss\t{result.losses[step]:.6f}")
    if args.steps:
        print(f"step\t{args.steps - 1}\tloss\t{result.losses[-1]:.6f}")
    iofmt.write_embd(args.out, result.embedding)
    print(f"embedding\t{args.out}")
    return 0


def _translation_for(db, position, args) -> np.ndarray:
    if args.query_box is None or args.query_focal is None or args.query_pp is None:
        raise _UsageError(
            "--with-translation needs --query-box, --query-focal and --query-pp"
        )
    meta = db.render_meta(position)
    bb_temp = BBox(meta.bb_center_px, meta.bb_diag_px)
    k_temp = Intrinsics(meta.focal_px, (0.0, 0.0))
    parts = args.query_box.split(",")
    if len(parts) != 3:
        raise _UsageError(f"--query-box expects cx,cy,diag, got {args.query_box!r}")
    bb_query = BBox((float(parts[0]), float(parts[1])), float(parts[2]))
    k_query = Intrinsics(args.query_focal, _parse_pair(args.query_pp, "--query-pp"))
    return estimate_translation(meta.t_temp_z_mm, bb_temp, bb_query, k_temp, k_query)


def _cmd_match(args) -> int:
    db = retrieval.db_from_tpdb(iofmt.read_tpdb(args.db))
    embedding = _load_embedding(args.embedding)
    query = _maybe_embed(iofmt.read_fgrd(args.query), embedding)
    result = retrieval.match(
        query,
        db,
        k=args.k,
        delta=args.delta,
        use_occlusion=not args.no_occlusion,
        restrict_object=args.restrict_object,
        threads=args.threads,
    )
    for oid, tidx, score in result.entries:
        line = f"{oid}\t{tidx}\t{score:.6f}"
        if args.with_translation:
            t = _translation_for(db, db.position_of(oid, tidx), args)
            line += f"\t{t[0]:.3f}\t{t[1]:.3f}\t{t[2]:.3f}"
        print(line)
    return 0


def _read_queries_tsv(path: str) -> list[tuple[str, int, Viewpoint]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ParameterError(f"{path}:{lineno}: expected 6 tab-separated fields")
            name, oid, dx, dy, dz, inplane = parts
            rows.append(
                (
                    name,
                    int(oid),
                    Viewpoint.of((float(dx), float(dy), float(dz)), float(inplane)),
                )
            )
    if not rows:
        raise ParameterError(f"{path}: no queries listed")
    return rows


def _cmd_evaluate(args) -> int:
    db = retrieval.db_from_tpdb(iofmt.read_tpdb(args.db))
    embedding = _load_embedding(args.embedding)
    symmetric = {int(x) for x in args.symmetric.split(",") if x.strip() != ""}
    base = os.path.dirname(os.path.abspath(args.queries))

    predictions: list[tuple[int, Viewpoint]] = []
    truth: list[tuple[int, Viewpoint]] = []
    for name, oid, vp in _read_queries_tsv(args.queries):
        grid = _maybe_embed(iofmt.read_fgrd(os.path.join(base, name)), embedding)
        result = retrieval.match(
            grid,
            db,
            k=1,
            delta=args.delta,
            use_occlusion=not args.no_occlusion,
            threads=args.threads,
        )
        best = result.best
        predictions.append(
            (best.object_id, db.viewpoint(db.position_of(best.object_id, best.template_index)))
        )
        truth.append((oid, vp))

    for oid in sorted({t[0] for t in truth}):
        idx = [i for i, t in enumerate(truth) if t[0] == oid]
        preds = [predictions[i] for i in idx]
        gts = [truth[i] for i in idx]
        a = retrieval.acc15(preds, gts, symmetric)
        e = retrieval.mean_pose_error(preds, gts, symmetric)
        print(f"object {oid} Acc15 {a:.4f} MeanErr {e:.2f}")
    a = retrieval.acc15(predictions, truth, symmetric)
    e = retrieval.mean_pose_error(predictions, truth, symmetric)
    print(f"aggregate Acc15 {a:.4f} MeanErr {e:.2f}")
    return 0


def _cmd_bench(args) -> int:
    db = retrieval.db_from_tpdb(iofmt.read_tpdb(args.db))
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 23]))
    picks = rng.integers(len(db), size=args.queries)
    queries = [db.features_at(int(p)) for p in picks]

    if args.backend == "both":
        backends = list(_kernels.available_backends())
    elif args.backend == "auto":
        backends = [_kernels.ACTIVE_BACKEND]
    else:
        backends = [args.backend]

    for backend in backends:
        if backend not in _kernels.available_backends():
            raise ParameterError(f"backend {backend!r} is not available in this install")
        retrieval.match(
            queries[0], db, k=args.k, delta=args.delta,
            threads=args.threads, backend=backend,
        )  # warm-up: JIT compile and page in the arena
        t0 = time.perf_counter()
        for q in queries:
            retrieval.match(
                q, db, k=args.k, delta=args.delta, threads=args.threads, backend=backend
            )
        elapsed = time.perf_counter() - t0
        mean_latency = elapsed / len(queries)
        throughput = len(db) / mean_latency
        print(
            f"backend {backend} threads {args.threads} queries {len(queries)} "
            f"mean_latency_s {mean_latency:.4f} templates_per_s {throughput:.0f}"
        )
    return 0


_COMMANDS = {
    "sample-views": _cmd_sample_views,
    "synth": _cmd_synth,
    "build-db": _cmd_build_db,
    "train-demo": _cmd_train_demo,
    "match": _cmd_match,
    "evaluate": _cmd_evaluate,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GridPoseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
