"""Command-line surface.

Subcommands: synth, train, extract, eval, ablate, gradcheck. Exit codes:
0 success, 1 usage error, 2 data/format error. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import dataio, evaluation, synth, training
from .checks import head_gradient_check, op_smoke_checks
from .config import load_config
from .tensor import ShapeError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--ids", type=int, required=True, help="training identities")
    p.add_argument("--eval-ids", type=int, default=10, help="held-out identities")
    p.add_argument("--imgs", type=int, default=12, help="images per identity")
    p.add_argument("--height", type=int, default=12)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--shared-prob", type=float, default=0.3)
    p.add_argument("--pool-size", type=int, default=4)
    p.add_argument("--clutter-prob", type=float, default=0.15)
    p.add_argument("--occlusion-prob", type=float, default=0.1)
    p.add_argument("--cameras", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the head on a manifest")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="embed a split with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=dataio.SPLITS)
    p.add_argument("--out", required=True, help="embedding file (RIDE)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="score query embeddings against a gallery")
    p.add_argument("--query-emb", required=True)
    p.add_argument("--gallery-emb", required=True)
    p.add_argument("--max-rank", type=int, default=50)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the architecture grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="text table path (JSON written alongside)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--full", action="store_true",
                   help="acceptance-scale head check (C=64, c=32, batch 8)")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        n_ids=args.ids, imgs_per_id=args.imgs, n_eval_ids=args.eval_ids,
        height=args.height, width=args.width, channels=args.channels,
        noise_sigma=args.noise, shared_attribute_prob=args.shared_prob,
        shared_pool_size=args.pool_size, clutter_row_prob=args.clutter_prob,
        occlusion_band_prob=args.occlusion_prob, n_cameras=args.cameras, seed=args.seed)
    manifest_path = synth.generate(spec, args.out, overwrite=args.overwrite)
    manifest = dataio.load_manifest(manifest_path)
    print(f"wrote {manifest_path}: {manifest.counts()}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = dataio.load_manifest(args.data)
    result = training.train(cfg, manifest, out_path=args.out)
    history_path = args.out + ".history.json"
    with open(history_path, "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "history": result.history}, fh, indent=1)
        fh.write("\n")
    final = result.history[-1]
    print(f"wrote {args.out} (final loss {final['total']:.4f}); history in {history_path}")
    return 0


def cmd_extract(args) -> int:
    cfg, params, _, _ = training.load_trained(args.checkpoint)
    manifest = dataio.load_manifest(args.data)
    emb = evaluation.embed_all(cfg, params, manifest, args.split)
    dataio.write_embeddings(args.out, emb.features, {
        "ids": emb.ids,
        "person_ids": [int(v) for v in emb.person_ids],
        "camera_ids": [int(v) for v in emb.camera_ids],
        "split": emb.split,
        "config": cfg.to_dict(),
    })
    print(f"wrote {args.out}: {emb.features.shape[0]} x {emb.features.shape[1]}")
    return 0


def cmd_eval(args) -> int:
    q_mat, q_meta = dataio.read_embeddings(args.query_emb)
    g_mat, g_meta = dataio.read_embeddings(args.gallery_emb)
    if q_mat.shape[1] != g_mat.shape[1]:
        raise ShapeError(f"embedding dims disagree: query {q_mat.shape[1]} "
                         f"vs gallery {g_mat.shape[1]}")
    dist = evaluation.distance_matrix(q_mat, g_mat)
    result = evaluation.evaluate(dist, np.asarray(q_meta["person_ids"]),
                                 np.asarray(q_meta["camera_ids"]),
                                 np.asarray(g_meta["person_ids"]),
                                 np.asarray(g_meta["camera_ids"]), max_rank=args.max_rank)
    report = result.to_dict(config=q_meta.get("config"))
    print(f"valid queries: {result.n_valid_queries}")
    print(f"mAP    : {result.map_score:.4f}")
    for k in (1, 5, 10):
        if k <= len(result.cmc):
            print(f"rank-{k:<2}: {result.cmc[k - 1]:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    manifest = dataio.load_manifest(args.data)
    rows = evaluation.ablation_run(cfg, manifest)
    table = evaluation.render_ablation_table(rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(args.out + ".json", "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(),
                   "rows": evaluation.ablation_rows_to_dicts(rows)}, fh, indent=1)
        fh.write("\n")
    print(table, end="")
    print(f"wrote {args.out} and {args.out}.json")
    return 0


def cmd_gradcheck(args) -> int:
    failed = False
    for name, report in op_smoke_checks():
        print(f"op {name:<24} max rel err {report.max_rel_err:.3e}  "
              f"{'pass' if report.passed else 'FAIL'}")
        failed |= not report.passed
    if args.full:
        report = head_gradient_check()
    else:
        report = head_gradient_check(channels=24, embed_dim=8, batch=4, n_ids=2)
    print(f"full head + combined loss     max rel err {report.max_rel_err:.3e}  "
          f"{'pass' if report.passed else 'FAIL'}")
    failed |= not report.passed
    return 2 if failed else 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
