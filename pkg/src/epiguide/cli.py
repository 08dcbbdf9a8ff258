"""Command-line pipeline: gen -> train -> eval -> viz, plus estimate-f.

Every subcommand is deterministic given its flags and seed, and each one is
a thin shell over the library so that CLI results are bit-identical to
direct calls.  Exit codes: 0 success, 2 usage or input error, 3 reliability
gate rejected, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import ManifestIndex, load_manifest, read_tensor
from .errors import (
    DegenerateBaseline,
    DegenerateConfiguration,
    EpiguideError,
    EpipolePixel,
    NoModelFound,
    NonFiniteActivation,
    ZeroDenominator,
)
from .estimation import (
    load_correspondences,
    ransac_fundamental,
    reliability_gate,
)
from .evaluation import (
    RetrievalIndex,
    mean_average_precision,
    overlap_breakdown,
    pr_points,
    recall_at_k,
    run_retrieval,
)
from .geometry import random_rank2_matrix, relative_fundamental
from .guides import GridSpec, rasterize_guide
from .reranker import (
    EpeInput,
    ModelConfig,
    TrainingPair,
    TrainSchedule,
    assemble_tokens,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .synthgen import generate_benchmark, pose_to_view

_NUMERIC_ERRORS = (
    NonFiniteActivation,
    DegenerateConfiguration,
    NoModelFound,
    ZeroDenominator,
    DegenerateBaseline,
    EpipolePixel,
)

_NEGATIVE_PAIR_SALT = 808
_FALLBACK_F_SALT = 909


def _out_dir(args) -> Path:
    # the environment variable wins even over an explicit flag
    override = os.environ.get("EPIGUIDE_OUT")
    path = Path(override) if override else Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_ints(text: str, expect: int | None = None) -> tuple[int, ...]:
    values = tuple(int(part) for part in text.split(","))
    if expect is not None and len(values) != expect:
        raise ValueError(f"expected {expect} comma-separated integers, got {text!r}")
    return values


def build_training_pairs(
    manifest: ManifestIndex,
    config: ModelConfig,
    *,
    seed: int,
    split: str = "train",
    epe: bool = False,
) -> list[TrainingPair]:
    """Deterministic pair list: every same-instance view pair plus one
    sampled cross-instance negative per positive.

    Negatives alternate between a same-category rival (the confusable case
    a reranker exists for) and an arbitrary other instance, so the matcher
    sees both hard and easy contrasts.  Positives with pose data carry a
    rasterized epipolar guide.  When epe is set, every pair gets
    plane-angle geometry: true geometry for posed positives, a seeded
    random rank-2 fallback otherwise.
    """
    records = sorted(manifest.split(split), key=lambda r: r.image_id)
    if not records:
        raise ValueError(f"manifest has no {split!r} records")
    grids: dict[str, np.ndarray] = {}

    def grid_of(record):
        if record.image_id not in grids:
            tensor = read_tensor(manifest.resolve(record.feature_path))
            grids[record.image_id] = np.asarray(tensor, dtype=np.float64)
        return grids[record.image_id]

    by_instance: dict[str, list] = {}
    category_of: dict[str, str] = {}
    for record in records:
        by_instance.setdefault(record.instance_id, []).append(record)
        category_of[record.instance_id] = record.category_id

    rng = np.random.default_rng([_NEGATIVE_PAIR_SALT, seed])
    instance_ids = sorted(by_instance)
    pairs: list[TrainingPair] = []

    def epe_for(index, rec1=None, rec2=None):
        if not epe:
            return None
        if rec1 is not None and rec1.pose is not None and rec2.pose is not None:
            v1, v2 = pose_to_view(rec1.pose), pose_to_view(rec2.pose)
            return EpeInput(
                f=relative_fundamental(v1, v2), view1=v1, view2=v2, pair_seed=index
            )
        return EpeInput(f=random_rank2_matrix(_FALLBACK_F_SALT + index), pair_seed=index)

    pair_index = 0
    for instance_id in instance_ids:
        views = by_instance[instance_id]
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                rec1, rec2 = views[i], views[j]
                guide = None
                size = (224, 224)
                if rec1.pose is not None and rec2.pose is not None:
                    v1, v2 = pose_to_view(rec1.pose), pose_to_view(rec2.pose)
                    f = relative_fundamental(v1, v2)
                    g1 = GridSpec(s=config.s, width=rec1.pose.w, height=rec1.pose.h)
                    g2 = GridSpec(s=config.s, width=rec2.pose.w, height=rec2.pose.h)
                    guide = rasterize_guide(f, g1, g2)
                    size = (rec1.pose.w, rec1.pose.h)
                pairs.append(
                    TrainingPair(
                        grid1=grid_of(rec1),
                        grid2=grid_of(rec2),
                        label=1,
                        guide=guide,
                        epe=epe_for(pair_index, rec1, rec2),
                        image_size=size,
                    )
                )
                pair_index += 1
                if len(instance_ids) < 2:
                    continue
                anchor = rec1
                pool = [other for other in instance_ids if other != instance_id]
                if pair_index % 4 == 1:
                    rivals = [
                        other for other in pool
                        if category_of[other] == category_of[instance_id]
                    ]
                    pool = rivals or pool
                other_id = pool[int(rng.integers(len(pool)))]
                partner = by_instance[other_id][int(rng.integers(len(by_instance[other_id])))]
                pairs.append(
                    TrainingPair(
                        grid1=grid_of(anchor),
                        grid2=grid_of(partner),
                        label=0,
                        epe=epe_for(pair_index),
                    )
                )
                pair_index += 1
    return pairs


def cmd_gen(args) -> int:
    out = _out_dir(args)
    manifest = generate_benchmark(
        seed=args.seed,
        n_instances=args.instances,
        n_categories=args.categories,
        views_per_instance=args.views,
        split_fraction=args.split,
        out_dir=out,
        n_landmarks=args.landmarks,
        m=args.dim,
        gridspec=GridSpec(s=args.grid_size, width=224, height=224),
        noise_sigma=args.noise,
    )
    n_train = len(manifest.split("train"))
    n_test = len(manifest.split("test"))
    print(f"wrote {len(manifest.records)} images (train {n_train} / test {n_test}) to {out}")
    return 0


_LOSS_FLAGS = {"none": "none", "epi": "epi", "max-epi": "max_epi"}


def cmd_train(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(Path(args.manifest))
    s, m, heads, layers = _parse_ints(args.config, expect=4)
    config = ModelConfig(
        s=s,
        m=m,
        heads=heads,
        layers=layers,
        num_freqs=min(4, m // 4),
        epe_enabled=args.epe,
        lambda_epi=args.lambda_epi,
        loss_variant=_LOSS_FLAGS[args.loss],
        seed=args.seed,
    )
    pairs = build_training_pairs(manifest, config, seed=args.seed, epe=args.epe)
    schedule = TrainSchedule(
        phase1_epochs=args.epochs_phase1,
        phase2_epochs=args.epochs_phase2,
        learning_rate=args.lr,
        pairs_per_epoch=args.pairs_per_epoch,
    )
    params, log = train(pairs, config, schedule)
    checkpoint = out / "checkpoint.epga"
    save_checkpoint(checkpoint, params)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as handle:
        for row in log:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    last = log[-1] if log else {}
    print(f"trained {len(pairs)} pairs -> {checkpoint}")
    if last:
        attn = "n/a" if last["attn_loss"] is None else f"{last['attn_loss']:.6f}"
        print(f"final epoch match_bce={last['match_bce']:.6f} attn={attn}")
    return 0


def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def cmd_eval(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(Path(args.manifest))
    index = RetrievalIndex.from_manifest(manifest, split=args.split)
    model = load_checkpoint(Path(args.checkpoint)) if args.checkpoint else None
    rankings_by_id = run_retrieval(
        index, model, k_rerank=args.k_rerank, threads=args.threads
    )
    rankings = list(rankings_by_id.values())
    positives = {q: index.positives(q) for q in rankings_by_id}

    report = {"metric": "retrieval", "queries": len(rankings)}
    if model is not None:
        report["k_rerank"] = args.k_rerank
    for k in _parse_ints(args.recall_ks):
        report[f"R@{k}"] = recall_at_k(rankings, positives, k)
    report["mAP"] = mean_average_precision(rankings, positives)
    blocks = [report]

    overlaps = {
        i: dict(e.overlaps) for i, e in index.entries.items() if e.overlaps
    }
    if overlaps and args.overlap_bins > 0:
        if args.overlap_range == "auto":
            means = []
            for ranked in rankings:
                vals = [
                    overlaps.get(ranked.query_id, {}).get(p)
                    for p in sorted(positives[ranked.query_id])
                ]
                vals = [v for v in vals if v is not None]
                if vals:
                    means.append(sum(vals) / len(vals))
            if not means:
                value_range = None
            elif min(means) < max(means):
                value_range = (min(means), max(means))
            else:
                value_range = (min(means) - 0.5, max(means) + 0.5)
        else:
            low, high = (float(part) for part in args.overlap_range.split(","))
            value_range = (low, high)
        if value_range is not None:
            breakdown = overlap_breakdown(
                rankings, positives, overlaps, args.overlap_bins, value_range
            )
            blocks.append(
                {
                    "metric": "overlap_breakdown",
                    "bins": breakdown.bins,
                    "low": breakdown.low,
                    "high": breakdown.high,
                    "counts": list(breakdown.counts),
                    "recalls": [_clean(r) for r in breakdown.recalls],
                    "excluded": breakdown.excluded,
                }
            )

    with open(out / "metrics.jsonl", "w", encoding="utf-8") as handle:
        for block in blocks:
            line = json.dumps(block, sort_keys=True)
            handle.write(line + "\n")
            print(line)
    with open(out / "pr_curves.csv", "w", encoding="utf-8") as handle:
        handle.write("query_id,recall,precision\n")
        for query_id in rankings_by_id:
            for recall, precision in pr_points(rankings_by_id[query_id], positives[query_id]):
                handle.write(f"{query_id},{recall:.10g},{precision:.10g}\n")
    return 0


def _normalized_u8(values: np.ndarray) -> np.ndarray:
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def attention_canvas(map2d: np.ndarray, s: int) -> np.ndarray:
    """Tile one s x s patch per source cell with 1-px separators."""
    map2d = np.asarray(map2d, dtype=np.float64)
    if map2d.shape != (s * s, s * s):
        raise ValueError(f"expected ({s * s}, {s * s}) map, got {map2d.shape}")
    size = s * s + s - 1
    canvas = np.zeros((size, size), dtype=np.uint8)
    flat = _normalized_u8(map2d)
    for idx in range(s * s):
        r, c = divmod(idx, s)
        canvas[r * (s + 1) : r * (s + 1) + s, c * (s + 1) : c * (s + 1) + s] = flat[
            idx
        ].reshape(s, s)
    return canvas


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Plain (ASCII) PGM, maxval 255."""
    height, width = image.shape
    rows = [" ".join(str(int(v)) for v in row) for row in image]
    path.write_text(f"P2\n{width} {height}\n255\n" + "\n".join(rows) + "\n")


def cmd_viz(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(Path(args.manifest))
    id1, id2 = args.pair
    for image_id in (id1, id2):
        if image_id not in manifest.by_id:
            raise ValueError(f"image id {image_id!r} not in manifest")
    rec1, rec2 = manifest.by_id[id1], manifest.by_id[id2]
    params = load_checkpoint(Path(args.checkpoint))
    config = params.config
    grid1 = np.asarray(read_tensor(manifest.resolve(rec1.feature_path)), dtype=np.float64)
    grid2 = np.asarray(read_tensor(manifest.resolve(rec2.feature_path)), dtype=np.float64)

    posed = rec1.pose is not None and rec2.pose is not None
    epe_input = None
    size = (rec1.pose.w, rec1.pose.h) if rec1.pose is not None else (224, 224)
    if posed:
        v1, v2 = pose_to_view(rec1.pose), pose_to_view(rec2.pose)
        f = relative_fundamental(v1, v2)
        if config.epe_enabled:
            epe_input = EpeInput(f=f, view1=v1, view2=v2, pair_seed=0)
    elif config.epe_enabled:
        epe_input = EpeInput(f=random_rank2_matrix(0), pair_seed=0)

    sequence = assemble_tokens(grid1, grid2, params, epe_input=epe_input, image_size=size)
    _, maps, _ = forward(params, sequence)
    if args.head == "mean":
        a12 = maps.a12.mean(axis=0)
        a21 = maps.a21.mean(axis=0)
    else:
        head = int(args.head)
        if not 0 <= head < config.heads:
            raise ValueError(f"head index {head} out of range for {config.heads} heads")
        a12 = maps.a12[head]
        a21 = maps.a21[head]

    written = []
    for name, map2d in (("attn12", a12), ("attn21", a21)):
        path = out / f"{name}.pgm"
        write_pgm(path, attention_canvas(map2d, config.s))
        written.append(path)
    if posed:
        g1 = GridSpec(s=config.s, width=rec1.pose.w, height=rec1.pose.h)
        g2 = GridSpec(s=config.s, width=rec2.pose.w, height=rec2.pose.h)
        guide = rasterize_guide(f, g1, g2)
        for name, mask in (("guide12", guide.g12), ("guide21", guide.g21)):
            path = out / f"{name}.pgm"
            write_pgm(path, attention_canvas(mask.astype(np.float64), config.s))
            written.append(path)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_estimate_f(args) -> int:
    correspondences = load_correspondences(Path(args.correspondences))
    estimate = ransac_fundamental(
        correspondences,
        iterations=args.iters,
        threshold_px2=args.threshold,
        seed=args.seed,
    )
    for row in estimate.f.m:
        print(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}")
    print(f"inliers: {estimate.inlier_count} / {correspondences.n}")
    print(f"reliable: {'true' if estimate.reliable else 'false'}")
    return 0 if estimate.reliable else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epiguide",
        description="Synthetic benchmarks, guided reranker training, and retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic multi-view benchmark")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out-dir", default=".")
    gen.add_argument("--instances", type=int, default=16)
    gen.add_argument("--categories", type=int, default=4)
    gen.add_argument("--views", type=int, default=5)
    gen.add_argument("--landmarks", type=int, default=24)
    gen.add_argument("--noise", type=float, default=0.4)
    gen.add_argument("--split", type=float, default=0.5)
    gen.add_argument("--grid-size", type=int, default=7)
    gen.add_argument("--dim", type=int, default=32)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train the reranker on a benchmark")
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out-dir", default=".")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--loss", choices=sorted(_LOSS_FLAGS), default="epi")
    tr.add_argument("--lambda", dest="lambda_epi", type=float, default=1.0)
    tr.add_argument("--epochs-phase1", type=int, default=3)
    tr.add_argument("--epochs-phase2", type=int, default=3)
    tr.add_argument("--epe", action="store_true")
    tr.add_argument("--config", default="7,32,2,2", help="S,M,HEADS,LAYERS")
    tr.add_argument("--lr", type=float, default=3e-4)
    tr.add_argument("--pairs-per-epoch", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate retrieval with optional reranking")
    ev.add_argument("--out-dir", default=".")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--checkpoint", default=None)
    ev.add_argument("--split", default="test")
    ev.add_argument("--k-rerank", type=int, default=10)
    ev.add_argument("--recall-ks", default="1,10,50")
    ev.add_argument("--overlap-bins", type=int, default=10)
    ev.add_argument("--overlap-range", default="auto", help="LOW,HIGH or auto")
    ev.add_argument("--threads", type=int, default=1)
    ev.set_defaults(func=cmd_eval)

    vz = sub.add_parser("viz", help="render attention and guide grids as PGM")
    vz.add_argument("--out-dir", default=".")
    vz.add_argument("--manifest", required=True)
    vz.add_argument("--checkpoint", required=True)
    vz.add_argument("--pair", nargs=2, required=True, metavar=("ID1", "ID2"))
    vz.add_argument("--head", default="mean", help="head index or 'mean'")
    vz.set_defaults(func=cmd_viz)

    ef = sub.add_parser("estimate-f", help="robust fundamental-matrix estimation")
    ef.add_argument("--correspondences", required=True)
    ef.add_argument("--iters", type=int, default=500)
    ef.add_argument("--threshold", type=float, default=1.0)
    ef.add_argument("--seed", type=int, default=0)
    ef.set_defaults(func=cmd_estimate_f)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except (EpiguideError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
