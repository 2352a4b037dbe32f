"""Command-line surface: training, indexing, retrieval, augmentation, nav eval."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Sequence

import numpy as np

from .autodiff import ParamStore, derive_seed, load_checkpoint
from .encoder import EncoderConfig, encode_text, init_params
from .fixtures import write_fixture_bundle
from .harness import (RunManifest, TrainConfig, config_from_dict,
                      dataset_examples, embed_images, load_image_dir,
                      parse_config_file, train)
from .navsim import (FovParams, MemoryEntry, Pose, execute_episode, load_world,
                     save_episode_log, success_rate)
from .objectives import (Annotation, AnnotationSet, LossWeights, TrainExample,
                         total_loss_graph)
from .promptgen import client_from_env, convert_detection_dataset, save_dataset
from .retrieval import (average_recall, batch_topk, load_ground_truth,
                        load_index, save_index, topk_images)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotnav",
        description="Object-centric retrieval training and navigation evaluation.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured random seed")
    parser.add_argument("--offline", action="store_true",
                        help="never call a live generation endpoint")
    parser.add_argument("--config", default=None,
                        help="key = value training configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a dataset directory")
    p.add_argument("--data", required=True, help="directory with dataset.jsonl and PPMs")
    p.add_argument("--out", required=True, help="output directory for run artifacts")
    p.add_argument("--preset", choices=("overfit", "reference"), default=None)

    p = sub.add_parser("index", help="embed a dataset with a trained checkpoint")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="embedding index file to write")

    p = sub.add_parser("retrieve", help="top-k lookup against an embedding index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", default=None, help="query embedding index file")
    p.add_argument("--query", default=None, help="free-text query (needs --run)")
    p.add_argument("--run", default=None, help="training output directory")
    p.add_argument("-k", type=int, default=1)

    p = sub.add_parser("eval-retrieval", help="AR@k against a ground-truth file")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ks", default="1", help="comma-separated cutoffs")

    p = sub.add_parser("augment", help="detection lines to multi-label captions")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1,
                   help="generated captions per object")

    p = sub.add_parser("nav-eval", help="run navigation episodes over a memory")
    p.add_argument("--world", required=True)
    p.add_argument("--memory", required=True, help="memory embedding index")
    p.add_argument("--poses", required=True, help="JSONL of memory poses")
    p.add_argument("--queries", required=True, help="JSONL of query records")
    p.add_argument("--query-index", default=None,
                   help="precomputed query embeddings")
    p.add_argument("--run", default=None,
                   help="training output directory for text-encoder queries")
    p.add_argument("--cell-m", type=float, default=0.25)
    p.add_argument("--k", type=int, default=None, help="override per-query k")
    p.add_argument("--radii", default="1.0,2.0")
    p.add_argument("--half-angle", type=float, default=None)
    p.add_argument("--max-range", type=float, default=None)
    p.add_argument("--no-occlusion", action="store_true")
    p.add_argument("--log", default=None, help="episode JSONL to write")

    p = sub.add_parser("gradcheck", help="finite-difference check on the objective")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--slots", type=int, default=2)
    p.add_argument("--iters", type=int, default=2)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("fixtures", help="write the bundled fixture files")
    p.add_argument("--out", required=True)
    return parser


# ----------------------------------------------------------------------
# Shared plumbing

def _train_config(args) -> TrainConfig:
    if args.config is not None:
        config = parse_config_file(args.config)
    elif getattr(args, "preset", None) == "overfit":
        config = TrainConfig.overfit_preset()
    elif getattr(args, "preset", None) == "reference":
        config = TrainConfig.reference_preset()
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _load_run(run_dir: str) -> tuple[ParamStore, TrainConfig]:
    manifest = RunManifest.load(os.path.join(run_dir, "manifest.json"))
    params = load_checkpoint(os.path.join(run_dir, manifest.checkpoint))
    store = ParamStore(params, frozen=[n for n in params if n.startswith("txt.")])
    return store, config_from_dict(manifest.config)


def _load_records(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: bad JSON record ({exc.msg})")
    return records


# ----------------------------------------------------------------------
# Subcommands

def cmd_train(args) -> int:
    config = _train_config(args)
    manifest = train(args.data, config, args.out)
    print(f"steps {manifest.steps}")
    print(f"final_loss {manifest.final_loss:.6f}")
    print(f"input_hash {manifest.input_hash}")
    print(f"checkpoint {os.path.join(args.out, manifest.checkpoint)}")
    print(f"manifest {os.path.join(args.out, 'manifest.json')}")
    return 0


def cmd_index(args) -> int:
    store, config = _load_run(args.run)
    from .promptgen import load_dataset
    records = load_dataset(os.path.join(args.data, "dataset.jsonl"))
    images = load_image_dir(records, args.data)
    examples = dataset_examples(records, images)
    index = embed_images(examples, [r.image_id for r in records], store, config)
    save_index(index, args.out)
    print(f"indexed {len(records)}")
    print(f"index {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    index = load_index(args.index)
    if (args.queries is None) == (args.query is None):
        raise ValueError("pass exactly one of --queries or --query")
    if args.query is not None:
        if args.run is None:
            raise ValueError("--query needs --run for the text encoder")
        store, config = _load_run(args.run)
        vector = encode_text(args.query, store, config.encoder).vector
        rows = {"query": vector}
    else:
        queries = load_index(args.queries)
        rows = {qid: queries.matrix[i] for i, qid in enumerate(queries.ids)}
    for qid in rows:
        vector = np.asarray(rows[qid], dtype=np.float64).reshape(-1)
        scores = dict(zip(index.ids, index.matrix @ vector))
        for rank, image_id in enumerate(
                topk_images(vector, index, min(args.k, len(index.ids))), start=1):
            print(f"{qid} {rank} {image_id} {scores[image_id]:.6f}")
    return 0


def cmd_eval_retrieval(args) -> int:
    index = load_index(args.index)
    queries = load_index(args.queries)
    gt = load_ground_truth(args.gt, index=index)
    ks = sorted({int(part) for part in args.ks.split(",") if part.strip()})
    if not ks:
        raise ValueError("no cutoffs given")
    results = batch_topk(queries, index, min(max(ks), len(index.ids)))
    report = average_recall(results, gt, ks)
    for k in ks:
        print(f"ar@{k} {report.values[k]:.6f}")
    print(f"queries {len(queries.ids)}")
    return 0


def cmd_augment(args) -> int:
    client = client_from_env(offline=args.offline, seed=args.seed or 0)
    report = convert_detection_dataset(args.detections, args.count, client)
    save_dataset(report.records, args.out)
    for lineno, message in report.errors:
        print(f"skipped {args.detections}: line {lineno}: {message}", file=sys.stderr)
    print(f"records {len(report.records)}")
    print(f"captions {report.generated_captions}")
    print(f"errors {len(report.errors)}")
    print(f"dataset {args.out}")
    return 0


def _fov_params(args) -> FovParams:
    fov = FovParams()
    if args.half_angle is not None:
        fov = replace(fov, half_angle=args.half_angle)
    if args.max_range is not None:
        fov = replace(fov, max_range=args.max_range)
    if args.no_occlusion:
        fov = replace(fov, occlusion=False)
    return fov


def cmd_nav_eval(args) -> int:
    world = load_world(args.world, cell_m=args.cell_m)
    memory_index = load_index(args.memory)
    poses: dict[str, Pose] = {}
    for record in _load_records(args.poses):
        poses[record["image_id"]] = Pose(**record["pose"])
    entries = []
    for i, image_id in enumerate(memory_index.ids):
        if image_id not in poses:
            raise ValueError(f"{args.poses}: no pose for memory id {image_id!r}")
        entries.append(MemoryEntry(image_id=image_id, pose=poses[image_id],
                                   embedding=memory_index.matrix[i]))

    query_records = _load_records(args.queries)
    if (args.query_index is None) == (args.run is None):
        raise ValueError("pass exactly one of --query-index or --run")
    if args.query_index is not None:
        query_index = load_index(args.query_index)
        rows = {qid: query_index.matrix[i]
                for i, qid in enumerate(query_index.ids)}

        def encode_for(record):
            if record["query_id"] not in rows:
                raise ValueError(
                    f"{args.query_index}: no embedding for {record['query_id']!r}")
            return lambda _prompt: rows[record["query_id"]]
    else:
        store, config = _load_run(args.run)

        def encode_for(record):
            return lambda prompt: encode_text(prompt, store, config.encoder).vector

    fov = _fov_params(args)
    episodes = []
    for record in query_records:
        episode = execute_episode(
            record.get("sentence", ""), record["noun"], entries, world,
            args.k if args.k is not None else int(record.get("k", 1)),
            encode_for(record), Pose(**record["start"]), fov=fov)
        episodes.append(episode)
        print(f"episode {record['query_id']} distance {episode.distance:.4f} "
              f"fov {str(episode.object_in_fov).lower()} "
              f"visited {len(episode.visited)} path_cells {episode.path_cells}")

    radii = [float(part) for part in args.radii.split(",") if part.strip()]
    if not radii:
        raise ValueError("no radii given")
    for radius in radii:
        report = success_rate(episodes, radius)
        print(f"sr@{radius:g}m {report.success_rate:.6f}")
    print(f"fov_rate {success_rate(episodes, radii[0]).fov_rate:.6f}")
    print(f"episodes {len(episodes)}")
    if args.log:
        save_episode_log(episodes, args.log)
        print(f"log {args.log}")
    return 0


def cmd_gradcheck(args) -> int:
    config = EncoderConfig(dim=args.dim, slot_dim=args.dim, num_slots=args.slots,
                           slot_iters=args.iters, patch_size=8, heads=2,
                           mlp_ratio=2, max_tokens=16, text_vocab=32, text_len=8)
    seed = args.seed if args.seed is not None else 0
    store = init_params(config, seed=derive_seed(seed, "init", 0))
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", 0))
    examples = []
    for i in range(args.images):
        image = rng.uniform(size=(16, 16, 3))
        examples.append(TrainExample(image=image, annotations=AnnotationSet((
            Annotation(caption=f"object {i} a", box=[0.1, 0.1, 0.5, 0.5]),
            Annotation(caption=f"object {i} b", box=[0.5, 0.4, 0.9, 0.9])))))
    built = total_loss_graph(examples, store, LossWeights(), config,
                             seed=derive_seed(seed, "step", 0))
    report = built.graph.finite_difference_check(
        built.total, parameters=store.trainable_names(),
        tolerance=args.tolerance)
    print(f"max_relative_error {report.max_relative_error:.6e}")
    print(f"checked {report.checked_coordinates}")
    print(f"skipped {report.skipped_coordinates}")
    print(f"passed {str(report.passed).lower()}")
    return 0 if report.passed else 1


def cmd_fixtures(args) -> int:
    paths = write_fixture_bundle(args.out)
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "eval-retrieval": cmd_eval_retrieval,
    "augment": cmd_augment,
    "nav-eval": cmd_nav_eval,
    "gradcheck": cmd_gradcheck,
    "fixtures": cmd_fixtures,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
