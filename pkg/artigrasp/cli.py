"""
``artigrasp`` command line: one subcommand per pipeline stage.

A typical run::

    artigrasp gen-objects --out run/objects
    artigrasp gen-grasps --objects run/objects/objects.json --out run/grasps
    artigrasp sample-sgdf --objects run/objects/objects.json --grasps run/grasps --out run/sgdf
    artigrasp train-decoder --samples run/sgdf --out run/decoder
    artigrasp gen-scenes --objects run/objects/objects.json --decoder run/decoder/decoder.ckpt --out run/scenes
    artigrasp train-encoder --frames run/scenes --out run/encoder
    artigrasp evaluate --frames run/scenes --objects run/objects/objects.json --grasps run/grasps \\
        --decoder run/decoder/decoder.ckpt --encoder run/encoder/encoder.ckpt --out run/eval

Every stage writes ``manifest_<stage>.json`` next to its outputs.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from artigrasp import artobj, evaluation, graspgen, percept, pipeline, scene, sgdf
from artigrasp.config import ConfigError, config_hash, load_config
from artigrasp.formats import ensure_dir, write_json, write_png

logger = logging.getLogger(__name__)


def _relative(root, paths):
    return sorted(os.path.relpath(p, root) for p in paths)


def write_manifest(out, stage, args, config, outputs):
    """``manifest_<stage>.json``: stage, config hash, seed and outputs."""
    path = os.path.join(out, "manifest_%s.json" % stage)
    write_json(path, {"stage": stage, "config_hash": config_hash(config), "seed": args.seed,
                      "outputs": _relative(out, outputs)})
    return path


def _grasps_paths(directory):
    return os.path.join(directory, "grasps.jsonl"), os.path.join(directory, "grasps_index.json")


def gen_objects(args, config):
    objects = artobj.generate_corpus(config.objects.count, args.seed, config.objects.families)
    path = os.path.join(args.out, "objects.json")
    artobj.save_corpus(path, objects)
    logger.info("wrote %d objects to %s", len(objects), path)
    return [path]


def gen_grasps(args, config):
    objects = artobj.load_corpus(args.objects)
    dataset = graspgen.generate_dataset(objects, config.grasp, args.seed, args.workers, config.objects.joint_states)
    labels_path, index_path = _grasps_paths(args.out)
    dataset.save(labels_path, index_path)
    logger.info("%d labels in %d of %d pairs", len(dataset.labels), len(dataset.groups), len(dataset.pairs))
    return [labels_path, index_path]


def sample_sgdf(args, config):
    objects = artobj.load_corpus(args.objects)
    dataset = graspgen.GraspDataset.load(*_grasps_paths(args.grasps))
    gripper = dataset.gripper or config.grasp.gripper()
    outputs = []
    for i, obj in enumerate(objects):
        for (object_id, joint_index), group in dataset.groups_for(obj.id).items():
            seed = np.random.SeedSequence([args.seed, 2, i, joint_index])
            samples = sgdf.sample_sgdf(obj, joint_index, group, config.sgdf.samples, seed, config.sgdf, gripper)
            prefix = os.path.join(args.out, "%s_%d" % (object_id, joint_index))
            samples.save(prefix)
            outputs += [prefix + ".json", prefix + ".bin"]
    logger.info("wrote %d sample sets", len(outputs) // 2)
    return outputs


def _load_samples(directory):
    prefixes = sorted(os.path.join(directory, name[:-4]) for name in os.listdir(directory)
                      if name.endswith(".bin"))
    return [sgdf.SgdfSamples.load(prefix) for prefix in prefixes]


def train_decoder(args, config):
    pairs = _load_samples(args.samples)
    model = sgdf.train_decoder(pairs, config.decoder, args.seed)
    checkpoint = os.path.join(args.out, "decoder.ckpt")
    log = os.path.join(args.out, "decoder_log.json")
    model.save(checkpoint)
    write_json(log, {"epochs": model.log, "validation": model.validation})
    return [checkpoint, log]


def gen_scenes(args, config):
    objects = artobj.load_corpus(args.objects)
    decoder = sgdf.DecoderModel.load(args.decoder, config.decoder)
    usable = [obj for obj in objects if obj.id in decoder.codes]
    if len(usable) < len(objects):
        logger.warning("%d object(s) without shape codes left out of scenes", len(objects) - len(usable))
    scene_config = replace(config.scene, single_object=config.scene.single_object or args.single_object)

    outputs = []
    for s in range(scene_config.count):
        scene_id = "scene_%04d" % s
        try:
            spec = scene.generate_scene(usable, scene_config, np.random.SeedSequence([args.seed, 4, s]),
                                        scene_id, config.objects.joint_states)
        except scene.PlacementError as e:
            logger.warning("skipped %s", e)
            continue
        view_seed = int(np.random.SeedSequence([args.seed, 4, s]).generate_state(1)[0])
        views = scene.render_views(spec, usable, decoder.codes, scene_config, config.noise, view_seed)
        for c, (camera, frame, targets) in enumerate(views):
            path = os.path.join(args.out, scene_id, "view_%d" % c)
            scene.save_frame(path, spec, camera, frame, targets)
            outputs += [os.path.join(path, name) for name in sorted(os.listdir(path))]
        logger.info("%s: %d object(s), %d view(s)", scene_id, len(spec.objects), len(views))
    return outputs


def _frames(root):
    return [scene.load_frame(path) for path in scene.list_frames(root)]


def train_encoder(args, config):
    records = _frames(args.frames)
    model = percept.train_encoder(records, config.encoder, args.seed)
    checkpoint = os.path.join(args.out, "encoder.ckpt")
    log = os.path.join(args.out, "encoder_log.json")
    model.save(checkpoint)
    write_json(log, {"epochs": model.log})
    return [checkpoint, log]


def _models(args, config):
    decoder = sgdf.DecoderModel.load(args.decoder, config.decoder)
    encoder = None
    if getattr(args, "encoder", None):
        encoder = percept.EncoderModel.load(args.encoder, config.encoder)
    return decoder, encoder


def infer(args, config):
    decoder, encoder = _models(args, config)
    if encoder is None and not args.oracle:
        raise ValueError("infer needs --encoder or --oracle")
    record = scene.load_frame(args.frame)
    depth = record.frame.noisy_depth if args.noisy and record.frame.noisy_depth is not None else None
    recons = pipeline.reconstruct_scene(
        record.frame, record.camera, decoder,
        encoder=None if args.oracle else encoder,
        targets=record.targets if args.oracle else None,
        config=replace(config.pipeline, workers=args.workers), encoder_config=config.encoder,
        depth=depth, icp=args.icp)
    return pipeline.save_reconstructions(args.out, recons)


def parse_rsr_initial(value):
    """``camera`` (default) or ``fixed:<meters>``."""
    if value in (None, "camera"):
        return None
    if value.startswith("fixed:"):
        try:
            meters = float(value[len("fixed:"):])
        except ValueError:
            meters = -1.0
        if meters > 0:
            return meters
    raise argparse.ArgumentTypeError("--rsr-initial must be 'camera' or 'fixed:<meters>', got %r" % value)


def evaluation_modes(oracle, icp):
    """Conditions run by ``evaluate``: both methods with and without ICP,
    narrowed to the oracle method and/or the ICP-refined conditions."""
    methods = ("oracle",) if oracle else evaluation.METHODS
    return evaluation.conditions((True,) if icp else (False, True), methods)


def evaluate(args, config):
    decoder, encoder = _models(args, config)
    objects = artobj.corpus_by_id(artobj.load_corpus(args.objects))
    dataset = graspgen.GraspDataset.load(*_grasps_paths(args.grasps))
    if args.rsr_initial is not None:
        config = replace(config, evaluation=replace(config.evaluation, rsr_initial=args.rsr_initial))

    modes = evaluation_modes(args.oracle, args.icp)
    metrics, records, skipped = evaluation.evaluate(_frames(args.frames), objects, dataset, decoder,
                                                    encoder, config, modes)
    outputs = evaluation.write_metrics(args.out, metrics, records, skipped)
    sys.stdout.write(evaluation.format_table(metrics))
    return outputs


def _to_unit(image):
    image = np.asarray(image, dtype=float)
    top = image.max()
    return image / top if top > 0 else image


def render_debug(args, config):
    """PNG images of depth, shading, mask and heatmap of every frame of a scene."""
    outputs = []
    for path in scene.list_frames(args.frame):
        record = scene.load_frame(path)
        name = os.path.relpath(path, args.frame).replace(os.sep, "_")
        name = "frame" if name == "." else name
        images = [("depth", _to_unit(record.frame.depth)), ("shaded", record.frame.shaded),
                  ("mask", _to_unit(record.frame.mask)), ("heat", record.targets.heat)]
        for kind, image in images:
            target = os.path.join(args.out, "%s_%s.png" % (name, kind))
            write_png(target, image)
            outputs.append(target)
    return outputs


STAGES = [
    ("gen-objects", gen_objects, "generate the procedural object corpus"),
    ("gen-grasps", gen_grasps, "generate and validate grasp labels"),
    ("sample-sgdf", sample_sgdf, "draw SGDF training samples"),
    ("train-decoder", train_decoder, "train the SGDF decoder and shape codes"),
    ("gen-scenes", gen_scenes, "generate and render scenes with target maps"),
    ("train-encoder", train_encoder, "train the per-pixel encoder"),
    ("infer", infer, "reconstruct meshes and grasps of one frame"),
    ("evaluate", evaluate, "compute SR/RSR over frames"),
    ("render-debug", render_debug, "write PNG debug images of frames"),
]


def build_parser():
    parser = argparse.ArgumentParser(prog="artigrasp", description="Articulated object grasp pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding configuration defaults")
    common.add_argument("--seed", type=int, default=0, help="run seed (default: %(default)s)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel workers (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True
    parsers = {}
    for name, func, help_text in STAGES:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.set_defaults(func=func, stage=name)
        parsers[name] = sub

    parsers["gen-grasps"].add_argument("--objects", required=True, help="objects.json")
    parsers["sample-sgdf"].add_argument("--objects", required=True, help="objects.json")
    parsers["sample-sgdf"].add_argument("--grasps", required=True, help="gen-grasps output directory")
    parsers["train-decoder"].add_argument("--samples", required=True, help="sample-sgdf output directory")
    parsers["gen-scenes"].add_argument("--objects", required=True, help="objects.json")
    parsers["gen-scenes"].add_argument("--decoder", required=True, help="decoder checkpoint (shape codes)")
    parsers["gen-scenes"].add_argument("--single-object", action="store_true", help="one object per scene")
    parsers["train-encoder"].add_argument("--frames", required=True, help="gen-scenes output directory")

    for name in ("infer", "evaluate"):
        sub = parsers[name]
        sub.add_argument("--decoder", required=True, help="decoder checkpoint")
        sub.add_argument("--encoder", help="encoder checkpoint")
    parsers["infer"].add_argument("--oracle", action="store_true", help="use ground-truth maps instead of the encoder")
    parsers["infer"].add_argument("--icp", action="store_true", help="refine detection poses with ICP")
    parsers["evaluate"].add_argument("--oracle", action="store_true",
                                     help="run only the oracle conditions (default: oracle and encoder)")
    parsers["evaluate"].add_argument("--icp", action="store_true",
                                     help="run only the ICP-refined conditions (default: with and without ICP)")
    parsers["infer"].add_argument("--frame", required=True, help="frame directory")
    parsers["infer"].add_argument("--noisy", action="store_true", help="use the noisy depth map")
    parsers["evaluate"].add_argument("--frames", required=True, help="gen-scenes output directory")
    parsers["evaluate"].add_argument("--objects", required=True, help="objects.json")
    parsers["evaluate"].add_argument("--grasps", required=True, help="gen-grasps output directory")
    parsers["evaluate"].add_argument("--rsr-initial", type=parse_rsr_initial, default=None,
                                     help="RSR initial distance: 'camera' (default) or 'fixed:<meters>'")
    parsers["render-debug"].add_argument("--frame", required=True, help="frame or scene directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        config = load_config(args.config)
        ensure_dir(args.out)
        outputs = args.func(args, config)
        write_manifest(args.out, args.stage, args, config, outputs)
    except (ConfigError, ValueError, RuntimeError, KeyError, IOError) as e:
        logger.error("%s failed: %s", args.stage, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
