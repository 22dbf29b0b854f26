"""``volseg`` command line: one subcommand per pipeline stage.

Every stage reads its options from the resolved config, writes its outputs
under ``OUTPUT_PATH`` and finishes by writing a run manifest (resolved config,
input digests, timings, output list).

Exit codes: 0 success, 2 config error, 3 I/O error, 4 data-contract error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import augment
from .config import (
    augment_specs_from_config,
    decode_params_from_config,
    dump_config,
    resolve_config,
    target_specs_from_config,
)
from .dataset import (
    RejectionSampler,
    TileSetMetadata,
    draw_training_sample,
    load_tile_region,
    merge_pseudo_labeled,
    split_dataset,
)
from .decode import bc_watershed, bcd_watershed, median_filter, threshold
from .errors import ConfigError, InvalidArgumentError, VolsegError
from .inference import merge_chunks, run_chunked_inference, run_sliding_inference
from .metrics import aggregate, evaluate, format_table
from .predictors import (
    BlurThresholdPredictor,
    ConstantPredictor,
    FilePredictor,
    IdentityPredictor,
    SubprocessPredictor,
)
from .targets import encode_targets
from .volume import VoxelVolume, crop, export_slices, make_chunk_plan, read_header, read_volume, write_volume

log = logging.getLogger("volseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


class Run:
    """Collects inputs, outputs, timings and stats for the manifest."""

    def __init__(self, command: str, config):
        self.command = command
        self.config = config
        self.out = Path(config["OUTPUT_PATH"])
        self.inputs: dict = {}
        self.outputs: list = []
        self.timings: dict = {}
        self.stats: dict = {}

    def read(self, path) -> VoxelVolume:
        vol = read_volume(path)
        self.inputs[str(path)] = volume_digest(path)
        return vol

    def write(self, volume: VoxelVolume, path, extra_header=None) -> Path:
        header = write_volume(volume, path, extra_header)
        self.outputs += [str(header), str(header.with_suffix(".raw"))]
        return header

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t0, 6)

        return _Timer()

    def manifest(self, exit_code: int, error: str | None = None) -> dict:
        m = {
            "tool": "volseg",
            "version": __version__,
            "command": self.command,
            "config": dump_config(self.config),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
            "timings_s": self.timings,
            "stats": self.stats,
            "exit_code": exit_code,
        }
        if error is not None:
            m["error"] = error
        return m


def volume_digest(path) -> str:
    """sha256 over the header and payload files of a stored volume."""
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    h = hashlib.sha256()
    for suffix in (".json", ".raw"):
        h.update(p.with_name(p.name + suffix).read_bytes())
    return h.hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json_atomic(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _need(config, key):
    value = config[key]
    if value in ("", ()):
        raise ConfigError(f"{key} must be set for this command")
    return value


def _as_config_error(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except InvalidArgumentError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------------------
# stages


def _volume_shape(run: Run):
    c = run.config
    if c["DATASET.VOLUME_SHAPE"]:
        return tuple(c["DATASET.VOLUME_SHAPE"])
    if c["DATASET.IMAGE_PATH"]:
        path = c["DATASET.IMAGE_PATH"][0]
        run.inputs[path] = volume_digest(path)
        return tuple(read_header(path)["shape"])
    if c["DATASET.TILE_METADATA"]:
        run.inputs[c["DATASET.TILE_METADATA"]] = file_digest(c["DATASET.TILE_METADATA"])
        return TileSetMetadata.from_json(c["DATASET.TILE_METADATA"]).shape
    raise ConfigError("set DATASET.VOLUME_SHAPE, DATASET.IMAGE_PATH or DATASET.TILE_METADATA")


def cmd_plan(run: Run) -> None:
    c = run.config
    with run.stage("plan"):
        shape = _volume_shape(run)
        plan = _as_config_error(make_chunk_plan, shape, c["DATASET.CHUNK_SIZE"], c["DATASET.CHUNK_OVERLAP"])
        path = write_json_atomic(run.out / "chunk_plan.json", plan.to_dict())
    run.outputs.append(str(path))
    run.stats["chunks"] = len(plan.chunks)
    print(f"volume {shape}  chunk {plan.chunk_extent}  overlap {plan.overlap}  -> {len(plan.chunks)} chunks")
    print(f"{'id':<24}{'origin':<20}extent")
    for box in plan.chunks:
        print(f"{box.id:<24}{str(box.origin):<20}{box.extent}")


def _sources(run: Run):
    c = run.config
    images, labels = c["DATASET.IMAGE_PATH"], c["DATASET.LABEL_PATH"]
    if not images:
        raise ConfigError("DATASET.IMAGE_PATH must list at least one volume")
    if labels and len(labels) != len(images):
        raise ConfigError("DATASET.LABEL_PATH must be empty or match DATASET.IMAGE_PATH one to one")
    p_images, p_labels = c["DATASET.PSEUDO_IMAGE_PATH"], c["DATASET.PSEUDO_LABEL_PATH"]
    if len(p_images) != len(p_labels):
        raise ConfigError("DATASET.PSEUDO_IMAGE_PATH and DATASET.PSEUDO_LABEL_PATH must pair up")
    labeled = [(run.read(i), run.read(l) if labels else None) for i, l in zip(images, labels or [None] * len(images))]
    pseudo = [(run.read(i), run.read(l)) for i, l in zip(p_images, p_labels)]
    fractions = c["DATASET.SPLIT_FRACTIONS"]
    if tuple(fractions) != (1.0,):
        k = c["DATASET.SPLIT_INDEX"]
        if not 0 <= k < len(fractions):
            raise ConfigError(f"DATASET.SPLIT_INDEX {k} outside the {len(fractions)} splits")

        def part(vol):
            if vol is None:
                return None
            box = _as_config_error(split_dataset, vol.shape, fractions).boxes[k]
            return crop(vol, box)

        labeled = [(part(i), part(l)) for i, l in labeled]
        pseudo = [(part(i), part(l)) for i, l in pseudo]
    return merge_pseudo_labeled(labeled, pseudo)


def cmd_sample(run: Run, count: int) -> None:
    c = run.config
    if count < 0:
        raise ConfigError("--count must be >= 0")
    seed = c["SYSTEM.SEED"]
    extent = c["DATASET.WINDOW_SIZE"]
    specs = augment_specs_from_config(c)
    with run.stage("load"):
        sources = _sources(run)
        samplers = {}
        for i, s in enumerate(sources):
            if s.label is not None:
                samplers[i] = _as_config_error(RejectionSampler, s.label.data, extent, c["DATASET.REJECT_PROB"],
                                               c["DATASET.MAX_ATTEMPTS"], c["DATASET.MIN_FOREGROUND"])
    out_dir = run.out / "samples"

    def one(i):
        s = draw_training_sample(seed, i, sources, extent, samplers=samplers)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            image, label, aug_log = augment(specs, seed, i, s.image, s.label)
        res = sources[s.source_index].image.resolution
        meta = {"sample_index": i, "source_index": s.source_index, "source_tag": sources[s.source_index].tag,
                "origin": list(s.draw.position.origin), "attempts": s.draw.attempts, "augment": aug_log}
        written = [write_volume(VoxelVolume(np.ascontiguousarray(image), res), out_dir / f"sample_{i:05d}_image",
                                {"sample": meta})]
        if label is not None:
            written.append(write_volume(VoxelVolume(np.ascontiguousarray(label), res),
                                        out_dir / f"sample_{i:05d}_label", {"sample": meta}))
        return written, s.draw.attempts

    with run.stage("sample"):
        workers = max(1, c["SYSTEM.NUM_WORKERS"])
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, range(count)))
        else:
            results = [one(i) for i in range(count)]
    attempts = [a for _, a in results]
    for written, _ in results:
        for h in written:
            run.outputs += [str(h), str(h.with_suffix(".raw"))]
    run.stats.update({
        "samples": count,
        "mean_attempts": float(np.mean(attempts)) if attempts else 0.0,
        "max_attempts": int(max(attempts)) if attempts else 0,
        "first_attempt_fraction": float(np.mean([a == 1 for a in attempts])) if attempts else 0.0,
    })
    print(f"wrote {count} samples to {out_dir}")


def cmd_encode(run: Run) -> None:
    c = run.config
    labels = c["DATASET.LABEL_PATH"]
    if not labels:
        raise ConfigError("DATASET.LABEL_PATH must list at least one label volume")
    specs = target_specs_from_config(c)
    for path in labels:
        with run.stage(f"encode:{path}"):
            vol = run.read(path)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                stack = encode_targets(vol.data, specs, vol.resolution, workers=max(1, c["SYSTEM.NUM_WORKERS"]))
            flags = stack.flags + [str(w.message) for w in caught]
            header = {"targets": [s.kind for s in specs], "flags": flags,
                      "distance_units": "voxels, each axis scaled by its resolution over the x resolution"}
            name = Path(path).name
            if name.endswith((".json", ".raw")):
                name = name[:-5] if name.endswith(".json") else name[:-4]
            run.write(VoxelVolume(stack.as_array(), vol.resolution), run.out / "targets" / f"{name}_targets", header)
        run.stats[path] = {"channels": stack.num_channels, "flags": flags}
    print(f"encoded {len(labels)} label volume(s) into {run.out / 'targets'}")


def _predictor(c):
    kind = c["INFERENCE.PREDICTOR"]
    channels = c["MODEL.OUT_PLANES"]
    if kind == "identity":
        return IdentityPredictor(channels)
    if kind == "constant":
        return ConstantPredictor(c["INFERENCE.CONSTANT_VALUE"], channels)
    if kind == "blur_threshold":
        if channels != 1:
            raise ConfigError("blur_threshold predictor has one output channel; set MODEL.OUT_PLANES 1")
        return BlurThresholdPredictor(c["INFERENCE.BLUR_SIGMA"], c["INFERENCE.BLUR_THRESHOLD"],
                                      c["INFERENCE.BLUR_SHARPNESS"])
    if kind == "file":
        return FilePredictor(read_volume(_need(c, "INFERENCE.PREDICTOR_FILE")))
    if kind == "subprocess":
        return SubprocessPredictor(_need(c, "INFERENCE.PREDICTOR_COMMAND"), channels, c["INFERENCE.TIMEOUT"])
    raise ConfigError(f"unknown predictor {kind!r}")


def cmd_infer(run: Run) -> None:
    c = run.config
    path = c["INFERENCE.INPUT_PATH"] or (c["DATASET.IMAGE_PATH"][0] if c["DATASET.IMAGE_PATH"] else "")
    ranges = c["INFERENCE.VALUE_RANGES"] or None
    predictor = _predictor(c)
    common = dict(window_extent=c["INFERENCE.WINDOW_SIZE"], stride=c["INFERENCE.STRIDE"],
                  blend_kind=c["INFERENCE.BLEND"], tta=c["INFERENCE.TTA"], channels=c["MODEL.OUT_PLANES"],
                  value_ranges=ranges)
    try:
        if c["INFERENCE.CHUNKED"]:
            if c["DATASET.TILE_METADATA"] and not path:
                meta = TileSetMetadata.from_json(c["DATASET.TILE_METADATA"])
                run.inputs[c["DATASET.TILE_METADATA"]] = file_digest(c["DATASET.TILE_METADATA"])
                shape, res = meta.shape, meta.resolution

                def loader(box):
                    return load_tile_region(meta, box)
            else:
                with run.stage("load"):
                    vol = run.read(_need_path(path))
                shape, res = vol.shape, vol.resolution

                def loader(box):
                    return crop(vol, box)

            plan = _as_config_error(make_chunk_plan, shape, c["DATASET.CHUNK_SIZE"], c["DATASET.CHUNK_OVERLAP"])
            with run.stage("infer"):
                result = run_chunked_inference(plan, loader, predictor, run.out / "chunks",
                                               workers=max(1, c["SYSTEM.CHUNK_WORKERS"]), resolution=res, **common)
            run.stats.update({"chunks": len(plan.chunks), "skipped": result.skipped, "failures": result.failures})
            run.outputs += [str(p) for p in result.files.values()]
            if not result.ok:
                raise VolsegError(f"{len(result.failures)} chunk(s) failed: " +
                                  "; ".join(f"{k}: {v}" for k, v in sorted(result.failures.items())))
            with run.stage("merge"):
                pred = merge_chunks(result.files, plan, c["INFERENCE.BLEND"])
        else:
            with run.stage("load"):
                vol = run.read(_need_path(path))
            res = vol.resolution
            with run.stage("infer"):
                pred = run_sliding_inference(vol, predictor, workers=max(1, c["SYSTEM.NUM_WORKERS"]), **common)
    finally:
        if hasattr(predictor, "close"):
            predictor.close()
    run.write(VoxelVolume(pred, res), run.out / "prediction")
    print(f"prediction {pred.shape} written to {run.out / 'prediction'}")


def _need_path(path):
    if not path:
        raise ConfigError("set INFERENCE.INPUT_PATH or DATASET.IMAGE_PATH")
    return path


def cmd_decode(run: Run) -> None:
    c = run.config
    path = c["DECODE.INPUT_PATH"] or str(run.out / "prediction")
    mode = c["DECODE.MODE"]
    params = decode_params_from_config(c)
    theta = c["DECODE.SEMANTIC_THRESHOLD"]
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"DECODE.SEMANTIC_THRESHOLD must be in [0, 1], got {theta}")
    vol = run.read(path)
    data = vol.data if vol.channels is not None else vol.data[None]
    need = {"semantic": 1, "bc": 2, "bcd": 3}[mode]
    idx = c["DECODE.CHANNELS"]
    if len(idx) < need:
        raise ConfigError(f"DECODE.CHANNELS needs {need} entries for mode {mode}")
    if any(not 0 <= i < data.shape[0] for i in idx[:need]):
        raise InvalidArgumentError(f"DECODE.CHANNELS {idx[:need]} outside the {data.shape[0]} prediction channels")
    ch = [np.asarray(data[i]) for i in idx[:need]]
    with run.stage("decode"):
        if c["DECODE.MEDIAN_FILTER"]:
            ch[0] = median_filter(ch[0], c["DECODE.MEDIAN_KERNEL"])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if mode == "semantic":
                seg = threshold(ch[0], theta)
            elif mode == "bc":
                seg = bc_watershed(ch[0], ch[1], params)
            else:
                seg = bcd_watershed(ch[0], ch[1], ch[2], params)
    flags = [str(w.message) for w in caught]
    header = {"decode": {"mode": mode, "semantic_threshold": theta, **params.to_dict()}, "flags": flags}
    run.write(VoxelVolume(seg, vol.resolution), run.out / "segmentation", header)
    run.stats.update({"instances": int(seg.max()), "flags": flags})
    print(f"{mode} decode: {int(seg.max())} label(s) written to {run.out / 'segmentation'}")


def cmd_eval(run: Run) -> None:
    c = run.config
    preds, gts = c["EVAL.PRED_PATH"], c["EVAL.GT_PATH"]
    if not preds or len(preds) != len(gts):
        raise ConfigError("EVAL.PRED_PATH and EVAL.GT_PATH must be non-empty and pair up")
    names = c["EVAL.NAMES"] or tuple(Path(p).name for p in gts)
    if len(names) != len(gts):
        raise ConfigError("EVAL.NAMES must match EVAL.GT_PATH one to one")
    metrics = c["EVAL.METRICS"]
    unknown = set(metrics) - {"iou", "ap", "cremi"}
    if unknown:
        raise ConfigError(f"EVAL.METRICS: unknown metric(s) {sorted(unknown)}; expected iou, ap, cremi")
    reports = []
    with run.stage("eval"):
        for p, g, name in zip(preds, gts, names):
            pv, gv = run.read(p), run.read(g)
            reports.append(evaluate(pv.data, gv.data, gv.resolution, metrics, c["EVAL.AP_THRESHOLDS"], name))
        overall = aggregate(reports)
    path = write_json_atomic(run.out / "metrics.json",
                             {"volumes": [r.to_dict() for r in reports], "overall": overall.to_dict()})
    run.outputs.append(str(path))
    print(format_table(reports, overall))


def cmd_export(run: Run) -> None:
    c = run.config
    vol = run.read(_need(c, "EXPORT.INPUT_PATH"))
    directory = c["EXPORT.DIR"] or str(run.out / "slices")
    with run.stage("export"):
        paths = export_slices(vol, directory, c["EXPORT.AXIS"])
    run.outputs += [str(p) for p in paths]
    print(f"exported {len(paths)} slice(s) to {directory}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config-file", help="YAML config; defaults are used for missing keys")
    common.add_argument("--seed", type=int, help="overrides SYSTEM.SEED")
    common.add_argument("--manifest-out", help="manifest path (default OUTPUT_PATH/manifest_<command>.json)")
    common.add_argument("--opts", nargs="+", default=[], metavar="KEY VALUE",
                        help="dotted-key overrides applied after the file, e.g. --opts DECODE.SEED_THRESHOLD 0.8")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="volseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", parents=[common], help="chunk plan for the dataset volume")
    sample = sub.add_parser("sample", parents=[common], help="draw augmented training crops")
    sample.add_argument("--count", type=int, default=1, help="number of crops to write")
    sub.add_parser("encode", parents=[common], help="labels to target stacks")
    sub.add_parser("infer", parents=[common], help="sliding-window or chunked inference")
    sub.add_parser("decode", parents=[common], help="predictions to masks or instances")
    sub.add_parser("eval", parents=[common], help="IoU, AP and CREMI metrics")
    sub.add_parser("export", parents=[common], help="PGM slices of a volume")
    return parser


COMMANDS = {
    "plan": cmd_plan,
    "encode": cmd_encode,
    "infer": cmd_infer,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "export": cmd_export,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args.config_file, args.opts)
        if args.seed is not None:
            config = config.replace(SYSTEM__SEED=args.seed)
    except ConfigError as e:
        print(f"volseg: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"volseg: cannot read config: {e}", file=sys.stderr)
        return EXIT_IO
    run = Run(args.command, config)
    code, error = EXIT_OK, None
    try:
        if args.command == "sample":
            cmd_sample(run, args.count)
        else:
            COMMANDS[args.command](run)
    except (VolsegError, OSError, ValueError) as e:
        code, error = exit_code_for(e), f"{type(e).__name__}: {e}"
        print(f"volseg {args.command}: {error}", file=sys.stderr)
    manifest_path = Path(args.manifest_out) if args.manifest_out else run.out / f"manifest_{args.command}.json"
    try:
        write_json_atomic(manifest_path, run.manifest(code, error))
    except OSError as e:
        print(f"volseg: cannot write manifest {manifest_path}: {e}", file=sys.stderr)
        return code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
