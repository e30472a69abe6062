"""Stage-oriented command line: every pipeline step is a subcommand.

Each command reads its inputs, writes fixed-name artifacts into the
--out directory, and drops a run manifest beside them (stage, paths,
seed, config hash, wall time). Identical inputs and seed reproduce
identical artifact bytes; the manifest's wall time is the one field
that varies, so determinism audits compare everything except manifests.

Config override files use the same JSON dialect as scene configs: one
object whose keys override stage config fields, nesting into sub-config
objects where a stage has them, e.g. {"iters_global": 50} for calibrate
or {"train": {"epochs": 3}, "model": {"hidden": 64}} for train.

Exit codes: 0 success, 2 usage (bad invocation or missing input files),
3 validation (inputs or configs that parse but do not hold up), 4
runtime simulation faults.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .arrayfile import load_arrays, save_arrays
from .benchmark import (
    BenchmarkConfig,
    _gnn_record,
    _local_props,
    _replay_record,
    benchmark,
)
from .calibrate import (
    CalibConfig,
    GlobalProperties,
    LocalProperties,
    optimize_global,
    optimize_local,
)
from .errors import SimulationFault, ValidationError
from .gnn import (
    FinetuneConfig,
    GnnConfig,
    TrainConfig,
    finetune_properties,
    fps,
    load_model,
    normalize_properties,
    save_model,
    train,
)
from .planner import PlanConfig, TargetSpec, plan_loop, plan_transcript
from .scenes import load_scene, register_particles
from .service import (
    DEFAULT_PORT,
    InteractionService,
    _scene_properties,
    _session_graph,
)
from .synth import PerturbationConfig, SynthConfig, load_dataset, save_dataset, synthesize

# dataclass-typed sub-config fields, keyed by field name, for overrides
# that arrive as nested JSON objects
_NESTED = {
    "calib": CalibConfig,
    "synth": SynthConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
    "model": GnnConfig,
    "perturb": PerturbationConfig,
}


@dataclasses.dataclass
class RunManifest:
    """What a command ran on: enough to reproduce or audit the artifacts."""

    stage: str
    inputs: dict
    outputs: dict
    seed: int | None
    config_hash: str
    seconds: float

    def write(self, path):
        body = dataclasses.asdict(self)
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _config_hash(config):
    """Stable digest: semantically identical configs hash identically."""

    def canon(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: canon(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, dict):
            return {str(k): canon(v) for k, v in sorted(obj.items())}
        if isinstance(obj, (list, tuple)):
            return [canon(v) for v in obj]
        if isinstance(obj, np.generic):
            return obj.item()
        return obj

    blob = json.dumps(canon(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _override(config, data):
    """Dataclass copy with JSON-sourced field overrides.

    Unknown keys are rejected. Object values recurse into dataclass
    fields, instantiating the stage default when the field is None, and
    lists replace tuple fields as tuples so validation sees the type it
    expects.
    """
    names = {f.name for f in dataclasses.fields(config)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(
            f"unknown {type(config).__name__} keys: {', '.join(unknown)}")
    updates = {}
    for key, value in data.items():
        current = getattr(config, key)
        if isinstance(value, dict) and (key in _NESTED
                                        or dataclasses.is_dataclass(current)):
            base = current if current is not None else _NESTED[key]()
            updates[key] = _override(base, value)
        elif isinstance(current, tuple) and isinstance(value, list):
            updates[key] = tuple(value)
        else:
            updates[key] = value
    return dataclasses.replace(config, **updates)


def _read_config(args):
    if args.config is None:
        return {}
    path = _existing(args, args.config)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return data


def _existing(args, path):
    """Resolve an input path; a missing file is a usage error (exit 2)."""
    p = Path(path)
    if not p.exists():
        args.parser.error(f"input not found: {p}")
    return p


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- twin artifact (calibrated per-particle properties) ---

_TWIN_COLUMNS = ("E", "mu", "rho")


def _save_twin(path, local, positions0):
    save_arrays(path, {
        "E": np.asarray(local.E, dtype=np.float64),
        "mu": np.asarray(local.mu, dtype=np.float64),
        "rho": np.asarray(local.rho, dtype=np.float64),
        "nu": np.array([float(local.nu)]),
        "sigma_y": np.array([float(local.sigma_y)]),
        "positions0": np.asarray(positions0, dtype=np.float64),
    })


def _load_twin(path, particles):
    data = load_arrays(path)
    missing = [k for k in (*_TWIN_COLUMNS, "nu", "sigma_y") if k not in data]
    if missing:
        raise ValidationError(f"{path}: twin file lacks {missing}")
    n = particles.count
    for key in _TWIN_COLUMNS:
        if data[key].shape != (n,):
            raise ValidationError(
                f"{path}: property {key!r} has shape {data[key].shape}, but "
                f"registering the scene produced {n} particles")
    return LocalProperties(
        E=data["E"].astype(np.float64),
        mu=data["mu"].astype(np.float64),
        rho=data["rho"].astype(np.float64),
        nu=float(data["nu"][0]),
        sigma_y=float(data["sigma_y"][0]),
    )


# --- commands ---


def cmd_calibrate(args):
    scene_path = _existing(args, args.scene)
    config = _override(CalibConfig(), _read_config(args))
    out = _out_dir(args)
    start = time.perf_counter()
    view = load_scene(scene_path).training_view()
    particles = register_particles(view)
    rng = np.random.default_rng(args.seed)
    init = GlobalProperties.from_material(view.material)
    global_fit = optimize_global(view, init, config, rng=rng)
    local_fit = optimize_local(view, global_fit.params, config, rng=rng)
    _save_twin(out / "twin.dsa", local_fit.params, particles.x)
    RunManifest(
        stage="calibrate",
        inputs={"scene": str(scene_path)},
        outputs={"twin": str(out / "twin.dsa")},
        seed=args.seed,
        config_hash=_config_hash(config),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 0


def cmd_synthesize(args):
    twin_path = _existing(args, args.twin)
    scene_path = _existing(args, args.scene)
    config = _override(SynthConfig(), _read_config(args))
    out = _out_dir(args)
    start = time.perf_counter()
    view = load_scene(scene_path).training_view()
    particles = register_particles(view)
    local = _load_twin(twin_path, particles)
    table = np.column_stack([local.E, local.mu, local.rho])
    demos = synthesize(view, particles, table, args.episodes,
                       config=config, seed=args.seed)
    save_dataset(out / "dataset.dsa", demos)
    RunManifest(
        stage="synthesize",
        inputs={"twin": str(twin_path), "scene": str(scene_path)},
        outputs={"dataset": str(out / "dataset.dsa")},
        seed=args.seed,
        config_hash=_config_hash(config),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 0


def cmd_train(args):
    dataset_path = _existing(args, args.dataset)
    data = _read_config(args)
    unknown = sorted(set(data) - {"train", "model", "d_v"})
    if unknown:
        raise ValidationError(f"unknown train config keys: {', '.join(unknown)}")
    train_cfg = _override(TrainConfig(), data.get("train", {}))
    model_cfg = _override(GnnConfig(), data.get("model", {}))
    d_v = data.get("d_v")
    out = _out_dir(args)
    start = time.perf_counter()
    demos = load_dataset(dataset_path)
    rng = np.random.default_rng(args.seed)
    fitted = train(demos, train_cfg, rng, model=model_cfg, d_v=d_v)
    save_model(out / "model.dsa", fitted.params, fitted.model, fitted.norm)
    RunManifest(
        stage="train",
        inputs={"dataset": str(dataset_path)},
        outputs={"model": str(out / "model.dsa")},
        seed=args.seed,
        config_hash=_config_hash({"train": train_cfg, "model": model_cfg,
                                  "d_v": d_v}),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 0


def cmd_finetune(args):
    model_path = _existing(args, args.model)
    scene_path = _existing(args, args.scene)
    config = _override(FinetuneConfig(), _read_config(args))
    out = _out_dir(args)
    start = time.perf_counter()
    params, net, norm = load_model(model_path)
    view = load_scene(scene_path).training_view()
    if config.max_frames is None:
        # the view still reports full n_frames; cap the rollout at the split
        config = dataclasses.replace(
            config, max_frames=len(view.train_frames))
    idx = fps(view.cloud(0), norm["d_v"])
    phi0 = normalize_properties(_scene_properties(view, len(idx)))
    phi, info = finetune_properties(params, net, norm, view,
                                    phi0=phi0, config=config)
    save_arrays(out / "phi.dsa", {
        "phi": phi,
        "vertex_index": info["vertex_index"].astype(np.int64),
        "loss_curve": np.asarray(info["loss_curve"], dtype=np.float64),
    })
    RunManifest(
        stage="finetune",
        inputs={"model": str(model_path), "scene": str(scene_path)},
        outputs={"phi": str(out / "phi.dsa")},
        seed=None,
        config_hash=_config_hash(config),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 0


def cmd_plan(args):
    model_path = _existing(args, args.model)
    scene_path = _existing(args, args.scene)
    config = _override(PlanConfig(), _read_config(args))
    out = _out_dir(args)
    start = time.perf_counter()
    params, net, norm = load_model(model_path)
    scene = load_scene(scene_path)
    inputs = {"model": str(model_path), "scene": str(scene_path)}
    if args.target is not None:
        target_path = _existing(args, args.target)
        points = load_arrays(target_path)
        if "points" not in points:
            raise ValidationError(f"{target_path}: target file lacks 'points'")
        target = TargetSpec(points["points"])
        inputs["target"] = str(target_path)
    elif scene.target is not None:
        target = TargetSpec(scene.target)
    else:
        raise ValidationError(
            "scene has no target block; pass one with --target")
    graph = _session_graph(scene, norm, net.history)
    rng = np.random.default_rng(args.seed)
    result = plan_loop((params, net, norm), graph, target, config, rng)
    (out / "plan.json").write_text(plan_transcript(result) + "\n")
    save_arrays(out / "plan.dsa", {
        "actions": result.actions,
        "cost_curve": np.asarray(result.cost_curve, dtype=np.float64),
        "trajectory": np.asarray(result.trajectory, dtype=np.float64),
    })
    RunManifest(
        stage="plan",
        inputs=inputs,
        outputs={"transcript": str(out / "plan.json"),
                 "plan": str(out / "plan.dsa")},
        seed=args.seed,
        config_hash=_config_hash(config),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 0


def cmd_eval(args):
    paths = [_existing(args, p) for p in args.inputs]
    scene_path = _existing(args, args.scene)
    out = _out_dir(args)
    start = time.perf_counter()
    scene = load_scene(scene_path)
    if scene.masks is None or scene.camera is None:
        raise ValidationError("scene lacks masks or camera; nothing to score IoU against")
    inputs = {"scene": str(scene_path)}
    if "meta/version" in load_arrays(paths[0]):
        params, net, norm = load_model(paths[0])
        inputs["model"] = str(paths[0])
        idx = fps(scene.clouds[0], norm["d_v"])
        if len(paths) > 1:
            data = load_arrays(paths[1])
            if "phi" not in data or "vertex_index" not in data:
                raise ValidationError(f"{paths[1]}: not a property file")
            if not np.array_equal(data["vertex_index"], idx):
                raise ValidationError(
                    f"{paths[1]}: vertex indices do not match this scene and model")
            phi_obj = np.asarray(data["phi"], dtype=np.float64)
            inputs["phi"] = str(paths[1])
        else:
            phi_obj = normalize_properties(_scene_properties(scene, len(idx)))
        record = _gnn_record(scene, (params, net, norm), idx, phi_obj)
    else:
        if len(paths) > 1:
            raise ValidationError("twin evaluation takes a single input file")
        inputs["twin"] = str(paths[0])
        particles = register_particles(scene.training_view())
        local = _load_twin(paths[0], particles)
        record = _replay_record(scene, particles, _local_props(particles, local))
    (out / "metrics.csv").write_text(record.to_csv())
    (out / "summary.json").write_text(record.to_summary())
    RunManifest(
        stage="eval",
        inputs=inputs,
        outputs={"metrics": str(out / "metrics.csv"),
                 "summary": str(out / "summary.json")},
        seed=None,
        config_hash=_config_hash({}),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 0


def cmd_bench(args):
    data = _read_config(args)
    config = _override(BenchmarkConfig(), data)
    if args.scene is not None:
        config = dataclasses.replace(config, scene=args.scene)
    if args.episodes is not None:
        config = dataclasses.replace(config, episodes=args.episodes)
    out = _out_dir(args)
    start = time.perf_counter()
    records = benchmark(config, np.random.default_rng(args.seed))
    outputs = {}
    for key in sorted(records):
        (out / f"{key}.csv").write_text(records[key].to_csv())
        (out / f"{key}.json").write_text(records[key].to_summary())
        outputs[key] = str(out / f"{key}.csv")
    RunManifest(
        stage="bench",
        inputs={"scene": config.scene},
        outputs=outputs,
        seed=args.seed,
        config_hash=_config_hash(config),
        seconds=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return 4 if "partial" in records else 0


def cmd_serve(args):
    model_path = _existing(args, args.model)
    scene_path = _existing(args, args.scene)
    load_model(model_path)  # fail before binding the port, not per init
    load_scene(scene_path)
    service = InteractionService(port=args.port)
    service.start()
    host, port = service.address
    print(json.dumps({"host": host, "port": port, "model": str(model_path),
                      "scene": str(scene_path)}), flush=True)
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return 0


# --- parser ---


def _add_common(sub, out=True, scene=True, seed=False, config=True):
    if scene:
        sub.add_argument("--scene", required=True, help="scene config JSON")
    if out:
        sub.add_argument("--out", required=True, help="output directory")
    if seed:
        sub.add_argument("--seed", type=int, default=0,
                         help="random seed (default 0)")
    if config:
        sub.add_argument("--config", help="JSON file overriding stage config fields")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deformsim",
        description="Deformable-object twin pipeline: calibrate, synthesize, "
                    "train, fine-tune, plan, evaluate, benchmark, serve.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("calibrate", help="fit properties to a scene")
    _add_common(sub, seed=True)
    sub.set_defaults(func=cmd_calibrate, parser=sub)

    sub = commands.add_parser("synthesize", help="generate demonstrations from a twin")
    sub.add_argument("twin", help="calibrated twin file")
    sub.add_argument("--episodes", type=int, default=50,
                     help="episodes to generate (default 50)")
    _add_common(sub, seed=True)
    sub.set_defaults(func=cmd_synthesize, parser=sub)

    sub = commands.add_parser("train", help="fit the dynamics network on a dataset")
    sub.add_argument("dataset", help="demonstration dataset file")
    _add_common(sub, scene=False, seed=True)
    sub.set_defaults(func=cmd_train, parser=sub)

    sub = commands.add_parser("finetune", help="fit per-vertex properties to a scene")
    sub.add_argument("model", help="model checkpoint")
    _add_common(sub)
    sub.set_defaults(func=cmd_finetune, parser=sub)

    sub = commands.add_parser("plan", help="plan control actions toward a target")
    sub.add_argument("model", help="model checkpoint")
    sub.add_argument("--target", help="array file with target 'points' "
                                      "(default: the scene's target block)")
    _add_common(sub, seed=True)
    sub.set_defaults(func=cmd_plan, parser=sub)

    sub = commands.add_parser("eval", help="score a model or twin on held-out frames")
    sub.add_argument("inputs", nargs="+",
                     help="model checkpoint (plus optional property file) or twin file")
    _add_common(sub, config=False)
    sub.set_defaults(func=cmd_eval, parser=sub)

    sub = commands.add_parser("bench", help="run the pipeline on a generated scene")
    sub.add_argument("--scene", help="scene name: standard, uniform, two-material")
    sub.add_argument("--episodes", type=int, help="override episode count")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    sub.add_argument("--config", help="JSON file overriding BenchmarkConfig fields")
    sub.set_defaults(func=cmd_bench, parser=sub)

    sub = commands.add_parser("serve", help="run the interactive stepping service")
    sub.add_argument("model", help="model checkpoint")
    sub.add_argument("scene", help="scene config JSON")
    sub.add_argument("--port", type=int, default=DEFAULT_PORT,
                     help=f"TCP port, 0 for ephemeral (default {DEFAULT_PORT})")
    sub.set_defaults(func=cmd_serve, parser=sub)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SimulationFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
