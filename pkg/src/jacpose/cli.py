"""Command-line driver.

Every command reads and validates all of its inputs before it writes anything.
Exit status is 0 on success, 2 for invalid input or configuration, 3 for
numerical failures and 1 for anything else.
"""
import argparse
import os
import sys

import numpy as np

from . import nets
from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ConfigError, REFINE_SCHEMA, diffusion_config, train_config, worm_spec
from .diffusion import sample_cascaded, train_diffusion
from .mesh import TriMesh, load_obj, save_obj
from .poisson import build_system, solve_tensor
from .store import check_compatible, load_models, save_models
from .synth import PRESETS, gen_dataset, gen_template
from .train import pmd, train_autoencoder, train_refiner, transfer_vertices, write_history

MANIFEST_HEADER = "# jacpose pose manifest"


def _floats(values):
    return ",".join("%.17g" % v for v in values)


# -- data directories ------------------------------------------------------------


def _write_dataset(out, spec, template, samples):
    os.makedirs(out, exist_ok=True)
    save_obj(template, os.path.join(out, "template.obj"))
    lines = [
        MANIFEST_HEADER,
        f"spec name={spec.name} segments={spec.segments} ring={spec.ring} length=%.17g radius=%.17g scale=%s"
        % (spec.length, spec.radius, _floats(spec.scale)),
        "template template.obj",
    ]
    for i, (mesh, pose) in enumerate(samples):
        name = f"pose_{i:04d}.obj"
        save_obj(mesh, os.path.join(out, name))
        lines.append(f"pose {name} bend={_floats(pose.bend)} twist={_floats(pose.twist)}")
    with open(os.path.join(out, "manifest.txt"), "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(directory):
    """Template mesh and pose meshes listed in ``directory/manifest.txt``."""
    path = os.path.join(directory, "manifest.txt")
    with open(path, encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    template, poses = None, []
    for line in lines:
        kind, _, rest = line.partition(" ")
        if kind == "template":
            template = load_obj(os.path.join(directory, rest.split()[0]))
        elif kind == "pose":
            poses.append(load_obj(os.path.join(directory, rest.split()[0])))
        elif kind != "spec":
            raise ValueError(f"{path}: unknown manifest record {kind!r}")
    if template is None or not poses:
        raise ValueError(f"{path}: manifest needs a template and at least one pose")
    return template, poses


# -- commands ------------------------------------------------------------------


def cmd_gen_data(args):
    spec = PRESETS[args.spec] if args.spec in PRESETS else worm_spec(args.spec)
    template = gen_template(spec)
    samples = gen_dataset(spec, args.n, args.seed)
    _write_dataset(args.out, spec, template, samples)
    print(f"wrote {len(samples)} poses of worm {spec.name} to {args.out}")


def _train_meta(config):
    return {f"config.{k}": ("%.17g" % v if isinstance(v, float) else v) for k, v in vars(config).items()}


def cmd_train(args):
    config = train_config(args.config)
    template, dataset = read_dataset(args.data)
    extractor = applier = adam = None
    if args.resume:
        bundle = load_models(args.resume)
        extractor, applier, adam = bundle["extractor"], bundle["applier"], bundle.adam
        for key in ("K", "d", "m_neighbors"):
            if extractor.hparams[key] != getattr(config, key):
                raise ConfigError(f"config {key}={getattr(config, key)} does not match checkpoint {extractor.hparams[key]}")
        if applier.mode != config.route:
            raise ConfigError(f"config route={config.route} does not match checkpoint {applier.mode}")
        if adam is not None:
            adam.lr = config.lr
    result = train_autoencoder(config, dataset, template, extractor, applier, adam)
    os.makedirs(args.out, exist_ok=True)
    meta = _train_meta(config)
    meta["initial_loss"] = "%.17g" % result.initial_loss
    meta["final_loss"] = "%.17g" % result.final_loss
    save_models(
        os.path.join(args.out, "model.ckpt"),
        {"extractor": result.extractor, "applier": result.applier},
        adam=result.adam,
        meta=meta,
    )
    write_history(os.path.join(args.out, "history.csv"), result.history, ["step", "loss"])
    print(f"initial_loss {result.initial_loss:.6e} final_loss {result.final_loss:.6e} steps {result.adam.step}")


def cmd_transfer(args):
    bundle = load_models(args.checkpoint)
    extractor, applier = bundle["extractor"], bundle["applier"]
    source = load_obj(args.source_pose)
    target = load_obj(args.target_template)
    refiner = None
    if args.refiner:
        refiner = load_models(args.refiner)["refiner"]
        check_compatible(refiner, extractor)
    system = build_system(target) if applier.mode == "jacobian" else None
    V = transfer_vertices(extractor, applier, source, target, system, refiner)
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("transferred mesh has non-finite vertices")
    out = TriMesh(V, target.faces)
    _ensure_parent(args.out)
    save_obj(out, args.out)
    print(f"wrote {args.out}")


def cmd_refine(args):
    config = train_config(args.config, REFINE_SCHEMA)
    bundle = load_models(args.checkpoint)
    extractor, applier = bundle["extractor"], bundle["applier"]
    for key in ("K", "d"):
        if getattr(config, key) != extractor.hparams[key]:
            config = _replace(config, key, extractor.hparams[key])
    _, sources = read_dataset(args.data)
    target = load_obj(args.target_template)
    result = train_refiner(config, extractor, applier, sources, target)
    os.makedirs(args.out, exist_ok=True)
    save_models(os.path.join(args.out, "refiner.ckpt"), {"refiner": result.refiner}, adam=result.adam,
                meta=_train_meta(config))
    write_history(os.path.join(args.out, "refine_history.csv"), result.history, ["step", "total", "lap", "edge", "reg"])
    print(f"refined for {config.steps} steps")


def _replace(config, key, value):
    values = vars(config).copy()
    values[key] = value
    return type(config)(**values)


def cmd_train_diffusion(args):
    config = diffusion_config(args.config)
    bundle = load_models(args.checkpoint)
    extractor, applier = bundle["extractor"], bundle["applier"]
    _, poses = read_dataset(args.data)
    with T.no_grad():
        latents = [nets.extract_pose(extractor, m).detach() for m in poses]
    result = train_diffusion(config, latents)
    os.makedirs(args.out, exist_ok=True)
    meta = _train_meta(config)
    for key, value in sorted(result.final.items()):
        meta[f"final_loss.{key}"] = "%.17g" % value
        meta[f"initial_loss.{key}"] = "%.17g" % result.initial[key]
    save_models(
        os.path.join(args.out, "diffusion.ckpt"),
        {"kp": result.kp_model, "feat": result.feat_model, "applier": applier},
        stats=result.stats,
        schedule=config.schedule(),
        meta=meta,
    )
    write_history(os.path.join(args.out, "kp_history.csv"), result.kp_history, ["step", "loss"])
    write_history(os.path.join(args.out, "feat_history.csv"), result.feat_history, ["step", "loss"])
    print("keypoints %.6e -> %.6e, features %.6e -> %.6e" % (
        result.initial["keypoints"], result.final["keypoints"], result.initial["features"], result.final["features"]))


def cmd_sample(args):
    bundle = load_models(args.checkpoint)
    kp, feat, applier = bundle["kp"], bundle["feat"], bundle["applier"]
    if bundle.stats is None or bundle.schedule is None:
        raise ValueError(f"{args.checkpoint}: not a diffusion checkpoint")
    target = load_obj(args.target_template)
    latents = sample_cascaded(kp, feat, bundle.schedule, bundle.stats, args.seed, n=args.n)
    system = build_system(target) if applier.mode == "jacobian" else None
    meshes = []
    with T.no_grad():
        for i, lat in enumerate(latents):
            if applier.mode == "jacobian":
                V = solve_tensor(system, nets.apply_pose(applier, lat, target)).data
            else:
                V = nets.apply_pose_vertices(applier, lat, target).data
            if not np.all(np.isfinite(V)):
                raise FloatingPointError(f"sample {i} decoded to non-finite vertices")
            meshes.append(TriMesh(V, target.faces))
    os.makedirs(args.out_dir, exist_ok=True)
    tensors = {}
    for i, (lat, mesh) in enumerate(zip(latents, meshes)):
        save_obj(mesh, os.path.join(args.out_dir, f"sample_{i:04d}.obj"))
        tensors[f"Z.{i:04d}"], tensors[f"H.{i:04d}"] = lat.numpy()
    save_checkpoint(os.path.join(args.out_dir, "latents.ckpt"), tensors, {"n": args.n, "seed": args.seed})
    print(f"wrote {args.n} samples to {args.out_dir}")


def cmd_eval_pmd(args):
    value = pmd(load_obj(args.pred), load_obj(args.gt))
    print(f"PMD {value:.6e}  x1e-3 {value * 1e3:.6f}")


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# -- argument parsing ------------------------------------------------------------


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="jacpose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate posed worm meshes and a manifest")
    p.add_argument("--spec", default="A", help="preset name (A, B) or a key=value worm spec file")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the pose extractor and applier")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="model.ckpt to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="apply the pose of one mesh to another template")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-pose", required=True)
    p.add_argument("--target-template", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refiner")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("refine", help="train the latent refiner for a target template")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-template", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train-diffusion", help="train the cascaded latent diffusion models")
    p.add_argument("--checkpoint", required=True, help="trained autoencoder model.ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="sample new poses and apply them to a template")
    p.add_argument("--checkpoint", required=True, help="diffusion.ckpt")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-template", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-pmd", help="mean squared per-vertex distance between two meshes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval_pmd)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ArithmeticError as exc:
        print(f"jacpose: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"jacpose: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"jacpose: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
