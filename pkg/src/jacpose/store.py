"""Saving and restoring parameter sets, optimizer state and diffusion statistics.

Each parameter set is stored under a role prefix (``extractor``, ``applier``,
``kp``...) together with the hyperparameters that fix its shapes, so a model
can be rebuilt from its file alone.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .diffusion import LatentStats, NoiseSchedule, SetDenoiser
from .nets import ApplierParams, ExtractorParams, RefinerParams, ShapeError
from .optim import AdamState

_BUILDERS = {
    "extractor": lambda hp: ExtractorParams(hp["K"], hp["d"], hp["m_neighbors"], hp["stages"]),
    "applier": lambda hp: ApplierParams(hp["K"], hp["d"], hp["m_neighbors"], hp["mode"]),
    "refiner": lambda hp: RefinerParams(hp["K"], hp["d"], hp["width"], hp["blocks"]),
    "denoiser": lambda hp: SetDenoiser(hp["channels"], hp["cond_channels"], hp["width"], hp["blocks"], hp["temb"]),
}


def _parse(value):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def _fmt(value):
    return "%.17g" % value if isinstance(value, float) else str(value)


def save_models(path, models, adam=None, stats=None, schedule=None, meta=None):
    """Write ``models`` (role -> ParamSet) and optional training state to one file."""
    tensors, header = {}, dict(meta or {})
    header["roles"] = ",".join(sorted(models))
    for role, ps in models.items():
        header[f"{role}.kind"] = ps.kind
        for k, v in ps.hparams.items():
            header[f"{role}.{k}"] = _fmt(v)
        for k, arr in ps.state().items():
            tensors[f"{role}.{k}"] = arr
    if adam is not None:
        for k in ("lr", "beta1", "beta2", "eps", "step"):
            header[f"adam.{k}"] = _fmt(getattr(adam, k))
        for k in adam.m:
            tensors[f"adam.m.{k}"] = adam.m[k]
            tensors[f"adam.v.{k}"] = adam.v[k]
    if stats is not None:
        header["stats.K"] = str(stats.K)
        for k, arr in stats.state().items():
            tensors[f"stats.{k}"] = arr
    if schedule is not None:
        header["schedule.T"] = str(schedule.T)
        header["schedule.beta_start"] = _fmt(schedule.beta_start)
        header["schedule.beta_end"] = _fmt(schedule.beta_end)
    save_checkpoint(path, tensors, header)


class Bundle:
    """Loaded contents of a model file."""

    def __init__(self, models, adam, stats, schedule, meta):
        self.models, self.adam, self.stats, self.schedule, self.meta = models, adam, stats, schedule, meta

    def __getitem__(self, role):
        try:
            return self.models[role]
        except KeyError:
            raise CheckpointError(f"checkpoint has no {role!r} model (has {sorted(self.models)})") from None


def load_models(path):
    tensors, meta = load_checkpoint(path)
    roles = [r for r in meta.get("roles", "").split(",") if r]
    models = {}
    for role in roles:
        kind = meta.get(f"{role}.kind")
        if kind not in _BUILDERS:
            raise CheckpointError(f"{path}: unknown model kind {kind!r} for {role!r}")
        prefix = f"{role}."
        hp = {k[len(prefix):]: _parse(v) for k, v in meta.items() if k.startswith(prefix) and k != f"{role}.kind"}
        try:
            ps = _BUILDERS[kind](hp)
        except KeyError as exc:
            raise CheckpointError(f"{path}: {role} is missing hyperparameter {exc}") from None
        arrays = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            models[role] = ps.load_state(arrays)
        except ShapeError as exc:
            raise CheckpointError(f"{path}: {role}: {exc}") from None
    adam = None
    if "adam.step" in meta:
        adam = AdamState(
            lr=float(meta["adam.lr"]), beta1=float(meta["adam.beta1"]), beta2=float(meta["adam.beta2"]),
            eps=float(meta["adam.eps"]), step=int(meta["adam.step"]),
        )
        for k, arr in tensors.items():
            if k.startswith("adam.m."):
                adam.m[k[7:]] = arr
                adam.v[k[7:]] = tensors[f"adam.v.{k[7:]}"]
    stats = None
    if "stats.K" in meta:
        stats = LatentStats(
            tensors["stats.z_mean"], tensors["stats.z_std"], tensors["stats.h_mean"], tensors["stats.h_std"],
            int(meta["stats.K"]),
        )
    schedule = None
    if "schedule.T" in meta:
        schedule = NoiseSchedule(
            int(meta["schedule.T"]), float(meta["schedule.beta_start"]), float(meta["schedule.beta_end"])
        )
    return Bundle(models, adam, stats, schedule, meta)


def check_compatible(a, b, keys=("K", "d")):
    """Raise :class:`ShapeError` when two parameter sets disagree on latent shape."""
    for k in keys:
        if a.hparams.get(k) != b.hparams.get(k):
            raise ShapeError(f"{a.kind} and {b.kind} disagree on {k}: {a.hparams.get(k)} vs {b.hparams.get(k)}")


