"""End-to-end restoration: configuration, stage orchestration, baselines and artifacts.

Stage order: subsample, internal, absorb, register, lowrank (low-rank split and
detail layer), deblur, fuse. Each stage can be switched off; an inactive stage
passes its input through (see :data:`STAGES`).
"""

import dataclasses
import hashlib
import logging
import os
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_same_shape, check_sequence
from .deblur import DeblurParams, blind_deconvolve
from .fusion import FusionParams, extract_detail, fuse, lowrank_split
from .imagecore import psnr, ssim, temporal_mean
from .io import append_csv, read_image, read_sequence, write_csv, write_image, write_sequence
from .optflow import FlowParams
from .rpca import RpcaParams
from .stabilize import (
    LOG_HEADER,
    FlowCache,
    StabilizeParams,
    absorbing_stabilize,
    centroid_stabilize,
    internal_stabilize,
    register_to_reference,
)
from .subsample import SubsampleParams, energy_curve_rows, sharpness_scores, subsample
from .turbsim import TurbulenceParams

log = logging.getLogger(__name__)

# stage name -> what happens when it is switched off
STAGES = {
    "subsample": "keep every frame; reference is the temporal mean",
    "internal": "pass the subsampled frames through",
    "absorb": "keep the internally stabilized frames",
    "register": "pass the absorbed frames through",
    "lowrank": "low-rank image is the temporal mean; no detail layer",
    "deblur": "use the low-rank image as the deblurred image",
    "fuse": "final image is the deblurred image",
}
METRICS_HEADER = ("frame_index", "psnr", "ssim")
ENERGY_HEADER = ("k", "cardinality_term", "e_q", "e_k")
PARTIAL_MARKER = ".partial"

# config section -> parameter record; [rpca] feeds both stabilization and fusion
SECTIONS = {
    "subsample": SubsampleParams,
    "flow": FlowParams,
    "stabilize": StabilizeParams,
    "rpca": RpcaParams,
    "fusion": FusionParams,
    "deblur": DeblurParams,
    "turbulence": TurbulenceParams,
}
# keys owned by another section or by the global seed
_EXCLUDED = {
    "stabilize": {"flow", "rpca", "n_threads"},
    "fusion": {"rpca"},
    "turbulence": {"seed"},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``partial`` holds finished results."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: str | None = None
    output_dir: str | None = None
    seed: int = 0
    threads: int = 1
    emit_intermediates: bool = False
    toggles: tuple = tuple((name, True) for name in STAGES)
    subsample: SubsampleParams = field(default_factory=SubsampleParams)
    flow: FlowParams = field(default_factory=FlowParams)
    stabilize: StabilizeParams = field(default_factory=StabilizeParams)
    rpca: RpcaParams = field(default_factory=RpcaParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    deblur: DeblurParams = field(default_factory=DeblurParams)
    turbulence: TurbulenceParams = field(default_factory=TurbulenceParams)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        names = [n for n, _ in self.toggles]
        if sorted(names) != sorted(STAGES) or len(set(names)) != len(names):
            raise ConfigError(f"toggles must name each stage once: {list(STAGES)}")

    def enabled(self, stage):
        return dict(self.toggles)[stage]

    def with_toggles(self, **changes):
        current = dict(self.toggles)
        for name, on in changes.items():
            if name not in current:
                raise ConfigError(f"unknown stage '{name}'; expected one of {list(STAGES)}")
            current[name] = bool(on)
        return replace(self, toggles=tuple((n, current[n]) for n in STAGES))

    def stabilize_params(self):
        return replace(self.stabilize, flow=self.flow, rpca=self.rpca, n_threads=self.threads)

    def fusion_params(self):
        return replace(self.fusion, rpca=self.rpca)

    def turbulence_params(self):
        return replace(self.turbulence, seed=stage_seed(self.seed, "simulate"))


def stage_seed(seed, label):
    """Deterministic per-stage seed forked from the global one by a fixed label."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------- config text

def _parse_scalar(text):
    low = text.lower()
    if low == "none":
        return None
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_value(text):
    text = text.strip()
    if "," in text:
        return tuple(_parse_scalar(p.strip()) for p in text.split(","))
    return _parse_scalar(text)


def _coerce(value, default, where):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
    if isinstance(default, tuple) and not isinstance(value, tuple):
        raise ConfigError(f"{where}: expected a comma-separated list, got {value!r}")
    return value


def _configurable(section):
    cls = SECTIONS[section]
    skip = _EXCLUDED.get(section, set())
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def parse_config(text, base=None):
    """Parse ``[section]`` / ``key = value`` text into a :class:`PipelineConfig`.

    Sections: ``pipeline`` (seed, threads, emit_intermediates, input, output),
    ``toggles`` (stage = on|off) and one per parameter record. Unknown
    sections or keys are errors; ``#`` starts a comment.
    """
    base = base or PipelineConfig()
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS and section not in ("pipeline", "toggles"):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of a section")
        key, value = (p.strip() for p in line.split("=", 1))
        if (section, key) in values:
            raise ConfigError(f"line {lineno}: duplicate key {section}.{key}")
        values[(section, key)] = (_parse_value(value), lineno)

    top = {}
    toggles = {}
    records = {name: {} for name in SECTIONS}
    pipeline_keys = {"seed": "seed", "threads": "threads", "emit_intermediates": "emit_intermediates",
                     "input": "input_dir", "output": "output_dir"}
    for (section, key), (value, lineno) in values.items():
        where = f"line {lineno}: {section}.{key}"
        if section == "pipeline":
            if key not in pipeline_keys:
                raise ConfigError(f"{where}: unknown key")
            attr = pipeline_keys[key]
            top[attr] = _coerce(value, getattr(base, attr), where) if attr not in ("input_dir", "output_dir") else str(value)
        elif section == "toggles":
            if key not in STAGES:
                raise ConfigError(f"{where}: unknown stage")
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected on or off")
            toggles[key] = value
        else:
            known = _configurable(section)
            if key not in known:
                raise ConfigError(f"{where}: unknown key")
            records[section][key] = _coerce(value, getattr(getattr(base, section), key), where)
    try:
        changes = {name: replace(getattr(base, name), **kw) for name, kw in records.items() if kw}
        config = replace(base, **top, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config.with_toggles(**toggles) if toggles else config


def load_config(path):
    return parse_config(Path(path).read_text())


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def config_text(config, include_paths=True):
    """Canonical text form of `config`; :func:`parse_config` reads it back."""
    lines = ["[pipeline]", f"seed = {config.seed}"]
    if include_paths:
        lines.append(f"threads = {config.threads}")
        lines.append(f"emit_intermediates = {_fmt(config.emit_intermediates)}")
        for key, attr in (("input", "input_dir"), ("output", "output_dir")):
            if getattr(config, attr) is not None:
                lines.append(f"{key} = {getattr(config, attr)}")
    lines.append("")
    lines.append("[toggles]")
    lines += [f"{name} = {_fmt(on)}" for name, on in config.toggles]
    for section in SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        record = getattr(config, section)
        lines += [f"{name} = {_fmt(getattr(record, name))}" for name in _configurable(section)]
    return "\n".join(lines) + "\n"


def config_hash(config):
    """SHA-256 of the settings that determine the output.

    Paths, thread count and the intermediates flag are left out: they do not
    change any computed image.
    """
    return hashlib.sha256(config_text(config, include_paths=False).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- restoration

@dataclass
class Restoration:
    """Everything a run produced, filled in stage by stage."""

    final: np.ndarray | None = None
    reference: np.ndarray | None = None
    indices: np.ndarray | None = None
    subsample_result: object = None
    stabilized: np.ndarray | None = None
    absorbed: np.ndarray | None = None
    sharp_indices: np.ndarray | None = None
    registered: np.ndarray | None = None
    low_rank: np.ndarray | None = None
    detail: object = None
    deblurred: np.ndarray | None = None
    kernel: np.ndarray | None = None
    log_rows: list = field(default_factory=list)
    timings: list = field(default_factory=list)  # (stage, seconds) in execution order


def restore(frames, config=None, cache=None):
    """Run the restoration stages in memory.

    Parameters
    ----------
    frames : ndarray of shape (T, H, W), T >= 2
    config : PipelineConfig, optional
    cache : FlowCache, optional
        Shared pairwise flows of `frames` (must use ``config.flow``).

    Returns
    -------
    Restoration

    Raises
    ------
    StageError
        With the failing stage and the results finished so far.
    """
    config = config or PipelineConfig()
    frames = check_sequence(frames, min_frames=2)
    sp = config.stabilize_params()
    if cache is None:
        cache = FlowCache(frames, config.flow, config.threads)
    elif cache.frames.shape != frames.shape:
        raise ValueError("flow cache belongs to a different sequence")
    out = Restoration()

    def run(stage, fn):
        start = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            raise StageError(stage, exc, out) from exc
        out.timings.append((stage, time.perf_counter() - start))
        log.info("%s done in %.2fs", stage, out.timings[-1][1])

    def do_subsample():
        if config.enabled("subsample"):
            res = subsample(frames, config.subsample)
            out.subsample_result = res
            out.indices = res.indices
            out.reference = res.reference
        else:
            out.indices = np.arange(frames.shape[0])
            out.reference = frames.mean(axis=0)

    def do_internal():
        selected = frames[out.indices]
        if config.enabled("internal") and len(out.indices) >= 2:
            out.stabilized, rows = internal_stabilize(selected, sp, table=cache.block(out.indices),
                                                      frame_ids=out.indices)
            out.log_rows += rows
        else:
            out.stabilized = selected

    def do_absorb():
        if config.enabled("absorb"):
            scores = sharpness_scores(frames)
            out.absorbed, out.sharp_indices, rows = absorbing_stabilize(
                out.stabilized, frames, scores, out.indices, sp)
            out.log_rows += rows
        else:
            out.absorbed, out.sharp_indices = out.stabilized, out.indices

    def do_register():
        if config.enabled("register"):
            out.registered, rows = register_to_reference(out.absorbed, out.reference, sp)
            out.log_rows += [(r[0], int(out.sharp_indices[r[1]])) + r[2:] for r in rows]
        else:
            out.registered = out.absorbed

    def do_lowrank():
        if config.enabled("lowrank") and out.registered.shape[0] >= 2:
            fp = config.fusion_params()
            out.low_rank, sparse = lowrank_split(out.registered, fp)
            out.detail, _ = extract_detail(sparse, fp)
        else:
            out.low_rank = temporal_mean(out.registered)
            out.detail = None

    def do_deblur():
        if config.enabled("deblur"):
            res = blind_deconvolve(out.low_rank, config.deblur)
            out.deblurred, out.kernel = res.image, res.kernel
        else:
            out.deblurred = out.low_rank

    def do_fuse():
        if config.enabled("fuse") and out.detail is not None:
            out.final = fuse(out.deblurred, out.detail, config.fusion.beta)
        else:
            out.final = out.deblurred

    for stage, fn in zip(STAGES, (do_subsample, do_internal, do_absorb, do_register, do_lowrank,
                                  do_deblur, do_fuse)):
        run(stage, fn)
    return out


def centroid_baseline(frames, flow_params=None, n_threads=1, cache=None):
    """Temporal mean of the frames warped by the mean of their outgoing flows."""
    frames = check_sequence(frames, min_frames=2)
    table = cache.block() if cache is not None else None
    return temporal_mean(centroid_stabilize(frames, flow_params, n_threads, table=table))


def mean_baseline(frames):
    return temporal_mean(check_sequence(frames))


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float


def evaluate(restored, truth):
    """PSNR and SSIM of `restored` against `truth`."""
    restored = check_image(restored, "restored")
    truth = check_image(truth, "truth")
    check_same_shape(restored, truth, ("restored", "truth"))
    return QualityReport(psnr(restored, truth), ssim(restored, truth))


def metrics_row(label, report):
    return (label, f"{report.psnr:.6f}", f"{report.ssim:.6f}")


# ---------------------------------------------------------------- artifacts

@dataclass
class RunManifest:
    config_hash: str
    stages: list  # (stage, seconds) in execution order
    outputs: dict  # artifact name -> path
    metrics: dict  # label -> QualityReport
    status: str = "complete"

    def to_text(self):
        lines = ["[run]", f"config_hash = {self.config_hash}", f"status = {self.status}",
                 f"stage_order = {', '.join(s for s, _ in self.stages)}", "", "[timings]"]
        lines += [f"{s} = {t:.3f}" for s, t in self.stages]
        lines += ["", "[outputs]"] + [f"{k} = {v}" for k, v in self.outputs.items()]
        lines += ["", "[metrics]"]
        for label, rep in self.metrics.items():
            lines.append(f"{label}.psnr = {rep.psnr:.6f}")
            lines.append(f"{label}.ssim = {rep.ssim:.6f}")
        return "\n".join(lines) + "\n"


def read_manifest(path):
    """Flat ``section.key -> value`` view of a manifest file."""
    result = {}
    section = ""
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line.startswith("["):
            section = line.strip("[]")
        elif "=" in line:
            k, v = (p.strip() for p in line.split("=", 1))
            result[f"{section}.{k}"] = v
    return result


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_input(path):
    """Frames and optional truth from a bundle directory or a plain frame directory.

    A bundle (as written by the simulator) has ``frames/`` and ``truth.png``.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"input directory {path} does not exist")
    if (path / "frames").is_dir():
        frames = read_sequence(path / "frames")
        truth_path = path / "truth.png"
        return frames, (read_image(truth_path) if truth_path.exists() else None)
    return read_sequence(path), None


def _write_artifacts(out, result, config, emit):
    paths = {}
    if result.subsample_result is not None:
        paths["energy_curve"] = write_csv(out / "energy_curve.csv", ENERGY_HEADER,
                                          energy_curve_rows(result.subsample_result,
                                                            config.subsample.rho))
    if result.log_rows:
        paths["stabilize_log"] = write_csv(out / "stabilize_log.csv", LOG_HEADER, result.log_rows)
    if result.final is not None:
        paths["final"] = write_image(out / "final.png", result.final, bits=16)
    if emit:
        inter = out / "intermediates"
        if result.reference is not None:
            paths["reference"] = write_image(inter / "reference.png", result.reference, bits=16)
        if result.indices is not None:
            paths["indices"] = write_csv(inter / "indices.csv", ("frame",),
                                         [(int(i),) for i in result.indices])
        for name in ("stabilized", "absorbed", "registered"):
            stack = getattr(result, name)
            if stack is not None:
                write_sequence(inter / name, stack, bits=16)
                paths[name] = inter / name
        for name in ("low_rank", "deblurred"):
            img = getattr(result, name)
            if img is not None:
                paths[name] = write_image(inter / f"{name}.png", img, bits=16)
        if result.detail is not None:
            # signed layer stored around mid-grey
            paths["detail"] = write_image(inter / "detail.png", 0.5 + 0.5 * result.detail.values,
                                          bits=16)
        if result.kernel is not None:
            paths["kernel"] = write_csv(inter / "kernel.csv", tuple(range(result.kernel.shape[1])),
                                        [tuple(f"{v:.8g}" for v in row) for row in result.kernel])
    return {k: str(v) for k, v in paths.items()}


def run_all(config, frames=None, truth=None, cache=None):
    """Restore a sequence and write ``final.png``, logs, metrics and ``manifest.txt``.

    Frames come from ``config.input_dir`` unless given. On a stage failure the
    finished artifacts are kept, a ``.partial`` marker naming the stage is
    written and the :class:`StageError` is re-raised.
    """
    if config.output_dir is None:
        raise ConfigError("output directory is not set")
    if frames is None:
        if config.input_dir is None:
            raise ConfigError("input directory is not set")
        frames, found_truth = load_input(config.input_dir)
        truth = truth if truth is not None else found_truth
    frames = check_sequence(frames, min_frames=2)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    if marker.exists():
        marker.unlink()
    digest = config_hash(config)
    try:
        result = restore(frames, config, cache)
    except StageError as exc:
        partial = exc.partial or Restoration()
        paths = _write_artifacts(out, partial, config, True)
        _atomic_write(marker, f"stage = {exc.stage}\ncause = {exc.cause!r}\n")
        manifest = RunManifest(digest, partial.timings, paths, {}, status=f"failed at {exc.stage}")
        _atomic_write(out / "manifest.txt", manifest.to_text())
        raise
    paths = _write_artifacts(out, result, config, config.emit_intermediates)
    metrics = {}
    if truth is not None:
        metrics["final"] = evaluate(result.final, truth)
        # one row per registered frame (original index), then the restored image
        rows = [metrics_row(int(i), evaluate(f, truth))
                for i, f in zip(result.sharp_indices, result.registered)]
        rows.append(metrics_row("final", metrics["final"]))
        paths["metrics"] = str(write_csv(out / "metrics.csv", METRICS_HEADER, rows))
    manifest = RunManifest(digest, result.timings, paths, metrics)
    _atomic_write(out / "manifest.txt", manifest.to_text())
    return manifest


def append_metrics(path, label, report):
    return append_csv(path, METRICS_HEADER, [metrics_row(label, report)])


class TurbulenceRestorer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(frames)`` runs the pipeline and keeps ``image_``.

    ``transform(frames)`` restores another sequence with the same settings.
    Parameter records not exposed here use their defaults.
    """

    def __init__(self, beta=0.5, deblur=True, boundary="identity", n_threads=1):
        self.beta = beta
        self.deblur = deblur
        self.boundary = boundary
        self.n_threads = n_threads

    def _config(self):
        config = PipelineConfig(threads=self.n_threads,
                                fusion=FusionParams(beta=self.beta),
                                stabilize=StabilizeParams(boundary=self.boundary))
        return config.with_toggles(deblur=self.deblur)

    def fit(self, X, y=None):
        self.result_ = restore(X, self._config())
        self.image_ = self.result_.final
        self.indices_ = self.result_.indices
        return self

    def transform(self, X):
        return restore(X, self._config()).final

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X).image_
