"""Experiment orchestration: presets, eval-set filtering, sharded attack runs, CSV reports.

Work is cut into fixed-size chunks of eval images. Chunk boundaries depend only
on the experiment (never on the worker count) and every image's randomness is
keyed by its test-set index, so reports are byte-identical for any ``workers``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import graph
from .attacks import AttackConfig, ConfigError, DimConfig, TimConfig, attack, draw_targets, relevance
from .data import load_cifar10
from .graph import CrossEntropy
from .models import ModelDef, build, default_relu_start, default_temperature
from .rng import sample_rngs
from .rules import BackwardPolicy, GradMask, PoolRule, ReluRule, ResidualRule
from .weights import load_weights

PRESETS = ("vanilla", "sgm", "linbp", "ghost", "bpa", "sgm+bpa", "linbp+bpa", "ghost+bpa")
SWEEPABLE = ("mask_prob", "relu_recover_prob", "pool_recover_prob", "relu_start", "temperature", "gamma", "lambda")


class HarnessError(RuntimeError):
    pass


class EvalSetError(HarnessError):
    pass


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class PolicyOptions:
    """Knobs that refine a preset; ``None`` means the model-dependent default."""

    temperature: float | None = None
    relu_start: int | None = None
    gamma: float = 0.5
    ghost_lambda: float = 0.22
    blocks: int = 8
    mask_prob: float | None = None
    mask_stage: int = 3
    relu_recover_prob: float | None = None
    pool_recover_prob: float | None = None


def expand_preset(name: str, model: ModelDef, opts: PolicyOptions = PolicyOptions()) -> BackwardPolicy:
    """Turn a preset name into a concrete :class:`BackwardPolicy` for ``model``.

    Recover / mask options are layered on top of the preset, which is how the
    truncation sweeps are expressed.
    """
    if name not in PRESETS:
        raise HarnessError(f"unknown policy preset {name!r}; choose from {PRESETS}")
    parts = name.split("+")
    relu, pool, residual, ghost = ReluRule(), PoolRule(), ResidualRule(), None
    relu_start = opts.relu_start if opts.relu_start is not None else default_relu_start(model, opts.blocks)
    t = opts.temperature if opts.temperature is not None else default_temperature(model)
    if "bpa" in parts:
        relu, pool = ReluRule("bpa"), PoolRule("bpa", t)
    if "sgm" in parts:
        residual = ResidualRule("sgm", opts.gamma)
    if "linbp" in parts:
        relu, residual = ReluRule("linbp"), ResidualRule("linbp")
    if "ghost" in parts:
        ghost = opts.ghost_lambda
    if opts.relu_recover_prob is not None:
        relu, relu_start = ReluRule("recover", opts.relu_recover_prob), 0
    if opts.pool_recover_prob is not None:
        pool = PoolRule("recover", prob=opts.pool_recover_prob)
    mask = None
    if opts.mask_prob is not None:
        if not 0 <= opts.mask_stage < len(model.stage_boundaries):
            raise HarnessError(f"{model.name} has no stage {opts.mask_stage}")
        mask = GradMask(model.stage_boundaries[opts.mask_stage], opts.mask_prob)
    return BackwardPolicy(relu, relu_start, pool, residual, mask, ghost)


def _sweep_options(opts: PolicyOptions, param: str, value) -> PolicyOptions:
    if param not in SWEEPABLE:
        raise HarnessError(f"unknown sweep parameter {param!r}; choose from {SWEEPABLE}")
    if param == "relu_start":
        return replace(opts, relu_start=int(value))
    key = "ghost_lambda" if param == "lambda" else param
    return replace(opts, **{key: float(value)})


# ---------------------------------------------------------------------------
# experiment description


@dataclass(frozen=True)
class ModelRef:
    arch: str
    weights: str


@dataclass(frozen=True)
class ExperimentSpec:
    surrogate: ModelRef
    victims: tuple[ModelRef, ...]
    policy: str = "vanilla"
    options: PolicyOptions = PolicyOptions()
    attack: AttackConfig = AttackConfig()
    n: int = 1000
    seed: int = 0
    data_dir: str | None = None
    out: str | None = None
    workers: int = 0
    chunk: int = 50
    sweep_param: str | None = None
    sweep_values: tuple = ()
    step: float = 1e-2
    policies: tuple[str, ...] = ("vanilla", "bpa")  # relevance comparison


def model_refs(models_dir, archs) -> tuple[ModelRef, ...]:
    return tuple(ModelRef(a, str(Path(models_dir) / f"{a}.bpaw")) for a in archs)


# ---------------------------------------------------------------------------
# model cache (per process)


@lru_cache(maxsize=16)
def _load(arch: str, path: str):
    model = build(arch)
    try:
        store = load_weights(path, model)
    except FileNotFoundError:
        raise HarnessError(f"weights for {arch} not found at {path}; run `bpa train` first") from None
    return model, store


def load_model(ref: ModelRef):
    return _load(ref.arch, str(ref.weights))


# ---------------------------------------------------------------------------
# evaluation set


def select_eval_set(models, x: np.ndarray, y: np.ndarray, n: int, seed: int, block: int = 500) -> np.ndarray:
    """Indices of the first ``n`` images (in a seeded shuffle) that every model
    in ``models`` (a list of (ModelDef, weights)) classifies correctly."""
    if n < 1:
        raise EvalSetError(f"eval-set size must be >= 1, got {n}")
    order = np.random.default_rng(seed).permutation(len(x))
    chosen: list[int] = []
    for s in range(0, len(order), block):
        idx = order[s : s + block]
        ok = np.ones(len(idx), dtype=bool)
        for model, weights in models:
            ok &= graph.predict(model, weights, x[idx]) == y[idx]
        chosen.extend(idx[ok].tolist())
        if len(chosen) >= n:
            return np.array(chosen[:n], dtype=np.int64)
    raise EvalSetError(f"only {len(chosen)} of {len(x)} test images are correctly classified by all models; need {n}")


@lru_cache(maxsize=4)
def _test_split(data_dir):
    return load_cifar10(data_dir, "test")


def eval_set(spec: ExperimentSpec):
    x, y = _test_split(spec.data_dir)
    models = [load_model(spec.surrogate)] + [load_model(v) for v in spec.victims]
    ids = select_eval_set(models, x, y, spec.n, spec.seed)
    return ids, x[ids], y[ids]


# ---------------------------------------------------------------------------
# sharded execution


@dataclass(frozen=True)
class _Job:
    key: tuple
    surrogate: ModelRef
    victims: tuple[ModelRef, ...]
    policy: BackwardPolicy
    attack: AttackConfig
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray


def _run_job(job: _Job):
    model, weights = load_model(job.surrogate)
    targets = draw_targets(job.y, job.ids, job.attack.seed) if job.attack.targeted else None
    res = attack(model, weights, job.policy, job.x, job.attack, job.y, targets, job.ids)
    goal = targets if job.attack.targeted else job.y

    def success(pred):
        return pred == goal if job.attack.targeted else pred != goal

    out = {"surrogate_whitebox": success(res.prediction)}
    for v in job.victims:
        vm, vw = load_model(v)
        out[v.arch] = success(graph.predict(vm, vw, res.adv))
    return job.key, out


def _relevance_job(args):
    key, surrogate, policy, ids, x, y, step, seed = args
    model, weights = load_model(surrogate)
    return key, relevance(model, weights, policy, x, CrossEntropy(y), step, sample_rngs(seed, ids))


def _map(fn, jobs, workers: int):
    """Run jobs serially (workers=0) or in a pool of fresh single-threaded processes."""
    if workers <= 0:
        return [fn(j) for j in jobs]
    env = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")}
    for k in env:
        os.environ[k] = "1"
    try:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            return list(pool.map(fn, jobs))
    finally:
        for k, v in env.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def _chunks(n: int, size: int):
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


# ---------------------------------------------------------------------------
# reports


@dataclass
class TransferReport:
    key_columns: tuple[str, ...]
    victims: tuple[str, ...]
    rows: list[dict]  # key values + per-victim rates + surrogate_whitebox + victim_mean
    n: int
    header: dict
    successes: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def rate(self, row: int, column: str) -> float:
        return self.rows[row][column]

    def mean_rates(self) -> list[float]:
        return [r["victim_mean"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = list(self.key_columns) + list(self.victims) + ["surrogate_whitebox", "victim_mean", "n"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt_key(r[c]) for c in self.key_columns]
                       + [f"{r[c]:.2f}" for c in cols[len(self.key_columns) : -1]] + [self.n])
        return buf.getvalue()

    def to_long_csv(self) -> str:
        """One line per (key values, victim, rate)."""
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.key_columns) + ["victim", "rate", "successes", "n"])
        for r, s in zip(self.rows, self.successes):
            for v in list(self.victims) + ["surrogate_whitebox"]:
                w.writerow([_fmt_key(r[c]) for c in self.key_columns] + [v, f"{r[v]:.2f}", s[v], self.n])
        return buf.getvalue()


def _fmt_key(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def _write(path, text: str) -> None:
    if path is None:
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _attack_echo(cfg: AttackConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["dim"] = "off" if cfg.dim is None else f"prob={cfg.dim.prob:g},canvas={cfg.dim.canvas}"
    d["tim"] = "off" if cfg.tim is None else f"size={cfg.tim.size},sigma={cfg.tim.sigma:g}"
    d["random_init"] = cfg.uses_random_init
    return {f"attack.{k}": (f"{v:.10g}" if isinstance(v, float) else v) for k, v in d.items()}


def _header(spec: ExperimentSpec, kind: str, policies: dict) -> dict:
    sur_model, sur_w = load_model(spec.surrogate)
    h = {"experiment": kind, "seed": spec.seed, "n": spec.n, "chunk": spec.chunk,
         "surrogate": f"{spec.surrogate.arch}", "victims": ",".join(v.arch for v in spec.victims)}
    for ref in (spec.surrogate,) + spec.victims:
        acc = load_model(ref)[1].meta.get("clean_accuracy")
        if acc is not None:
            h[f"clean_accuracy.{ref.arch}"] = f"{100 * acc:.2f}"
    h.update(_attack_echo(spec.attack))
    for label, p in policies.items():
        h[f"policy[{label}]"] = p.describe()
    if spec.sweep_param:
        h["sweep"] = f"{spec.sweep_param}=" + ",".join(_fmt_key(v) for v in spec.sweep_values)
        if spec.sweep_param == "mask_prob" or spec.options.mask_prob is not None:
            h["mask_boundary_layer"] = sur_model.stage_boundaries[spec.options.mask_stage]
    h["relu_start_note"] = (
        f"{spec.surrogate.arch}: relu ordinal {default_relu_start(sur_model, spec.options.blocks)} "
        f"starts the last {spec.options.blocks} residual blocks (or last 3 ReLUs without blocks)"
    )
    return h


def _run_grid(spec: ExperimentSpec, keyed_policies: list[tuple[tuple, BackwardPolicy]], key_columns, kind):
    ids, x, y = eval_set(spec)
    jobs = []
    for key, policy in keyed_policies:
        for sl in _chunks(len(ids), spec.chunk):
            jobs.append(_Job(key, spec.surrogate, spec.victims, policy, spec.attack, ids[sl], x[sl], y[sl]))
    start = time.perf_counter()
    results = _map(_run_job, jobs, spec.workers)
    columns = [v.arch for v in spec.victims] + ["surrogate_whitebox"]
    rows, successes = [], []
    for key, _ in keyed_policies:
        hits = {c: 0 for c in columns}
        for k, out in results:
            if k == key:
                for c in columns:
                    hits[c] += int(out[c].sum())
        row = dict(zip(key_columns, key))
        row.update({c: 100.0 * hits[c] / len(ids) for c in columns})
        row["victim_mean"] = float(np.mean([row[v.arch] for v in spec.victims])) if spec.victims else 0.0
        rows.append(row)
        successes.append(hits)
    header = _header(spec, kind, {"/".join(map(_fmt_key, k)): p for k, p in keyed_policies})
    return TransferReport(tuple(key_columns), tuple(v.arch for v in spec.victims), rows, len(ids), header,
                          successes, time.perf_counter() - start)


def run_transfer(spec: ExperimentSpec) -> TransferReport:
    model, _ = load_model(spec.surrogate)
    policy = expand_preset(spec.policy, model, spec.options)
    report = _run_grid(spec, [((spec.policy,), policy)], ("policy",), "transfer")
    _write(spec.out, report.to_csv())
    return report


def run_sweep(spec: ExperimentSpec) -> TransferReport:
    if not spec.sweep_param:
        raise HarnessError("sweep needs a parameter")
    if not spec.sweep_values:
        raise HarnessError("sweep grid is empty")
    model, _ = load_model(spec.surrogate)
    keyed = []
    for v in spec.sweep_values:
        opts = _sweep_options(spec.options, spec.sweep_param, v)
        keyed.append(((spec.policy, v), expand_preset(spec.policy, model, opts)))
    report = _run_grid(spec, keyed, ("policy", spec.sweep_param), "sweep")
    _write(spec.out, report.to_long_csv())
    return report


def run_ablation_grid(spec: ExperimentSpec) -> TransferReport:
    """(relu, pool) in {off, on}^2 with the BPA rules, everything else vanilla."""
    model, _ = load_model(spec.surrogate)
    bpa = expand_preset("bpa", model, spec.options)
    keyed = []
    for relu_on in ("off", "on"):
        for pool_on in ("off", "on"):
            p = BackwardPolicy(
                relu=bpa.relu if relu_on == "on" else ReluRule(),
                relu_start=bpa.relu_start,
                pool=bpa.pool if pool_on == "on" else PoolRule(),
            )
            keyed.append(((relu_on, pool_on), p))
    report = _run_grid(spec, keyed, ("relu", "pool"), "ablation")
    _write(spec.out, report.to_csv())
    return report


@dataclass
class RelevanceReport:
    rows: list[dict]  # policy, mean, std, n, step
    header: dict

    def mean(self, policy: str) -> float:
        return next(r["mean"] for r in self.rows if r["policy"] == policy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header.items():
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "mean", "std", "n", "step"])
        for r in self.rows:
            w.writerow([r["policy"], f"{r['mean']:.4f}", f"{r['std']:.4f}", r["n"], f"{r['step']:g}"])
        return buf.getvalue()


def run_relevance(spec: ExperimentSpec, step: float | None = None, n_images: int | None = None) -> RelevanceReport:
    step = spec.step if step is None else step
    n = spec.n if n_images is None else n_images
    if n < 1:
        raise ConfigError(f"n_images must be >= 1, got {n}")
    if step <= 0:
        raise ConfigError(f"step must be > 0, got {step}")
    spec = replace(spec, n=n)
    model, _ = load_model(spec.surrogate)
    ids, x, y = eval_set(spec)
    policies = {name: expand_preset(name, model, spec.options) for name in spec.policies}
    jobs = [
        ((name,), spec.surrogate, p, ids[sl], x[sl], y[sl], step, spec.seed)
        for name, p in policies.items()
        for sl in _chunks(len(ids), spec.chunk)
    ]
    results = _map(_relevance_job, jobs, spec.workers)
    rows = []
    for name in policies:
        vals = np.concatenate([r for k, r in results if k == (name,)])
        rows.append({"policy": name, "mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals), "step": step})
    header = _header(spec, "relevance", policies)
    header["step"] = f"{step:g}"
    report = RelevanceReport(rows, header)
    _write(spec.out, report.to_csv())
    return report


# ---------------------------------------------------------------------------
# key=value experiment files


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HarnessError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise HarnessError(f"not a boolean: {v!r}")


def _floats(v) -> tuple:
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _fraction(v) -> float:
    """Accept plain floats and n/255-style fractions."""
    s = str(v)
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


def spec_from_settings(s: dict) -> ExperimentSpec:
    """Build a spec from a flat dict of (string or typed) settings."""
    models_dir = s.get("models_dir", "artifacts/models")
    sur_arch = s.get("surrogate", "resnet-small")
    surrogate = ModelRef(sur_arch, s.get("surrogate_weights") or str(Path(models_dir) / f"{sur_arch}.bpaw"))
    vic = s.get("victims", "wrn-tiny,densenet-tiny,plaincnn,resnext-tiny,mobilenet-tiny")
    victims = model_refs(models_dir, [v.strip() for v in str(vic).split(",") if v.strip()])

    method = str(s.get("method", "pgd")).lower().replace("-", "")
    targeted = _bool(s.get("targeted", False))
    defaults = dict(alpha=1 / 255, iters=300) if targeted else dict(alpha=1.6 / 255, iters=1 if method == "fgsm" else 10)
    dim = DimConfig(float(s.get("dim_prob", 0.5)), int(s.get("dim_canvas", 40))) if _bool(s.get("dim", False)) else None
    tim = TimConfig(int(s.get("tim_size", 7)), float(s.get("tim_sigma", 3.0))) if _bool(s.get("tim", False)) else None
    random_init = s.get("random_init")
    cfg = AttackConfig(
        method=method,
        epsilon=_fraction(s.get("epsilon", 8 / 255)),
        alpha=_fraction(s.get("alpha", defaults["alpha"])),
        iters=int(s.get("iters", defaults["iters"])),
        mu=float(s.get("mu", 1.0)),
        vmi_samples=int(s.get("vmi_samples", 20)),
        vmi_beta=float(s.get("vmi_beta", 1.5)),
        dim=dim,
        tim=tim,
        targeted=targeted,
        seed=int(s.get("seed", 0)),
        random_init=None if random_init in (None, "") else _bool(random_init),
    )

    def opt(key, conv):
        v = s.get(key)
        return None if v in (None, "") else conv(v)

    options = PolicyOptions(
        temperature=opt("temperature", float),
        relu_start=opt("relu_start", int),
        gamma=float(s.get("gamma", 0.5)),
        ghost_lambda=float(s.get("lambda", s.get("ghost_lambda", 0.22))),
        blocks=int(s.get("blocks", 8)),
        mask_prob=opt("mask_prob", float),
        mask_stage=int(s.get("mask_stage", 3)),
        relu_recover_prob=opt("relu_recover_prob", float),
        pool_recover_prob=opt("pool_recover_prob", float),
    )
    policies = s.get("policies", "vanilla,bpa")
    return ExperimentSpec(
        surrogate=surrogate,
        victims=victims,
        policy=str(s.get("policy", "vanilla")),
        options=options,
        attack=cfg,
        n=int(s.get("n", 1000)),
        seed=int(s.get("seed", 0)),
        data_dir=s.get("data_dir"),
        out=s.get("out"),
        workers=int(s.get("workers", 0)),
        chunk=int(s.get("chunk", 50)),
        sweep_param=s.get("sweep_param") or None,
        sweep_values=_floats(s.get("sweep_values", "")),
        step=float(s.get("step", 1e-2)),
        policies=tuple(p.strip() for p in str(policies).split(",") if p.strip()),
    )

