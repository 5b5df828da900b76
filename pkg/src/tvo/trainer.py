"""Training harness: Adam, datasets (IDX files or synthetic draws from a
frozen generator), the optimization loop, and sweep orchestration.

Runs are deterministic given the config: every sampling site derives its
stream from (seed, site, iteration). In single-thread mode the wall-clock
column is left empty so repeated runs are byte-identical.
"""
from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ParamVector
from .errors import ConfigError, DomainError, FormatError, NumericalError
from .estimators import build_weight_table
from .models import (ConjugateGaussian, GaussianVAE, SigmoidBeliefNet,
                     ToyBernoulli, save_checkpoint)
from .objectives import ObjectiveSpec, elbo_estimate, iwae_estimate, training_step
from .path import make_schedule
from .util import rng_stream, write_csv

METRICS_COLUMNS = ["iteration", "objective", "test_log_evidence", "kl_gap",
                   "grad_std", "wallclock_ms"]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: ParamVector, lr=3e-4) -> "AdamState":
        return cls(m=np.zeros(params.size), v=np.zeros(params.size), lr=lr)


def adam_step(state: AdamState, params: ParamVector, gradient, maximize=False) -> ParamVector:
    """Bias-corrected Adam update; `maximize` ascends instead of descending.

    A non-finite gradient aborts the step: the event is counted and the
    parameters come back unchanged.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.vector.shape:
        raise DomainError(f"gradient length {gradient.size} does not match params {params.size}")
    if not np.all(np.isfinite(gradient)):
        state.skipped += 1
        return params
    g = -gradient if maximize else gradient
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params.with_vector(params.vector - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


# ---------------------------------------------------------------------------
# datasets

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def read_idx_images(path) -> np.ndarray:
    """IDX image file -> (N, rows*cols) uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    magic, n, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad image magic {magic:#010x} at byte 0")
    expected = 16 + n * rows * cols
    if len(blob) < expected:
        raise FormatError(f"{path}: truncated image data at byte {len(blob)} (need {expected})")
    data = np.frombuffer(blob, dtype=np.uint8, count=n * rows * cols, offset=16)
    return data.reshape(n, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    magic, n = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{path}: bad label magic {magic:#010x} at byte 0")
    if len(blob) < 8 + n:
        raise FormatError(f"{path}: truncated label data at byte {len(blob)} (need {8 + n})")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=8)


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    generator: object = None        # frozen generator model, when synthetic
    generator_params: ParamVector = None

    @property
    def d_x(self) -> int:
        return self.train.shape[1]


def binarize(pixels) -> np.ndarray:
    """Deterministic threshold at intensity 0.5 (pixel value 127.5)."""
    return (np.asarray(pixels) > 127.5).astype(np.float64)


def load_mnist(images_path, test_images_path=None, labels_path=None,
               test_labels_path=None, limit=None) -> Dataset:
    """Binarized MNIST with the 50k/10k/10k split.

    The 60k training file splits at exactly 50000/10000; other sizes split
    5/6 to 1/6. `limit` keeps the first `limit` training items.
    """
    raw = read_idx_images(images_path)
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if labels.shape[0] != raw.shape[0]:
            raise FormatError("image/label counts differ")
    n = raw.shape[0]
    cut = 50_000 if n == 60_000 else (n * 5) // 6
    train = binarize(raw[:cut])
    val = binarize(raw[cut:])
    if test_images_path is not None:
        test_raw = read_idx_images(test_images_path)
        if test_labels_path is not None:
            test_labels = read_idx_labels(test_labels_path)
            if test_labels.shape[0] != test_raw.shape[0]:
                raise FormatError("test image/label counts differ")
        test = binarize(test_raw)
    else:
        test = val
    if limit is not None:
        train = train[:limit]
    return Dataset(train=train, val=val, test=test)


def synthetic_dataset(kind, seed, d_x, n_train=1000, n_val=200, n_test=200,
                      generator_kwargs=None) -> Dataset:
    """Observations sampled from a frozen generator model.

    kind "toy" freezes a tabular generator (enumerable, so the exact data
    log evidence is available); kind "sbn" freezes a sigmoid belief net.
    """
    kwargs = dict(generator_kwargs or {})
    if kind == "toy":
        gen = ToyBernoulli(m=kwargs.get("m", 3), d_x=d_x)
        gen_params = gen.init_params(seed)
    elif kind == "sbn":
        gen = SigmoidBeliefNet(d_x=d_x, d_z=kwargs.get("d_z", 16),
                               layers=kwargs.get("layers", 2),
                               nonlinear=kwargs.get("nonlinear", True))
        gen_params = gen.init_params(seed)
        scale = kwargs.get("weight_scale", 2.5)
        gen_params = gen_params.with_vector(gen_params.vector * scale)
    else:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    rng = rng_stream(seed, 211)
    x, _ = gen.sample_joint(gen_params, n_train + n_val + n_test, rng)
    return Dataset(train=x[:n_train], val=x[n_train:n_train + n_val],
                   test=x[n_train + n_val:], generator=gen, generator_params=gen_params)


# ---------------------------------------------------------------------------
# run configuration

DESK_CAPS = {"iters": 50_000, "d_z": 64, "S": 1000, "eval_samples": 5000, "batch": 256}


@dataclass(frozen=True)
class RunConfig:
    """Flat run description; every field mirrors a CLI flag."""

    model: str = "toy"
    objective: str = "tvo_lower"
    optimize: str = "both"
    data_source: str = "real"
    S: int = 10
    K: int = 2
    beta1: float = 0.3
    spacing: str = "log"
    lr: float = 3e-4
    batch: int = 24
    iters: int = 1000
    eval_interval: int = 0          # 0 means iters // 10
    eval_samples: int = 500
    eval_items: int = 200
    seed: int = 0
    dataset: str = "synthetic-toy"
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 0
    out: str = ""
    crn: bool = True
    single_thread: bool = False
    d_x: int = 8
    d_z: int = 20
    layers: int = 2
    nonlinear: bool = False
    m_latent: int = 3
    generator_seed: int = 999
    train_items: int = 1000
    test_items: int = 200
    grad_std_every: int = 0
    allow_full_scale: bool = False

    def validate(self):
        if min(self.S, self.batch, self.iters) < 1 or self.eval_samples < 1:
            raise ConfigError("counts must be positive")
        if not self.allow_full_scale:
            for name, cap in DESK_CAPS.items():
                if getattr(self, name) > cap:
                    raise ConfigError(
                        f"{name}={getattr(self, name)} exceeds the desk-scale cap {cap}; "
                        f"pass allow_full_scale to override")
        return self


def build_model(config: RunConfig, data: Dataset):
    if config.model == "toy":
        return ToyBernoulli(m=config.m_latent, d_x=data.d_x)
    if config.model == "sbn":
        model = SigmoidBeliefNet(d_x=data.d_x, d_z=config.d_z, layers=config.layers,
                                 nonlinear=config.nonlinear)
        model.set_data_mean(data.train.mean(axis=0))
        return model
    if config.model == "gaussian-vae":
        return GaussianVAE(d_x=data.d_x, d_z=config.d_z)
    if config.model in ("conjugate-gaussian", "gaussian"):
        return ConjugateGaussian()
    raise ConfigError(f"unknown model {config.model!r}")


def build_dataset(config: RunConfig) -> Dataset:
    if config.dataset == "mnist":
        if not config.images:
            raise ConfigError("mnist dataset needs --images")
        return load_mnist(config.images, config.test_images or None,
                          config.labels or None, config.test_labels or None,
                          limit=config.limit or None)
    if config.dataset == "synthetic-toy":
        data = synthetic_dataset("toy", config.generator_seed, config.d_x,
                                 n_train=config.train_items, n_test=config.test_items,
                                 generator_kwargs={"m": config.m_latent})
    elif config.dataset == "synthetic-sbn":
        data = synthetic_dataset("sbn", config.generator_seed, config.d_x,
                                 n_train=config.train_items, n_test=config.test_items)
    elif config.dataset == "gaussian":
        gen = ConjugateGaussian()
        gen_params = gen.init_params(config.generator_seed)
        rng = rng_stream(config.generator_seed, 211)
        x, _ = gen.sample_joint(gen_params, config.train_items + 2 * config.test_items, rng)
        data = Dataset(train=x[:config.train_items],
                       val=x[config.train_items:config.train_items + config.test_items],
                       test=x[config.train_items + config.test_items:],
                       generator=gen, generator_params=gen_params)
    else:
        raise ConfigError(f"unknown dataset {config.dataset!r}")
    if config.limit:
        data = replace(data, train=data.train[:config.limit])
    return data


def objective_specs(config: RunConfig) -> list[ObjectiveSpec]:
    """Specs run each iteration; wake-sleep alternates a theta lower-bound
    step on real data with a phi upper-bound step on simulated data."""
    if config.objective == "wake_sleep":
        one = make_schedule(1)
        return [ObjectiveSpec("tvo_lower", one, config.S, "theta", "real"),
                ObjectiveSpec("tvo_upper", one, config.S, "phi", "model_simulated")]
    schedule = make_schedule(config.K, config.beta1, config.spacing)
    return [ObjectiveSpec(config.objective, schedule, config.S,
                          config.optimize, config.data_source)]


# ---------------------------------------------------------------------------
# train loop


@dataclass
class MetricsRow:
    iteration: int
    objective: float
    test_log_evidence: float = None
    kl_gap: float = None
    grad_std: float = None
    wallclock_ms: float = None

    def astuple(self):
        return (self.iteration, self.objective, self.test_log_evidence,
                self.kl_gap, self.grad_std, self.wallclock_ms)


@dataclass
class TrainResult:
    params: ParamVector
    metrics: list
    sleep_metrics: list
    aborted: bool
    events: list
    model: object
    dataset: Dataset
    config: RunConfig
    checkpoint_path: str = ""

    @property
    def final_test_log_evidence(self):
        for row in reversed(self.metrics):
            if row.test_log_evidence is not None:
                return row.test_log_evidence
        return None


def evaluate(model, params, items, S_eval, seed):
    """(mean IWAE log-evidence, mean ELBO) over a fixed eval subset."""
    table = build_weight_table(model, params, items, S_eval, np.array([0.0, 1.0]), seed)
    iwae = float(np.mean(np.asarray(iwae_estimate(table.log_w))))
    elbo = float(np.mean(np.asarray(elbo_estimate(table))))
    return iwae, elbo


def train(config: RunConfig, data: Dataset = None) -> TrainResult:
    config.validate()
    if data is None:
        data = build_dataset(config)
    model = build_model(config, data)
    params = model.init_params(config.seed)
    specs = objective_specs(config)
    states = [AdamState.for_params(params, lr=config.lr) for _ in specs]
    eval_interval = config.eval_interval or max(1, config.iters // 10)
    eval_items = data.test[:config.eval_items]
    metrics, sleep_metrics, events = [], [], []
    aborted = False
    last_good = params
    t0 = time.perf_counter()
    n = data.train.shape[0]
    order = np.arange(n)

    for it in range(config.iters):
        take = (it * config.batch + np.arange(config.batch)) % n
        x_batch = data.train[order[take]]
        values = []
        try:
            for which, spec in enumerate(specs):
                value, grad = training_step(
                    spec, model, params, x_batch,
                    seed=int(rng_stream(config.seed, 3, it, which).integers(2 ** 31)),
                    crn=config.crn)
                if not np.isfinite(value):
                    raise NumericalError(f"objective became non-finite at iteration {it}")
                params = adam_step(states[which], params, grad.vector, maximize=spec.maximize)
                values.append(value)
        except NumericalError as exc:
            events.append(f"iteration {it}: {exc}; aborting with last good parameters")
            params = last_good
            aborted = True
            break
        last_good = params

        if (it + 1) % eval_interval == 0 or it + 1 == config.iters:
            iwae, elbo = evaluate(model, params, eval_items, config.eval_samples,
                                  seed=int(rng_stream(config.seed, 5).integers(2 ** 31)))
            wall = None if config.single_thread else (time.perf_counter() - t0) * 1e3
            grad_std = _maybe_grad_std(config, specs[0], model, params, x_batch, it)
            metrics.append(MetricsRow(it + 1, values[0], iwae, iwae - elbo, grad_std, wall))
            if len(specs) > 1:
                sleep_metrics.append(MetricsRow(it + 1, values[1], iwae, iwae - elbo, None, wall))

    result = TrainResult(params=params, metrics=metrics, sleep_metrics=sleep_metrics,
                         aborted=aborted, events=events, model=model, dataset=data,
                         config=config)
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        with open(os.path.join(config.out, "config.cfg"), "w") as fh:
            for f in config.__dataclass_fields__:
                fh.write(f"{f}={getattr(config, f)}\n")
        write_csv(os.path.join(config.out, "metrics.csv"), METRICS_COLUMNS,
                  [row.astuple() for row in metrics])
        if sleep_metrics:
            write_csv(os.path.join(config.out, "metrics_sleep.csv"), METRICS_COLUMNS,
                      [row.astuple() for row in sleep_metrics])
        result.checkpoint_path = os.path.join(config.out, "checkpoint.tvom")
        save_checkpoint(result.checkpoint_path, params)
        if events:
            with open(os.path.join(config.out, "events.log"), "w") as fh:
                fh.write("\n".join(events) + "\n")
    return result


def _maybe_grad_std(config, spec, model, params, x_batch, it):
    if not config.grad_std_every or (it + 1) % config.grad_std_every:
        return None
    from .estimators import gradient_std_diagnostic

    def estimator(rep_seed):
        from .objectives import training_gradient
        return training_gradient(spec, model, params, x_batch, rep_seed, crn=config.crn)

    return gradient_std_diagnostic(estimator, repetitions=10,
                                   seed=int(rng_stream(config.seed, 9, it).integers(2 ** 31)))


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ["cell", "beta1", "K", "S", "seed", "status",
                 "final_objective", "final_test_log_evidence"]


def sweep(config: RunConfig, beta1_list=None, K_list=None, S_list=None, data: Dataset = None):
    """Grid of independent runs; cell i runs with seed config.seed + i.

    Per-cell failures are recorded and the sweep continues. Returns the rows
    of the aggregated table (also written to <out>/sweep.csv when out is set).
    """
    beta1_axis = list(beta1_list) if beta1_list else [config.beta1]
    k_axis = list(K_list) if K_list else [config.K]
    s_axis = list(S_list) if S_list else [config.S]
    rows = []
    results = []
    cell = 0
    for beta1 in beta1_axis:
        for K in k_axis:
            for S in s_axis:
                cell_out = f"{config.out}/cell{cell:03d}" if config.out else ""
                cell_config = replace(config, beta1=beta1, K=K, S=S,
                                      seed=config.seed + cell, out=cell_out)
                try:
                    result = train(cell_config, data)
                    final = result.metrics[-1] if result.metrics else None
                    rows.append((cell, beta1, K, S, cell_config.seed,
                                 "aborted" if result.aborted else "ok",
                                 final.objective if final else None,
                                 result.final_test_log_evidence))
                    results.append(result)
                except Exception as exc:  # noqa: BLE001 - cells are isolated by design
                    rows.append((cell, beta1, K, S, cell_config.seed,
                                 f"error: {exc}", None, None))
                    results.append(None)
                cell += 1
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        write_csv(os.path.join(config.out, "sweep.csv"), SWEEP_COLUMNS, rows)
    return rows, results
