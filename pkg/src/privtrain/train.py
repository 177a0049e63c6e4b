"""Consumer-side training loop over attested provider sessions.

Each iteration fetches one fixed-size chunk from every provider (blocking on
all of them), optionally scrubs the inputs of subnormals, computes
per-example gradients in one forward/backward pass, and applies a fused
clip/noise/sum update.  The moments accountant is advanced once per step.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .accountant import MomentLedger, accumulate, calibrate_sigma, eps_for_delta
from .data import Dataset
from .dp import ClipSumAccumulator, PrivacyParams, apply_noisy_update
from .oblivious import ScrubConfig, scrub_subnormals
from .protocol.consumer import attest, fetch_round, finish
from .protocol.provider import Provider, ProviderConfig, listen_tcp, serve_in_thread, serve_tcp_once
from .protocol.transport import TCPTransport, WireTap, loopback_pair
from .protocol.wire import CODE_VERSION, measurement
from .tensor import ModelSpec, ParamSet, backward_per_example, init_params, model_forward, predict

log = logging.getLogger(__name__)

ACCOUNTING_MODEL = "poisson-approx"


@dataclass
class TrainConfig:
    model: ModelSpec
    providers: list
    test: Dataset
    chunk_examples: int
    epochs: int = 10
    learning_rate: float = 0.1
    clip_bound: float = 1.0
    epsilon: float = 4.0
    delta: float = 1e-5
    seed: int = 0
    dp: bool = True
    oblivious: bool = True
    precision: str = "single"
    micro_batch: int | None = None
    timeout: float = 30.0
    transport: str = "loopback"
    scrub_magnitude: float = 1e-10
    noise_multiplier: float | None = None
    code_version: str = CODE_VERSION

    @property
    def lot_size(self) -> int:
        return len(self.providers) * self.chunk_examples

    @property
    def dataset_size(self) -> int:
        return sum(len(p.shard) for p in self.providers)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(max(len(p.shard) for p in self.providers) / self.chunk_examples)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def privacy_descriptor(self) -> dict:
        return {
            "dp": self.dp,
            "oblivious": self.oblivious,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "clip_bound": self.clip_bound,
            "lot_size": self.lot_size,
            "chunk_examples": self.chunk_examples,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
        }

    def measurement(self) -> bytes:
        return measurement(self.model.to_dict(), self.privacy_descriptor(), self.code_version)


@dataclass
class TrainResult:
    params: ParamSet
    metrics: list
    ledger: MomentLedger | None
    sigma: float | None
    status: str
    events: list = field(default_factory=list)
    wire_log: list = field(default_factory=list)
    provider_status: dict = field(default_factory=dict)
    providers: list = field(default_factory=list, repr=False)

    @property
    def epsilon_spent(self) -> float:
        return self.metrics[-1]["epsilon_spent"] if self.metrics else 0.0


def _streams(seed: int) -> dict:
    names = ("init", "shuffle", "noise", "scrub")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.Philox(k)) for n, k in zip(names, kids)}


def evaluate(spec: ModelSpec, params: ParamSet, ds: Dataset, oblivious: bool = False) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on a held-out set."""
    x = ds.features.reshape((len(ds),) + spec.input_shape)
    fwd = model_forward(spec, params, x.astype(params.dtype), ds.labels.astype(np.int64), oblivious=oblivious)
    acc = float(np.mean(np.argmax(fwd.predictions, axis=1) == ds.labels))
    return fwd.loss, acc


def _open_sessions(cfg: TrainConfig, meas: bytes, wire_log: list):
    providers, threads, transports = [], [], []
    for pc in cfg.providers:
        if not pc.whitelist:
            pc = ProviderConfig(pc.provider_id, pc.shard, [meas], pc.seed)
        prov = Provider(pc, cfg.chunk_examples)
        if cfg.transport == "loopback":
            consumer_end, provider_end = loopback_pair()
            threads.append(serve_in_thread(prov, provider_end))
        elif cfg.transport == "tcp":
            srv = listen_tcp()
            host, port = srv.getsockname()
            t = threading.Thread(target=serve_tcp_once, args=(prov, srv, cfg.timeout), daemon=True)
            t.start()
            threads.append(t)
            consumer_end = TCPTransport.connect(host, port, cfg.timeout)
        else:
            raise ValueError(f"unknown transport {cfg.transport!r}")
        providers.append(prov)
        transports.append(WireTap(consumer_end, pc.provider_id, wire_log))
    return providers, threads, transports


def train_loop(cfg: TrainConfig) -> TrainResult:
    if not cfg.providers:
        raise ValueError("at least one provider is required")
    ids = [p.provider_id for p in cfg.providers]
    if len(set(ids)) != len(ids):
        raise ValueError("provider ids must be unique")
    feature_dim = int(np.prod(cfg.model.input_shape))
    for p in cfg.providers:
        if int(np.prod(p.shard.feature_shape)) != feature_dim:
            raise ValueError(f"provider {p.provider_id}: features do not match the model input")

    T = cfg.total_steps
    lot = cfg.lot_size
    n_total = cfg.dataset_size
    q = lot / n_total
    sigma = None
    pp = None
    if cfg.dp:
        sigma = cfg.noise_multiplier if cfg.noise_multiplier is not None else calibrate_sigma(cfg.epsilon, cfg.delta, q, T)
        pp = PrivacyParams(cfg.epsilon, cfg.delta, cfg.clip_bound, lot, n_total, sigma, T, cfg.learning_rate)
        log.info("sigma=%.6g for q=%.4g T=%d (accounting model: %s)", sigma, q, T, ACCOUNTING_MODEL)
    base_ledger = MomentLedger(q, sigma) if cfg.dp else None

    rngs = _streams(cfg.seed)
    params = init_params(cfg.model, rngs["init"], cfg.precision)
    scrub_cfg = ScrubConfig(cfg.scrub_magnitude, cfg.seed)
    clip = cfg.clip_bound if cfg.dp else math.inf
    noise = sigma if cfg.dp else 0.0

    events: list = []
    wire_log: list = []
    meas = cfg.measurement()
    providers, threads, transports = _open_sessions(cfg, meas, wire_log)
    links = []
    metrics = []
    status = "completed"
    ledger = base_ledger
    t0 = time.perf_counter()
    try:
        for pid, tr in zip(ids, transports):
            links.append(attest(tr, pid, meas, cfg.timeout))
            events.append(("attested", 0, pid))
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            for _ in range(cfg.steps_per_epoch):
                step += 1
                x, y = fetch_round(links, step, feature_dim, rngs["shuffle"], cfg.timeout, events)
                x = x.reshape((lot,) + cfg.model.input_shape).astype(params.dtype)
                if cfg.oblivious:
                    x = scrub_subnormals(x, scrub_cfg, rngs["scrub"])
                y = y.astype(np.int64)
                acc = ClipSumAccumulator(params, clip)
                mb = cfg.micro_batch or lot
                for s in range(0, lot, mb):
                    fwd = model_forward(cfg.model, params, x[s : s + mb], y[s : s + mb], oblivious=cfg.oblivious)
                    acc.add(backward_per_example(cfg.model, params, fwd, y[s : s + mb]))
                params = apply_noisy_update(params, acc, noise, cfg.learning_rate, rngs["noise"])
                if cfg.oblivious and not cfg.dp:
                    params = params.replace({n: scrub_subnormals(v, scrub_cfg, rngs["scrub"]) for n, v in params.items()})
                events.append(("update", step, None))
                if cfg.dp:
                    ledger = accumulate(base_ledger, step)
                    if eps_for_delta(ledger, cfg.delta) > cfg.epsilon * (1 + 1e-12):
                        status = "budget_exhausted"
                        break
            loss, acc_ = evaluate(cfg.model, params, cfg.test, cfg.oblivious)
            metrics.append(
                {
                    "epoch": epoch,
                    "loss": loss,
                    "test_accuracy": acc_,
                    "epsilon_spent": eps_for_delta(ledger, cfg.delta) if cfg.dp else math.inf,
                    "wall_seconds": time.perf_counter() - t0,
                }
            )
            if status != "completed":
                break
    finally:
        finish(links)
        for tr in transports[len(links) :]:
            tr.close()
        for t in threads:
            t.join(timeout=cfg.timeout)
    return TrainResult(
        params,
        metrics,
        ledger,
        sigma,
        status,
        events,
        wire_log,
        {p.cfg.provider_id: p.status for p in providers},
        providers,
    )


__all__ = ["TrainConfig", "TrainResult", "train_loop", "evaluate", "predict", "ACCOUNTING_MODEL"]
