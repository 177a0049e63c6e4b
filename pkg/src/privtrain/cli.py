"""Command line: ``privtrain train | audit | predict``."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accountant import (
    DEFAULT_MAX_LAMBDA,
    InfeasibleBudgetError,
    MomentLedger,
    accumulate,
    delta_for_eps,
    eps_for_delta,
    linear_delta,
    linear_epsilon,
)
from .data import Dataset, gaussian_blobs, load_idx_dataset, read_idx, split_shards
from .protocol.attest import AttestationRejected
from .protocol.consumer import RoundTimeout
from .protocol.provider import ProviderConfig
from .protocol.wire import ProtocolError
from .tensor import ModelSpec, ParamSet, mlp, predict
from .train import ACCOUNTING_MODEL, TrainConfig, train_loop

log = logging.getLogger("privtrain")

EXIT_OK = 0
EXIT_BUDGET = 1
EXIT_INFEASIBLE = 2
EXIT_PROVIDER = 3
EXIT_USAGE = 4

# ---------------------------------------------------------------------------
# run configuration

DEFAULTS = {
    "model": None,
    "hidden": [16],
    "dataset": {
        "kind": "synthetic",
        "n_train": 6000,
        "n_test": 1000,
        "dim": 20,
        "classes": 2,
        "separation": 2.5,
        "seed": 1,
    },
    "providers": {"count": 3, "shard": "contiguous", "transport": "loopback"},
    "privacy": {
        "epsilon": 4.0,
        "delta": 1e-5,
        "clip_bound": 1.0,
        "lot_size": 600,
        "learning_rate": 0.5,
        "noise_multiplier": None,
    },
    "seed": 0,
    "dp": True,
    "oblivious": True,
    "epochs": 10,
    "precision": "single",
    "micro_batch": None,
    "timeout": 30.0,
    "output": "run",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValueError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "dataset":
            out[k] = _merge(base[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def dumps(self) -> str:
        """Canonical text form: every key present, sorted, two-space indent."""
        return json.dumps(self.values, sort_keys=True, indent=2) + "\n"

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        ds = v["dataset"]
        if ds.get("kind") not in ("synthetic", "idx"):
            raise ValueError("dataset.kind must be 'synthetic' or 'idx'")
        prov = v["providers"]
        if prov["count"] < 1:
            raise ValueError("providers.count must be positive")
        if prov["transport"] not in ("loopback", "tcp"):
            raise ValueError("providers.transport must be 'loopback' or 'tcp'")
        if prov["shard"] != "contiguous":
            raise ValueError("only contiguous shard assignment is supported")
        lot = v["privacy"]["lot_size"]
        if lot % prov["count"]:
            raise ValueError(f"lot_size {lot} must split evenly across {prov['count']} providers")
        if v["epochs"] < 1:
            raise ValueError("epochs must be positive")


def _load_datasets(ds: dict) -> tuple[Dataset, Dataset]:
    if ds["kind"] == "synthetic":
        full = gaussian_blobs(ds["n_train"] + ds["n_test"], ds["dim"], ds["classes"], ds["separation"], ds["seed"])
        n = ds["n_train"]
        return full.subset(slice(0, n)), full.subset(slice(n, None))
    train = load_idx_dataset(ds["train_images"], ds["train_labels"])
    test = load_idx_dataset(ds["test_images"], ds["test_labels"])
    return train, test


def build_model(cfg: RunConfig, train: Dataset) -> ModelSpec:
    if cfg["model"] is not None:
        return ModelSpec.from_dict(cfg["model"])
    classes = int(max(train.labels.max(), 1)) + 1
    if cfg["dataset"]["kind"] == "synthetic":
        classes = cfg["dataset"]["classes"]
    return mlp(int(np.prod(train.feature_shape)), cfg["hidden"], classes)


def build_train_config(cfg: RunConfig) -> TrainConfig:
    train, test = _load_datasets(cfg["dataset"])
    model = build_model(cfg, train)
    n_prov = cfg["providers"]["count"]
    shards = split_shards(train, n_prov)
    providers = [ProviderConfig(f"provider-{i}", s, seed=cfg["seed"]) for i, s in enumerate(shards)]
    p = cfg["privacy"]
    return TrainConfig(
        model=model,
        providers=providers,
        test=test,
        chunk_examples=p["lot_size"] // n_prov,
        epochs=cfg["epochs"],
        learning_rate=p["learning_rate"],
        clip_bound=p["clip_bound"],
        epsilon=p["epsilon"],
        delta=p["delta"],
        seed=cfg["seed"],
        dp=cfg["dp"],
        oblivious=cfg["oblivious"],
        precision=cfg["precision"],
        micro_batch=cfg["micro_batch"],
        timeout=cfg["timeout"],
        transport=cfg["providers"]["transport"],
        noise_multiplier=p["noise_multiplier"],
    )


# ---------------------------------------------------------------------------
# parameter files


def save_params(path, params: ParamSet, spec: ModelSpec) -> None:
    """digest(32) | count(u32) | per tensor: name_len(u32) name rank(u32) dims(u64...) f32 data; all LE."""
    with open(path, "wb") as fh:
        fh.write(spec.digest())
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_params(path, spec: ModelSpec | None = None) -> tuple[bytes, ParamSet]:
    buf = Path(path).read_bytes()
    digest = buf[:32]
    if spec is not None and digest != spec.digest():
        raise ValueError("parameter file was written for a different model spec")
    (count,) = struct.unpack_from("<I", buf, 32)
    off = 36
    items = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        items.append((name, np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)))
        off += 4 * n
    if off != len(buf):
        raise ValueError("trailing bytes in parameter file")
    params = ParamSet(items)
    if spec is not None:
        expected = spec.param_shapes()
        if [(n, tuple(v.shape)) for n, v in params.items()] != [(n, tuple(s)) for n, s in expected]:
            raise ValueError("parameter shapes do not match the model spec")
    return digest, params


# ---------------------------------------------------------------------------
# commands


def _metric_line(m: dict) -> str:
    out = dict(m)
    if math.isinf(out["epsilon_spent"]):
        out["epsilon_spent"] = "inf"
    return json.dumps(out, sort_keys=True)


def cmd_train(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    try:
        tc = build_train_config(cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    outdir = Path(cfg["output"])
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        result = train_loop(tc)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AttestationRejected, RoundTimeout, ProtocolError, ConnectionError, OSError) as exc:
        print(f"error: provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    with open(outdir / "metrics.jsonl", "w") as fh:
        for m in result.metrics:
            fh.write(_metric_line(m) + "\n")
    save_params(outdir / "params.bin", result.params, tc.model)
    (outdir / "model.json").write_text(json.dumps(tc.model.to_dict(), sort_keys=True, indent=2) + "\n")
    (outdir / "config.json").write_text(cfg.dumps())
    summary = {
        "status": result.status,
        "dp": tc.dp,
        "oblivious": tc.oblivious,
        "noise_multiplier": result.sigma,
        "lot_size": tc.lot_size,
        "dataset_size": tc.dataset_size,
        "steps": tc.total_steps,
        "accounting_model": ACCOUNTING_MODEL if tc.dp else None,
        "epsilon_target": tc.epsilon if tc.dp else None,
        "epsilon_spent": result.epsilon_spent if tc.dp else "inf",
        "delta": tc.delta,
    }
    if result.ledger is not None:
        (outdir / "ledger.json").write_text(json.dumps(result.ledger.to_dict(), indent=2) + "\n")
    (outdir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for m in result.metrics:
        print(_metric_line(m), file=out)
    if tc.dp:
        print(f"accounting model: {ACCOUNTING_MODEL}", file=out)
    ok = result.status == "completed" and (not tc.dp or result.epsilon_spent <= tc.epsilon)
    return EXIT_OK if ok else EXIT_BUDGET


def audit_values(q: float, sigma: float, steps: int, delta: float | None = None, epsilon: float | None = None,
                 max_lambda: int = DEFAULT_MAX_LAMBDA) -> dict:
    if (delta is None) == (epsilon is None):
        raise ValueError("give exactly one of delta or epsilon")
    if steps < 0 or not 0 <= q <= 1 or not sigma > 0:
        raise ValueError("need 0 <= q <= 1, sigma > 0, steps >= 0")
    ledger = accumulate(MomentLedger(q, sigma, max_lambda), steps)
    if delta is not None:
        ma = eps_for_delta(ledger, delta)
        lin = linear_epsilon(sigma, steps, delta)
        return {"q": q, "sigma": sigma, "steps": steps, "delta": delta,
                "moments_epsilon": ma, "linear_epsilon": lin, "ratio": ma / lin if lin else math.inf}
    ma = delta_for_eps(ledger, epsilon)
    lin = linear_delta(sigma, steps, epsilon)
    return {"q": q, "sigma": sigma, "steps": steps, "epsilon": epsilon,
            "moments_delta": ma, "linear_delta": lin, "ratio": ma / lin if lin else math.inf}


def cmd_audit(args, out=None) -> int:
    out = out or sys.stdout
    try:
        vals = audit_values(args.q, args.sigma, args.steps, args.delta, args.epsilon, args.max_lambda)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.json:
        print(json.dumps(vals), file=out)
        return EXIT_OK
    width = max(len(k) for k in vals)
    for k, v in vals.items():
        print(f"{k:<{width}}  {v!r}", file=out)
    return EXIT_OK


def _read_inputs(path: Path) -> np.ndarray | None:
    if path.stat().st_size == 0:
        return None
    if path.suffix == ".npy":
        return np.load(path)
    return read_idx(path)


def cmd_predict(params_path, input_path, output_path, model_path=None) -> int:
    params_path = Path(params_path)
    model_path = Path(model_path) if model_path else params_path.with_name("model.json")
    spec = ModelSpec.from_dict(json.loads(model_path.read_text()))
    try:
        _, params = load_params(params_path, spec)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    x = _read_inputs(Path(input_path))
    with open(output_path, "w") as fh:
        if x is None or len(x) == 0:
            return EXIT_OK
        x = np.asarray(x)
        # raw IDX images are scaled the same way as at training time
        x = (x.astype(np.float32) / np.float32(255)) if x.dtype == np.uint8 else x.astype(np.float32)
        try:
            x = x.reshape((len(x),) + spec.input_shape)
        except ValueError:
            print(f"error: inputs of shape {x.shape[1:]} do not fit model input {spec.input_shape}", file=sys.stderr)
            return EXIT_USAGE
        probs = predict_probabilities(spec, params, x)
        for row in probs:
            fh.write(json.dumps([float(p) for p in row]) + "\n")
    return EXIT_OK


def predict_probabilities(spec: ModelSpec, params: ParamSet, x: np.ndarray) -> np.ndarray:
    return predict(spec, params, x)


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privtrain", description="Private multi-provider training.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training job")
    t.add_argument("--config", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--delta", type=float)
    t.add_argument("--lot-size", type=int)
    t.add_argument("--clip-bound", type=float)
    t.add_argument("--providers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-dp", action="store_true")
    t.add_argument("--no-oblivious", action="store_true")
    t.add_argument("--transport", choices=["loopback", "tcp"])
    t.add_argument("--output", type=Path)

    a = sub.add_parser("audit", help="compare moments-accountant and linear composition")
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--steps", type=int, required=True)
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--delta", type=float)
    g.add_argument("--epsilon", type=float)
    a.add_argument("--max-lambda", type=int, default=DEFAULT_MAX_LAMBDA)
    a.add_argument("--json", action="store_true")

    p = sub.add_parser("predict", help="class probabilities from a trained parameter file")
    p.add_argument("params", type=Path)
    p.add_argument("inputs", type=Path)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--model", type=Path)
    return ap


def config_from_args(args) -> RunConfig:
    base = json.loads(args.config.read_text()) if args.config else {}
    cfg = RunConfig.from_dict(base).to_dict()
    overrides = {
        ("epochs",): args.epochs,
        ("privacy", "epsilon"): args.epsilon,
        ("privacy", "delta"): args.delta,
        ("privacy", "lot_size"): args.lot_size,
        ("privacy", "clip_bound"): args.clip_bound,
        ("providers", "count"): args.providers,
        ("providers", "transport"): args.transport,
        ("seed",): args.seed,
        ("output",): str(args.output) if args.output else None,
    }
    for path, value in overrides.items():
        if value is None:
            continue
        node = cfg
        for k in path[:-1]:
            node = node[k]
        node[path[-1]] = value
    if args.no_dp:
        cfg["dp"] = False
    if args.no_oblivious:
        cfg["oblivious"] = False
    return RunConfig.from_dict(cfg)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        try:
            cfg = config_from_args(args)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return cmd_train(cfg)
    if args.command == "audit":
        return cmd_audit(args)
    return cmd_predict(args.params, args.inputs, args.output, args.model)


if __name__ == "__main__":
    sys.exit(main())
