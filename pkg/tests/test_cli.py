import json
import math
import subprocess
import sys

import numpy as np
import pytest

from privtrain.accountant import MomentLedger, accumulate, eps_for_delta, linear_epsilon
from privtrain.cli import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_USAGE,
    RunConfig,
    audit_values,
    build_train_config,
    load_params,
    main,
    save_params,
)
from privtrain.data import write_idx
from privtrain.tensor import ModelSpec, init_params, mlp, predict
from privtrain.train import evaluate

SMALL = {
    "dataset": {"kind": "synthetic", "n_train": 600, "n_test": 200, "dim": 6, "classes": 2, "separation": 2.5, "seed": 1},
    "privacy": {"lot_size": 60},
    "hidden": [8],
    "epochs": 2,
}


def write_config(tmp_path, extra=None):
    cfg = json.loads(json.dumps(SMALL))
    cfg.update(extra or {})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def read_metrics(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# -- config -----------------------------------------------------------------


def test_config_round_trip(tmp_path):
    path = write_config(tmp_path)
    canon = RunConfig.load(path).dumps()
    again = tmp_path / "again.json"
    again.write_text(canon)
    assert RunConfig.load(again).dumps() == canon
    assert json.loads(canon)["privacy"]["delta"] == 1e-5


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"privacy": {"lot_size": 601}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"providers": {"transport": "pigeon"}})


def test_cli_flags_override_config(tmp_path):
    from privtrain.cli import _parser, config_from_args

    args = _parser().parse_args(
        ["train", "--config", str(write_config(tmp_path)), "--epochs", "3", "--epsilon", "2", "--providers", "2",
         "--lot-size", "40", "--clip-bound", "0.5", "--delta", "1e-6", "--seed", "9", "--no-dp", "--no-oblivious",
         "--transport", "tcp"]
    )
    v = config_from_args(args).values
    assert v["epochs"] == 3 and v["seed"] == 9 and not v["dp"] and not v["oblivious"]
    assert v["privacy"]["epsilon"] == 2.0 and v["privacy"]["lot_size"] == 40 and v["privacy"]["clip_bound"] == 0.5
    assert v["privacy"]["delta"] == 1e-6 and v["providers"] == {"count": 2, "shard": "contiguous", "transport": "tcp"}


# -- train ------------------------------------------------------------------


def test_train_seed_determinism_and_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--seed", "7", "--output", str(out)]) == EXIT_OK
        runs.append(out)
    assert "accounting model: poisson-approx" in capsys.readouterr().out
    ma, mb = read_metrics(runs[0] / "metrics.jsonl"), read_metrics(runs[1] / "metrics.jsonl")
    strip = lambda ms: [{k: v for k, v in m.items() if k != "wall_seconds"} for m in ms]
    assert strip(ma) == strip(mb)
    assert (runs[0] / "params.bin").read_bytes() == (runs[1] / "params.bin").read_bytes()
    assert [m["epoch"] for m in ma] == [1, 2]
    assert set(ma[0]) == {"epoch", "loss", "test_accuracy", "epsilon_spent", "wall_seconds"}
    summary = json.loads((runs[0] / "summary.json").read_text())
    assert summary["epsilon_spent"] <= 4.0 and summary["status"] == "completed"
    assert summary["epsilon_spent"] == ma[-1]["epsilon_spent"]
    ledger = MomentLedger.from_dict(json.loads((runs[0] / "ledger.json").read_text()))
    assert eps_for_delta(ledger, 1e-5) == summary["epsilon_spent"]


def test_train_no_dp_reports_inf(tmp_path):
    out = tmp_path / "nodp"
    assert main(["train", "--config", str(write_config(tmp_path)), "--no-dp", "--output", str(out)]) == EXIT_OK
    assert all(m["epsilon_spent"] == "inf" for m in read_metrics(out / "metrics.jsonl"))
    assert not (out / "ledger.json").exists()


def test_train_infeasible_budget_exit_code(tmp_path):
    code = main(["train", "--config", str(write_config(tmp_path)), "--epsilon", "0.1", "--output", str(tmp_path / "x")])
    assert code == EXIT_INFEASIBLE


def test_train_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"privacy": {"lot_size": 61}}')
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE


# -- audit ------------------------------------------------------------------


def test_audit_q_zero_is_floor():
    v = audit_values(0.0, 1.0, 1000, delta=1e-5)
    assert v["moments_epsilon"] == -math.log(1e-5) / 32


def test_audit_matches_library_bit_exactly(capsys):
    assert main(["audit", "--q", "0.01", "--sigma", "4", "--steps", "10000", "--delta", "1e-5", "--json"]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    ledger = accumulate(MomentLedger(0.01, 4.0), 10_000)
    assert printed["moments_epsilon"] == eps_for_delta(ledger, 1e-5)
    assert printed["linear_epsilon"] == linear_epsilon(4.0, 10_000, 1e-5)
    assert printed["ratio"] == printed["moments_epsilon"] / printed["linear_epsilon"]
    assert main(["audit", "--q", "0.01", "--sigma", "4", "--steps", "10000", "--delta", "1e-5"]) == EXIT_OK
    table = capsys.readouterr().out
    assert repr(printed["moments_epsilon"]) in table


@pytest.mark.parametrize("q", [0.0, 0.001, 0.05, 0.3])
@pytest.mark.parametrize("sigma", [0.8, 2.0, 8.0])
def test_audit_moments_never_worse_than_linear(q, sigma):
    for steps in (1, 50, 5000):
        v = audit_values(q, sigma, steps, delta=1e-5)
        assert v["moments_epsilon"] <= v["linear_epsilon"]
        w = audit_values(q, sigma, steps, epsilon=2.0)
        assert 0.0 <= w["moments_delta"] <= 1.0


def test_audit_rejects_bad_domain(capsys):
    assert main(["audit", "--q", "1.5", "--sigma", "1", "--steps", "10", "--delta", "1e-5"]) == EXIT_USAGE


def test_module_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "privtrain", "audit", "--q", "0", "--sigma", "1", "--steps", "1", "--delta", "1e-5"],
        capture_output=True, text=True, check=True,
    )
    assert "moments_epsilon" in out.stdout


# -- params and predict -----------------------------------------------------


def test_params_file_layout_round_trip(tmp_path):
    spec = mlp(3, [2], 2)
    p = init_params(spec, np.random.default_rng(0))
    path = tmp_path / "p.bin"
    save_params(path, p, spec)
    buf = path.read_bytes()
    assert buf[:32] == spec.digest()
    assert int.from_bytes(buf[32:36], "little") == 4
    assert int.from_bytes(buf[36:40], "little") == len("0.weight") and buf[40:48] == b"0.weight"
    assert int.from_bytes(buf[48:52], "little") == 2
    assert int.from_bytes(buf[52:60], "little") == 3 and int.from_bytes(buf[60:68], "little") == 2
    assert buf[68:92] == p["0.weight"].astype("<f4").tobytes()
    digest, q = load_params(path, spec)
    assert q.equal(p)
    with pytest.raises(ValueError):
        load_params(path, mlp(3, [3], 2))


def test_predict_matches_training_eval_and_batching(tmp_path):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--output", str(out)]) == EXIT_OK
    rc = RunConfig.load(out / "config.json")
    tc = build_train_config(rc)
    spec = ModelSpec.from_dict(json.loads((out / "model.json").read_text()))
    _, params = load_params(out / "params.bin", spec)

    np.save(tmp_path / "test.npy", tc.test.features)
    assert main(["predict", str(out / "params.bin"), str(tmp_path / "test.npy"), "--output", str(tmp_path / "pred.jsonl")]) == EXIT_OK
    probs = np.array([json.loads(l) for l in (tmp_path / "pred.jsonl").read_text().splitlines()])
    np.testing.assert_array_equal(probs, predict(spec, params, tc.test.features))
    # same accuracy as the last training-time evaluation
    acc = float(np.mean(np.argmax(probs, axis=1) == tc.test.labels))
    assert acc == read_metrics(out / "metrics.jsonl")[-1]["test_accuracy"]
    assert acc == evaluate(spec, params, tc.test, True)[1]

    one = tc.test.features[5:6]
    np.save(tmp_path / "one.npy", one)
    np.save(tmp_path / "many.npy", tc.test.features[:32])
    main(["predict", str(out / "params.bin"), str(tmp_path / "one.npy"), "--output", str(tmp_path / "one.jsonl")])
    main(["predict", str(out / "params.bin"), str(tmp_path / "many.npy"), "--output", str(tmp_path / "many.jsonl")])
    assert (tmp_path / "one.jsonl").read_text().splitlines()[0] == (tmp_path / "many.jsonl").read_text().splitlines()[5]

    (tmp_path / "empty.npy").write_bytes(b"")
    assert main(["predict", str(out / "params.bin"), str(tmp_path / "empty.npy"), "--output", str(tmp_path / "e.jsonl")]) == EXIT_OK
    assert (tmp_path / "e.jsonl").read_text() == ""

    np.save(tmp_path / "wrong.npy", np.zeros((2, 7), np.float32))
    assert main(["predict", str(out / "params.bin"), str(tmp_path / "wrong.npy"), "--output", str(tmp_path / "w.jsonl")]) == EXIT_USAGE

    # IDX input of raw bytes is scaled like the training loader
    write_idx(tmp_path / "x.idx", np.full((2, 6), 255, np.uint8))
    assert main(["predict", str(out / "params.bin"), str(tmp_path / "x.idx"), "--output", str(tmp_path / "x.jsonl")]) == EXIT_OK
    got = np.array([json.loads(l) for l in (tmp_path / "x.jsonl").read_text().splitlines()])
    np.testing.assert_array_equal(got, predict(spec, params, np.ones((2, 6), np.float32)))
