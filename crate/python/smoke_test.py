"""Smoke test for the pyarml extension module. Run after `pip install -e crates/python`."""

import math
import tempfile

import pyarml

CONFIG = """
benchmark = sinusoid
iterations = 6
checkpoint_every = 3
freeze_samples = 500
seed = 4
"""


def main():
    cfg = pyarml.Config.parse(CONFIG)
    assert cfg.benchmark == "sinusoid" and cfg.seed == 4 and cfg.iterations == 6
    assert pyarml.Config.parse(cfg.to_kv()).to_kv() == cfg.to_kv()

    flow0 = pyarml.Flow.initial(cfg)
    h, se = flow0.entropy(2000, 0)
    assert abs(h - 2.734) < 0.1 and se > 0.0, (h, se)

    model, flow, trace = pyarml.train(cfg)
    assert len(trace) == 6 and "leader_loss" in trace[0]
    pts = flow.sample(8, 1)
    assert len(pts) == 8 and all(len(p) == 2 for p in pts)
    assert all(math.isfinite(lp) for lp in flow.log_prob(pts))
    grid = flow.density(cfg, 10)
    assert len(grid) == 10 and len(grid[0]) == 10

    loss = model.task_loss(cfg, [2.0, 1.0], 0)
    assert loss >= 0.0

    rep = pyarml.evaluate(model, cfg, flow, n_tasks=16, alphas=[0.5, 0.9], seed=2)
    assert rep["source"] == "adversarial" and len(rep["losses"]) == 16
    assert rep["cvar"][1]["value"] >= rep["cvar"][0]["value"] >= rep["mean"]

    assert pyarml.cvar([1.0, 2.0, 3.0, 4.0], 0.5) == 3.5
    assert pyarml.risk_weights("tr", [0.1, 0.7, 0.3]) == [0.0, 1.0, 0.0]
    assert pyarml.risk_weights("dr:0.5", [1.0, 4.0, 3.0, 2.0]) == [0.0, 0.5, 0.5, 0.0]

    th = pyarml.theory(pyarml.Config.parse("benchmark = sinusoid\ntheory_game = decoupled\n"), flow, seed=0)
    assert th["reports"][0]["max_ratio"] == 0.5 and th["weight_bound"]["holds"] in (True, False)

    with tempfile.TemporaryDirectory() as d:
        pyarml.save_checkpoint(d, cfg, model, flow)
        cfg2, model2, flow2 = pyarml.load_checkpoint(d)
        assert model2.to_kv() == model.to_kv() and flow2.to_kv() == flow.to_kv()
        assert cfg2.to_kv() == cfg.to_kv()

    try:
        pyarml.Config.parse("lambda = 0.1\n")
    except ValueError as e:
        assert "benchmark" in str(e)
    else:
        raise AssertionError("missing benchmark accepted")

    print("pyarml smoke test passed")


if __name__ == "__main__":
    main()
