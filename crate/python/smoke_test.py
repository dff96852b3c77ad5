"""Smoke test for the Python bindings.

Build and install first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/pixel_barrier-*.whl
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import pixel_barrier as pb


def check_oracles():
    assert pb.barrier_loss([[0.5]], [[False]]) == [0.0, 0.0, 0.0]
    assert math.isclose(pb.barrier_loss([[0.0]], [[False]])[0], 0.01, abs_tol=1e-12)
    assert math.isclose(pb.barrier_loss([[0.6], [0.5]], [[False], [False]])[1], 0.06, abs_tol=1e-12)
    assert pb.barrier_loss([[-0.2]], [[True]]) == [0.0, 0.0, 0.0]
    assert math.isclose(pb.mc_value_target([[1.0], [1.0]], [10.0], 0.9)[0], 10.0, abs_tol=1e-12)
    assert pb.cost_return([(3, 200), (5, 200)]) == 4.0
    assert math.isclose(pb.cost_regret(10, 1000), 0.01, abs_tol=1e-15)


def check_config():
    cfg = pb.Config()
    assert cfg.get("horizon") == "10"
    small = cfg.with_value("epochs", "2")
    assert small.get("epochs") == "2"
    for bad in ("no_such_key = 1", "horizon = -1"):
        try:
            pb.Config(bad)
        except ValueError:
            pass
        else:
            raise AssertionError(f"accepted {bad!r}")


def check_world():
    world = pb.HazardWorld()
    c, h, w = world.image_shape
    obs = world.reset(7)
    assert len(obs) == c * h * w and all(0.0 <= v <= 1.0 for v in obs)
    assert world.reset(7) == obs
    steps = 0
    done = False
    while not done:
        obs, reward, kappa, done = world.step((1.0, 0.0))
        assert kappa in (0, 1) and math.isfinite(reward)
        steps += 1
    assert steps == 200


def check_training():
    text = "\n".join(
        [
            "horizon = 3",
            "collect_interval = 2",
            "batch_size = 2",
            "chunk_length = 4",
            "epochs = 2",
            "episode_length = 12",
            "seed_episodes = 2",
            "image_size = 16",
            "deter_dim = 8",
            "stoch_dim = 4",
            "embed_dim = 8",
            "hidden_dim = 8",
            "channels = 2, 2, 2",
        ]
    )
    trainer = pb.Trainer(pb.Config(text))
    record = trainer.run_epoch()
    assert record["epoch"] == 1 and record["env_steps"] == trainer.env_steps
    assert all(math.isfinite(record[k]) for k in ("L_m", "L_b1", "L_b2", "L_b3", "L_p", "critic_loss"))
    with tempfile.TemporaryDirectory() as d:
        ck = Path(d) / "ck"
        trainer.save(ck)
        agent = pb.Agent.load(ck)
        summary = agent.evaluate(2)
        assert summary["episodes"] == 2 and summary["cost_return"] >= 0.0
        audit = agent.audit_barrier(2)
        assert set(audit) >= {"safe_violation_fraction", "unsafe_violation_fraction", "decrease_violation_fraction"}
        acc = agent.safety_accuracy(2)
        assert 0.0 <= acc["accuracy"] <= 1.0
        resumed = pb.Trainer.load(ck)
        assert resumed.epoch == 1
        assert resumed.run_epoch() == trainer.run_epoch()


if __name__ == "__main__":
    check_oracles()
    check_config()
    check_world()
    check_training()
    print("python smoke test passed")
