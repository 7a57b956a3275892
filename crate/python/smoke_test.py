"""Smoke test for the varidiff Python extension.

Build the module first, e.g. `maturin develop -m crates/python/Cargo.toml`,
or copy `target/<profile>/libvaridiff_py.so` to `varidiff.so` on PYTHONPATH.
"""

import math
import sys
import tempfile

import varidiff

TINY = """
model.patch_size=4
model.d_model=16
model.num_blocks=1
model.num_heads=2
model.time_dim=16
train.batch_size=4
train.num_steps=4
train.checkpoint_every=0
data.episodes=6
data.members=2
data.test_images=10
sampler.steps=2
eval.n=10
eval.k=5
"""


def main():
    shard = varidiff.Shard.generate(episodes=3, members=2, seed=1)
    assert shard.num_images == 6 and shard.num_episodes == 3
    pixels, shape = shard.image(shard.image_ids()[0])
    assert shape == [16, 16, 3] and len(pixels) == 768
    assert all(-1.0 <= p <= 1.0 for p in pixels)

    sched = varidiff.Schedule(16)
    assert abs(sched.shift - 2 * math.log(2)) < 1e-12
    alpha, sigma, _ = sched.at(0.5)
    assert abs(alpha * alpha + sigma * sigma - 1) < 1e-12
    assert sched.step_stddev(0.6, 0.5, 1.0) < sched.step_stddev(0.6, 0.5, 0.0)

    rows = [[float(i), float(i * i % 7)] for i in range(20)]
    assert abs(varidiff.frechet_distance(rows, rows)) < 1e-9
    assert varidiff.knn_precision_recall(rows, rows, 3) == (1.0, 1.0)
    assert varidiff.filter_band([0.5, 0.8, 0.95], 0.65, 0.9) == [1]

    cfg = varidiff.ExperimentConfig(TINY)
    assert "model.d_model=16" in cfg.to_text()
    try:
        varidiff.ExperimentConfig("model.no_such_key=1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as tmp:
        run = varidiff.train("pair", cfg, tmp)
        assert run["steps"] == 4 and math.isfinite(run["final_loss"])
        sampler = varidiff.Sampler(run["checkpoint"], steps=2)
        a = sampler.sample(shard, 0, n=2, guidance=0.5, seed=3)
        b = sampler.sample(shard, 0, n=2, guidance=0.5, seed=3)
        assert a == b and len(a) == 2 and a[0][1] == [16, 16, 3]
        test = varidiff.Shard.generate(episodes=10, members=1, seed=5)
        report = varidiff.evaluate(run["checkpoint"], test, cfg, n=10, k=5)
        assert set(report) == {"fid", "precision", "recall", "diversity", "proxy_distance"}

    print("python smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
