"""Smoke test for the solarbnn extension: build with `maturin develop -m crates/python/Cargo.toml` first."""

import math
import tempfile
from pathlib import Path

import solarbnn


def main():
    assert solarbnn.winkler(0.5, 1.0, 3.0, 0.1) == 12.0
    assert math.isclose(solarbnn.pinball(2.0, 1.0, 0.9), 0.9)
    assert math.isclose(solarbnn.rmse([0.0, 3.0], [0.0, 0.0]), math.sqrt(4.5))
    assert solarbnn.ab_coefficient(1.0, 2.0) == 0.0

    series = solarbnn.synth(days=3, seed=1)
    assert len(series) == 3 * 48 and min(series) >= 0.0

    with tempfile.TemporaryDirectory() as tmp:
        cfg = solarbnn.ExperimentConfig(
            overrides=[
                f"output_dir={str(Path(tmp) / 'run')!r}".replace("'", '"'),
                "horizon=4",
                "k=12",
                "samples=20",
                "model.hidden=4",
                "train.epochs=2",
                "data.synth.days=20",
                "data.synth.seed=3",
            ]
        )
        ckpt_path = solarbnn.train(cfg)
        ckpt = solarbnn.Checkpoint.load(str(ckpt_path))
        assert ckpt.horizon == 4 and ckpt.config_hash == cfg.hash()

        mean, bands = ckpt.predict(series[-ckpt.k:], samples=30, seed=5)
        assert len(mean) == 4
        for level, lower, upper in bands:
            assert all(0.0 <= lo <= hi for lo, hi in zip(lower, upper)), level

        out = solarbnn.forecast_csv(str(ckpt_path))
        assert Path(out).read_text().splitlines()[-1].startswith("4,")
        scores = dict(solarbnn.evaluate(str(ckpt_path)))
        assert scores["rmse"] >= 0.0 and "winkler" in scores

        try:
            solarbnn.ExperimentConfig(overrides=["train.learning_rate=-1"]).validate()
        except ValueError:
            pass
        else:
            raise AssertionError("negative learning rate accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
