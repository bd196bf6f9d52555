"""Smoke test for the `child` extension module.

Install first:  pip install --no-build-isolation -e crates/py
Run:            python python/smoke_test.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

import child


def main() -> None:
    assert child.PRESETS == ["A", "B", "C", "D", "E", "F", "G"]
    spec = child.ProcessSpec.preset("A", seed=3)
    data = spec.sample(160, seed=1)
    assert data.observations.shape == (160, 10, 4)
    assert data.layer_dims == [4, 1]
    z = data.latents(0).reshape(-1, 4)

    mcc, perm = child.compute_mcc(z, z[:, ::-1] * 2.0 + 1.0)
    assert abs(mcc - 1.0) < 1e-9 and perm == [3, 2, 1, 0]
    x = data.observations
    assert child.correlational_score(x, x) == 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "data.safetensors"
        data.save(path)
        again = child.Dataset.load(path)
        assert again.fingerprint == data.fingerprint
        assert np.array_equal(again.observations, x)

        train = {"epochs": 1, "batch_size": 32, "validation_sequences": 32, "beta": 0.002}
        model = {"num_layers": 2, "dims_per_layer": [1, 4], "obs_dim": 4, "receptive_half_width": 2,
                 "encoder_channels": 8, "encoder_hidden": 8, "decoder_hidden": 8, "prior_hidden": 8, "flow_hidden": 4}
        ckpt = child.train_model(data, json.dumps(train), json.dumps(model), str(Path(tmp) / "run"))
        assert ckpt.epoch == 1
        means = ckpt.encode(x[:5])
        assert [m.shape for m in means] == [(5, 10, 4), (5, 10, 1)]
        report = json.loads(ckpt.evaluate(data, generated=8))
        assert len(report["mcc_per_layer"]) == 2
        series, change = ckpt.interpolate(x[0], 1, 0, [-1.0, 0.0, 1.0])
        assert series.shape == (3, 10, 4) and len(change) == 4
        latents, gen = ckpt.generate(4, 10, seed=2)
        assert gen.shape == (4, 10, 4)

        reloaded = child.Checkpoint.load(str(Path(tmp) / "run" / "checkpoint_last.safetensors"))
        assert reloaded.epoch == 1

    rows = child.spectral_sweep(3)
    assert [r[1] for r in rows] == [False, True, True]
    assert rows[1][2] < 1e-8
    assert child.run_cli(["generate", "--preset", "nope"]) == 2
    print("smoke test passed")


if __name__ == "__main__":
    main()
