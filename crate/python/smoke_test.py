"""Smoke test for the pyreachdiff extension: build a tiny dataset, train
briefly, sample with an action-backed projector and check the result."""

import os
import sys
import tempfile

import pyreachdiff as rd


def main() -> int:
    assert "double-integrator" in rd.env_names()

    sigmas = rd.schedule(5)
    assert sigmas[0] == 80.0 and sigmas[-2] == 0.002 and sigmas[-1] == 0.0
    assert rd.skip_probability("mid", 0.3) == 1.0
    assert rd.skip_probability("mid", 0.001) == 0.0

    s1 = rd.step("double-integrator", [0.0, 0.0], [1.0])
    traj = rd.rollout("double-integrator", [0.0, 0.0], [[1.0], [-1.0]])
    assert traj["states"][1] == s1

    projected = rd.project("double-integrator", [[0.0, 0.0], [0.05, 0.05]])
    assert max(r for r in projected["hull_residuals"] if r is not None) < 1e-8

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "di.rdds")
        ck = os.path.join(tmp, "di.ck")
        n = rd.generate_dataset("double-integrator", data, n=32, seed=0, horizon=8)
        assert n == 32
        first = rd.load_dataset(data)[0]
        report = rd.admissibility("double-integrator", first["states"])
        assert max(report["sae"]) < 1e-8

        loss = rd.train(data, ck, steps=50, projector="PA", seed=1)
        assert loss is not None and loss == loss
        samples = rd.sample(ck, first["states"][0], batch=4, seed=2)
        assert len(samples) == 4
        for s in samples:
            assert s["admissible_claim"]
            replay = rd.rollout("double-integrator", s["states"][0], s["actions"])
            assert replay["states"] == s["states"]

        assert rd.run_cli(["schedule", "--N", "5"]) == 0
        assert rd.run_cli(["sample", "--checkpoint", os.path.join(tmp, "missing.ck"), "--out", ck + ".jsonl"]) == 3

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
