"""Smoke test for the cpl_zsl extension module.

Build and install it first, e.g.

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/cpl_zsl-*.whl

then run `python python/smoke_test.py`.
"""

import math
import sys
import tempfile
from pathlib import Path

import cpl_zsl


def main() -> int:
    ds, oracle = cpl_zsl.generate_synthetic(seed=0)
    assert len(ds) == ds.n_samples == 27 * 80 + 10 * 30, ds
    assert (ds.d_attr, ds.d_feat) == (16, 64)
    assert len(ds.unseen_classes) == 10
    assert oracle >= 0.99, oracle
    print(f"{ds!r}, oracle accuracy {oracle:.3f}")

    p = cpl_zsl.class_probabilities([1.0, 2.0, 3.0], gamma=0.9)
    assert abs(sum(p) - 1.0) < 1e-12 and p[0] > p[1] > p[2]
    assert round(cpl_zsl.harmonic_mean(83.1, 51.0), 1) == 63.2

    passed, max_rel, coords = cpl_zsl.gradient_check(trials=20, seed=0)
    assert passed and max_rel < 1e-5, (max_rel, coords)

    model, losses = cpl_zsl.train(ds, epochs=10, hidden=256, seed=1)
    assert len(losses) == 10 and all(math.isfinite(v) for v in losses)
    assert model.epochs == 10 and model.dims == (16, 256, 64)

    zsl = cpl_zsl.evaluate(ds, model)
    gzsl = cpl_zsl.evaluate(ds, model, "gzsl")
    assert zsl["acc_seen"] is None and gzsl["harmonic_mean"] is not None
    assert zsl["acc_unseen"] > 0.5, zsl["acc_unseen"]
    assert zsl["csv"].startswith("class_id,n,correct,accuracy\n")
    print(f"acc_unseen {zsl['acc_unseen']:.3f}, gzsl H {gzsl['harmonic_mean']:.3f}")

    # Resuming 5 + 5 epochs reproduces the 10-epoch model exactly.
    half, _ = cpl_zsl.train(ds, epochs=5, hidden=256, seed=1)
    resumed, _ = cpl_zsl.train(ds, epochs=5, hidden=256, seed=1, resume_from=half)
    assert resumed.to_bytes() == model.to_bytes()

    with tempfile.TemporaryDirectory() as tmp:
        manifest = ds.save(Path(tmp) / "data")
        again = cpl_zsl.Dataset.load(manifest)
        assert again.feature(5) == ds.feature(5) and again.labels == ds.labels
        model.save(Path(tmp) / "m.cplm")
        assert cpl_zsl.Model.load(Path(tmp) / "m.cplm").to_bytes() == model.to_bytes()
        try:
            cpl_zsl.Model.load(manifest)
        except OSError:
            pass
        else:
            raise AssertionError("loading a manifest as a checkpoint should fail")

    try:
        cpl_zsl.train(ds, lambda_=2.0, epochs=1)
    except ValueError as e:
        print(f"rejected bad config: {e}")
    else:
        raise AssertionError("lambda outside [0, 1] should be rejected")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
