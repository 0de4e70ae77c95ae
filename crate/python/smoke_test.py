"""Smoke test for the czsl extension module.

Build and install first:  maturin build --release -m crates/python/Cargo.toml -o dist && pip install dist/czsl-*.whl
"""

import pathlib
import sys
import tempfile

import czsl

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main():
    cfg = czsl.RunConfig("[train]\nepochs = 1\n")
    assert cfg.seed == 0
    cfg.seed = 3
    assert czsl.RunConfig(cfg.to_toml()).hash() == cfg.hash()

    try:
        czsl.RunConfig("[loss]\ntemp = 1.0\n")
    except ValueError as e:
        assert "loss.temp" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    points, summary = czsl.bias_sweep(
        [[0.9, 0.1, 0.2], [0.1, 0.8, 0.3], [0.2, 0.1, 0.7]],
        [(0, True), (1, True), (2, False)],
        [True, True, False],
    )
    assert summary["AUC"] == 1.0 and len(points) >= 2

    assert czsl.split_manifest(ROOT / "data" / "ut-zappos") == [83, 22998, 15, 15, 3214, 18, 18, 2914]

    checks = czsl.gradcheck(0)
    assert all(ok for _, ok, _ in checks), checks

    with tempfile.TemporaryDirectory() as tmp:
        n_train, n_val, n_test = czsl.gen_data(cfg, pathlib.Path(tmp) / "data")
        assert n_train > 0 and n_val > 0 and n_test > 0
        run_dir, test = czsl.train(cfg, pathlib.Path(tmp) / "runs")
        assert pathlib.Path(run_dir).name == f"{cfg.hash()}-seed3"
        reproduced, again = czsl.evaluate(run_dir)
        assert reproduced and again == test

    print("czsl smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
