"""Smoke test for the h2p Python module.

Build first with `cargo build -p h2p-py --release` (or without --release).
The script loads the freshly built library from target/ unless `h2p` is
already importable.
"""

import importlib
import json
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("h2p")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libh2p.so", "libh2p.dylib", "h2p.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                tmp = pathlib.Path(tempfile.mkdtemp())
                ext = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(lib, tmp / ("h2p" + ext))
                sys.path.insert(0, str(tmp))
                return importlib.import_module("h2p")
    sys.exit("h2p library not found; run `cargo build -p h2p-py` first")


def main():
    h2p = load_module()
    C = 0x4005C3

    assert h2p.encode_index(0x400587, True, 8) == 15
    assert h2p.encode_index(0x400587, False, 8) == 14
    assert h2p.storage_bytes(8, 2, 200) == 336
    assert h2p.storage_bytes(8, 32, 200) == 5256

    train = h2p.generate(num_calls=8000, seed=1)
    held = h2p.generate(num_calls=4000, seed=2)
    assert len(train) > 0 and train.occurrences(C) == 8000

    stats = h2p.simulate(held)
    preds, misses = stats[C]
    base_acc = 1 - misses / preds
    assert 0.5 < base_acc < 0.9, base_acc
    assert C in h2p.screen(train)

    with tempfile.TemporaryDirectory() as d:
        for name in ("t.brt", "t.txt"):
            path = pathlib.Path(d) / name
            held.save(str(path))
            again = h2p.Trace.load(str(path))
            assert again.records() == held.records()
            assert again.instruction_count == held.instruction_count

    fp = h2p.train_helper(train, C, mode="fp", filters=8, epochs=8, sample_budget=2000, seed=3)
    fp_acc = fp.evaluate(held)
    assert fp_acc > 0.95, fp_acc
    same = h2p.Helper.from_json(C, fp.to_json())
    assert same.to_json() == fp.to_json()

    tp = h2p.train_helper(train, C, mode="tp", filters=8, epochs=8, sample_budget=2000, seed=3)
    blob = tp.to_blob()
    p, m, length, _t = h2p.inspect_blob(blob)
    assert (p, m, length) == (8, 8, 200)
    assert tp.storage_bytes() == h2p.storage_bytes(8, 8, 200)
    try:
        fp.to_blob()
        raise AssertionError("fp helper must not deploy")
    except ValueError:
        pass

    config = "\n".join(
        ["min_workloads_per_h2p = 2", "modes = [\"tp\"]", "seed = 5", "[train]", "epochs = 3",
         "filters = 4", "sample_budget = 500"]
        + [f"[[workloads]]\nkind = \"synth\"\nnum_calls = 3000\nseed = {k}" for k in range(3)]
    )
    report = json.loads(h2p.run_crossval(config))
    assert report["folds"] == 3
    try:
        h2p.run_crossval(config + "\nbogus = 1")
        raise AssertionError("unknown keys must be rejected")
    except ValueError:
        pass

    print(f"h2p {h2p.__version__}: baseline {base_acc:.3f}, FP helper {fp_acc:.3f}, "
          f"TP helper {tp.evaluate(held):.3f}, crossval rows {len(report['rows'])}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
