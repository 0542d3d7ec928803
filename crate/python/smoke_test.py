"""Smoke test for the pyoccworld extension.

Build the extension first:

    cargo build --release -p pyoccworld

then run `python3 python/smoke_test.py`. If `pyoccworld` is not importable
(e.g. not installed with maturin), the script loads the shared library from
target/release or target/debug.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    try:
        import pyoccworld

        return pyoccworld
    except ImportError:
        pass
    names = ["libpyoccworld.so", "libpyoccworld.dylib", "pyoccworld.dll"]
    for profile in ["release", "debug"]:
        for name in names:
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("pyoccworld", str(path))
                spec = importlib.util.spec_from_file_location("pyoccworld", path, loader=loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                sys.modules["pyoccworld"] = module
                return module
    sys.exit("pyoccworld not built; run `cargo build --release -p pyoccworld` first")


def main():
    ow = load_extension()

    grid = ow.OccGrid([4, 4, 2])
    grid.set(1, 2, 0, 4)
    assert grid.get(1, 2, 0) == 4
    assert len(grid.labels()) == 32
    assert ow.iou(grid, grid) == 1.0 and ow.miou(grid, grid) == 1.0
    empty = ow.OccGrid([4, 4, 2])
    assert ow.iou(empty, grid) == 0.0

    assert ow.l2_error([(1, 0), (2, 0)], [(1, 0), (3, 0)], [2]) == [1.0]
    assert ow.l2_error([(1, 0), (2, 0)], [(1, 0), (3, 0)], [2], "averaged") == [0.5]

    dims = [16, 16, 2]
    train = [ow.generate_world(dims, seed, 8) for seed in range(3)]
    heldout = [ow.generate_world(dims, 100, 8)]
    seq = train[0]
    assert len(seq) == 8 and seq.dims == dims
    assert seq.grid(7) == ow.copy_paste(seq.window(0, 8), 2)[1]

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "scene.occseq"
        seq.save(str(path))
        back = ow.OccSequence.load(str(path))
        assert all(back.grid(k) == seq.grid(k) for k in range(len(seq)))
        assert back.pose(3) == seq.pose(3)

    tok_settings = [
        ("tokenizer.grid", "16x16x2"),
        ("tokenizer.C", "8"),
        ("tokenizer.N", "16"),
        ("tokenizer.hidden", "8"),
        ("tokenizer.steps", "30"),
        ("tokenizer.batch", "2"),
        ("tokenizer.eval_every", "15"),
    ]
    tok, log = ow.train_tokenizer(train, heldout, tok_settings)
    assert len(log) == 2 and log[-1].startswith("epoch=")
    indices = tok.tokenize(seq.grid(0))
    assert len(indices) == tok.token_hw[0] * tok.token_hw[1]
    assert tok.decode(indices) == tok.reconstruct(seq.grid(0))
    miou, iou, used = tok.evaluate([heldout[0].grid(0)])
    assert 0.0 <= miou <= 1.0 and 0.0 <= iou <= 1.0 and used >= 1

    world_settings = [
        ("world.K", "1"),
        ("world.layers_per_scale", "1"),
        ("world.heads", "1"),
        ("world.history_frames", "2"),
        ("world.future_frames", "3"),
        ("world.steps", "4"),
        ("world.batch", "1"),
        ("world.eval_every", "4"),
    ]
    model, log = ow.train_world(tok, train, heldout, world_settings)
    assert len(log) == 1
    grids, waypoints = model.rollout(tok, seq.window(0, model.window), 3)
    assert len(grids) == 3 and len(waypoints) == 3
    assert all(g.dims == dims for g in grids)
    assert all(math.isfinite(x) and math.isfinite(y) for x, y in waypoints)
    flags = ow.collisions(waypoints, seq.window(model.window - 1, 4))
    assert len(flags) == 3

    with tempfile.TemporaryDirectory() as tmp:
        model.save(tmp + "/world")
        tok.save(tmp + "/tok")
        again, _ = ow.WorldModel.load(tmp + "/world").rollout(
            ow.Tokenizer.load(tmp + "/tok"), seq.window(0, model.window), 3
        )
        assert again == grids

    try:
        ow.OccGrid([4, 4, 2], 6, bytes(31))
    except ValueError:
        pass
    else:
        raise AssertionError("bad label count accepted")

    print("pyoccworld smoke test passed")


if __name__ == "__main__":
    main()
