from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from psdlab.dataset import DatasetManifest, GenConfig, Record, generate_dataset, split

CACHE = Path(__file__).resolve().parent.parent / ".acceptance_cache"


def cached_corpus(name, config):
    """Generate (or resume) a corpus under the repo-level cache; reruns only read it."""
    return generate_dataset(CACHE / name, config)


@pytest.fixture(scope="session")
def toy_corpus():
    """200 stratified G32T scenes, 80/10/10 by scene."""
    config = GenConfig(n_targets=200, sizes=(32,), views=("T",), modes=("G",), seed=0)
    return cached_corpus("g32t_200", config)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six scenes (every target at a 100 % step), rendered as 32 px T and TU in both color modes."""
    root = tmp_path_factory.mktemp("tiny")
    config = GenConfig(step_percent=100, sizes=(32,), views=("T", "TU"), modes=("G", "C"),
                       seed=1, ratios=(50, 25, 25), keep_assemblies=True)
    manifest = generate_dataset(root, config)
    return root, manifest, config


def fake_manifest(n, views=("T",), seed=0):
    """Manifest of n scenes with no image files behind it."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = tuple(np.sort(rng.uniform(0, 100, 5)))
        for view in views:
            records.append(Record(f"s{i:05d}r00", view, 32, "G", f"images/s{i:05d}r00_{view}_32_G.png",
                                  i, label, label))
    return DatasetManifest(records, {})


def synthetic_image_manifest(root, n, size=32, ratios=(60, 20, 20), seed=0):
    """Gray T images whose mean brightness encodes the label, so a network can learn it."""
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        level = rng.uniform(0.1, 0.9)
        noise = rng.normal(0, 0.03, size=(size, size))
        px = np.clip(255 * (level + noise), 0, 255).astype(np.uint8)
        name = f"images/x{i:04d}_T_{size}_G.png"
        Image.fromarray(px, mode="L").save(root / name)
        label = tuple(float(v) for v in 100 * np.clip(level + np.array([-0.1, -0.05, 0, 0.05, 0.1]), 0, 1))
        records.append(Record(f"x{i:04d}", "T", size, "G", name, i, label, label))
    return split(DatasetManifest(records, {}, root), ratios, seed)


# acceptance verdicts: criterion -> list of (check, ok, detail)
ACCEPTANCE = {}


def verdict(criterion, check, ok, detail=""):
    """Record one acceptance check, then fail the calling test if it did not hold."""
    ACCEPTANCE.setdefault(criterion, []).append((check, bool(ok), detail))
    line = f"criterion {criterion} [{check}]: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for number, (title, checks) in CRITERIA.items():
        got = {c: (ok, d) for c, ok, d in ACCEPTANCE.get(number, [])}
        missing = [c for c in checks if c not in got]
        failed = [f"{c}: {got[c][1]}" if got[c][1] else c for c in checks if c in got and not got[c][0]]
        if failed:
            state = "FAIL (" + "; ".join(failed) + ")"
        elif missing:
            state = "NOT RUN (" + ", ".join(missing) + ")"
        else:
            state = "PASS"
        terminalreporter.write_line(f"{number:>2}. {title}: {state}")
