"""Generated corpora on disk: manifest, splits, minibatch plans, scene generation.

Layout of a dataset root::

    dataset.json          metadata (ladder, box, generator version, seed, ratios)
    manifest.csv          one row per image
    images/               {scene_id}_{view}_{size}_{G|C}.png
    scenes/{id}.json      per-scene completion marker with labels and seed
    assemblies/{id}.csv   sphere dumps (only with keep_assemblies)

A scene becomes visible only once its marker exists; images are staged in
``.partial/{id}`` first so that a crash never leaves a half-written scene
that looks complete.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .packing import PackingConfig, SphereAssembly, generate_assembly
from .psd import DEFAULT_LADDER, PsdLabel, SieveLadder, enumerate_target_psds, format_percent
from .render import (RasterImage, downscale, image_filename, render_view, stitch_tu, stretch_stu,
                     to_grayscale)

SPLITS = ("train", "val", "test")
DEFAULT_SIZES = (32, 64, 96, 128, 160)
ALL_VIEWS = ("T", "U", "TU", "STU")
ALL_MODES = ("G", "C")
MASTER_RESOLUTION = 400


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Record:
    scene_id: str
    view: str
    size: int
    mode: str
    path: str
    seed: int
    target: tuple
    achieved: tuple
    split: str = ""

    @property
    def label(self) -> np.ndarray:
        return np.array(self.achieved, dtype=float)


@dataclass
class DatasetManifest:
    records: list
    metadata: dict = field(default_factory=dict)
    root: Path | None = None

    def __len__(self):
        return len(self.records)

    @property
    def ladder(self) -> SieveLadder:
        lad = self.metadata.get("ladder")
        if not lad:
            return DEFAULT_LADDER
        return SieveLadder(tuple(lad["openings"]), lad["lower_bound"], lad["upper_bound"])

    def select(self, view=None, size=None, mode=None, split=None) -> "DatasetManifest":
        keep = [r for r in self.records
                if (view is None or r.view == view) and (size is None or r.size == size)
                and (mode is None or r.mode == mode) and (split is None or r.split == split)]
        return DatasetManifest(keep, dict(self.metadata), self.root)

    def scene_ids(self) -> list[str]:
        return sorted({r.scene_id for r in self.records})

    def labels(self) -> np.ndarray:
        return np.array([r.achieved for r in self.records], dtype=float).reshape(len(self.records), -1)

    def validate(self) -> None:
        """Check id uniqueness per variant and that every image exists at its declared size."""
        seen = set()
        for r in self.records:
            key = (r.scene_id, r.view, r.size, r.mode)
            if key in seen:
                raise DatasetError(f"duplicate record {key}")
            seen.add(key)
            path = self.resolve(r)
            if not path.exists():
                raise DatasetError(f"missing image {path}")
            with Image.open(path) as im:
                w, h = im.size
                bands = len(im.getbands())
            want_w = 2 * r.size if r.view == "TU" else r.size
            if (w, h) != (want_w, r.size) or bands != (1 if r.mode == "G" else 3):
                raise DatasetError(f"{path} is {w}x{h} with {bands} bands, manifest says "
                                   f"{want_w}x{r.size} mode {r.mode}")

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() or self.root is None else self.root / p


def manifest_columns(ladder: SieveLadder) -> list[str]:
    return (["scene_id", "view", "size", "mode", "path", "seed"]
            + [f"target_{c}" for c in ladder.columns]
            + [f"achieved_{c}" for c in ladder.columns] + ["split"])


def write_manifest(manifest: DatasetManifest, root) -> None:
    root = Path(root)
    ladder = manifest.ladder
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(manifest_columns(ladder))
    for r in manifest.records:
        writer.writerow([r.scene_id, r.view, r.size, r.mode, r.path, r.seed]
                        + [format_percent(v) for v in r.target]
                        + [repr(float(v)) for v in r.achieved] + [r.split])
    _atomic_write(root / "manifest.csv", buf.getvalue())
    _atomic_write(root / "dataset.json", json.dumps(manifest.metadata, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    meta_path, csv_path = root / "dataset.json", root / "manifest.csv"
    if not csv_path.exists():
        raise DatasetError(f"no manifest.csv under {root}")
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    manifest = DatasetManifest([], metadata, root)
    cols = manifest.ladder.columns
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line, row in enumerate(reader, start=2):
            try:
                manifest.records.append(Record(
                    scene_id=row["scene_id"], view=row["view"], size=int(row["size"]), mode=row["mode"],
                    path=row["path"], seed=int(row["seed"]),
                    target=tuple(float(row[f"target_{c}"]) for c in cols),
                    achieved=tuple(float(row[f"achieved_{c}"]) for c in cols),
                    split=row["split"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{csv_path}:{line}: malformed row ({exc})") from exc
    return manifest


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# splits and minibatches

def split_counts(n: int, ratios) -> tuple[int, int, int]:
    """Floor allocation for val and test; the remainder goes to train."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 100.0) > 1e-9:
        raise DatasetError(f"split ratios must be three non-negative numbers summing to 100, got {ratios}")
    n_val = math.floor(n * ratios[1] / 100.0 + 1e-9)
    n_test = math.floor(n * ratios[2] / 100.0 + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split(manifest: DatasetManifest, ratios=(80, 10, 10), seed: int = 0) -> DatasetManifest:
    """Assign splits per scene: seeded permutation of sorted scene ids, then contiguous blocks."""
    if len(manifest) == 0:
        raise DatasetError("cannot split an empty manifest")
    scenes = manifest.scene_ids()
    counts = split_counts(len(scenes), ratios)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B])).permutation(len(scenes))
    assignment = {}
    pos = 0
    for name, count in zip(SPLITS, counts):
        for i in order[pos:pos + count]:
            assignment[scenes[i]] = name
        pos += count
    records = [replace(r, split=assignment[r.scene_id]) for r in manifest.records]
    meta = dict(manifest.metadata, split_ratios=list(ratios), split_seed=int(seed))
    return DatasetManifest(records, meta, manifest.root)


@dataclass
class MinibatchPlan:
    epoch: int
    order: list          # indices into the manifest's records
    batch_size: int

    def batches(self):
        for i in range(0, len(self.order), self.batch_size):
            yield self.order[i:i + self.batch_size]

    def __len__(self):
        return -(-len(self.order) // self.batch_size)


def minibatches(manifest: DatasetManifest, batch_size: int, epoch: int, seed: int = 0,
                split_name: str = "train") -> MinibatchPlan:
    """Fresh permutation of the training records for each (seed, epoch)."""
    if batch_size < 1:
        raise DatasetError("batch size must be at least 1")
    idx = [i for i, r in enumerate(manifest.records) if r.split == split_name]
    idx.sort(key=lambda i: (manifest.records[i].scene_id, manifest.records[i].view,
                            manifest.records[i].size, manifest.records[i].mode))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0x3B]))
    perm = rng.permutation(len(idx))
    return MinibatchPlan(epoch, [idx[i] for i in perm], batch_size)


def _read_pixels(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if mode == "G" else "RGB"))
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def load_pixels(manifest: DatasetManifest, indices=None) -> np.ndarray:
    """uint8 tensor N x C x H x W for the given record indices (all by default)."""
    indices = range(len(manifest)) if indices is None else indices
    recs = [manifest.records[i] for i in indices]
    if not recs:
        raise DatasetError("no records to load")
    variants = {(r.view, r.size, r.mode) for r in recs}
    if len(variants) > 1:
        raise DatasetError(f"records mix image variants {sorted(variants)}")
    arrays = [_read_pixels(manifest.resolve(r), r.mode) for r in recs]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DatasetError(f"images have inconsistent shapes {sorted(shapes)}")
    return np.stack(arrays)


def load_batch(manifest: DatasetManifest, indices=None, dtype=np.float64):
    """(inputs scaled to [0, 1], labels N x 5 in percent)."""
    indices = list(range(len(manifest)) if indices is None else indices)
    x = load_pixels(manifest, indices).astype(dtype) / 255.0
    y = np.array([manifest.records[i].achieved for i in indices], dtype=float)
    return x, y


# ---------------------------------------------------------------------------
# generation

@dataclass
class GenConfig:
    """What to generate. ``n_targets=None`` takes every enumerated target."""

    step_percent: float = 5.0
    n_targets: int | None = None
    scenes_per_target: int = 1
    sizes: tuple = DEFAULT_SIZES
    views: tuple = ALL_VIEWS
    modes: tuple = ALL_MODES
    seed: int = 0
    ratios: tuple = (80, 10, 10)
    box_size: float = 4450.0
    fill_height: float | None = None
    resolution: int = MASTER_RESOLUTION
    flat_shading: bool = False
    keep_assemblies: bool = False
    ladder: SieveLadder = DEFAULT_LADDER

    def metadata(self) -> dict:
        lad = self.ladder
        return {
            "generator": "psdlab",
            "generator_version": __version__,
            "seed": int(self.seed),
            "ladder": {"openings": list(lad.openings), "lower_bound": lad.lower_bound,
                       "upper_bound": lad.upper_bound},
            "box": {"size": self.box_size, "fill_height": self.fill_height},
            "step_percent": self.step_percent,
            "n_targets": self.n_targets,
            "scenes_per_target": self.scenes_per_target,
            "sizes": list(self.sizes),
            "views": list(self.views),
            "modes": list(self.modes),
            "resolution": self.resolution,
            "flat_shading": self.flat_shading,
            "split_ratios": list(self.ratios),
        }


def select_targets(step_percent: float, n_targets: int | None, seed: int,
                   ladder: SieveLadder = DEFAULT_LADDER) -> list[tuple[int, PsdLabel]]:
    """Stratified subset of the enumeration: one random target per contiguous block.

    Returns (enumeration index, label) pairs in enumeration order.
    """
    labels = enumerate_target_psds(step_percent, ladder)
    m = len(labels)
    if n_targets is None or n_targets >= m:
        return list(enumerate(labels))
    if n_targets < 1:
        raise DatasetError("need at least one target")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57]))
    edges = [(i * m) // n_targets for i in range(n_targets + 1)]
    picks = [int(lo + rng.integers(hi - lo)) for lo, hi in zip(edges[:-1], edges[1:])]
    return [(i, labels[i]) for i in picks]


def scene_seed(seed: int, target_index: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(target_index), int(replicate)]).generate_state(1)[0])


def scene_name(target_index: int, replicate: int) -> str:
    return f"s{target_index:05d}r{replicate:02d}"


def scene_images(assembly: SphereAssembly, sizes, views, modes, resolution=MASTER_RESOLUTION,
                 flat_shading=False) -> dict:
    """All requested (view, size, mode) images of one scene."""
    top = render_view(assembly, "T", resolution, flat_shading)
    under = render_view(assembly, "U", resolution, flat_shading)
    masters = {"T": top, "U": under}
    if "TU" in views or "STU" in views:
        tu = stitch_tu(top, under)
        masters["TU"] = tu
        masters["STU"] = stretch_stu(tu)
    out = {}
    for view in views:
        for size in sizes:
            color = downscale(masters[view], size)
            for mode in modes:
                out[(view, size, mode)] = color if mode == "C" else to_grayscale(color)
    return out


def _load_marker(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def generate_dataset(root, config: GenConfig, progress=None) -> DatasetManifest:
    """Generate (or resume) a dataset under ``root`` and write its manifest.

    Completed scenes are skipped. Leftover staging directories from an
    interrupted run are moved to ``quarantine/`` and their scenes rebuilt.
    """
    root = Path(root)
    for sub in ("images", "scenes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if config.keep_assemblies:
        (root / "assemblies").mkdir(exist_ok=True)
    meta_path = root / "dataset.json"
    if meta_path.exists():
        old = json.loads(meta_path.read_text())
        keys = ("seed", "ladder", "box", "step_percent", "resolution", "flat_shading")
        diff = [k for k in keys if old.get(k) != config.metadata().get(k)]
        if diff:
            raise DatasetError(f"{root} was generated with different settings: {diff}")

    staging = root / ".partial"
    if staging.exists():
        leftovers = sorted(staging.iterdir())
        if leftovers:
            quarantine = root / "quarantine"
            quarantine.mkdir(exist_ok=True)
            for d in leftovers:
                dest = quarantine / d.name
                if dest.exists():
                    shutil.rmtree(dest)
                shutil.move(str(d), str(dest))
    staging.mkdir(exist_ok=True)

    targets = select_targets(config.step_percent, config.n_targets, config.seed, config.ladder)
    records = []
    total = len(targets) * config.scenes_per_target
    done = 0
    for t_index, target in targets:
        for rep in range(config.scenes_per_target):
            sid = scene_name(t_index, rep)
            marker = root / "scenes" / f"{sid}.json"
            info = _load_marker(marker)
            wanted = {(v, s, m) for v in config.views for s in config.sizes for m in config.modes}
            if info is None or not wanted <= {tuple(k) for k in info["images"]}:
                info = _build_scene(root, staging, sid, t_index, rep, target, config, info)
            for view, size, mode in sorted(wanted, key=lambda k: (ALL_VIEWS.index(k[0]), k[1], k[2])):
                records.append(Record(sid, view, size, mode,
                                      f"images/{image_filename(sid, view, size, mode)}",
                                      info["seed"], tuple(info["target"]), tuple(info["achieved"])))
            done += 1
            if progress is not None:
                progress(done, total, sid)

    manifest = DatasetManifest(records, config.metadata(), root)
    manifest = split(manifest, config.ratios, config.seed)
    write_manifest(manifest, root)
    return manifest


def _build_scene(root: Path, staging: Path, sid: str, t_index: int, rep: int, target: PsdLabel,
                 config: GenConfig, previous) -> dict:
    seed = scene_seed(config.seed, t_index, rep)
    packing = PackingConfig(target=target, box_size=config.box_size, fill_height=config.fill_height,
                            seed=seed, ladder=config.ladder)
    assembly = generate_assembly(target, packing)
    work = staging / sid
    if work.exists():
        shutil.rmtree(work)
    work.mkdir()
    images = scene_images(assembly, config.sizes, config.views, config.modes,
                          config.resolution, config.flat_shading)
    names = []
    for (view, size, mode), img in images.items():
        name = image_filename(sid, view, size, mode)
        img.save_png(work / name)
        names.append(name)
    if config.keep_assemblies:
        (work / f"{sid}.csv").write_text(assembly.to_csv())
    for name in names:
        os.replace(work / name, root / "images" / name)
    if config.keep_assemblies:
        os.replace(work / f"{sid}.csv", root / "assemblies" / f"{sid}.csv")
    work.rmdir()
    keys = set(images)
    if previous is not None:
        keys |= {tuple(k) for k in previous["images"]}
    info = {
        "scene_id": sid,
        "target_index": t_index,
        "replicate": rep,
        "seed": seed,
        "target": list(target.passing),
        "achieved": list(assembly.achieved_label.passing),
        "n_spheres": len(assembly),
        "n_unused": int(len(assembly.unused_diameters)),
        "images": sorted([list(k) for k in keys]),
        "generator_version": __version__,
    }
    _atomic_write(root / "scenes" / f"{sid}.json", json.dumps(info, indent=1) + "\n")
    return info


def load_assembly(root, scene_id: str) -> SphereAssembly:
    path = Path(root) / "assemblies" / f"{scene_id}.csv"
    if not path.exists():
        raise DatasetError(f"missing assembly dump {path}")
    return SphereAssembly.from_csv(path.read_text())
