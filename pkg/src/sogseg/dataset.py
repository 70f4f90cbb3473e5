"""Dataset directories: a manifest plus one subdirectory per scene.

Layout:
    manifest.json            config echo, scene count, root seed, scene seeds
    scene<K>/
        instances.json       per-instance category, depth rank, score
        amodal_<i>.pgm       binary P5 masks (0/255)
        visible_<i>.pgm
        id_map.pgm           16-bit P5 channel-id map
        sem_map.pgm          16-bit P5 combined class ids
        stuff_map.pgm        16-bit P5 stuff class ids
        boxes.sogt           N x 4 tensor
        patch_logits.sogt    N x 28 x 28 tensor
        sem_logits.sogt      H x W x C tensor

Everything is a pure function of (config, seed, index), so generation is
reproducible byte-for-byte at any job count.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .errors import ConfigError, DataFormatError
from .scenegen import Instance, LogitPack, Scene, SceneConfig, generate_scene, synth_logits
from .tensorcore import read_tensor, write_tensor

DATASET_FORMAT = "sogseg-dataset-v1"


@dataclass
class SceneRecord:
    """One dataset entry: the scene, its logits, and its private seed."""

    index: int
    seed: int
    scene: Scene
    pack: LogitPack


def scene_seed(root_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the dataset root seed."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def build_record(config: SceneConfig, root_seed: int, index: int) -> SceneRecord:
    seed = scene_seed(root_seed, index)
    scene = generate_scene(config, seed)
    pack = synth_logits(scene, config, seed)
    return SceneRecord(index=index, seed=seed, scene=scene, pack=pack)


def make_records(config: SceneConfig, count: int, root_seed: int) -> list[SceneRecord]:
    """Generate a dataset in memory."""
    return [build_record(config, root_seed, k) for k in range(count)]


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_scene_dir(base: Path, record: SceneRecord) -> None:
    scene, pack = record.scene, record.pack
    d = base / f"scene{record.index}"
    d.mkdir(parents=True, exist_ok=True)
    meta = [
        {"category": inst.class_id, "rank": inst.depth_rank, "score": inst.score}
        for inst in scene.instances
    ]
    _dump_json(d / "instances.json", meta)
    for i, inst in enumerate(scene.instances):
        imageio.write_mask_pgm(d / f"amodal_{i}.pgm", inst.amodal)
        imageio.write_mask_pgm(d / f"visible_{i}.pgm", inst.visible)
    imageio.write_map_pgm(d / "id_map.pgm", scene.id_map)
    imageio.write_map_pgm(d / "sem_map.pgm", scene.sem_map)
    imageio.write_map_pgm(d / "stuff_map.pgm", scene.stuff_map)
    write_tensor(d / "boxes.sogt", scene.boxes())
    write_tensor(d / "patch_logits.sogt", pack.patch_logits)
    write_tensor(d / "sem_logits.sogt", pack.sem_logits)


def _gen_and_write(base_str: str, config: SceneConfig, root_seed: int, index: int) -> int:
    _write_scene_dir(Path(base_str), build_record(config, root_seed, index))
    return index


def write_dataset(
    out_dir, config: SceneConfig, count: int, root_seed: int, jobs: int = 1
) -> None:
    """Generate and write a dataset directory (parallel across scenes when
    ``jobs`` > 1; output is identical at any job count)."""
    config.validate()
    if count < 1:
        raise ConfigError("dataset needs at least one scene")
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "config": config.to_dict(),
        "count": count,
        "seed": int(root_seed),
        "scene_seeds": [scene_seed(root_seed, k) for k in range(count)],
    }
    _dump_json(base / "manifest.json", manifest)
    if jobs <= 1:
        for k in range(count):
            _write_scene_dir(base, build_record(config, root_seed, k))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_gen_and_write, str(base), config, root_seed, k)
                for k in range(count)
            ]
            for f in futures:
                f.result()


def read_manifest(ds_dir) -> dict:
    path = Path(ds_dir) / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed manifest JSON ({exc})") from exc
    if doc.get("format") != DATASET_FORMAT:
        raise DataFormatError(f"{path}: not a {DATASET_FORMAT} manifest")
    return doc


def _load_scene_dir(d: Path, config: SceneConfig) -> tuple[Scene, LogitPack]:
    try:
        meta = json.loads((d / "instances.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"{d}: missing instances.json ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{d}: malformed instances.json ({exc})") from exc
    boxes = read_tensor(d / "boxes.sogt")
    patches = read_tensor(d / "patch_logits.sogt")
    sem = read_tensor(d / "sem_logits.sogt")
    id_map = imageio.read_pgm(d / "id_map.pgm").astype(np.int32)
    sem_map = imageio.read_pgm(d / "sem_map.pgm").astype(np.int32)
    stuff_map = imageio.read_pgm(d / "stuff_map.pgm").astype(np.int64)
    n = len(meta)
    if boxes.shape != (n, 4) or patches.shape[0] != n:
        raise DataFormatError(f"{d}: instance counts disagree across files")
    instances = []
    for i, m in enumerate(meta):
        amodal = imageio.read_pgm(d / f"amodal_{i}.pgm") > 0
        visible = imageio.read_pgm(d / f"visible_{i}.pgm") > 0
        instances.append(
            Instance(
                box=boxes[i],
                class_id=int(m["category"]),
                amodal=amodal,
                visible=visible,
                depth_rank=int(m["rank"]),
                score=float(m["score"]),
            )
        )
    h, w = id_map.shape
    scene = Scene(
        height=h,
        width=w,
        n_thing_classes=config.n_thing_classes,
        n_stuff_classes=config.n_stuff_classes,
        instances=instances,
        stuff_map=stuff_map,
        sem_map=sem_map,
        id_map=id_map,
    )
    return scene, LogitPack(patch_logits=patches, sem_logits=sem)


def load_dataset(ds_dir) -> tuple[SceneConfig, list[SceneRecord]]:
    """Read a dataset directory back into memory."""
    base = Path(ds_dir)
    doc = read_manifest(base)
    config = SceneConfig.from_dict(doc["config"])
    seeds = doc["scene_seeds"]
    records = []
    for k in range(int(doc["count"])):
        scene, pack = _load_scene_dir(base / f"scene{k}", config)
        records.append(SceneRecord(index=k, seed=int(seeds[k]), scene=scene, pack=pack))
    return config, records


def load_scene(scene_dir) -> tuple[SceneConfig, SceneRecord]:
    """Read a single scene subdirectory (its parent must hold the manifest)."""
    d = Path(scene_dir)
    m = re.fullmatch(r"scene(\d+)", d.name)
    if m is None:
        raise DataFormatError(f"{d}: expected a scene<K> directory name")
    index = int(m.group(1))
    doc = read_manifest(d.parent)
    config = SceneConfig.from_dict(doc["config"])
    if index >= int(doc["count"]):
        raise DataFormatError(f"{d}: scene index {index} outside manifest count")
    scene, pack = _load_scene_dir(d, config)
    seed = int(doc["scene_seeds"][index])
    return config, SceneRecord(index=index, seed=seed, scene=scene, pack=pack)
