"""Deterministic toy detection scenes with texture-coded object classes."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# pixel intensities are stored as multiples of 1/QUANT so the text format round-trips exactly
QUANT = 10_000
FOREGROUND_LEVEL = 0.85
BACKGROUND_MAX = 0.2
MAX_PLACEMENT_TRIES = 200
MAX_PAIR_IOU = 0.3

PATTERNS = ("solid", "ring", "checker", "hstripes", "vstripes")


@dataclass
class Scene:
    image: np.ndarray  # [1, H, W]
    gt_boxes: np.ndarray  # [G, 4] x1, y1, x2, y2
    gt_labels: np.ndarray  # [G] in 1..C
    scene_id: int

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.image, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.gt_boxes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.gt_labels, dtype="<i8").tobytes())
        h.update(str(self.scene_id).encode())
        return h.hexdigest()


def default_texture_rule(num_classes: int) -> Dict[int, Dict[str, object]]:
    """Class c gets pattern ``PATTERNS[(c-1) % 5]``; later cycles dim the level."""
    rule = {}
    for c in range(1, num_classes + 1):
        cycle = (c - 1) // len(PATTERNS)
        rule[c] = {"pattern": PATTERNS[(c - 1) % len(PATTERNS)], "level": round(FOREGROUND_LEVEL - 0.15 * cycle, 4)}
    return rule


@dataclass
class DatasetSpec:
    num_scenes: int = 600
    H: int = 64
    W: int = 64
    C: int = 3
    objects_per_scene: Tuple[int, int] = (1, 3)
    object_size: Tuple[int, int] = (8, 20)
    class_texture_rule: Optional[Dict[int, Dict[str, object]]] = None
    seed: int = 0

    def __post_init__(self):
        self.objects_per_scene = tuple(int(v) for v in self.objects_per_scene)
        self.object_size = tuple(int(v) for v in self.object_size)
        if self.class_texture_rule is None:
            self.class_texture_rule = default_texture_rule(self.C)
        else:
            self.class_texture_rule = {int(k): dict(v) for k, v in self.class_texture_rule.items()}
        self.validate()

    def validate(self) -> None:
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be positive")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        lo, hi = self.objects_per_scene
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")
        smin, smax = self.object_size
        if smin < 2 or smax < smin:
            raise ValueError(f"bad object_size range {self.object_size}")
        if smax > min(self.H, self.W):
            raise ValueError("object_size max exceeds min(H, W)")
        missing = set(range(1, self.C + 1)) - set(self.class_texture_rule)
        if missing:
            raise ValueError(f"class_texture_rule lacks classes {sorted(missing)}")
        for c, tex in self.class_texture_rule.items():
            if tex.get("pattern") not in PATTERNS:
                raise ValueError(f"class {c}: unknown pattern {tex.get('pattern')!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        d["object_size"] = list(self.object_size)
        d["class_texture_rule"] = {str(k): v for k, v in sorted(self.class_texture_rule.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


def render_texture(pattern: str, level: float, h: int, w: int) -> np.ndarray:
    """Noise-free [h, w] intensity patch for one object."""
    yy, xx = np.mgrid[0:h, 0:w]
    if pattern == "solid":
        return np.full((h, w), level)
    if pattern == "ring":
        edge = (yy < 2) | (yy >= h - 2) | (xx < 2) | (xx >= w - 2)
        return np.where(edge, level, 0.0)
    if pattern == "checker":
        on = ((yy // 2) + (xx // 2)) % 2 == 0
        return np.where(on, level, 0.3 * level)
    if pattern == "hstripes":
        return np.where((yy // 2) % 2 == 0, level, 0.3 * level)
    if pattern == "vstripes":
        return np.where((xx // 2) % 2 == 0, level, 0.3 * level)
    raise ValueError(f"unknown pattern {pattern!r}")


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(scene_id)]))


def generate_scene(spec: DatasetSpec, scene_id: int) -> Scene:
    rng = _scene_rng(spec.seed, scene_id)
    lo, hi = spec.objects_per_scene
    smin, smax = spec.object_size
    want = int(rng.integers(lo, hi + 1))
    boxes: List[Tuple[int, int, int, int]] = []
    labels: List[int] = []
    for _ in range(want):
        for _try in range(MAX_PLACEMENT_TRIES):
            w = int(rng.integers(smin, smax + 1))
            h = int(rng.integers(smin, smax + 1))
            x1 = int(rng.integers(0, spec.W - w + 1))
            y1 = int(rng.integers(0, spec.H - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if all(_box_iou(box, other) <= MAX_PAIR_IOU for other in boxes):
                boxes.append(box)
                labels.append(int(rng.integers(1, spec.C + 1)))
                break
        else:
            logger.warning("scene %d: placed %d of %d objects", scene_id, len(boxes), want)
            break

    image = rng.uniform(0.0, BACKGROUND_MAX, size=(spec.H, spec.W))
    for (x1, y1, x2, y2), c in _paint_order(boxes, labels):
        tex = spec.class_texture_rule[c]
        image[y1:y2, x1:x2] = render_texture(tex["pattern"], float(tex["level"]), y2 - y1, x2 - x1)
    image = np.rint(np.clip(image, 0.0, 1.0) * QUANT) / QUANT
    return Scene(
        image=image[None],
        gt_boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        gt_labels=np.array(labels, dtype=np.int64),
        scene_id=scene_id,
    )


def _paint_order(boxes, labels):
    # large first so a small object is never hidden under a bigger one
    order = sorted(range(len(boxes)), key=lambda i: (-(boxes[i][2] - boxes[i][0]) * (boxes[i][3] - boxes[i][1]), i))
    return [(boxes[i], labels[i]) for i in order]


def generate(spec: DatasetSpec) -> List[Scene]:
    spec.validate()
    return [generate_scene(spec, i) for i in range(spec.num_scenes)]


def visible_mask(scene: Scene, index: int) -> np.ndarray:
    """Pixels of gt ``index`` not overpainted by objects drawn after it."""
    boxes = [tuple(int(v) for v in b) for b in scene.gt_boxes]
    order = [boxes.index(b) for b, _ in _paint_order(boxes, list(scene.gt_labels))]
    x1, y1, x2, y2 = boxes[index]
    mask = np.ones((y2 - y1, x2 - x1), dtype=bool)
    for j in order[order.index(index) + 1 :]:
        ox1, oy1, ox2, oy2 = boxes[j]
        ix1, iy1, ix2, iy2 = max(x1, ox1), max(y1, oy1), min(x2, ox2), min(y2, oy2)
        if ix1 < ix2 and iy1 < iy2:
            mask[iy1 - y1 : iy2 - y1, ix1 - x1 : ix2 - x1] = False
    return mask


def classify_region(scene: Scene, index: int, spec: DatasetSpec) -> int:
    """Nearest-template class for gt ``index`` using only its visible pixels."""
    x1, y1, x2, y2 = (int(v) for v in scene.gt_boxes[index])
    crop = scene.image[0, y1:y2, x1:x2]
    mask = visible_mask(scene, index)
    best, best_d = 0, np.inf
    for c in sorted(spec.class_texture_rule):
        tex = spec.class_texture_rule[c]
        tpl = render_texture(tex["pattern"], float(tex["level"]), y2 - y1, x2 - x1)
        d = float(np.mean((crop[mask] - tpl[mask]) ** 2))
        if d < best_d:
            best, best_d = c, d
    return best


def split(scenes: Sequence[Scene], train_fraction: float) -> Tuple[List[Scene], List[Scene]]:
    """Deterministic split by scene_id: the lowest ids go to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    n_train = int(np.floor(len(ordered) * train_fraction + 1e-9))
    n_train = min(max(n_train, 1), len(ordered) - 1)
    if n_train < 1 or len(ordered) - n_train < 1:
        raise ValueError(f"cannot split {len(ordered)} scenes into two non-empty sets")
    return ordered[:n_train], ordered[n_train:]


def dataset_digest(spec: DatasetSpec, scenes: Sequence[Scene]) -> str:
    h = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode())
    for s in scenes:
        h.update(s.digest().encode())
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


def save_dataset(spec: DatasetSpec, scenes: Sequence[Scene], out_dir: str, force: bool = False) -> str:
    """Write manifest.json plus one text image file per scene; returns the dataset digest."""
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force to overwrite")
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    entries = []
    for s in scenes:
        rel = os.path.join("scenes", f"scene_{s.scene_id:06d}.txt")
        rows = "\n".join(" ".join(f"{v:.4f}" for v in row) for row in s.image[0])
        with open(os.path.join(out_dir, rel), "w") as f:
            f.write(rows + "\n")
        entries.append(
            {
                "scene_id": s.scene_id,
                "file": rel,
                "shape": list(s.image.shape),
                "gt_boxes": s.gt_boxes.tolist(),
                "gt_labels": s.gt_labels.tolist(),
                "digest": s.digest(),
            }
        )
    digest = dataset_digest(spec, scenes)
    manifest = {"schema_version": SCHEMA_VERSION, "spec": spec.to_dict(), "digest": digest, "scenes": entries}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return digest


def load_dataset(path: str, verify: bool = True) -> Tuple[DatasetSpec, List[Scene], str]:
    with open(os.path.join(path, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    spec = DatasetSpec.from_dict(manifest["spec"])
    scenes = []
    for e in manifest["scenes"]:
        img = np.loadtxt(os.path.join(path, e["file"]), dtype=np.float64, ndmin=2).reshape(e["shape"])
        scene = Scene(
            image=img,
            gt_boxes=np.array(e["gt_boxes"], dtype=np.float64).reshape(-1, 4),
            gt_labels=np.array(e["gt_labels"], dtype=np.int64),
            scene_id=int(e["scene_id"]),
        )
        if verify and scene.digest() != e["digest"]:
            raise ValueError(f"scene {e['scene_id']} digest mismatch")
        scenes.append(scene)
    return spec, scenes, manifest["digest"]
